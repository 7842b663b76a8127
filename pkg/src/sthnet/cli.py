"""Command-line entry point.

Commands: ``analyze`` (cost tables), ``verify`` (property suites),
``gen-data`` (synthetic datasets), ``train``, ``eval``, ``dump-attention``.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 file/I-O error, 4 shape or consistency error.

``STH_THREADS`` caps the numeric backend's thread pool; it must be applied
before the numeric libraries load, so this module defers those imports
until after the environment is set.
"""

from __future__ import annotations

import argparse
import os
import sys
from fractions import Fraction
from pathlib import Path


def _apply_thread_cap():
    cap = os.environ.get("STH_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sthnet",
                                     description="hybrid spatio-temporal convolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="print parameter/FLOP tables for a network config")
    p.add_argument("--config", required=True)
    p.add_argument("--csv", default=None)
    p.add_argument("--sweep-p", default=None,
                   help="comma-separated proportions, e.g. 0,1/8,1/4,1/2")

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("scope", choices=["oracle", "grad", "shapes", "all"])
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--clips", type=int, default=1)

    p = sub.add_parser("dump-attention", help="export attention coefficient statistics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--csv", default=None)
    return parser


def cmd_analyze(args) -> int:
    from .analysis import cost_report, sweep_proportions
    from .configio import load_run_config

    run = load_run_config(args.config)
    cfg = run.network_config()
    if args.sweep_p:
        proportions = [Fraction(tok) for tok in args.sweep_p.split(",")]
        rows = sweep_proportions(cfg, proportions)
        print(f"{'p':>6s} {'params':>12s} {'params(M)':>10s} {'macs':>15s} {'GFLOPs':>8s}")
        csv_lines = ["p,params,macs"]
        for r in rows:
            print(f"{r['p']:>6s} {r['params']:12d} {r['params'] / 1e6:10.3f} "
                  f"{r['macs']:15d} {r['macs'] / 1e9:8.3f}")
            csv_lines.append(f"{r['p']},{r['params']},{r['macs']}")
        if args.csv:
            Path(args.csv).write_text("\n".join(csv_lines) + "\n")
        return 0
    report = cost_report(cfg)
    print(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv() + "\n")
    return 0


def _verify_oracle(seed: int) -> tuple[bool, str]:
    import numpy as np

    from . import convops
    from .layers import SthConv, build_layout
    from .tensor import Rng

    rng = Rng(seed).derive("oracle")
    worst = 0.0
    cases = 0
    while cases < 50:
        c_i = (2, 4, 4, 8, 8)[rng.randint(0, 5)]
        denoms = [d for d in (1, 2, 4, 8) if c_i % d == 0]
        denom = denoms[rng.randint(0, len(denoms))]
        p = 0 if denom == 1 else Fraction(1, denom)
        variant = ("hybrid", "merge")[rng.randint(0, 2)]
        if p != 0 and variant == "hybrid":
            c_o = denom * rng.randint(1, 3)
        else:
            c_o = rng.randint(1, 5)
        lay = build_layout(c_i, c_o, p, variant=variant)
        conv = SthConv(lay, stride=rng.randint(1, 3), temporal_dilation=rng.randint(1, 4),
                       rng=rng.derive("w", cases))
        x = rng.derive("x", cases).uniform((1 + cases % 2, c_i, 3 + cases % 3, 5, 5), -1.0, 1.0)
        o_s, o_t, _ = conv.forward(x)
        w3, spec3 = conv.expand_to_masked_3d()
        diff = float(np.max(np.abs((o_s + o_t) - convops.conv3d_naive(x, w3, spec3))))
        worst = max(worst, diff)
        cases += 1
    return worst < 1e-10, f"50 random layer configs, max |diff| = {worst:.3e} (< 1e-10)"


def _verify_grad(seed: int) -> tuple[bool, str]:
    from .layers import SthLayer, build_layout
    from .network import NetworkConfig, build_sth_network
    from .tensor import Rng, random_uniform
    from .train import layer_gradient_check, network_gradient_check

    layer = SthLayer(build_layout(8, 8, Fraction(1, 4)), attention=True, norm=True,
                     rng=Rng(seed).derive("layer"))
    layer.attention.head_t_w.value[...] = random_uniform(
        layer.attention.head_t_w.value.shape, seed=seed + 101, lo=-0.5, hi=0.5)
    layer.attention.head_s_w.value[...] = random_uniform(
        layer.attention.head_s_w.value.shape, seed=seed + 202, lo=-0.5, hi=0.5)
    layer_rel = layer_gradient_check(layer, (2, 8, 4, 5, 5), n_params_sampled=50,
                                     eps=1e-5, seed=1)
    cfg = NetworkConfig(num_class=4, frames=4, input_hw=28, scale_factor=16, attention=True)
    net = build_sth_network(cfg, seed=14)
    net_rel = network_gradient_check(net, batch=2, n_params_sampled=30, eps=1e-6, seed=1)
    ok = layer_rel < 1e-5 and net_rel < 1e-4
    return ok, (f"layer rel err = {layer_rel:.3e} (< 1e-5), "
                f"network rel err = {net_rel:.3e} (< 1e-4)")


def _verify_shapes(seed: int) -> tuple[bool, str]:
    from .network import NetworkConfig, build_sth_network, shape_trace
    from .tensor import random_uniform

    expected = [
        ("Input", (3, 8, 224, 224)),
        ("Conv1", (64, 8, 112, 112)),
        ("Pool1", (64, 8, 56, 56)),
        ("Conv2_x", (256, 8, 56, 56)),
        ("Conv3_x", (512, 8, 28, 28)),
        ("Conv4_x", (1024, 8, 14, 14)),
        ("Conv5_x", (2048, 8, 7, 7)),
        ("Pool5", (2048, 8, 1, 1)),
        ("FC", (8, 174)),
        ("Consensus", (1, 174)),
    ]
    full = NetworkConfig(num_class=174, frames=8, input_hw=224, p=Fraction(1, 4), attention=True)
    analytic = shape_trace(full)
    for (name, shape), (ename, eshape) in zip(analytic, expected):
        print(f"  {name:10s} {shape}")
        if name != ename or tuple(shape) != eshape:
            return False, f"analytic trace mismatch at {name}: {shape} != {eshape}"
    desk = NetworkConfig(num_class=4, frames=4, input_hw=28, scale_factor=16, attention=True)
    net = build_sth_network(desk, seed=seed)
    clip = random_uniform((1, 3, 4, 28, 28), seed=seed)
    numeric = net.forward_trace(clip)
    for (name, shape), (ename, eshape) in zip(numeric, shape_trace(desk)):
        if name != ename or tuple(shape) != tuple(eshape):
            return False, f"numeric trace mismatch at {name}: {shape} != {eshape}"
    return True, "analytic full-scale chain and numeric desk-scale trace both match"


def cmd_verify(args) -> int:
    checks = {
        "oracle": _verify_oracle,
        "grad": _verify_grad,
        "shapes": _verify_shapes,
    }
    scopes = list(checks) if args.scope == "all" else [args.scope]
    failed = False
    for scope in scopes:
        ok, detail = checks[scope](args.seed)
        status = "PASS" if ok else "FAIL"
        print(f"{status} {scope}: {detail}")
        failed = failed or not ok
    return 1 if failed else 0


def cmd_gen_data(args) -> int:
    from dataclasses import replace

    from .configio import load_run_config
    from .datasynth import gen_dataset

    run = load_run_config(args.config)
    cfg = run.synth_config()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    train_manifest, val_manifest = gen_dataset(cfg, args.out)
    print(f"wrote {len(train_manifest)} train / {len(val_manifest)} val videos under {args.out}")
    return 0


def cmd_train(args) -> int:
    from .configio import load_run_config
    from .datasynth import LoadedDataset
    from .network import build_sth_network, save_checkpoint
    from .train import fit

    run = load_run_config(args.config)
    net_cfg = run.network_config()
    train_cfg = run.train_config()
    if args.seed is not None:
        from dataclasses import replace

        train_cfg = replace(train_cfg, seed=args.seed)
    data_dir = Path(args.data)
    train_set = LoadedDataset.from_manifest(data_dir / "train.txt")
    val_set = LoadedDataset.from_manifest(data_dir / "val.txt")
    net = build_sth_network(net_cfg, seed=run.net_seed(default=train_cfg.seed))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    rows = fit(net, train_set, val_set, train_cfg, metrics_path=out_dir / "metrics.csv", log=log)
    save_checkpoint(net, out_dir / "checkpoint")
    val_rows = [r for r in rows if r["split"] == "val"]
    if val_rows:
        final = val_rows[-1]
        best = max(r["top1"] for r in val_rows)
        print(f"final val top1 {final['top1']:.4f} top5 {final['top5']:.4f} (best {best:.4f})")
    return 0


def cmd_eval(args) -> int:
    from .datasynth import LoadedDataset
    from .network import load_checkpoint
    from .train import evaluate

    net = load_checkpoint(Path(args.checkpoint))
    dataset = LoadedDataset.from_manifest(Path(args.data) / f"{args.split}.txt")
    top1, topk = evaluate(net, dataset, clips_per_video=args.clips)
    print(f"top1 {top1:.4f} top5 {topk:.4f}")
    return 0


def cmd_dump_attention(args) -> int:
    from .analysis import attention_stats_csv, export_attention_stats
    from .datasynth import LoadedDataset
    from .network import load_checkpoint

    net = load_checkpoint(Path(args.checkpoint))
    dataset = LoadedDataset.from_manifest(Path(args.data) / f"{args.split}.txt")
    rows = export_attention_stats(net, dataset)
    csv = attention_stats_csv(rows)
    print(csv)
    if args.csv:
        Path(args.csv).write_text(csv + "\n")
    return 0


COMMANDS = {
    "analyze": cmd_analyze,
    "verify": cmd_verify,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "dump-attention": cmd_dump_attention,
}


def main(argv=None) -> int:
    _apply_thread_cap()
    args = _build_parser().parse_args(argv)
    from .errors import (
        ArgumentError,
        ConfigError,
        DataFormatError,
        LayoutError,
        ShapeError,
        SthError,
    )

    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except (ShapeError, LayoutError, ArgumentError, SthError) as exc:
        print(f"consistency error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
