"""Analytic parameter and multiply-accumulate accounting, plus attention
coefficient statistics.

Counting conventions (also printed in every report header):

* ``params`` counts every scalar persisted in a model checkpoint: live
  convolution weights (structural zeros excluded), classifier weights and
  bias, attention weights and biases, and normalization state (scale,
  shift, running mean, running variance; four scalars per channel). The
  suite asserts this equals the checkpoint dump size exactly.
* ``macs`` counts multiply-accumulates of convolutions, the classifier,
  and attention projections. Reported "GFLOPs" are MACs / 1e9: under this
  convention the unscaled 8-frame two-dimensional baseline lands at the
  conventional ~33 G figure for this backbone family.
* Normalization, activation, pooling, and softmax work is tallied as
  elementwise operation counts in a separate column and excluded from the
  headline GFLOPs.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ShapeError, UnsupportedConfigError
from .network import (
    STEM_KERNEL,
    Network,
    NetworkConfig,
    stage_plan,
)
from .convops import spatial_spec
from .train import _assemble_batch  # deterministic batch assembly
from .tensor import Rng


@dataclass(frozen=True)
class CostRow:
    name: str
    kind: str          # conv | sth | attn | fc | pool | norm-free rows carry 0s
    params: int
    macs: int
    elementwise: int


@dataclass
class CostReport:
    rows: list[CostRow]
    header: dict

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def macs_of_kind(self, *kinds) -> int:
        return sum(r.macs for r in self.rows if r.kind in kinds)

    @property
    def gflops(self) -> float:
        return self.total_macs / 1e9

    def to_text(self) -> str:
        lines = []
        for key, value in self.header.items():
            lines.append(f"# {key} = {value}")
        lines.append(f"{'layer':28s} {'params':>12s} {'macs':>16s} {'elementwise':>14s}")
        for r in self.rows:
            lines.append(f"{r.name:28s} {r.params:12d} {r.macs:16d} {r.elementwise:14d}")
        lines.append(f"{'TOTAL':28s} {self.total_params:12d} {self.total_macs:16d} "
                     f"{sum(r.elementwise for r in self.rows):14d}")
        lines.append(f"total params (M): {self.total_params / 1e6:.3f}")
        lines.append(f"total GFLOPs (MACs/1e9): {self.gflops:.3f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["layer,params,macs"]
        for r in self.rows:
            lines.append(f"{r.name},{r.params},{r.macs}")
        lines.append(f"TOTAL,{self.total_params},{self.total_macs}")
        return "\n".join(lines)


def _norm_params(channels: int) -> int:
    # scale, shift, running mean, running variance
    return 4 * channels


def _sth_live_params(width: int, p: Fraction, kernel_t: int = 3, kernel_hw: int = 3) -> int:
    span = int(width * p)
    return width * (span * kernel_t + (width - span) * kernel_hw * kernel_hw)


def _attention_params(channels: int, reduction: int) -> int:
    hidden = channels // reduction
    return channels * hidden + hidden + 2 * (hidden * channels + channels)


def cost_report(cfg: NetworkConfig, batch: int = 1) -> CostReport:
    """Per-layer parameter/MAC/elementwise table for one clip of ``batch`` videos."""
    t = cfg.frames
    hw = cfg.input_hw
    rows = []
    header = {
        "p": str(cfg.p),
        "kernel_type": cfg.kernel_type,
        "attention": "on" if cfg.attention else "off",
        "variant": cfg.variant,
        "num_class": cfg.num_class,
        "frames": t,
        "input": f"{hw}x{hw}",
        "scale_factor": cfg.scale_factor,
        "param_convention": "all checkpoint scalars (live conv weights, norm scale/shift/mean/var, fc, attention)",
        "flop_convention": "GFLOPs = multiply-accumulates / 1e9 (conv + fc + attention); elementwise column separate",
    }

    stem_c = cfg.stem_width()
    _, h, w = spatial_spec(STEM_KERNEL, stride=2).out_shape(t, hw, hw)
    stem_macs = stem_c * cfg.in_channels * STEM_KERNEL * STEM_KERNEL * t * h * w * batch
    rows.append(CostRow("conv1", "conv", stem_c * cfg.in_channels * STEM_KERNEL * STEM_KERNEL,
                        stem_macs, 5 * stem_c * t * h * w * batch))
    rows.append(CostRow("conv1.norm", "norm", _norm_params(stem_c), 0, 0))
    _, h, w = spatial_spec(3, stride=2).out_shape(t, h, w)
    rows.append(CostRow("pool1", "pool", 0, 0, 8 * stem_c * t * h * w * batch))

    for stage in stage_plan(cfg):
        for bp in stage.blocks:
            in_h, in_w = h, w
            _, h, w = spatial_spec(3, stride=bp.stride).out_shape(t, in_h, in_w)
            pos_in = t * in_h * in_w * batch
            pos_out = t * h * w * batch
            name = bp.name
            rows.append(CostRow(f"{name}.reduce", "conv", bp.c_in * bp.width,
                                bp.c_in * bp.width * pos_in, 5 * bp.width * pos_in))
            rows.append(CostRow(f"{name}.reduce.norm", "norm", _norm_params(bp.width), 0, 0))
            live = _sth_live_params(bp.width, cfg.p)
            rows.append(CostRow(f"{name}.sth", "sth", live, live * pos_out,
                                5 * bp.width * pos_out))
            rows.append(CostRow(f"{name}.sth.norm", "norm", _norm_params(bp.width), 0, 0))
            if cfg.attention:
                ap = _attention_params(bp.width, cfg.reduction)
                hidden = bp.width // cfg.reduction
                attn_macs = (bp.width * hidden + 2 * hidden * bp.width) * batch
                rows.append(CostRow(f"{name}.sth.attn", "attn", ap, attn_macs,
                                    2 * bp.width * pos_out))
            rows.append(CostRow(f"{name}.expand", "conv", bp.width * bp.c_out,
                                bp.width * bp.c_out * pos_out, 5 * bp.c_out * pos_out))
            rows.append(CostRow(f"{name}.expand.norm", "norm", _norm_params(bp.c_out), 0, 0))
            if bp.has_projection:
                rows.append(CostRow(f"{name}.proj", "conv", bp.c_in * bp.c_out,
                                    bp.c_in * bp.c_out * pos_out, 0))
                rows.append(CostRow(f"{name}.proj.norm", "norm", _norm_params(bp.c_out), 0, 0))

    final_c = stage_plan(cfg)[-1].blocks[-1].c_out
    rows.append(CostRow("pool5", "pool", 0, 0, final_c * t * h * w * batch))
    rows.append(CostRow("fc", "fc", final_c * cfg.num_class + cfg.num_class,
                        final_c * cfg.num_class * t * batch, 0))
    rows.append(CostRow("consensus", "pool", 0, 0, cfg.num_class * t * batch))
    return CostReport(rows=rows, header=header)


def count_params(net_or_cfg) -> CostReport:
    """Parameter table; structural zeros excluded, checkpoint scalars counted."""
    cfg = net_or_cfg.cfg if isinstance(net_or_cfg, Network) else net_or_cfg
    return cost_report(cfg)


def count_flops(net_or_cfg, input_shape=None) -> CostReport:
    """MAC table for one forward pass of a single clip."""
    cfg = net_or_cfg.cfg if isinstance(net_or_cfg, Network) else net_or_cfg
    if input_shape is not None:
        expect = (cfg.in_channels, cfg.frames, cfg.input_hw, cfg.input_hw)
        if tuple(input_shape) != expect:
            raise ShapeError(f"input shape {tuple(input_shape)} does not match config {expect}")
    return cost_report(cfg)


def sweep_proportions(cfg: NetworkConfig, proportions) -> list[dict]:
    """Summary rows (p, params, macs) across temporal proportions."""
    out = []
    for p in proportions:
        sub = NetworkConfig(
            num_class=cfg.num_class, frames=cfg.frames, input_hw=cfg.input_hw,
            in_channels=cfg.in_channels, p=p, kernel_type=cfg.kernel_type,
            attention=cfg.attention, variant=cfg.variant,
            scale_factor=cfg.scale_factor, reduction=cfg.reduction,
        )
        report = cost_report(sub)
        out.append({"p": str(sub.p), "params": report.total_params, "macs": report.total_macs})
    return out


def export_attention_stats(net: Network, dataset, frames: int | None = None,
                           batch_size: int = 16, tol: float = 1e-12) -> list[dict]:
    """Mean attention coefficients per hybrid layer over all dataset samples.

    Every per-sample, per-channel (alpha_s, alpha_t) pair is validated to
    sum to 1 within ``tol``. Rows are ordered by network depth.
    """
    if not net.cfg.attention:
        raise UnsupportedConfigError("attention statistics require a network built with attention")
    if len(dataset) == 0:
        raise ShapeError("dataset is empty")
    frames = frames if frames is not None else net.cfg.frames
    names = [name for name, _ in net.iter_sth_layers()]
    sums = {name: np.zeros(2) for name in names}
    count = {name: 0 for name in names}
    rng = Rng(0)
    for start in range(0, len(dataset), batch_size):
        idx = list(range(start, min(start + batch_size, len(dataset))))
        batch, _ = _assemble_batch(dataset, idx, frames, "test", rng)
        net.forward(batch, train=False)
        for name, layer in net.iter_sth_layers():
            alpha_s, alpha_t = layer.last_alphas
            gap = np.max(np.abs(alpha_s + alpha_t - 1.0))
            if gap > tol:
                raise ShapeError(f"{name}: alpha_s + alpha_t deviates from 1 by {gap}")
            sums[name] += np.array([alpha_s.sum(), alpha_t.sum()])
            count[name] += alpha_s.size
    rows = []
    for i, name in enumerate(names):
        mean_s, mean_t = sums[name] / count[name]
        rows.append({"layer_index": i, "layer": name,
                     "alpha_s": float(mean_s), "alpha_t": float(mean_t)})
    return rows


def attention_stats_csv(rows) -> str:
    lines = ["layer,alpha_s,alpha_t"]
    for r in rows:
        lines.append(f"{r['layer']},{r['alpha_s']:.12f},{r['alpha_t']:.12f}")
    return "\n".join(lines)
