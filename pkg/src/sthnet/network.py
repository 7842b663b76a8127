"""Video classification network: stem, bottleneck stages with hybrid cores,
global pooling, per-frame classifier, and average consensus.

The backbone follows the familiar 50-layer residual recipe: a 1x7x7 stem at
spatial stride 2, a 1x3x3 max pool, four stages of bottleneck blocks
(reduce 1x1x1 -> hybrid conv -> expand 1x1x1, residual add), global spatial
average pooling, and a per-frame fully connected classifier whose frame
logits are averaged into the video prediction. Spatial downsampling happens
at the first block of stages 3-5, carried by the hybrid core and the
projection shortcut; the time axis is never downsampled.

``stage_plan`` is the single source of truth for the architecture: the
builder, the analytic shape trace, and the cost analysis all walk it.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .convops import MacCounter, conv3d_forward_cached, conv3d_grads, conv3d_naive, spatial_spec
from .errors import ConfigError, DataFormatError, ShapeError
from .layers import (
    ChannelNorm,
    Parameter,
    SthLayer,
    as_proportion,
    build_layout,
    dilation_schedule,
)
from .tensor import Rng, read_tensor, reduce_mean, write_tensor

STAGE_WIDTHS = (64, 128, 256, 512)       # hybrid-core widths before scaling
STAGE_BLOCKS = (3, 4, 6, 3)
EXPANSION = 4
STEM_WIDTH = 64
STEM_KERNEL = 7


@dataclass(frozen=True)
class NetworkConfig:
    """Declarative description of one network instance."""

    num_class: int
    frames: int = 8
    input_hw: int = 224
    in_channels: int = 3
    p: Fraction = Fraction(1, 4)
    kernel_type: str = "fixed"        # "fixed" | "dilated"
    attention: bool = False
    variant: str = "hybrid"           # "hybrid" | "merge"
    scale_factor: int = 1
    reduction: int = 4
    blocks: tuple[int, ...] = STAGE_BLOCKS

    def __post_init__(self):
        object.__setattr__(self, "p", as_proportion(self.p))
        if self.num_class < 2:
            raise ConfigError(f"num_class must be >= 2, got {self.num_class}")
        if self.frames < 1:
            raise ConfigError(f"frames must be >= 1, got {self.frames}")
        if self.kernel_type not in ("fixed", "dilated"):
            raise ConfigError(f"kernel_type must be fixed|dilated, got {self.kernel_type!r}")
        if self.variant not in ("hybrid", "merge"):
            raise ConfigError(f"variant must be hybrid|merge, got {self.variant!r}")
        if self.scale_factor < 1:
            raise ConfigError("scale_factor must be >= 1")
        if len(self.blocks) != len(STAGE_WIDTHS):
            raise ConfigError(f"expected {len(STAGE_WIDTHS)} block counts, got {self.blocks}")
        if any(b < 1 for b in self.blocks):
            raise ConfigError("block counts must be >= 1")
        for w in STAGE_WIDTHS:
            if w % self.scale_factor != 0:
                raise ConfigError(f"scale_factor {self.scale_factor} must divide width {w}")
        g = self.p.denominator if self.p != 0 else 1
        for w in self.stage_widths():
            if w % g != 0:
                raise ConfigError(f"group count {g} must divide scaled width {w}")
        if self.attention:
            for w in self.stage_widths():
                if w % self.reduction != 0:
                    raise ConfigError(f"reduction {self.reduction} must divide width {w}")

    def stage_widths(self) -> tuple[int, ...]:
        return tuple(w // self.scale_factor for w in STAGE_WIDTHS)

    def stem_width(self) -> int:
        return STEM_WIDTH // self.scale_factor


@dataclass(frozen=True)
class BlockPlan:
    name: str
    c_in: int
    width: int
    c_out: int
    stride: int
    sth_index: int
    has_projection: bool


@dataclass(frozen=True)
class StagePlan:
    label: str                     # Conv2_x ... Conv5_x
    blocks: tuple[BlockPlan, ...]


def stage_plan(cfg: NetworkConfig) -> tuple[StagePlan, ...]:
    stages = []
    c_in = cfg.stem_width()
    sth_index = 0
    for s, (width, nblocks) in enumerate(zip(cfg.stage_widths(), cfg.blocks)):
        label = f"Conv{s + 2}_x"
        c_out = width * EXPANSION
        blocks = []
        for b in range(nblocks):
            stride = 2 if (s > 0 and b == 0) else 1
            blocks.append(
                BlockPlan(
                    name=f"conv{s + 2}_{b + 1}",
                    c_in=c_in,
                    width=width,
                    c_out=c_out,
                    stride=stride,
                    sth_index=sth_index,
                    has_projection=(b == 0),
                )
            )
            sth_index += 1
            c_in = c_out
        stages.append(StagePlan(label=label, blocks=tuple(blocks)))
    return tuple(stages)


def shape_trace(cfg: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Analytic forward shape chain, one row per named layer group.

    Shapes are (C, T, H, W) up to Pool5, then (T, num_class) for FC and
    (1, num_class) for the consensus.
    """
    t, hw = cfg.frames, cfg.input_hw
    rows = [("Input", (cfg.in_channels, t, hw, hw))]
    _, h, w = spatial_spec(STEM_KERNEL, stride=2).out_shape(t, hw, hw)
    rows.append(("Conv1", (cfg.stem_width(), t, h, w)))
    _, h, w = spatial_spec(3, stride=2).out_shape(t, h, w)
    rows.append(("Pool1", (cfg.stem_width(), t, h, w)))
    stages = stage_plan(cfg)
    for stage in stages:
        for block in stage.blocks:
            _, h, w = spatial_spec(3, stride=block.stride).out_shape(t, h, w)
        rows.append((stage.label, (stage.blocks[-1].c_out, t, h, w)))
    rows.append(("Pool5", (stages[-1].blocks[-1].c_out, t, 1, 1)))
    rows.append(("FC", (t, cfg.num_class)))
    rows.append(("Consensus", (1, cfg.num_class)))
    return rows


class ConvNorm:
    """Pointwise (or stem) convolution followed by normalization and optional ReLU."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 1, stride: int = 1,
                 relu: bool = True, rng: Rng | None = None, name: str = "conv"):
        self.spec = spatial_spec(kernel, stride=stride)
        rng = rng if rng is not None else Rng(0)
        bound = 1.0 / np.sqrt(c_in * kernel * kernel)
        w = rng.uniform((c_out, c_in, 1, kernel, kernel), -bound, bound)
        self.weight = Parameter(f"{name}.weight", w)
        self.norm = ChannelNorm(c_out, name=f"{name}.norm")
        self.relu = relu

    def parameters(self):
        return [self.weight] + self.norm.parameters()

    def state_arrays(self):
        return self.norm.state_arrays()

    def forward(self, x, train=False, update_stats=True):
        y, cols = conv3d_forward_cached(x, self.weight.value, self.spec)
        y, norm_cache = self.norm.forward(y, train=train, update_stats=update_stats, want_cache=train)
        mask = None
        if self.relu:
            mask = y > 0
            y = y * mask
        cache = (x.shape, cols, norm_cache, mask) if train else None
        return y, cache

    def forward_counted(self, x, counter: MacCounter):
        y = conv3d_naive(x, self.weight.value, self.spec, counter=counter)
        y, _ = self.norm.forward(y, train=False)
        if self.relu:
            y = np.maximum(y, 0.0)
        return y

    def backward(self, cache, gy, need_input_grad=True):
        x_shape, cols, norm_cache, mask = cache
        if mask is not None:
            gy = gy * mask
        gy = self.norm.backward(norm_cache, gy)
        gx, gw = conv3d_grads(x_shape, cols, self.weight.value, self.spec, gy,
                              need_input_grad=need_input_grad)
        self.weight.grad += gw
        return gx


class MaxPoolSpatial:
    """Per-frame 3x3 max pooling, stride 2, padding 1."""

    KERNEL = 3
    STRIDE = 2
    PAD = 1

    def forward(self, x, train=False):
        n, c, t, h, w = x.shape
        k, s, p = self.KERNEL, self.STRIDE, self.PAD
        xp = np.full((n, c, t, h + 2 * p, w + 2 * p), -np.inf)
        xp[:, :, :, p : p + h, p : p + w] = x
        h_o = (h + 2 * p - k) // s + 1
        w_o = (w + 2 * p - k) // s + 1
        sn, sc, st, sh, sw = xp.strides
        view = np.lib.stride_tricks.as_strided(
            xp,
            shape=(n, c, t, h_o, w_o, k, k),
            strides=(sn, sc, st, s * sh, s * sw, sh, sw),
            writeable=False,
        )
        flat = view.reshape(n, c, t, h_o, w_o, k * k)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        cache = (x.shape, arg) if train else None
        return out, cache

    def backward(self, cache, gy):
        x_shape, arg = cache
        n, c, t, h, w = x_shape
        k, s, p = self.KERNEL, self.STRIDE, self.PAD
        hp, wp = h + 2 * p, w + 2 * p
        gxp = np.zeros((n, c, t, hp, wp))
        h_o, w_o = gy.shape[3], gy.shape[4]
        ki, kj = np.divmod(arg, k)
        rows = np.arange(h_o)[None, None, None, :, None] * s + ki
        cols = np.arange(w_o)[None, None, None, None, :] * s + kj
        nn = np.arange(n)[:, None, None, None, None]
        cc = np.arange(c)[None, :, None, None, None]
        tt = np.arange(t)[None, None, :, None, None]
        np.add.at(gxp, (nn, cc, tt, rows, cols), gy)
        return gxp[:, :, :, p : p + h, p : p + w]


class GlobalAvgPool:
    """Mean over the spatial axes, keeping (N, C, T, 1, 1)."""

    def forward(self, x, train=False):
        out = x.mean(axis=(3, 4), keepdims=True)
        cache = x.shape if train else None
        return out, cache

    def backward(self, cache, gy):
        n, c, t, h, w = cache
        return np.broadcast_to(gy / (h * w), (n, c, t, h, w)).copy()


class FrameClassifier:
    """Shared linear classifier applied to each frame's pooled features."""

    def __init__(self, c_in: int, num_class: int, rng: Rng | None = None, name: str = "fc"):
        rng = rng if rng is not None else Rng(0)
        bound = 1.0 / np.sqrt(c_in)
        self.weight = Parameter(f"{name}.weight", rng.uniform((c_in, num_class), -bound, bound))
        self.bias = Parameter(f"{name}.bias", np.zeros(num_class), decay=False)

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False):
        # x: (N, C, T, 1, 1) -> frame logits (N, T, K)
        feats = x[:, :, :, 0, 0].transpose(0, 2, 1)  # (N, T, C)
        logits = feats @ self.weight.value + self.bias.value
        cache = (feats, x.shape) if train else None
        return logits, cache

    def backward(self, cache, gy):
        feats, x_shape = cache
        n, t, c = feats.shape
        self.weight.grad += np.einsum("ntc,ntk->ck", feats, gy)
        self.bias.grad += gy.sum(axis=(0, 1))
        g_feats = gy @ self.weight.value.T  # (N, T, C)
        gx = np.zeros(x_shape)
        gx[:, :, :, 0, 0] = g_feats.transpose(0, 2, 1)
        return gx


class Bottleneck:
    """reduce 1x1x1 -> hybrid core -> expand 1x1x1, residual add, ReLU."""

    def __init__(self, plan: BlockPlan, cfg: NetworkConfig, rng: Rng, name: str):
        self.plan = plan
        self.reduce = ConvNorm(plan.c_in, plan.width, kernel=1, stride=1, relu=True,
                               rng=rng.derive("reduce"), name=f"{name}.reduce")
        layout = build_layout(plan.width, plan.width, cfg.p, variant=cfg.variant)
        self.sth = SthLayer(
            layout,
            stride=plan.stride,
            temporal_dilation=dilation_schedule(plan.sth_index, cfg.kernel_type),
            attention=cfg.attention,
            reduction=cfg.reduction,
            norm=True,
            relu=True,
            rng=rng.derive("sth"),
            name=f"{name}.sth",
        )
        self.expand = ConvNorm(plan.width, plan.c_out, kernel=1, stride=1, relu=False,
                               rng=rng.derive("expand"), name=f"{name}.expand")
        self.shortcut = None
        if plan.has_projection:
            self.shortcut = ConvNorm(plan.c_in, plan.c_out, kernel=1, stride=plan.stride,
                                     relu=False, rng=rng.derive("proj"), name=f"{name}.proj")

    def parameters(self):
        ps = self.reduce.parameters() + self.sth.parameters() + self.expand.parameters()
        if self.shortcut is not None:
            ps += self.shortcut.parameters()
        return ps

    def state_arrays(self):
        arrays = self.reduce.state_arrays() + self.expand.state_arrays()
        if self.sth.norm is not None:
            arrays += self.sth.norm.state_arrays()
        if self.shortcut is not None:
            arrays += self.shortcut.state_arrays()
        return arrays

    def forward(self, x, train=False, update_stats=True):
        y, c1 = self.reduce.forward(x, train, update_stats)
        y, c2 = self.sth.forward(y, train, update_stats)
        y, c3 = self.expand.forward(y, train, update_stats)
        if self.shortcut is not None:
            sc, c4 = self.shortcut.forward(x, train, update_stats)
        else:
            sc, c4 = x, None
        out = y + sc
        mask = out > 0
        out = out * mask
        cache = (c1, c2, c3, c4, mask) if train else None
        return out, cache

    def forward_counted(self, x, counter: MacCounter):
        y = self.reduce.forward_counted(x, counter)
        o_s, o_t = self.sth.core.forward_reference(y, counter=counter)
        if self.sth.attention is not None:
            y, _, _, _ = self.sth.attention.forward(o_s, o_t)
        else:
            y = o_s + o_t
        y, _ = self.sth.norm.forward(y, train=False)
        y = np.maximum(y, 0.0)
        y = self.expand.forward_counted(y, counter)
        sc = self.shortcut.forward_counted(x, counter) if self.shortcut is not None else x
        return np.maximum(y + sc, 0.0)

    def backward(self, cache, gy):
        c1, c2, c3, c4, mask = cache
        gy = gy * mask
        g_main = self.expand.backward(c3, gy)
        g_main = self.sth.backward(c2, g_main)
        gx = self.reduce.backward(c1, g_main)
        if self.shortcut is not None:
            gx = gx + self.shortcut.backward(c4, gy)
        else:
            gx = gx + gy
        return gx


class Network:
    """Built network with explicit forward/backward passes."""

    def __init__(self, cfg: NetworkConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        rng = Rng(seed)
        self.stem = ConvNorm(cfg.in_channels, cfg.stem_width(), kernel=STEM_KERNEL,
                             stride=2, relu=True, rng=rng.derive("conv1"), name="conv1")
        self.pool1 = MaxPoolSpatial()
        self.stages: list[list[Bottleneck]] = []
        for stage in stage_plan(cfg):
            blocks = [
                Bottleneck(bp, cfg, rng=rng.derive(bp.name), name=bp.name)
                for bp in stage.blocks
            ]
            self.stages.append(blocks)
        final_c = stage_plan(cfg)[-1].blocks[-1].c_out
        self.pool5 = GlobalAvgPool()
        self.fc = FrameClassifier(final_c, cfg.num_class, rng=rng.derive("fc"), name="fc")
        self._caches = None

    def parameters(self) -> list[Parameter]:
        ps = self.stem.parameters()
        for blocks in self.stages:
            for b in blocks:
                ps += b.parameters()
        ps += self.fc.parameters()
        return ps

    def state_arrays(self):
        arrays = self.stem.state_arrays()
        for blocks in self.stages:
            for b in blocks:
                arrays += b.state_arrays()
        return arrays

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    def iter_sth_layers(self):
        for blocks in self.stages:
            for b in blocks:
                yield b.plan.name, b.sth

    def _check_input(self, clip):
        expect = (self.cfg.in_channels, self.cfg.frames, self.cfg.input_hw, self.cfg.input_hw)
        if clip.ndim != 5 or clip.shape[1:] != expect:
            raise ShapeError(f"clip shape {clip.shape} does not match config (N,)+{expect}")

    def forward(self, clip: np.ndarray, train: bool = False, update_stats: bool = True) -> np.ndarray:
        """Per-frame logits (N, T, num_class) before consensus."""
        self._check_input(clip)
        caches = [] if train else None
        x, c = self.stem.forward(clip, train, update_stats)
        if train:
            caches.append(("stem", c))
        x, c = self.pool1.forward(x, train)
        if train:
            caches.append(("pool1", c))
        for blocks in self.stages:
            for b in blocks:
                x, c = b.forward(x, train, update_stats)
                if train:
                    caches.append((b, c))
        x, c = self.pool5.forward(x, train)
        if train:
            caches.append(("pool5", c))
        logits, c = self.fc.forward(x, train)
        if train:
            caches.append(("fc", c))
        self._caches = caches
        return logits

    def backward(self, g_logits: np.ndarray, need_input_grad: bool = False):
        """Accumulate parameter gradients; returns the clip gradient only when
        ``need_input_grad`` is set (skipping it avoids the stem's full
        scatter-accumulation)."""
        if self._caches is None:
            raise ShapeError("backward requires a preceding forward with train=True")
        g = g_logits
        for tag, cache in reversed(self._caches):
            if tag == "fc":
                g = self.fc.backward(cache, g)
            elif tag == "pool5":
                g = self.pool5.backward(cache, g)
            elif tag == "pool1":
                g = self.pool1.backward(cache, g)
            elif tag == "stem":
                g = self.stem.backward(cache, g, need_input_grad=need_input_grad)
            else:
                g = tag.backward(cache, g)
        self._caches = None
        return g

    def forward_counted(self, clip: np.ndarray, counter: MacCounter) -> np.ndarray:
        """Evaluation-mode forward through the naive convolution loops."""
        self._check_input(clip)
        x = self.stem.forward_counted(clip, counter)
        x, _ = self.pool1.forward(x)
        for blocks in self.stages:
            for b in blocks:
                x = b.forward_counted(x, counter)
        x, _ = self.pool5.forward(x)
        logits, _ = self.fc.forward(x)
        return logits

    def forward_trace(self, clip: np.ndarray) -> list[tuple[str, tuple[int, ...]]]:
        """Numeric forward recording the shape at each named point."""
        self._check_input(clip)
        rows = [("Input", clip.shape[1:])]
        x, _ = self.stem.forward(clip)
        rows.append(("Conv1", x.shape[1:]))
        x, _ = self.pool1.forward(x)
        rows.append(("Pool1", x.shape[1:]))
        for label, blocks in zip((s.label for s in stage_plan(self.cfg)), self.stages):
            for b in blocks:
                x, _ = b.forward(x)
            rows.append((label, x.shape[1:]))
        x, _ = self.pool5.forward(x)
        rows.append(("Pool5", x.shape[1:]))
        logits, _ = self.fc.forward(x)
        rows.append(("FC", logits.shape[1:]))
        video = consensus(logits)
        rows.append(("Consensus", (1, video.shape[1])))
        return rows


def build_sth_network(cfg: NetworkConfig, seed: int) -> Network:
    """Deterministic construction; the same (cfg, seed) gives identical weights."""
    return Network(cfg, seed)


def consensus(frame_logits: np.ndarray) -> np.ndarray:
    """Video logits: mean of per-frame logits over the frame axis."""
    if frame_logits.ndim != 3:
        raise ShapeError(f"consensus expects (N, T, K) logits, got {frame_logits.shape}")
    return reduce_mean(frame_logits, {1})


# ---------------------------------------------------------------------------
# Checkpoint I/O: one tensor file per parameter (live entries only for hybrid
# cores), plus text manifests for names/shapes and the network config.
# ---------------------------------------------------------------------------

def _checkpoint_entries(net: Network):
    """Yield (name, kind, payload) for every persisted array.

    kind is "plain" for ordinary parameters and state arrays; hybrid conv
    weights are stored packed ("sth_spatial" / "sth_temporal") so the dump
    contains exactly the live scalars.
    """
    packed_names = {}
    for _, layer in net.iter_sth_layers():
        core = layer.core
        packed_names[core.w_spatial.name] = (core, "spatial")
        if core.w_temporal is not None:
            packed_names[core.w_temporal.name] = (core, "temporal")
    for p in net.parameters():
        if p.name in packed_names:
            core, kind = packed_names[p.name]
            yield p.name, f"sth_{kind}", core.pack_live(kind)
        else:
            yield p.name, "plain", p.value
    for name, arr in net.state_arrays():
        yield name, "plain", arr


def checkpoint_scalar_count(net: Network) -> int:
    return sum(int(np.prod(payload.shape)) for _, _, payload in _checkpoint_entries(net))


def save_checkpoint(net: Network, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_lines = []
    for i, (name, kind, payload) in enumerate(_checkpoint_entries(net)):
        fname = f"param_{i:04d}.bin"
        write_tensor(out_dir / fname, payload)
        shape = "x".join(str(d) for d in payload.shape)
        manifest_lines.append(f"{name}\t{fname}\t{shape}\t{kind}")
    (out_dir / "manifest.txt").write_text("\n".join(manifest_lines) + "\n")
    cfg = net.cfg
    cfg_lines = [
        f"net.num_class = {cfg.num_class}",
        f"net.frames = {cfg.frames}",
        f"net.input_hw = {cfg.input_hw}",
        f"net.in_channels = {cfg.in_channels}",
        f"net.p = {cfg.p}",
        f"net.kernel_type = {cfg.kernel_type}",
        f"net.attention = {'on' if cfg.attention else 'off'}",
        f"net.variant = {cfg.variant}",
        f"net.scale_factor = {cfg.scale_factor}",
        f"net.reduction = {cfg.reduction}",
        f"net.seed = {net.seed}",
    ]
    (out_dir / "config.txt").write_text("\n".join(cfg_lines) + "\n")


def load_checkpoint(ckpt_dir) -> Network:
    ckpt_dir = Path(ckpt_dir)
    cfg_path = ckpt_dir / "config.txt"
    manifest_path = ckpt_dir / "manifest.txt"
    if not cfg_path.exists() or not manifest_path.exists():
        raise DataFormatError(f"checkpoint at {ckpt_dir} is missing config.txt or manifest.txt")
    kv = {}
    for line in cfg_path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    cfg = NetworkConfig(
        num_class=int(kv["net.num_class"]),
        frames=int(kv["net.frames"]),
        input_hw=int(kv["net.input_hw"]),
        in_channels=int(kv["net.in_channels"]),
        p=Fraction(kv["net.p"]),
        kernel_type=kv["net.kernel_type"],
        attention=kv["net.attention"] == "on",
        variant=kv["net.variant"],
        scale_factor=int(kv["net.scale_factor"]),
        reduction=int(kv["net.reduction"]),
    )
    net = build_sth_network(cfg, seed=int(kv.get("net.seed", "0")))
    by_name = {}
    for line in manifest_path.read_text().splitlines():
        if not line.strip():
            continue
        name, fname, _, kind = line.split("\t")
        by_name[name] = (fname, kind)
    packed = {}
    for _, layer in net.iter_sth_layers():
        core = layer.core
        packed[core.w_spatial.name] = (core, "spatial")
        if core.w_temporal is not None:
            packed[core.w_temporal.name] = (core, "temporal")
    params = {p.name: p for p in net.parameters()}
    states = dict(net.state_arrays())
    for name, (fname, kind) in by_name.items():
        arr = read_tensor(ckpt_dir / fname)
        if kind.startswith("sth_"):
            core, which = packed[name]
            core.unpack_live(which, arr)
        elif name in params:
            if params[name].value.shape != arr.shape:
                raise ShapeError(f"checkpoint shape {arr.shape} != parameter {name} {params[name].value.shape}")
            params[name].value[...] = arr
            params[name].apply_mask()
        elif name in states:
            states[name][...] = arr
        else:
            raise DataFormatError(f"checkpoint entry {name!r} not present in the built network")
    return net
