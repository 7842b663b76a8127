"""Hybrid spatio-temporal convolution layers.

A hybrid layer splits each output channel's augmented kernel across the
input channels: a span of ``p * C_i`` channels is processed by temporal
basic kernels (K_T x 1 x 1) and the remaining channels by spatial basic
kernels (1 x K_H x K_W). Shifting the temporal span along the input
channels yields G = 1/p distinct hybrid-kernel types; output channels are
assigned to types in contiguous blocks of C_o / G.

The layer computes the two partial maps separately:

    out[m] = temporal_conv(x[span(type(m))])[m] + spatial_conv(x[rest])[m]

and integrates them either by plain addition or by a learned per-channel
convex combination (``BranchAttention``). Correctness is anchored by
``expand_to_masked_3d``: embedding the two weight sets into one dense 3D
weight tensor must reproduce the summed output through the naive 3D
convolution exactly.

Weights are stored dense with structural-zero masks so the oracle bridge
and masked optimizer updates stay trivial; packed (live-entry) views are
provided for checkpointing.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import convops
from .convops import ConvSpec, MacCounter, spatial_spec, temporal_spec
from .errors import ArgumentError, LayoutError, ShapeError
from .tensor import Rng


class Parameter:
    """Named trainable array with gradient buffer and optional structural mask.

    ``mask`` (same shape, boolean) marks live entries; masked-out entries are
    structurally zero and must stay zero through any update. ``decay`` marks
    whether weight decay applies (off for norm scales/shifts and biases).
    """

    __slots__ = ("name", "value", "grad", "mask", "decay")

    def __init__(self, name: str, value: np.ndarray, mask: np.ndarray | None = None, decay: bool = True):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.mask = None if mask is None else np.asarray(mask, dtype=bool)
        self.decay = decay
        if self.mask is not None:
            if self.mask.shape != self.value.shape:
                raise ShapeError(f"mask shape {self.mask.shape} != value shape {self.value.shape}")
            self.value[~self.mask] = 0.0

    def zero_grad(self):
        self.grad[...] = 0.0

    def apply_mask(self):
        if self.mask is not None:
            self.value[~self.mask] = 0.0
            self.grad[~self.mask] = 0.0

    def live_count(self) -> int:
        return int(self.value.size if self.mask is None else self.mask.sum())


def as_proportion(p) -> Fraction:
    """Normalize a temporal proportion to a Fraction (accepts 0, '1/4', 0.25)."""
    if isinstance(p, Fraction):
        frac = p
    elif isinstance(p, int):
        frac = Fraction(p)
    elif isinstance(p, str):
        frac = Fraction(p.strip())
    elif isinstance(p, float):
        frac = Fraction(p).limit_denominator(64)
    else:
        raise ArgumentError(f"cannot interpret proportion {p!r}")
    if frac < 0 or frac > 1:
        raise LayoutError(f"proportion must lie in [0, 1], got {frac}")
    return frac


@dataclass(frozen=True)
class HybridLayout:
    """Channel-interleaving plan of one hybrid layer."""

    c_in: int
    c_out: int
    p: Fraction
    groups: int
    span_width: int
    type_of_output_channel: tuple[int, ...]
    variant: str = "hybrid"

    def temporal_span(self, g: int) -> tuple[int, int]:
        """Half-open input-channel interval handled temporally by type g."""
        lo = g * self.span_width
        return (lo, lo + self.span_width)

    def span_of_output(self, m: int) -> tuple[int, int]:
        return self.temporal_span(self.type_of_output_channel[m])

    def temporal_mask(self) -> np.ndarray:
        """Boolean (c_out, c_in): True where the input channel is temporal."""
        mask = np.zeros((self.c_out, self.c_in), dtype=bool)
        for m, g in enumerate(self.type_of_output_channel):
            lo, hi = self.temporal_span(g)
            mask[m, lo:hi] = True
        return mask

    def spatial_mask(self) -> np.ndarray:
        return ~self.temporal_mask()

    def output_blocks(self):
        """Yield (type g, list of output channels of that type)."""
        by_type: dict[int, list[int]] = {}
        for m, g in enumerate(self.type_of_output_channel):
            by_type.setdefault(g, []).append(m)
        for g in sorted(by_type):
            yield g, by_type[g]


def build_layout(
    c_in: int,
    c_out: int,
    p,
    variant: str = "hybrid",
    allow_full_temporal: bool = False,
) -> HybridLayout:
    """Construct the channel plan for given channel counts and proportion.

    Output channels [g*C_o/G, (g+1)*C_o/G) get type g; type g's temporal span
    is input channels [g*p*C_i, (g+1)*p*C_i). The merge variant assigns every
    output channel type 0 instead of shifting.
    """
    if variant not in ("hybrid", "merge"):
        raise ArgumentError(f"variant must be 'hybrid' or 'merge', got {variant!r}")
    if c_in < 1 or c_out < 1:
        raise LayoutError(f"channel counts must be >= 1, got c_in={c_in}, c_out={c_out}")
    p = as_proportion(p)
    if p == 0:
        types = (0,) * c_out
        return HybridLayout(c_in, c_out, p, groups=1, span_width=0,
                            type_of_output_channel=types, variant=variant)
    if p == 1:
        if not allow_full_temporal:
            raise LayoutError("p = 1 (fully temporal) must be enabled explicitly")
        types = (0,) * c_out
        return HybridLayout(c_in, c_out, p, groups=1, span_width=c_in,
                            type_of_output_channel=types, variant=variant)
    if p.numerator != 1:
        raise LayoutError(f"proportion must be 0 or 1/G for integer G, got {p}")
    groups = p.denominator
    if c_in % groups != 0:
        raise LayoutError(f"group count {groups} must divide c_in={c_in}")
    span = c_in // groups
    if variant == "merge":
        types = (0,) * c_out
    else:
        if c_out % groups != 0:
            raise LayoutError(f"group count {groups} must divide c_out={c_out}")
        block = c_out // groups
        types = tuple(m // block for m in range(c_out))
    return HybridLayout(c_in, c_out, p, groups=groups, span_width=span,
                        type_of_output_channel=types, variant=variant)


def dilation_schedule(layer_index: int, kernel_type: str = "dilated") -> int:
    """Temporal dilation for the layer at this position in network order.

    Dilated kernels cycle 1, 2, 3 across consecutive layers; fixed kernels
    always use 1.
    """
    if layer_index < 0:
        raise ArgumentError("layer_index must be >= 0")
    if kernel_type == "fixed":
        return 1
    if kernel_type == "dilated":
        return 1 + (layer_index % 3)
    raise ArgumentError(f"kernel_type must be 'fixed' or 'dilated', got {kernel_type!r}")


class SthConv:
    """The hybrid convolution core: two masked weight sets, two partial maps.

    ``forward`` is the vectorized production path (dense convolutions on
    masked weights); ``forward_reference`` evaluates only live taps through
    the naive loops, supporting exact MAC counting.
    """

    def __init__(
        self,
        layout: HybridLayout,
        kernel_t: int = 3,
        kernel_hw: int = 3,
        stride: int = 1,
        temporal_dilation: int = 1,
        rng: Rng | None = None,
        name: str = "sth",
    ):
        self.layout = layout
        self.name = name
        self.spec_spatial = spatial_spec(kernel_hw, stride=stride)
        self.spec_temporal = temporal_spec(kernel_t, dilation_t=temporal_dilation, stride=stride)
        c_o, c_i = layout.c_out, layout.c_in
        t_mask = layout.temporal_mask()
        fan = layout.span_width * kernel_t + (c_i - layout.span_width) * kernel_hw * kernel_hw
        bound = 1.0 / np.sqrt(max(fan, 1))
        rng = rng if rng is not None else Rng(0)
        w_s = rng.derive("spatial").uniform((c_o, c_i, 1, kernel_hw, kernel_hw), -bound, bound)
        s_mask = np.broadcast_to((~t_mask)[:, :, None, None, None], w_s.shape)
        self.w_spatial = Parameter(f"{name}.w_spatial", w_s, mask=s_mask.copy())
        if layout.span_width > 0:
            w_t = rng.derive("temporal").uniform((c_o, c_i, kernel_t, 1, 1), -bound, bound)
            tm = np.broadcast_to(t_mask[:, :, None, None, None], w_t.shape)
            self.w_temporal = Parameter(f"{name}.w_temporal", w_t, mask=tm.copy())
        else:
            self.w_temporal = None

    @property
    def stride(self) -> int:
        return self.spec_spatial.stride_h

    def parameters(self) -> list[Parameter]:
        ps = [self.w_spatial]
        if self.w_temporal is not None:
            ps.append(self.w_temporal)
        return ps

    def out_shape(self, x_shape):
        n, c, t, h, w = x_shape
        return (n, self.layout.c_out) + self.spec_spatial.out_shape(t, h, w)

    def forward(self, x: np.ndarray, want_cache: bool = False):
        """Returns (o_spatial, o_temporal, cache). o_temporal is zero at p=0."""
        if x.shape[1] != self.layout.c_in:
            raise ShapeError(f"expected {self.layout.c_in} input channels, got {x.shape[1]}")
        o_s, cols_s = convops.conv3d_forward_cached(x, self.w_spatial.value, self.spec_spatial)
        if self.w_temporal is not None:
            o_t, cols_t = convops.conv3d_forward_cached(x, self.w_temporal.value, self.spec_temporal)
        else:
            o_t, cols_t = np.zeros_like(o_s), None
        cache = (x.shape, cols_s, cols_t) if want_cache else None
        return o_s, o_t, cache

    def backward(self, cache, g_os: np.ndarray, g_ot: np.ndarray) -> np.ndarray:
        x_shape, cols_s, cols_t = cache
        gx, gw_s = convops.conv3d_grads(x_shape, cols_s, self.w_spatial.value, self.spec_spatial, g_os)
        gw_s[~self.w_spatial.mask] = 0.0
        self.w_spatial.grad += gw_s
        if self.w_temporal is not None:
            gx_t, gw_t = convops.conv3d_grads(
                x_shape, cols_t, self.w_temporal.value, self.spec_temporal, g_ot
            )
            gw_t[~self.w_temporal.mask] = 0.0
            self.w_temporal.grad += gw_t
            gx += gx_t
        return gx

    def forward_reference(self, x: np.ndarray, counter: MacCounter | None = None):
        """Naive per-type evaluation touching live taps only."""
        n, c_i, t, h, w = x.shape
        out_shape = self.out_shape(x.shape)
        o_s = np.zeros(out_shape)
        o_t = np.zeros(out_shape)
        for g, ms in self.layout.output_blocks():
            lo, hi = self.layout.temporal_span(g)
            if hi > lo and self.w_temporal is not None:
                o_t[:, ms] = convops.conv3d_naive(
                    x[:, lo:hi],
                    self.w_temporal.value[ms][:, lo:hi],
                    self.spec_temporal,
                    counter=counter,
                )
            sp_idx = list(range(0, lo)) + list(range(hi, c_i))
            if sp_idx:
                o_s[:, ms] = convops.conv3d_naive(
                    x[:, sp_idx],
                    self.w_spatial.value[ms][:, sp_idx],
                    self.spec_spatial,
                    counter=counter,
                )
        return o_s, o_t

    def expand_to_masked_3d(self):
        """Embed both weight sets into one dense (C_o, C_i, K_T, K_H, K_W) tensor.

        The naive 3D convolution of the result (with combined padding and the
        temporal dilation) equals o_spatial + o_temporal.
        """
        kt = self.spec_temporal.kernel_t
        kh = self.spec_spatial.kernel_h
        kw = self.spec_spatial.kernel_w
        c_o, c_i = self.layout.c_out, self.layout.c_in
        w3 = np.zeros((c_o, c_i, kt, kh, kw))
        mid_t, mid_h, mid_w = (kt - 1) // 2, (kh - 1) // 2, (kw - 1) // 2
        w3[:, :, mid_t, :, :] = self.w_spatial.value[:, :, 0]
        if self.w_temporal is not None:
            w3[:, :, :, mid_h, mid_w] += self.w_temporal.value[:, :, :, 0, 0]
        spec3 = ConvSpec(
            kernel_t=kt, kernel_h=kh, kernel_w=kw,
            stride_h=self.spec_spatial.stride_h, stride_w=self.spec_spatial.stride_w,
            pad_t=self.spec_temporal.pad_t, pad_h=self.spec_spatial.pad_h,
            pad_w=self.spec_spatial.pad_w,
            dilation_t=self.spec_temporal.dilation_t,
        )
        return w3, spec3

    def live_param_count(self) -> int:
        return sum(pr.live_count() for pr in self.parameters())

    def mac_count(self, in_thw: tuple[int, int, int]) -> int:
        """Analytic multiply count of one forward pass over live taps."""
        t_o, h_o, w_o = self.spec_spatial.out_shape(*in_thw)
        return self.live_param_count() * t_o * h_o * w_o

    def pack_live(self, kind: str) -> np.ndarray | None:
        """Live entries as a dense block: temporal (C_o, span, K_T), spatial
        (C_o, C_i - span, K_H, K_W). Channel order follows each output's span."""
        if kind == "temporal":
            if self.w_temporal is None:
                return None
            span = self.layout.span_width
            kt = self.spec_temporal.kernel_t
            out = np.empty((self.layout.c_out, span, kt))
            for m in range(self.layout.c_out):
                lo, hi = self.layout.span_of_output(m)
                out[m] = self.w_temporal.value[m, lo:hi, :, 0, 0]
            return out
        if kind == "spatial":
            c_i = self.layout.c_in
            keep = c_i - self.layout.span_width
            kh = self.spec_spatial.kernel_h
            kw = self.spec_spatial.kernel_w
            out = np.empty((self.layout.c_out, keep, kh, kw))
            for m in range(self.layout.c_out):
                lo, hi = self.layout.span_of_output(m)
                idx = list(range(0, lo)) + list(range(hi, c_i))
                out[m] = self.w_spatial.value[m, idx, 0]
            return out
        raise ArgumentError(f"unknown pack kind {kind!r}")

    def unpack_live(self, kind: str, packed: np.ndarray):
        if kind == "temporal":
            if self.w_temporal is None:
                raise ShapeError("layer has no temporal weights")
            for m in range(self.layout.c_out):
                lo, hi = self.layout.span_of_output(m)
                self.w_temporal.value[m, lo:hi, :, 0, 0] = packed[m]
            self.w_temporal.apply_mask()
            return
        if kind == "spatial":
            c_i = self.layout.c_in
            for m in range(self.layout.c_out):
                lo, hi = self.layout.span_of_output(m)
                idx = list(range(0, lo)) + list(range(hi, c_i))
                self.w_spatial.value[m, idx, 0] = packed[m]
            self.w_spatial.apply_mask()
            return
        raise ArgumentError(f"unknown pack kind {kind!r}")


def sth_forward(x: np.ndarray, conv: SthConv):
    """Partial maps (o_spatial, o_temporal) of a hybrid layer."""
    o_s, o_t, _ = conv.forward(x)
    return o_s, o_t


def sth_merge_forward(x: np.ndarray, conv: SthConv):
    """Same as ``sth_forward`` but requires the non-shifting merge layout."""
    if conv.layout.variant != "merge" and conv.layout.groups != 1:
        raise ArgumentError("sth_merge_forward expects a merge layout")
    return sth_forward(x, conv)


def expand_to_masked_3d(conv: SthConv):
    return conv.expand_to_masked_3d()


class BranchAttention:
    """Input-dependent convex combination of the two partial maps.

    Squeeze: each sample's (o_s + o_t) is averaged over (T, H, W) to a
    per-channel descriptor. A shared reduction layer (ratio r) with ReLU
    feeds two expansion heads whose outputs are combined by a per-channel
    two-way softmax, so alpha_t[m] + alpha_s[m] = 1 for every sample and
    channel. Coefficients are per sample; no mixing across the batch.

    Expansion heads start at zero so an untrained layer weighs both maps
    equally (alpha = 0.5).
    """

    def __init__(self, channels: int, reduction: int = 4, rng: Rng | None = None, name: str = "attn"):
        if channels % reduction != 0:
            raise ShapeError(f"reduction {reduction} must divide channels {channels}")
        self.channels = channels
        self.reduction = reduction
        self.name = name
        hidden = channels // reduction
        rng = rng if rng is not None else Rng(0)
        bound = 1.0 / np.sqrt(channels)
        self.reduce_w = Parameter(f"{name}.reduce_w", rng.derive("reduce").uniform((channels, hidden), -bound, bound))
        self.reduce_b = Parameter(f"{name}.reduce_b", np.zeros(hidden), decay=False)
        self.head_t_w = Parameter(f"{name}.head_t_w", np.zeros((hidden, channels)))
        self.head_t_b = Parameter(f"{name}.head_t_b", np.zeros(channels), decay=False)
        self.head_s_w = Parameter(f"{name}.head_s_w", np.zeros((hidden, channels)))
        self.head_s_b = Parameter(f"{name}.head_s_b", np.zeros(channels), decay=False)

    def parameters(self) -> list[Parameter]:
        return [self.reduce_w, self.reduce_b, self.head_t_w, self.head_t_b,
                self.head_s_w, self.head_s_b]

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def forward(self, o_s: np.ndarray, o_t: np.ndarray, want_cache: bool = False):
        """Returns (o_hat, alpha_s, alpha_t, cache); alphas have shape (N, C)."""
        if o_s.shape != o_t.shape:
            raise ShapeError(f"branch shapes differ: {o_s.shape} vs {o_t.shape}")
        n, c = o_s.shape[:2]
        if c != self.channels:
            raise ShapeError(f"attention built for {self.channels} channels, got {c}")
        z = (o_s + o_t).mean(axis=(2, 3, 4))  # (N, C)
        pre = z @ self.reduce_w.value + self.reduce_b.value
        hid = np.maximum(pre, 0.0)
        logit_t = hid @ self.head_t_w.value + self.head_t_b.value
        logit_s = hid @ self.head_s_w.value + self.head_s_b.value
        # Two-way softmax via the stable sigmoid of the logit difference.
        diff = logit_t - logit_s
        alpha_t = np.where(diff >= 0, 1.0 / (1.0 + np.exp(-diff)),
                           np.exp(diff) / (1.0 + np.exp(diff)))
        alpha_s = 1.0 - alpha_t
        at = alpha_t[:, :, None, None, None]
        o_hat = at * o_t + (1.0 - at) * o_s
        cache = (o_s, o_t, z, pre, hid, alpha_t) if want_cache else None
        return o_hat, alpha_s, alpha_t, cache

    def backward(self, cache, gy: np.ndarray):
        """Exact gradients through the combination and the descriptor path."""
        o_s, o_t, z, pre, hid, alpha_t = cache
        spatial_size = float(np.prod(o_s.shape[2:]))
        at = alpha_t[:, :, None, None, None]
        g_alpha_t = (gy * (o_t - o_s)).sum(axis=(2, 3, 4))  # d/d alpha_t, (N, C)
        g_diff = g_alpha_t * alpha_t * (1.0 - alpha_t)
        # diff = logit_t - logit_s
        self.head_t_w.grad += hid.T @ g_diff
        self.head_t_b.grad += g_diff.sum(axis=0)
        self.head_s_w.grad += hid.T @ (-g_diff)
        self.head_s_b.grad += (-g_diff).sum(axis=0)
        g_hid = g_diff @ self.head_t_w.value.T - g_diff @ self.head_s_w.value.T
        g_pre = g_hid * (pre > 0)
        self.reduce_w.grad += z.T @ g_pre
        self.reduce_b.grad += g_pre.sum(axis=0)
        g_z = g_pre @ self.reduce_w.value.T  # (N, C)
        g_shared = (g_z / spatial_size)[:, :, None, None, None]
        g_ot = gy * at + g_shared
        g_os = gy * (1.0 - at) + g_shared
        return g_os, g_ot


def attentive_integrate(o_s: np.ndarray, o_t: np.ndarray, attn: BranchAttention):
    """Functional form returning (o_hat, alpha_s, alpha_t)."""
    o_hat, alpha_s, alpha_t, _ = attn.forward(o_s, o_t)
    return o_hat, alpha_s, alpha_t


class ChannelNorm:
    """Per-channel normalization over (N, T, H, W) with learnable scale/shift.

    Training mode normalizes by current batch statistics and (optionally)
    refreshes running statistics; evaluation mode normalizes by the stored
    running statistics, so inference is independent of batch composition.
    """

    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, channels: int, name: str = "norm"):
        self.channels = channels
        self.name = name
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels), decay=False)
        self.beta = Parameter(f"{name}.beta", np.zeros(channels), decay=False)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def state_arrays(self):
        """Non-learnable persistent state (saved in checkpoints)."""
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]

    def forward(self, x: np.ndarray, train: bool, update_stats: bool = True, want_cache: bool = False):
        if x.shape[1] != self.channels:
            raise ShapeError(f"norm built for {self.channels} channels, got {x.shape[1]}")
        axes = (0, 2, 3, 4)
        if train:
            # Single-pass statistics: biased variance from raw moments.
            m = x.size // self.channels
            s1 = x.sum(axis=axes)
            s2 = np.einsum("ncthw,ncthw->c", x, x)
            mean = s1 / m
            var = np.maximum(s2 / m - mean * mean, 0.0)
            if update_stats:
                self.running_mean += self.MOMENTUM * (mean - self.running_mean)
                self.running_var += self.MOMENTUM * (var - self.running_var)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.EPS)
        xhat = (x - mean[None, :, None, None, None]) * inv_std[None, :, None, None, None]
        y = self.gamma.value[None, :, None, None, None] * xhat + self.beta.value[None, :, None, None, None]
        cache = (xhat, inv_std, train) if want_cache else None
        return y, cache

    def backward(self, cache, gy: np.ndarray) -> np.ndarray:
        xhat, inv_std, train = cache
        axes = (0, 2, 3, 4)
        self.gamma.grad += (gy * xhat).sum(axis=axes)
        self.beta.grad += gy.sum(axis=axes)
        g_xhat = gy * self.gamma.value[None, :, None, None, None]
        scale = inv_std[None, :, None, None, None]
        if not train:
            return g_xhat * scale
        mean_g = g_xhat.mean(axis=axes, keepdims=True)
        mean_gx = (g_xhat * xhat).mean(axis=axes, keepdims=True)
        return scale * (g_xhat - mean_g - xhat * mean_gx)


class SthLayer:
    """Hybrid convolution plus integration, normalization, and rectification."""

    def __init__(
        self,
        layout: HybridLayout,
        kernel_t: int = 3,
        kernel_hw: int = 3,
        stride: int = 1,
        temporal_dilation: int = 1,
        attention: bool = False,
        reduction: int = 4,
        norm: bool = True,
        relu: bool = True,
        rng: Rng | None = None,
        name: str = "sth_layer",
    ):
        rng = rng if rng is not None else Rng(0)
        self.core = SthConv(
            layout, kernel_t=kernel_t, kernel_hw=kernel_hw, stride=stride,
            temporal_dilation=temporal_dilation, rng=rng.derive("core"), name=f"{name}.core",
        )
        self.attention = (
            BranchAttention(layout.c_out, reduction, rng=rng.derive("attn"), name=f"{name}.attn")
            if attention else None
        )
        self.norm = ChannelNorm(layout.c_out, name=f"{name}.norm") if norm else None
        self.relu = relu
        self.last_alphas = None  # (alpha_s, alpha_t) of the latest forward

    def parameters(self) -> list[Parameter]:
        ps = list(self.core.parameters())
        if self.attention is not None:
            ps += self.attention.parameters()
        if self.norm is not None:
            ps += self.norm.parameters()
        return ps

    def forward(self, x: np.ndarray, train: bool = False, update_stats: bool = True):
        want = train
        o_s, o_t, conv_cache = self.core.forward(x, want_cache=want)
        if self.attention is not None:
            y, alpha_s, alpha_t, attn_cache = self.attention.forward(o_s, o_t, want_cache=want)
            self.last_alphas = (alpha_s, alpha_t)
        else:
            y, attn_cache = o_s + o_t, None
            self.last_alphas = None
        if self.norm is not None:
            y, norm_cache = self.norm.forward(y, train=train, update_stats=update_stats, want_cache=want)
        else:
            norm_cache = None
        relu_mask = None
        if self.relu:
            relu_mask = y > 0
            y = y * relu_mask
        cache = (conv_cache, attn_cache, norm_cache, relu_mask) if want else None
        return y, cache

    def backward(self, cache, gy: np.ndarray) -> np.ndarray:
        conv_cache, attn_cache, norm_cache, relu_mask = cache
        if relu_mask is not None:
            gy = gy * relu_mask
        if self.norm is not None:
            gy = self.norm.backward(norm_cache, gy)
        if self.attention is not None:
            g_os, g_ot = self.attention.backward(attn_cache, gy)
        else:
            g_os, g_ot = gy, gy
        return self.core.backward(conv_cache, g_os, g_ot)
