"""Baseline convolution operators over (N, C, T, H, W) video tensors.

Two implementations live side by side:

* ``conv3d_naive`` / ``conv3d_backward`` evaluate the convolution sum
  directly with nested loops. They are the brute-force reference used by
  every equivalence suite and can count multiply-accumulates exactly.
* ``conv3d`` / ``conv3d_grads`` are the production path: gather-to-columns
  plus one batched matrix product. They must agree with the naive path to
  < 1e-10 on unit-scale data, which the test suite enforces.

Conventions: cross-correlation indexing (no kernel flip), zero padding,
no bias, temporal stride fixed to 1, odd kernel extents only.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ArgumentError, ShapeError


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution: kernel extents, stride, padding, dilation.

    The temporal axis never strides (output T' always derives from stride 1)
    and kernels must be odd along every axis so that "same" padding is exact.
    """

    kernel_t: int = 1
    kernel_h: int = 1
    kernel_w: int = 1
    stride_h: int = 1
    stride_w: int = 1
    pad_t: int = 0
    pad_h: int = 0
    pad_w: int = 0
    dilation_t: int = 1
    dilation_h: int = 1
    dilation_w: int = 1

    def __post_init__(self):
        for name in ("kernel_t", "kernel_h", "kernel_w"):
            k = getattr(self, name)
            if k < 1:
                raise ArgumentError(f"{name} must be >= 1, got {k}")
            if k % 2 == 0:
                raise ArgumentError(f"even kernels are not supported ({name}={k})")
        for name in ("stride_h", "stride_w", "dilation_t", "dilation_h", "dilation_w"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be >= 1")
        for name in ("pad_t", "pad_h", "pad_w"):
            if getattr(self, name) < 0:
                raise ArgumentError(f"{name} must be >= 0")

    @property
    def kernel(self) -> tuple[int, int, int]:
        return (self.kernel_t, self.kernel_h, self.kernel_w)

    def extent(self, axis: str) -> int:
        """Effective kernel extent (K-1)*dilation + 1 along one axis."""
        k = getattr(self, f"kernel_{axis}")
        d = getattr(self, f"dilation_{axis}")
        return (k - 1) * d + 1

    def out_shape(self, t: int, h: int, w: int) -> tuple[int, int, int]:
        """Output (T', H', W') for an input of size (t, h, w)."""
        pt, ph, pw = t + 2 * self.pad_t, h + 2 * self.pad_h, w + 2 * self.pad_w
        for axis, padded in (("t", pt), ("h", ph), ("w", pw)):
            if self.extent(axis) > padded:
                raise ShapeError(
                    f"kernel extent {self.extent(axis)} exceeds padded input {padded} on axis {axis}"
                )
        to = pt - self.extent("t") + 1
        ho = (ph - self.extent("h")) // self.stride_h + 1
        wo = (pw - self.extent("w")) // self.stride_w + 1
        return (to, ho, wo)

    def with_temporal_same_pad(self) -> "ConvSpec":
        """Same spec with pad_t chosen so the time axis is preserved."""
        return replace(self, pad_t=self.dilation_t * (self.kernel_t - 1) // 2)


def spatial_spec(kernel: int = 3, stride: int = 1, pad: int | None = None) -> ConvSpec:
    """1 x K x K spec with "same"-style spatial padding by default."""
    if pad is None:
        pad = (kernel - 1) // 2
    return ConvSpec(
        kernel_t=1, kernel_h=kernel, kernel_w=kernel,
        stride_h=stride, stride_w=stride, pad_h=pad, pad_w=pad,
    )


def temporal_spec(kernel_t: int = 3, dilation_t: int = 1, stride: int = 1) -> ConvSpec:
    """K x 1 x 1 spec padded so T is preserved; spatial stride optional."""
    return ConvSpec(
        kernel_t=kernel_t, dilation_t=dilation_t,
        stride_h=stride, stride_w=stride,
        pad_t=dilation_t * (kernel_t - 1) // 2,
    )


class MacCounter:
    """Counts multiply-accumulate operations performed by instrumented loops."""

    def __init__(self):
        self.count = 0

    def add(self, n: int = 1):
        self.count += n


def _check_conv_args(x: np.ndarray, w: np.ndarray, spec: ConvSpec):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.ndim != 5:
        raise ShapeError(f"input must be rank 5 (N,C,T,H,W), got {x.shape}")
    if w.ndim != 5:
        raise ShapeError(f"weights must be rank 5 (Co,Ci,Kt,Kh,Kw), got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"channel mismatch: input C={x.shape[1]}, weights Ci={w.shape[1]}")
    if w.shape[2:] != (spec.kernel_t, spec.kernel_h, spec.kernel_w):
        raise ShapeError(
            f"weight kernel {w.shape[2:]} disagrees with spec {(spec.kernel_t, spec.kernel_h, spec.kernel_w)}"
        )
    return x, w


def _pad_input(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    if spec.pad_t == 0 and spec.pad_h == 0 and spec.pad_w == 0:
        return x
    return np.pad(
        x,
        ((0, 0), (0, 0), (spec.pad_t, spec.pad_t), (spec.pad_h, spec.pad_h), (spec.pad_w, spec.pad_w)),
    )


def conv3d_naive(x: np.ndarray, w: np.ndarray, spec: ConvSpec, counter: MacCounter | None = None) -> np.ndarray:
    """Direct loop evaluation of the 3D convolution sum. Reference oracle.

    Every output element accumulates w[m,c,k,i,j] * x[c, t+k', h', w'] over
    all taps; ``counter`` (if given) is bumped once per multiply.
    """
    x, w = _check_conv_args(x, w, spec)
    n_b, c_i, t_in, h_in, w_in = x.shape
    c_o = w.shape[0]
    t_o, h_o, w_o = spec.out_shape(t_in, h_in, w_in)
    xp = _pad_input(x, spec)
    xl = xp.tolist()
    wl = w.tolist()
    kt, kh, kw = spec.kernel
    dt, dh, dw = spec.dilation_t, spec.dilation_h, spec.dilation_w
    sh, sw = spec.stride_h, spec.stride_w
    out = np.empty((n_b, c_o, t_o, h_o, w_o), dtype=np.float64)
    for n in range(n_b):
        xn = xl[n]
        for m in range(c_o):
            wm = wl[m]
            for to in range(t_o):
                for ho in range(h_o):
                    for wo in range(w_o):
                        acc = 0.0
                        for c in range(c_i):
                            xc = xn[c]
                            wc = wm[c]
                            for k in range(kt):
                                xt = xc[to + k * dt]
                                wk = wc[k]
                                for i in range(kh):
                                    xh = xt[ho * sh + i * dh]
                                    wi = wk[i]
                                    base = wo * sw
                                    for j in range(kw):
                                        acc += wi[j] * xh[base + j * dw]
                                        if counter is not None:
                                            counter.add(1)
                        out[n, m, to, ho, wo] = acc
    return out


def conv3d_backward(x: np.ndarray, w: np.ndarray, spec: ConvSpec, grad_out: np.ndarray):
    """Exact adjoint of ``conv3d_naive`` by direct loops.

    Returns (grad_input, grad_weights). grad_weights accumulates
    grad_out * input over each receptive field; grad_input is the
    transposed (full-correlation) map. Structural linearity is exact.
    """
    x, w = _check_conv_args(x, w, spec)
    n_b, c_i, t_in, h_in, w_in = x.shape
    c_o = w.shape[0]
    t_o, h_o, w_o = spec.out_shape(t_in, h_in, w_in)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (n_b, c_o, t_o, h_o, w_o):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != forward output {(n_b, c_o, t_o, h_o, w_o)}"
        )
    xp = _pad_input(x, spec)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    kt, kh, kw = spec.kernel
    dt, dh, dw = spec.dilation_t, spec.dilation_h, spec.dilation_w
    sh, sw = spec.stride_h, spec.stride_w
    for n in range(n_b):
        for m in range(c_o):
            for to in range(t_o):
                for ho in range(h_o):
                    for wo in range(w_o):
                        g = grad_out[n, m, to, ho, wo]
                        if g == 0.0:
                            continue
                        for c in range(c_i):
                            for k in range(kt):
                                tt = to + k * dt
                                for i in range(kh):
                                    hh = ho * sh + i * dh
                                    for j in range(kw):
                                        ww = wo * sw + j * dw
                                        gw[m, c, k, i, j] += g * xp[n, c, tt, hh, ww]
                                        gxp[n, c, tt, hh, ww] += g * w[m, c, k, i, j]
    gx = gxp[
        :,
        :,
        spec.pad_t : spec.pad_t + t_in,
        spec.pad_h : spec.pad_h + h_in,
        spec.pad_w : spec.pad_w + w_in,
    ]
    return np.ascontiguousarray(gx), gw


def _im2col(xp: np.ndarray, spec: ConvSpec, out_thw: tuple[int, int, int]) -> np.ndarray:
    """Materialize receptive-field columns: (N, C*Kt*Kh*Kw, T'*H'*W')."""
    n_b, c_i = xp.shape[:2]
    t_o, h_o, w_o = out_thw
    kt, kh, kw = spec.kernel
    s_n, s_c, s_t, s_h, s_w = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n_b, c_i, kt, kh, kw, t_o, h_o, w_o),
        strides=(
            s_n,
            s_c,
            spec.dilation_t * s_t,
            spec.dilation_h * s_h,
            spec.dilation_w * s_w,
            s_t,
            spec.stride_h * s_h,
            spec.stride_w * s_w,
        ),
        writeable=False,
    )
    return view.reshape(n_b, c_i * kt * kh * kw, t_o * h_o * w_o)


def conv3d_forward_cached(x: np.ndarray, w: np.ndarray, spec: ConvSpec):
    """Fast forward returning (output, columns) so backward can reuse them."""
    x, w = _check_conv_args(x, w, spec)
    n_b, c_i, t_in, h_in, w_in = x.shape
    c_o = w.shape[0]
    out_thw = spec.out_shape(t_in, h_in, w_in)
    if spec.kernel == (1, 1, 1) and (spec.pad_t, spec.pad_h, spec.pad_w) == (0, 0, 0):
        cols = x[:, :, :, :: spec.stride_h, :: spec.stride_w].reshape(n_b, c_i, -1)
    else:
        cols = _im2col(_pad_input(x, spec), spec, out_thw)
    w_mat = w.reshape(c_o, -1)
    out = np.matmul(w_mat, cols)
    return out.reshape(n_b, c_o, *out_thw), cols


def conv3d(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Fast 3D convolution (columns + one batched matrix product)."""
    out, _ = conv3d_forward_cached(x, w, spec)
    return out


def conv3d_grads(
    x_shape: tuple[int, ...],
    cols: np.ndarray,
    w: np.ndarray,
    spec: ConvSpec,
    grad_out: np.ndarray,
    need_input_grad: bool = True,
):
    """Fast gradients matching ``conv3d_forward_cached``.

    ``cols`` are the cached forward columns; returns (grad_input, grad_w)
    where grad_input is None when not requested.
    """
    n_b, c_i, t_in, h_in, w_in = x_shape
    c_o = w.shape[0]
    t_o, h_o, w_o = spec.out_shape(t_in, h_in, w_in)
    gy = np.ascontiguousarray(grad_out, dtype=np.float64).reshape(n_b, c_o, -1)
    gw = np.tensordot(gy, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    if not need_input_grad:
        return None, gw
    w_mat = w.reshape(c_o, -1)
    gcols = np.matmul(w_mat.T, gy)  # (N, C*K, P)
    kt, kh, kw = spec.kernel
    if spec.kernel == (1, 1, 1) and (spec.pad_t, spec.pad_h, spec.pad_w) == (0, 0, 0):
        gx = np.zeros((n_b, c_i, t_in, h_in, w_in), dtype=np.float64)
        gx[:, :, :, :: spec.stride_h, :: spec.stride_w] = gcols.reshape(
            n_b, c_i, t_o, h_o, w_o
        )
        return gx, gw
    gpatch = gcols.reshape(n_b, c_i, kt, kh, kw, t_o, h_o, w_o)
    tp = t_in + 2 * spec.pad_t
    hp = h_in + 2 * spec.pad_h
    wp = w_in + 2 * spec.pad_w
    gxp = np.zeros((n_b, c_i, tp, hp, wp), dtype=np.float64)
    for k in range(kt):
        t0 = k * spec.dilation_t
        for i in range(kh):
            h0 = i * spec.dilation_h
            for j in range(kw):
                w0 = j * spec.dilation_w
                gxp[
                    :,
                    :,
                    t0 : t0 + t_o,
                    h0 : h0 + (h_o - 1) * spec.stride_h + 1 : spec.stride_h,
                    w0 : w0 + (w_o - 1) * spec.stride_w + 1 : spec.stride_w,
                ] += gpatch[:, :, k, i, j]
    gx = gxp[
        :,
        :,
        spec.pad_t : spec.pad_t + t_in,
        spec.pad_h : spec.pad_h + h_in,
        spec.pad_w : spec.pad_w + w_in,
    ]
    return np.ascontiguousarray(gx), gw


def conv2d_spatial(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Per-frame spatial convolution: the K_T = 1 restriction of conv3d."""
    if spec.kernel_t != 1 or spec.pad_t != 0:
        raise ShapeError("conv2d_spatial requires kernel_t == 1 and pad_t == 0")
    return conv3d(x, w, spec)


def conv1d_temporal(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Per-pixel temporal convolution: the K_H = K_W = 1 restriction of conv3d.

    The spec is expected to carry "same" temporal padding so T' = T.
    """
    if spec.kernel_h != 1 or spec.kernel_w != 1:
        raise ShapeError("conv1d_temporal requires kernel_h == kernel_w == 1")
    return conv3d(x, w, spec)


def conv2plus1d(
    x: np.ndarray,
    w_s: np.ndarray,
    w_t: np.ndarray,
    mode: str,
    spatial: ConvSpec,
    temporal: ConvSpec,
) -> np.ndarray:
    """Factorized spatial+temporal convolution baseline.

    ``sequential`` feeds the spatial output into the temporal convolution
    (w_t maps C_o -> C_o); ``parallel`` sums both applied to the input
    (w_t maps C_i -> C_o).
    """
    if mode not in ("sequential", "parallel"):
        raise ArgumentError(f"mode must be 'sequential' or 'parallel', got {mode!r}")
    c_i = x.shape[1]
    c_o = w_s.shape[0]
    if w_s.shape[1] != c_i:
        raise ShapeError(f"w_s input channels {w_s.shape[1]} != input C {c_i}")
    if mode == "sequential":
        if w_t.shape[0] != c_o or w_t.shape[1] != c_o:
            raise ShapeError(f"sequential w_t must map {c_o}->{c_o}, got {w_t.shape[:2]}")
        return conv1d_temporal(conv2d_spatial(x, w_s, spatial), w_t, temporal)
    if w_t.shape[0] != c_o or w_t.shape[1] != c_i:
        raise ShapeError(f"parallel w_t must map {c_i}->{c_o}, got {w_t.shape[:2]}")
    y_s = conv2d_spatial(x, w_s, spatial)
    # The temporal branch must land on the spatial output grid.
    y_t = conv1d_temporal(x, w_t, temporal)
    if y_s.shape != y_t.shape:
        raise ShapeError(f"branch outputs disagree: {y_s.shape} vs {y_t.shape}")
    return y_s + y_t
