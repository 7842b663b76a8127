"""Independent brute-force references used only by the test suite.

These are written deliberately differently from the package implementations
(permuted loop order, padded index arithmetic done inline) so they can act
as second opinions rather than copies.
"""

import numpy as np


def conv3d_loops_permuted(x, w, spec):
    """3D convolution with the loop nest ordered (c, k, i, j) outermost."""
    n_b, c_i, t_in, h_in, w_in = x.shape
    c_o = w.shape[0]
    t_o, h_o, w_o = spec.out_shape(t_in, h_in, w_in)
    out = np.zeros((n_b, c_o, t_o, h_o, w_o))
    for c in range(c_i):
        for k in range(spec.kernel_t):
            for i in range(spec.kernel_h):
                for j in range(spec.kernel_w):
                    for n in range(n_b):
                        for m in range(c_o):
                            wv = w[m, c, k, i, j]
                            if wv == 0.0:
                                continue
                            for to in range(t_o):
                                tt = to + k * spec.dilation_t - spec.pad_t
                                if tt < 0 or tt >= t_in:
                                    continue
                                for ho in range(h_o):
                                    hh = ho * spec.stride_h + i * spec.dilation_h - spec.pad_h
                                    if hh < 0 or hh >= h_in:
                                        continue
                                    for wo in range(w_o):
                                        ww = wo * spec.stride_w + j * spec.dilation_w - spec.pad_w
                                        if ww < 0 or ww >= w_in:
                                            continue
                                        out[n, m, to, ho, wo] += wv * x[n, c, tt, hh, ww]
    return out


def matmul_triple_loop(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def numerical_gradient(f, theta, eps=1e-5):
    """Central finite differences of scalar f at every entry of theta."""
    g = np.zeros_like(theta)
    it = np.nditer(theta, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = theta[idx]
        theta[idx] = orig + eps
        fp = f()
        theta[idx] = orig - eps
        fm = f()
        theta[idx] = orig
        g[idx] = (fp - fm) / (2 * eps)
        it.iternext()
    return g
