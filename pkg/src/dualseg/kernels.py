"""Hot numeric kernels: 2-D convolution passes, component labelling, resizing.

Each convolution kernel has a numba @njit variant (plain loops) and a pure
numpy variant (kernel-offset decomposition into 2-D matmuls); `backend`
selects which one is bound at import.  Component labelling likewise ships a
jitted flood fill and an identical pure-Python fallback.  Both paths of a
kernel compute the same quantity; summation order differs, so agreement is
to float64 round-off, not bit-exact across backends.

All convolution tensors are channels-first float64: x is (C_in, H, W),
weights are (C_out, C_in, kh, kw), outputs (C_out, Ho, Wo).
"""

from __future__ import annotations

import numpy as np

from .backend import HAS_NUMBA, njit


def conv_out_size(size: int, ksize: int, stride: int, dilation: int, pad: int) -> int:
    return (size + 2 * pad - dilation * (ksize - 1) - 1) // stride + 1


def _pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    c, h, w = x.shape
    out = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, pad:pad + h, pad:pad + w] = x
    return out


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@njit
def _conv2d_forward_jit(xp, w, bias, stride, dilation, ho, wo):
    cout, cin, kh, kw = w.shape
    y = np.empty((cout, ho, wo), dtype=np.float64)
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = bias[o]
                i0 = i * stride
                j0 = j * stride
                for c in range(cin):
                    for ki in range(kh):
                        for kj in range(kw):
                            acc += w[o, c, ki, kj] * xp[c, i0 + ki * dilation, j0 + kj * dilation]
                y[o, i, j] = acc
    return y


@njit
def _conv2d_backward_input_jit(g, w, stride, dilation, hp, wp):
    cout, cin, kh, kw = w.shape
    ho, wo = g.shape[1], g.shape[2]
    gx = np.zeros((cin, hp, wp), dtype=np.float64)
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                gv = g[o, i, j]
                i0 = i * stride
                j0 = j * stride
                for c in range(cin):
                    for ki in range(kh):
                        for kj in range(kw):
                            gx[c, i0 + ki * dilation, j0 + kj * dilation] += w[o, c, ki, kj] * gv
    return gx


@njit
def _conv2d_backward_weights_jit(g, xp, stride, dilation, kh, kw):
    cout = g.shape[0]
    cin = xp.shape[0]
    ho, wo = g.shape[1], g.shape[2]
    gw = np.zeros((cout, cin, kh, kw), dtype=np.float64)
    gb = np.zeros(cout, dtype=np.float64)
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                gv = g[o, i, j]
                gb[o] += gv
                i0 = i * stride
                j0 = j * stride
                for c in range(cin):
                    for ki in range(kh):
                        for kj in range(kw):
                            gw[o, c, ki, kj] += gv * xp[c, i0 + ki * dilation, j0 + kj * dilation]
    return gw, gb


# ---------------------------------------------------------------------------
# numpy fallbacks: one matmul per kernel offset
# ---------------------------------------------------------------------------

def _offset_view(xp: np.ndarray, ki: int, kj: int, stride: int, dilation: int,
                 ho: int, wo: int) -> np.ndarray:
    i0 = ki * dilation
    j0 = kj * dilation
    return xp[:, i0:i0 + (ho - 1) * stride + 1:stride, j0:j0 + (wo - 1) * stride + 1:stride]


def _conv2d_forward_np(xp, w, bias, stride, dilation, ho, wo):
    cout, cin, kh, kw = w.shape
    y = np.zeros((cout, ho * wo), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            sub = _offset_view(xp, ki, kj, stride, dilation, ho, wo).reshape(cin, -1)
            y += w[:, :, ki, kj] @ sub
    y += bias[:, None]
    return y.reshape(cout, ho, wo)


def _conv2d_backward_input_np(g, w, stride, dilation, hp, wp):
    cout, cin, kh, kw = w.shape
    ho, wo = g.shape[1], g.shape[2]
    gflat = g.reshape(cout, -1)
    gx = np.zeros((cin, hp, wp), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            contrib = (w[:, :, ki, kj].T @ gflat).reshape(cin, ho, wo)
            _offset_view(gx, ki, kj, stride, dilation, ho, wo)[...] += contrib
    return gx


def _conv2d_backward_weights_np(g, xp, stride, dilation, kh, kw):
    cout = g.shape[0]
    cin = xp.shape[0]
    ho, wo = g.shape[1], g.shape[2]
    gflat = g.reshape(cout, -1)
    gw = np.empty((cout, cin, kh, kw), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            sub = _offset_view(xp, ki, kj, stride, dilation, ho, wo).reshape(cin, -1)
            gw[:, :, ki, kj] = gflat @ sub.T
    gb = gflat.sum(axis=1)
    return gw, gb


if HAS_NUMBA:
    _conv2d_forward = _conv2d_forward_jit
    _conv2d_backward_input = _conv2d_backward_input_jit
    _conv2d_backward_weights = _conv2d_backward_weights_jit
else:
    _conv2d_forward = _conv2d_forward_np
    _conv2d_backward_input = _conv2d_backward_input_np
    _conv2d_backward_weights = _conv2d_backward_weights_np


def conv2d_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray,
                   stride: int = 1, dilation: int = 1, pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Convolve one image; returns (output, padded input kept for backward)."""
    xp = _pad2d(np.ascontiguousarray(x, dtype=np.float64), pad)
    ho = conv_out_size(x.shape[1], w.shape[2], stride, dilation, pad)
    wo = conv_out_size(x.shape[2], w.shape[3], stride, dilation, pad)
    y = _conv2d_forward(xp, w, bias, stride, dilation, ho, wo)
    return y, xp


def conv2d_backward(g: np.ndarray, xp: np.ndarray, w: np.ndarray,
                    stride: int, dilation: int, pad: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a conv2d_forward call: (d_input, d_weights, d_bias)."""
    g = np.ascontiguousarray(g, dtype=np.float64)
    gw, gb = _conv2d_backward_weights(g, xp, stride, dilation, w.shape[2], w.shape[3])
    gxp = _conv2d_backward_input(g, w, stride, dilation, xp.shape[1], xp.shape[2])
    if pad:
        gxp = gxp[:, pad:gxp.shape[1] - pad, pad:gxp.shape[2] - pad]
    return gxp, gw, gb


# ---------------------------------------------------------------------------
# connected-component labelling (flood fill, deterministic scan order)
# ---------------------------------------------------------------------------

@njit
def _label_jit(mask, use_8conn):
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int64)
    stack = np.empty((h * w, 2), dtype=np.int64)
    count = 0
    for si in range(h):
        for sj in range(w):
            if mask[si, sj] != 0 and labels[si, sj] == 0:
                count += 1
                labels[si, sj] = count
                stack[0, 0] = si
                stack[0, 1] = sj
                top = 1
                while top > 0:
                    top -= 1
                    i = stack[top, 0]
                    j = stack[top, 1]
                    for di in range(-1, 2):
                        for dj in range(-1, 2):
                            if di == 0 and dj == 0:
                                continue
                            if not use_8conn and di != 0 and dj != 0:
                                continue
                            ni = i + di
                            nj = j + dj
                            if 0 <= ni < h and 0 <= nj < w and mask[ni, nj] != 0 and labels[ni, nj] == 0:
                                labels[ni, nj] = count
                                stack[top, 0] = ni
                                stack[top, 1] = nj
                                top += 1
    return labels, count


def _label_py(mask, use_8conn):
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int64)
    if use_8conn:
        steps = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))
    else:
        steps = ((-1, 0), (0, -1), (0, 1), (1, 0))
    count = 0
    for si in range(h):
        for sj in range(w):
            if mask[si, sj] and not labels[si, sj]:
                count += 1
                labels[si, sj] = count
                stack = [(si, sj)]
                while stack:
                    i, j = stack.pop()
                    for di, dj in steps:
                        ni, nj = i + di, j + dj
                        if 0 <= ni < h and 0 <= nj < w and mask[ni, nj] and not labels[ni, nj]:
                            labels[ni, nj] = count
                            stack.append((ni, nj))
    return labels, count


def label_components(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Label maximal connected foreground regions 1..n; background stays 0."""
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    arr = np.ascontiguousarray(mask, dtype=np.uint8)
    if HAS_NUMBA:
        labels, count = _label_jit(arr, connectivity == 8)
    else:
        labels, count = _label_py(arr, connectivity == 8)
    return labels, int(count)


# ---------------------------------------------------------------------------
# resizing (dense 1-D interpolation matrices; matmul-bound, no jit needed)
# ---------------------------------------------------------------------------

def linear_resize_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic 1-D bilinear weight matrix, half-pixel-centre sampling."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    scale = n_in / n_out
    for o in range(n_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    return m


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of (H, W) or (C, H, W) float arrays."""
    squeeze = x.ndim == 2
    arr = x[None] if squeeze else x
    mr = linear_resize_matrix(out_h, arr.shape[1])
    mc = linear_resize_matrix(out_w, arr.shape[2])
    out = np.einsum("oh,chw,pw->cop", mr, arr, mc, optimize=True)
    return out[0] if squeeze else out


def nearest_index(n_out: int, n_in: int) -> np.ndarray:
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def resize_nearest(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of an (H, W) array (mask-safe)."""
    ri = nearest_index(out_h, x.shape[0])
    ci = nearest_index(out_w, x.shape[1])
    return x[np.ix_(ri, ci)]
