"""Shaped differentiable primitives: normalization, convolutions, resizing.

Layout conventions used across the project: token features are [L, C] with
L = H*W in row-major order, images are [C, H, W]. All convolutions here are
single-sample (no batch axis).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .tensor import Tensor, as_tensor, make_node


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Population variance over the channel axis; eps keeps constant rows finite.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(
            f"layer_norm: channel axis {c} does not match gamma {gamma.data.shape} / beta {beta.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gg - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_node(out, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------------------
# 2-D convolution, im2col formulation

def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    out = (n + 2 * padding - k) // stride + 1
    if out < 1:
        raise ValueError(f"convolution output size {out} < 1 (n={n}, k={k}, stride={stride}, pad={padding})")
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, k, k, ho, wo), dtype=xp.dtype)
    for dy in range(k):
        ys = slice(dy, dy + (ho - 1) * stride + 1, stride)
        for dx in range(k):
            xs = slice(dx, dx + (wo - 1) * stride + 1, stride)
            cols[:, dy, dx] = xp[:, ys, xs]
    return cols.reshape(c * k * k, ho * wo)


def _col2im(gcols: np.ndarray, shape, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    c, h, w = shape
    gxp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    gc = gcols.reshape(c, k, k, ho, wo)
    for dy in range(k):
        ys = slice(dy, dy + (ho - 1) * stride + 1, stride)
        for dx in range(k):
            xs = slice(dx, dx + (wo - 1) * stride + 1, stride)
            gxp[:, ys, xs] += gc[:, dy, dx]
    if padding:
        return gxp[:, padding:-padding, padding:-padding]
    return gxp


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Full 2-D convolution: x[Cin,H,W] * weight[Cout,Cin,k,k] (+ bias[Cout])."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ValueError(f"conv2d: x {x.data.shape}, weight {weight.data.shape}")
    cout, cin, k, k2 = weight.data.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if cin != x.data.shape[0]:
        raise ValueError(f"conv2d: input channels {x.data.shape[0]} != weight {cin}")
    _, h, w = x.data.shape
    ho = _conv_out_size(h, k, stride, padding)
    wo = _conv_out_size(w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wm = weight.data.reshape(cout, cin * k * k)
    out = (wm @ cols).reshape(cout, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def bw(g):
        gm = g.reshape(cout, ho * wo)
        gw = (gm @ cols.T).reshape(weight.data.shape)
        gcols = wm.T @ gm
        gx = _col2im(gcols, x.data.shape, k, stride, padding, ho, wo)
        gb = g.sum(axis=(1, 2)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(out, parents, bw, "conv2d")


def conv2d_depthwise(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel 2-D convolution: x[C,H,W] * weight[C,k,k]."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    c, h, w = x.data.shape
    if weight.data.shape[0] != c or weight.data.shape[1] != weight.data.shape[2]:
        raise ValueError(f"conv2d_depthwise: x {x.data.shape}, weight {weight.data.shape}")
    k = weight.data.shape[1]
    ho = _conv_out_size(h, k, stride, padding)
    wo = _conv_out_size(w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    out = np.zeros((c, ho, wo), dtype=x.data.dtype)
    for dy in range(k):
        ys = slice(dy, dy + (ho - 1) * stride + 1, stride)
        for dx in range(k):
            xs = slice(dx, dx + (wo - 1) * stride + 1, stride)
            out += weight.data[:, dy, dx, None, None] * xp[:, ys, xs]
    if bias is not None:
        out = out + bias.data[:, None, None]

    def bw(g):
        gw = np.empty_like(weight.data)
        gxp = np.zeros_like(xp)
        for dy in range(k):
            ys = slice(dy, dy + (ho - 1) * stride + 1, stride)
            for dx in range(k):
                xs = slice(dx, dx + (wo - 1) * stride + 1, stride)
                gw[:, dy, dx] = (g * xp[:, ys, xs]).sum(axis=(1, 2))
                gxp[:, ys, xs] += weight.data[:, dy, dx, None, None] * g
        gx = gxp[:, padding:-padding, padding:-padding] if padding else gxp
        gb = g.sum(axis=(1, 2)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(out, parents, bw, "conv2d_depthwise")


def conv1d_depthwise(x, weight, causal: bool = True) -> Tensor:
    """Per-channel convolution along the token axis: x[L,C] * weight[C,k].

    With causal padding the sequence gets k-1 left zeros, output length stays
    L, and position t only sees positions <= t. Without it the output is the
    valid convolution of length L-k+1.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or weight.data.shape[0] != x.data.shape[1]:
        raise ValueError(f"conv1d_depthwise: x {x.data.shape}, weight {weight.data.shape}")
    length, c = x.data.shape
    if length < 1:
        raise ValueError("conv1d_depthwise: empty sequence")
    k = weight.data.shape[1]
    xp = np.pad(x.data, ((k - 1, 0), (0, 0))) if causal else x.data
    lo = length if causal else length - k + 1
    if lo < 1:
        raise ValueError(f"conv1d_depthwise: sequence length {length} < kernel {k}")
    out = np.zeros((lo, c), dtype=x.data.dtype)
    for j in range(k):
        out += xp[j:j + lo] * weight.data[:, j]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(weight.data)
        for j in range(k):
            gxp[j:j + lo] += g * weight.data[:, j]
            gw[:, j] = (g * xp[j:j + lo]).sum(axis=0)
        gx = gxp[k - 1:] if causal else gxp
        return gx, gw

    return make_node(out, (x, weight), bw, "conv1d_depthwise")


# ---------------------------------------------------------------------------
# bilinear resize, half-pixel convention, scale restricted to {1/2, 2}

@lru_cache(maxsize=None)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out, n_in] matrix of bilinear weights (edges clamped)."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0f = np.floor(src)
    w1 = src - i0f
    i0 = np.clip(i0f, 0, n_in - 1).astype(int)
    i1 = np.clip(i0f + 1, 0, n_in - 1).astype(int)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - w1)
    np.add.at(m, (np.arange(n_out), i1), w1)
    return m


def bilinear_resize(x, scale: float) -> Tensor:
    """Resize x[C,H,W] by the given scale with half-pixel sampling."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ValueError(f"bilinear_resize expects [C,H,W], got {x.data.shape}")
    if scale not in (0.5, 2, 2.0):
        raise ValueError(f"bilinear_resize: scale must be 1/2 or 2, got {scale}")
    _, h, w = x.data.shape
    ho, wo = round(h * scale), round(w * scale)
    if ho < 1 or wo < 1:
        raise ValueError(f"bilinear_resize: output {ho}x{wo} < 1")
    mr = _interp_matrix(h, ho)
    mc = _interp_matrix(w, wo)
    out = np.einsum("ab,cbd,ed->cae", mr, x.data, mc, optimize=True)

    def bw(g):
        return (np.einsum("ab,cae,ed->cbd", mr, g, mc, optimize=True),)

    return make_node(out, (x,), bw, "bilinear_resize")


# ---------------------------------------------------------------------------
# token grid <-> image conversions (row-major flatten)

def image_to_tokens(x) -> Tensor:
    """[C,H,W] -> [H*W, C], rows scanned left-to-right, top-to-bottom."""
    x = as_tensor(x)
    c, h, w = x.data.shape
    return x.permute(1, 2, 0).reshape(h * w, c)


def tokens_to_image(t, hw) -> Tensor:
    """[L, C] -> [C, H, W] with L = H*W."""
    t = as_tensor(t)
    h, w = hw
    length, c = t.data.shape
    if h * w != length:
        raise ValueError(f"token grid {h}x{w} does not match L={length}")
    return t.reshape(h, w, c).permute(2, 0, 1)
