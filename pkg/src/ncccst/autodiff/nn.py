"""Differentiable layers on (h, w, c) feature maps."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .. import transforms
from .tensor import Tensor, _result, as_tensor, concat, getitem, matmul, pad, reshape, roll, transpose

LN_EPS = 1e-5
MASK_VALUE = -100.0


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with 'same' zero padding.

    x: (h, w, c_in); kernel: (kh, kw, c_in, c_out), kh and kw odd.
    """
    kh, kw, cin, cout = kernel.shape
    if x.ndim != 3 or x.shape[2] != cin:
        raise ValueError(f"conv2d: input {x.shape} does not match kernel {kernel.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d: kernel sizes must be odd")
    h, w, _ = x.shape
    out, cols = _conv_same(x.data, kernel.data)
    parents = [x, kernel]
    if bias is not None:
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(h * w, cout)
        gk = (cols.T @ g2).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        # input gradient of a 'same' correlation: correlate with the
        # spatially flipped, channel-swapped kernel
        gx, _ = _conv_same(g, kernel.data[::-1, ::-1].transpose(0, 1, 3, 2))
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _result(out, parents, bw)


def _conv_same(x: np.ndarray, k: np.ndarray):
    """Plain 'same' correlation; also returns the im2col matrix."""
    kh, kw, cin, cout = k.shape
    h, w, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    cols = sliding_window_view(xp, (kh, kw), axis=(0, 1)).reshape(h * w, cin * kh * kw)
    kmat = k.transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout)
    return (cols @ kmat).reshape(h, w, cout), cols


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last (channel) axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    red = tuple(range(x.ndim - 1))

    def bw(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _result(out, (x, gain, bias), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else y + bias


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data**2) / math.sqrt(2.0 * math.pi)
    return _result(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _result(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def dwt2(x: Tensor) -> Tensor:
    """Haar analysis as a tape op; its transpose is the synthesis."""
    return _result(transforms.dwt2(x.data), (x,), lambda g: (transforms.idwt2(g),))


def idwt2(w: Tensor) -> Tensor:
    return _result(transforms.idwt2(w.data), (w,), lambda g: (transforms.dwt2(g),))


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    n = d.size
    return _result(np.asarray(np.mean(d * d)), (pred, target),
                   lambda g: (g * 2.0 * d / n, -g * 2.0 * d / n))


# -- windowed self-attention -------------------------------------------------

def window_partition(x: Tensor, ws: int) -> Tensor:
    h, w, c = x.shape
    t = reshape(x, (h // ws, ws, w // ws, ws, c))
    return reshape(transpose(t, (0, 2, 1, 3, 4)), (-1, ws * ws, c))


def window_reverse(windows: Tensor, ws: int, h: int, w: int) -> Tensor:
    c = windows.shape[-1]
    t = reshape(windows, (h // ws, w // ws, ws, ws, c))
    return reshape(transpose(t, (0, 2, 1, 3, 4)), (h, w, c))


def shift_attention_mask(h: int, w: int, ws: int, shift: int, dtype=np.float64) -> np.ndarray:
    """Additive mask (n_windows, N, N) keeping cyclically shifted regions apart."""
    region = np.zeros((h, w))
    label = 0
    bands = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
    for hs in bands:
        for wsl in bands:
            region[hs, wsl] = label
            label += 1
    lab = region.reshape(h // ws, ws, w // ws, ws).transpose(0, 2, 1, 3).reshape(-1, ws * ws)
    diff = lab[:, None, :] != lab[:, :, None]
    return np.where(diff, MASK_VALUE, 0.0).astype(dtype)


def window_attention(x: Tensor, p: dict, heads: int, mask: np.ndarray | None = None,
                     return_attn: bool = False):
    """Multi-head self-attention inside each window. x: (n_windows, N, C)."""
    nw, n, c = x.shape
    hd = c // heads
    qkv = linear(x, p["qkv.w"], p["qkv.b"])
    qkv = transpose(reshape(qkv, (nw, n, 3, heads, hd)), (2, 0, 3, 1, 4))
    q, k, v = getitem(qkv, 0), getitem(qkv, 1), getitem(qkv, 2)
    logits = matmul(q, transpose(k, (0, 1, 3, 2))) * (hd ** -0.5)
    if mask is not None:
        logits = logits + mask[:, None, :, :].astype(x.dtype)
    attn = softmax(logits, axis=-1)
    out = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (nw, n, c))
    out = linear(out, p["proj.w"], p["proj.b"])
    return (out, attn.data) if return_attn else out


def swin_block(x: Tensor, p: dict, window: int = 8, heads: int = 2, shifted: bool = False,
               return_attn: bool = False):
    """LN -> (shifted) window MSA -> residual -> LN -> MLP(4c, GELU) -> residual.

    Maps smaller than, or not divisible by, the window are zero padded
    symmetrically after the first norm and cropped after attention. The
    shift is dropped when the padded map is a single window.
    """
    h, w, c = x.shape
    if c % heads:
        raise ValueError(f"channels {c} not divisible by heads {heads}")
    y = layer_norm(x, p["norm1.g"], p["norm1.b"])
    ph, pw = (-h) % window, (-w) % window
    top, left = ph // 2, pw // 2
    if ph or pw:
        y = pad(y, ((top, ph - top), (left, pw - left), (0, 0)))
    hp, wp = h + ph, w + pw
    shift = window // 2 if shifted and min(hp, wp) > window else 0
    mask = None
    if shift:
        y = roll(y, (-shift, -shift), (0, 1))
        mask = shift_attention_mask(hp, wp, window, shift)
    res = window_attention(window_partition(y, window), p, heads, mask, return_attn)
    attn = None
    if return_attn:
        res, attn = res
    y = window_reverse(res, window, hp, wp)
    if shift:
        y = roll(y, (shift, shift), (0, 1))
    if ph or pw:
        y = getitem(y, (slice(top, top + h), slice(left, left + w)))
    x = x + y
    z = layer_norm(x, p["norm2.g"], p["norm2.b"])
    z = linear(gelu(linear(z, p["fc1.w"], p["fc1.b"])), p["fc2.w"], p["fc2.b"])
    out = x + z
    return (out, attn) if return_attn else out


# -- parameter initialization ----------------------------------------------

def conv_params(kh: int, kw: int, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
    limit = math.sqrt(6.0 / (kh * kw * (cin + cout)))
    w = rng.uniform(-limit, limit, size=(kh, kw, cin, cout)).astype(dtype)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(cout, dtype), requires_grad=True)


def swin_params(c: int, rng: np.random.Generator, dtype=np.float32, mlp_ratio: int = 4) -> dict:
    def normal(*shape):
        return Tensor((0.02 * rng.standard_normal(shape)).astype(dtype), requires_grad=True)

    def const(v, n):
        return Tensor(np.full(n, v, dtype), requires_grad=True)

    hidden = mlp_ratio * c
    return {
        "norm1.g": const(1.0, c), "norm1.b": const(0.0, c),
        "qkv.w": normal(c, 3 * c), "qkv.b": const(0.0, 3 * c),
        "proj.w": normal(c, c), "proj.b": const(0.0, c),
        "norm2.g": const(1.0, c), "norm2.b": const(0.0, c),
        "fc1.w": normal(c, hidden), "fc1.b": const(0.0, hidden),
        "fc2.w": normal(hidden, c), "fc2.b": const(0.0, c),
    }


def cat_channels(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=-1)
