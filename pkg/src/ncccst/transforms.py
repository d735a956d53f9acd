"""Single-level orthonormal 2-D Haar transform on (h, w, c) feature maps.

Subbands are stacked along the channel axis as ``[LL | LH | HL | HH]``,
``c`` channels each. For a 2x2 block ``[[a, b], [c, d]]``::

    LL = (a + b + c + d) / 2     LH = (a + b - c - d) / 2
    HL = (a - b + c - d) / 2     HH = (a - b - c + d) / 2
"""

from __future__ import annotations

import numpy as np


def _check_map(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError(f"expected an (h, w, c) feature map, got shape {x.shape}")
    return x


def dwt2(x) -> np.ndarray:
    x = _check_map(x)
    h, w, _ = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"dwt2 needs even spatial dimensions, got {h}x{w}")
    a = x[0::2, 0::2]
    b = x[0::2, 1::2]
    c = x[1::2, 0::2]
    d = x[1::2, 1::2]
    ll = (a + b + c + d) * 0.5
    lh = (a + b - c - d) * 0.5
    hl = (a - b + c - d) * 0.5
    hh = (a - b - c + d) * 0.5
    return np.concatenate([ll, lh, hl, hh], axis=-1)


def idwt2(coeffs) -> np.ndarray:
    coeffs = _check_map(coeffs)
    h2, w2, c4 = coeffs.shape
    if c4 % 4:
        raise ValueError(f"coefficient channel count {c4} is not divisible by 4")
    c = c4 // 4
    ll, lh, hl, hh = (coeffs[..., i * c:(i + 1) * c] for i in range(4))
    out = np.empty((2 * h2, 2 * w2, c), dtype=coeffs.dtype)
    out[0::2, 0::2] = (ll + lh + hl + hh) * 0.5
    out[0::2, 1::2] = (ll + lh - hl - hh) * 0.5
    out[1::2, 0::2] = (ll - lh + hl - hh) * 0.5
    out[1::2, 1::2] = (ll - lh - hl + hh) * 0.5
    return out


def lowpass_projection(x) -> np.ndarray:
    """Keep only the LL subband and transform back."""
    w = dwt2(x)
    c = w.shape[-1] // 4
    w[..., c:] = 0
    return idwt2(w)
