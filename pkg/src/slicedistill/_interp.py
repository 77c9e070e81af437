"""Separable bilinear / nearest-neighbor resampling weights.

align-corners=false convention throughout: destination pixel centers map
to source coordinates via x_src = (x_dst + 0.5) * (src / dst) - 0.5, with
edge clamping. Shared by slice resizing, positional-embedding
interpolation, and decoder upsampling.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=256)
def axis_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) matrix applying 1-D bilinear resampling along one axis.
    Cached and returned read-only; callers must not mutate."""
    w = np.zeros((dst, src), dtype=np.float32)
    scale = src / dst
    for i in range(dst):
        x = (i + 0.5) * scale - 0.5
        x0 = int(np.floor(x))
        frac = x - x0
        lo = min(max(x0, 0), src - 1)
        hi = min(max(x0 + 1, 0), src - 1)
        w[i, lo] += 1.0 - frac
        w[i, hi] += frac
    w.flags.writeable = False
    return w


@lru_cache(maxsize=256)
def nearest_indices(src: int, dst: int) -> np.ndarray:
    """Source index per destination pixel under the same coordinate map."""
    scale = src / dst
    x = (np.arange(dst) + 0.5) * scale - 0.5
    idx = np.clip(np.round(x).astype(np.int64), 0, src - 1)
    idx.flags.writeable = False
    return idx


def resize_bilinear_array(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear-resize an (H, W) or (H, W, C) array channelwise."""
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    if (h, w) == (out_h, out_w):
        out = img.astype(np.float32, copy=True)
        return out[:, :, 0] if squeeze else out
    wy = axis_weights(h, out_h)
    wx = axis_weights(w, out_w)
    tmp = np.tensordot(wy, img.astype(np.float32), axes=(1, 0))   # (out_h, W, C)
    out = np.tensordot(wx, tmp, axes=(1, 1)).transpose(1, 0, 2)   # (out_h, out_w, C)
    out = np.ascontiguousarray(out, dtype=np.float32)
    return out[:, :, 0] if squeeze else out


def resize_nearest_array(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize; preserves the value set (used for masks)."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    iy = nearest_indices(h, out_h)
    ix = nearest_indices(w, out_w)
    return img[np.ix_(iy, ix)].copy()
