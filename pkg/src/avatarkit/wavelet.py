"""Orthonormal single-level Haar packing: H x W x C <-> H/2 x W/2 x 4C.

Per 2x2 block (a b; c d) the four bands are

    LL = (a + b + c + d) / 2        LH = (a - b + c - d) / 2
    HL = (a + b - c - d) / 2        HH = (a - b - c + d) / 2

which is orthonormal, so the transform preserves energy exactly and
idwt(dwt(x)) == x up to float rounding. Output channels are grouped per
source channel in the fixed order LL, LH, HL, HH (source channel k occupies
output channels 4k..4k+3).

The numpy functions take channels-last images; the *_nchw functions are
torch, batched, channels-first, and differentiable (used inside networks).
"""

from __future__ import annotations

import numpy as np
import torch


def dwt(image: np.ndarray) -> np.ndarray:
    """Pack an (H, W[, C]) image into (H/2, W/2, 4C) wavelet bands."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if h % 2 or w % 2:
        raise ValueError(f"image dimensions must be even, got {h}x{w}")
    a = image[0::2, 0::2]
    b = image[0::2, 1::2]
    cc = image[1::2, 0::2]
    d = image[1::2, 1::2]
    bands = np.stack(
        [
            (a + b + cc + d) / 2,
            (a - b + cc - d) / 2,
            (a + b - cc - d) / 2,
            (a - b - cc + d) / 2,
        ],
        axis=-1,
    )  # (H/2, W/2, C, 4)
    return bands.reshape(h // 2, w // 2, 4 * c)


def idwt(pack: np.ndarray) -> np.ndarray:
    """Exact inverse of dwt; returns (H, W, C)."""
    pack = np.asarray(pack)
    if pack.ndim != 3 or pack.shape[2] % 4:
        raise ValueError(f"pack must be (H/2, W/2, 4C), got {pack.shape}")
    h2, w2, c4 = pack.shape
    c = c4 // 4
    bands = pack.reshape(h2, w2, c, 4)
    ll, lh, hl, hh = bands[..., 0], bands[..., 1], bands[..., 2], bands[..., 3]
    out = np.empty((h2 * 2, w2 * 2, c), dtype=pack.dtype)
    out[0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[0::2, 1::2] = (ll - lh + hl - hh) / 2
    out[1::2, 0::2] = (ll + lh - hl - hh) / 2
    out[1::2, 1::2] = (ll - lh - hl + hh) / 2
    return out


def dwt_nchw(x: torch.Tensor) -> torch.Tensor:
    """Torch batched pack: (B, C, H, W) -> (B, 4C, H/2, W/2)."""
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ValueError(f"spatial dimensions must be even, got {tuple(x.shape)}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    bands = torch.stack(
        [
            (a + b + c + d) / 2,
            (a - b + c - d) / 2,
            (a + b - c - d) / 2,
            (a - b - c + d) / 2,
        ],
        dim=2,
    )  # (B, C, 4, H/2, W/2)
    bsz, ch = x.shape[0], x.shape[1]
    return bands.reshape(bsz, 4 * ch, x.shape[-2] // 2, x.shape[-1] // 2)


def idwt_nchw(pack: torch.Tensor) -> torch.Tensor:
    """Torch batched inverse: (B, 4C, H/2, W/2) -> (B, C, H, W)."""
    if pack.shape[1] % 4:
        raise ValueError(f"channel count must be divisible by 4, got {pack.shape[1]}")
    bsz, c4, h2, w2 = pack.shape
    bands = pack.reshape(bsz, c4 // 4, 4, h2, w2)
    ll, lh, hl, hh = bands[:, :, 0], bands[:, :, 1], bands[:, :, 2], bands[:, :, 3]
    a = (ll + lh + hl + hh) / 2
    b = (ll - lh + hl - hh) / 2
    c = (ll + lh - hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    top = torch.stack([a, b], dim=-1).reshape(bsz, c4 // 4, h2, w2 * 2)
    bot = torch.stack([c, d], dim=-1).reshape(bsz, c4 // 4, h2, w2 * 2)
    return torch.stack([top, bot], dim=-2).reshape(bsz, c4 // 4, h2 * 2, w2 * 2)
