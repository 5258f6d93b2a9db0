"""PSNR and SSIM for frame-directory evaluation.

PSNR is capped at 99 dB for identical images. SSIM uses the standard
formulation: uniform 7x7 window, unbiased local covariances, constants
C1=(0.01 L)^2 and C2=(0.03 L)^2, averaged over the valid (border-cropped)
region and over channels.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ShapeMismatchError

PSNR_CAP = 99.0


def psnr(image: np.ndarray, reference: np.ndarray, data_range: float = 1.0) -> float:
    image = np.asarray(image, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if image.shape != reference.shape:
        raise ShapeMismatchError(f"psnr shapes disagree: {image.shape} vs {reference.shape}")
    mse = float(np.mean((image - reference) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 20 * math.log10(data_range) - 10 * math.log10(mse))


def _ssim_single(x: np.ndarray, y: np.ndarray, data_range: float, win: int) -> float:
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    np_win = win * win
    cov_norm = np_win / (np_win - 1)  # unbiased covariance

    ux = uniform_filter(x, size=win)
    uy = uniform_filter(y, size=win)
    uxx = uniform_filter(x * x, size=win)
    uyy = uniform_filter(y * y, size=win)
    uxy = uniform_filter(x * y, size=win)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)

    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
    pad = (win - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


def ssim(image: np.ndarray, reference: np.ndarray, data_range: float = 1.0, win: int = 7) -> float:
    """Mean structural similarity; channels are averaged independently."""
    image = np.asarray(image, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if image.shape != reference.shape:
        raise ShapeMismatchError(f"ssim shapes disagree: {image.shape} vs {reference.shape}")
    if image.ndim == 2:
        return _ssim_single(image, reference, data_range, win)
    return float(
        np.mean([_ssim_single(image[..., c], reference[..., c], data_range, win)
                 for c in range(image.shape[-1])])
    )


def split_train_test(n_frames: int, train_fraction: float = 0.8):
    """Leading train_fraction of the clip is the training set, the tail tests."""
    cut = int(round(n_frames * train_fraction))
    cut = min(max(cut, 1), n_frames)
    return list(range(cut)), list(range(cut, n_frames))


def evaluate_frames(outputs, references, data_range: float = 1.0) -> dict:
    """Per-frame and mean PSNR/SSIM for two equal-length frame lists."""
    if len(outputs) != len(references):
        raise ShapeMismatchError(
            f"frame count mismatch: {len(outputs)} outputs vs {len(references)} references"
        )
    per_frame = []
    for out, ref in zip(outputs, references):
        per_frame.append(
            {"psnr": psnr(out, ref, data_range), "ssim": ssim(out, ref, data_range)}
        )
    return {
        "frames": per_frame,
        "mean_psnr": float(np.mean([f["psnr"] for f in per_frame])) if per_frame else 0.0,
        "mean_ssim": float(np.mean([f["ssim"] for f in per_frame])) if per_frame else 0.0,
        "count": len(per_frame),
    }
