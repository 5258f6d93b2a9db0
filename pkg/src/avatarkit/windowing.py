"""Random sample boxes and sliding-window bookkeeping.

A sample box drawn on the input image determines, through align_windows, a
window on every generated canvas so that all cropped maps stay pixel-aligned
with the ground-truth crop. Canvases may carry a margin (extra border in
canvas space) and a resolution ratio; origins map as

    origin_canvas = floor(origin_image * ratio) + margin

Arrays are channels-first: spatial dimensions are the last two axes, so the
same code crops numpy (H, W) / (C, H, W) and torch (B, C, H, W) alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import WindowError


@dataclass(frozen=True)
class SampleWindow:
    origin: tuple  # (oy, ox) pixels in canvas space
    size: tuple  # (h, w)
    canvas_size: tuple  # (H, W)

    def __post_init__(self):
        oy, ox = self.origin
        h, w = self.size
        ch, cw = self.canvas_size
        if h <= 0 or w <= 0:
            raise WindowError(f"window size must be positive, got {self.size}")
        if oy < 0 or ox < 0 or oy + h > ch or ox + w > cw:
            raise WindowError(
                f"window origin={self.origin} size={self.size} outside canvas {self.canvas_size}"
            )

    def shifted(self, dy: int, dx: int) -> "SampleWindow":
        return SampleWindow((self.origin[0] + dy, self.origin[1] + dx), self.size, self.canvas_size)


@dataclass(frozen=True)
class CanvasSpec:
    """How a canvas relates to image space: extra margin and resolution ratio."""

    name: str
    canvas_size: tuple  # (H, W)
    margin: int = 0
    ratio: float = 1.0


def draw_sample_box(rng: np.random.Generator, full_size, box_size) -> SampleWindow:
    """Uniform random box origin such that the box fits; deterministic in rng."""
    fh, fw = (full_size, full_size) if np.isscalar(full_size) else tuple(full_size)
    bh, bw = (box_size, box_size) if np.isscalar(box_size) else tuple(box_size)
    if bh > fh or bw > fw:
        raise WindowError(f"box {bh}x{bw} larger than canvas {fh}x{fw}")
    oy = int(rng.integers(0, fh - bh + 1))
    ox = int(rng.integers(0, fw - bw + 1))
    return SampleWindow((oy, ox), (bh, bw), (fh, fw))


def centered_box(full_size, box_size) -> SampleWindow:
    fh, fw = (full_size, full_size) if np.isscalar(full_size) else tuple(full_size)
    bh, bw = (box_size, box_size) if np.isscalar(box_size) else tuple(box_size)
    return SampleWindow(((fh - bh) // 2, (fw - bw) // 2), (bh, bw), (fh, fw))


def crop_window(canvas, window: SampleWindow):
    """Exact sub-array copy: out[..., i, j] = canvas[..., i+oy, j+ox]."""
    oy, ox = window.origin
    h, w = window.size
    if canvas.shape[-2] != window.canvas_size[0] or canvas.shape[-1] != window.canvas_size[1]:
        raise WindowError(
            f"canvas spatial size {canvas.shape[-2:]} does not match window's "
            f"declared canvas {window.canvas_size}"
        )
    out = canvas[..., oy : oy + h, ox : ox + w]
    return out.copy() if isinstance(out, np.ndarray) else out


def pad_to_training_size(cropped, window: SampleWindow, target_size=None):
    """Zero-pad a crop back into its canvas position; returns (padded, offset).

    The crop lands at window.origin inside a canvas of window.canvas_size
    (or an explicit target_size), keeping foreground features pixel-aligned
    with the uncropped frame.
    """
    th, tw = target_size if target_size is not None else window.canvas_size
    h, w = cropped.shape[-2], cropped.shape[-1]
    oy, ox = window.origin
    if h > th or w > tw or oy + h > th or ox + w > tw:
        raise WindowError(f"crop {h}x{w} at {window.origin} does not fit target {th}x{tw}")
    if isinstance(cropped, np.ndarray):
        padded = np.zeros(cropped.shape[:-2] + (th, tw), dtype=cropped.dtype)
    else:
        padded = cropped.new_zeros(cropped.shape[:-2] + (th, tw))
    padded[..., oy : oy + h, ox : ox + w] = cropped
    return padded, (oy, ox)


def unpad(padded, window: SampleWindow):
    """Inverse of pad_to_training_size for the same window."""
    oy, ox = window.origin
    h, w = window.size
    return padded[..., oy : oy + h, ox : ox + w]


def align_windows(sample_box: SampleWindow, canvas_specs) -> dict:
    """Map an image-space sample box onto each canvas's coordinate frame.

    Origins scale by the canvas ratio (floor) and shift by the margin; sizes
    scale by the ratio. Raises when a mapped window falls outside its canvas.
    """
    out = {}
    for spec in canvas_specs:
        oy = math.floor(sample_box.origin[0] * spec.ratio) + spec.margin
        ox = math.floor(sample_box.origin[1] * spec.ratio) + spec.margin
        h = math.floor(sample_box.size[0] * spec.ratio)
        w = math.floor(sample_box.size[1] * spec.ratio)
        try:
            out[spec.name] = SampleWindow((oy, ox), (h, w), spec.canvas_size)
        except WindowError as exc:
            raise WindowError(f"canvas '{spec.name}': {exc}") from exc
    return out
