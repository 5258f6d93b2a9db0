"""Feature combination: neural-texture sampling, mask prediction, compositing.

Face features are sampled from a UV-space canvas through the UV rendering
(bilinear, border-clamped, differentiable w.r.t. the canvas). The combined
map is mask * (face + foreground) + (1 - mask) * background, evaluated per
pixel and broadcast over channels. All tensors are torch, channels-first.
"""

from __future__ import annotations

import torch

from . import wavelet, windowing
from .errors import ShapeMismatchError
from .networks import AvatarNetworks


def _bilinear_uv(canvas: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Sample (B, C, T, T) canvas at uv in [0,1]^2; u/v are (B, H, W).

    Texel (i, j) sits at uv = (j/(T-1), i/(T-1)); coordinates clamp to the
    canvas border.
    """
    bsz, ch, th, tw = canvas.shape
    x = (u.clamp(0, 1) * (tw - 1)).to(canvas.dtype)
    y = (v.clamp(0, 1) * (th - 1)).to(canvas.dtype)
    x0 = x.floor().long().clamp(0, tw - 1)
    y0 = y.floor().long().clamp(0, th - 1)
    x1 = (x0 + 1).clamp(0, tw - 1)
    y1 = (y0 + 1).clamp(0, th - 1)
    fx = (x - x0.to(canvas.dtype)).unsqueeze(1)
    fy = (y - y0.to(canvas.dtype)).unsqueeze(1)

    flat = canvas.reshape(bsz, ch, th * tw)

    def take(yy, xx):
        idx = (yy * tw + xx)[:, None, :, :].expand(-1, ch, -1, -1)
        return flat.gather(2, idx.reshape(bsz, ch, -1)).reshape(bsz, ch, *yy.shape[1:])

    top = take(y0, x0) * (1 - fx) + take(y0, x1) * fx
    bot = take(y1, x0) * (1 - fx) + take(y1, x1) * fx
    return top * (1 - fy) + bot * fy


def face_mask_from_uv(uv_rendering: torch.Tensor) -> torch.Tensor:
    """(B, 1, H, W) bool-ish mask: pixels the rasterizer covered (uv nonzero)."""
    return (uv_rendering[:, :2].amax(dim=1, keepdim=True) > 0).to(uv_rendering.dtype)


def sample_neural_texture(uv_canvas: torch.Tensor, uv_rendering: torch.Tensor) -> torch.Tensor:
    """Screen-space face feature map sampled from the UV canvas.

    uv_rendering is a rasterizer output (red=u, green=v, exact zeros at
    background); background pixels come out zero.
    """
    if uv_canvas.ndim != 4 or uv_rendering.ndim != 4:
        raise ShapeMismatchError("expected batched channels-first tensors")
    face = face_mask_from_uv(uv_rendering)
    sampled = _bilinear_uv(uv_canvas, uv_rendering[:, 0], uv_rendering[:, 1])
    return sampled * face


def map_noise_via_uv(
    uv_noise_canvas: torch.Tensor,
    uv_rendering: torch.Tensor,
    background_noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Screen-space noise: face pixels sample the UV canvas, the rest take the
    fixed background noise field (zeros when none is given)."""
    bsz = uv_rendering.shape[0]
    if uv_noise_canvas.ndim == 2:
        uv_noise_canvas = uv_noise_canvas[None, None]
    if uv_noise_canvas.shape[0] == 1 and bsz > 1:
        uv_noise_canvas = uv_noise_canvas.expand(bsz, -1, -1, -1)
    face = face_mask_from_uv(uv_rendering)
    sampled = _bilinear_uv(uv_noise_canvas, uv_rendering[:, 0], uv_rendering[:, 1])
    if background_noise is None:
        background_noise = torch.zeros_like(sampled)
    elif background_noise.ndim == 2:
        background_noise = background_noise[None, None]
    return sampled * face + background_noise * (1 - face)


def predict_mask(fg_map: torch.Tensor, bg_map: torch.Tensor, mask_head) -> torch.Tensor:
    """Foreground alpha in (0, 1) from the two feature windows."""
    return mask_head(fg_map, bg_map)


def combine(face_map, fg_map, bg_window, mask):
    """mask * (face + fg) + (1 - mask) * bg, pixelwise, broadcast over channels."""
    if face_map.shape != fg_map.shape or fg_map.shape != bg_window.shape:
        raise ShapeMismatchError(
            f"feature maps disagree: face {tuple(face_map.shape)}, fg {tuple(fg_map.shape)}, "
            f"bg {tuple(bg_window.shape)}"
        )
    if mask.shape[-2:] != fg_map.shape[-2:]:
        raise ShapeMismatchError(
            f"mask {tuple(mask.shape)} does not match features {tuple(fg_map.shape)}"
        )
    return mask * (face_map + fg_map) + (1 - mask) * bg_window


def _crop_batch(canvas: torch.Tensor, windows) -> torch.Tensor:
    """Per-sample window crops of a batched canvas, stacked back to a batch."""
    return torch.stack(
        [windowing.crop_window(canvas[i], win) for i, win in enumerate(windows)], dim=0
    )


def compose_frame(
    nets: AvatarNetworks,
    uv_window: torch.Tensor,  # (B, 3, W, W) uv rendering cropped to the sample box
    tex_padded: torch.Tensor,  # (B, 3, F, F) padded texture rendering
    uv_padded: torch.Tensor | None,  # (B, 3, F, F) padded uv rendering, for noise
    fg_windows,
    bg_windows,
    z_id: torch.Tensor,
    z_tmp: torch.Tensor,
    static_canvases=None,
):
    """Run the three feature branches and combine them.

    Returns (combined, mask, extras) where extras keeps the canvases for
    reuse and inspection. ``static_canvases`` short-circuits the two feature
    generators with precomputed (face_canvas, bg_canvas); inference uses this
    so only the StyleUNets run per frame.
    """
    cfg = nets.config
    if static_canvases is not None:
        face_canvas, bg_canvas = static_canvases
    else:
        face_canvas = nets.face_gen(z_id)
        bg_canvas = nets.bg_gen(z_id)

    frame_noise = None
    if cfg.use_noise and uv_padded is not None:
        frame_bg_window = windowing.SampleWindow(
            (cfg.bg_margin, cfg.bg_margin),
            (cfg.frame_size, cfg.frame_size),
            (cfg.bg_canvas_size, cfg.bg_canvas_size),
        )
        bg_noise_frame = windowing.crop_window(nets.noise.bg_noise, frame_bg_window)
        frame_noise = map_noise_via_uv(nets.noise.uv_noise, uv_padded, bg_noise_frame)

    fg_bands = nets.fg_unet(wavelet.dwt_nchw(tex_padded), z_tmp, frame_noise)
    fg_canvas = wavelet.idwt_nchw(fg_bands)

    fg_win = _crop_batch(fg_canvas, fg_windows)
    bg_win = _crop_batch(bg_canvas, bg_windows)

    if cfg.use_neural_texture:
        face_map = sample_neural_texture(face_canvas, uv_window)
    else:
        face_map = torch.zeros_like(fg_win)

    mask = predict_mask(fg_win, bg_win, nets.mask_head)
    combined = combine(face_map, fg_win, bg_win, mask)
    extras = {
        "face_canvas": face_canvas,
        "bg_canvas": bg_canvas,
        "fg_canvas": fg_canvas,
        "fg_window": fg_win,
        "bg_window": bg_win,
        "face_map": face_map,
    }
    return combined, mask, extras


def render_final_image(
    nets: AvatarNetworks,
    combined: torch.Tensor,
    uv_window: torch.Tensor,
    bg_windows,
    z_tmp: torch.Tensor,
) -> torch.Tensor:
    """Refinement pass: combined features -> RGB image at window resolution."""
    cfg = nets.config
    noise = None
    if cfg.use_noise:
        bg_noise = _crop_batch(
            nets.noise.bg_noise.expand(combined.shape[0], -1, -1, -1), bg_windows
        )
        noise = map_noise_via_uv(nets.noise.uv_noise, uv_window, bg_noise)
    out_pack = nets.refine_unet(wavelet.dwt_nchw(combined), z_tmp, noise)
    return wavelet.idwt_nchw(out_pack)
