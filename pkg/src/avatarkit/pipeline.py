"""Batch pipeline: tracking + conditioning cache, training glue, inference,
reenactment, and evaluation.

Tracking runs in source pixel space; a single crop box per video (the
enlarged union of all landmark bboxes) maps the portrait region onto the
training resolution, so the background stays static in crop space. The cache
holds, per frame: tracked params, UV/texture renderings rasterized straight
into crop space, and the crop-resampled ground-truth frames and masks.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import container, evalmetrics, windowing
from .composer import compose_frame, render_final_image
from .dataset import DatasetLayout, load_image, save_image
from .errors import DatasetError
from .facemodel import FaceParams, MorphableModel
from .networks import AvatarNetworks, identity_code, load_checkpoint, temporal_code
from .rasterizer import CropBox, compute_crop_box, rasterize
from .tracker import solve_texture, track_sequence
from .training import TrainConfig, VideoData, video_from_arrays


@dataclass
class ParamStream:
    """Tracked per-frame parameters for one clip."""

    params: list  # list[FaceParams]
    video_id: str
    fps: float = 30.0

    def __len__(self) -> int:
        return len(self.params)


def crop_resize(image: np.ndarray, crop_box: CropBox, out_size: int) -> np.ndarray:
    """Bilinearly resample a crop-box region to out_size^2, center-aligned.

    Output pixel (i, j) samples the source at the same location the
    rasterizer maps it to, so renderings and resampled frames stay
    pixel-aligned. Border samples clamp.
    """
    x0 = float(crop_box.center[0]) - crop_box.size / 2
    y0 = float(crop_box.center[1]) - crop_box.size / 2
    step = crop_box.size / out_size
    coords = (np.arange(out_size) + 0.5) * step - 0.5
    xs = x0 + coords
    ys = y0 + coords
    h, w = image.shape[:2]
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0i = np.floor(xs).astype(int)
    y0i = np.floor(ys).astype(int)
    x1i = np.minimum(x0i + 1, w - 1)
    y1i = np.minimum(y0i + 1, h - 1)
    fx = xs - x0i
    fy = ys - y0i
    if image.ndim == 3:
        fx = fx[None, :, None]
        fy = fy[:, None, None]
    else:
        fx = fx[None, :]
        fy = fy[:, None]
    top = image[np.ix_(y0i, x0i)] * (1 - fx) + image[np.ix_(y0i, x1i)] * fx
    bot = image[np.ix_(y1i, x0i)] * (1 - fx) + image[np.ix_(y1i, x1i)] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


# --- tracking & cache -----------------------------------------------------------


def track_dataset(dataset: DatasetLayout, render_size: int = 128, enlarge: float = 1.5,
                  iterations: int = 3, force: bool = False) -> dict:
    """Track the clip and build the conditioning cache; idempotent unless forced.

    Returns a summary dict (crop box, counts, residuals). The cache container
    holds frames/masks/uv/tex arrays of shape (N, R, R, C) plus per-frame
    params records.
    """
    cache = dataset.cache_dir
    if container.container_exists(cache / "renderings") and not force:
        return json.loads((cache / "summary.json").read_text())

    n = dataset.validate()
    model = dataset.load_model()
    frames_lm = [dataset.load_landmarks(i) for i in range(n)]
    results = track_sequence(model, frames_lm, iterations=iterations)

    width, height = dataset.frame_size()
    all_lm = np.concatenate([f.points[:, :2] for f in frames_lm], axis=0)
    crop_box = compute_crop_box(all_lm, enlarge=enlarge, image_size=(width, height))

    # first-frame texture solve against the source frame
    first_image = load_image(dataset.frame_path(0))
    vis_res = max(width, height)
    vis_res += vis_res % 2
    vis_render = rasterize(
        model, results[0].params, "texture", CropBox.full(width, height), vis_res
    )
    theta_tex = solve_texture(model, first_image, results[0].params, vis_render.visibility)
    for res in results:
        res.params.theta_tex = theta_tex.copy()

    frames = np.zeros((n, render_size, render_size, 3), dtype=np.float32)
    masks = np.zeros((n, render_size, render_size), dtype=np.float32)
    uv = np.zeros((n, render_size, render_size, 3), dtype=np.float32)
    tex = np.zeros((n, render_size, render_size, 3), dtype=np.float32)
    for i, res in enumerate(results):
        frames[i] = crop_resize(load_image(dataset.frame_path(i)), crop_box, render_size)
        masks[i] = crop_resize(load_image(dataset.mask_path(i)), crop_box, render_size)
        uv[i] = rasterize(model, res.params, "uv", crop_box, render_size).uv_image
        tex[i] = rasterize(model, res.params, "texture", crop_box, render_size).tex_image

    params_dir = cache / "params"
    params_dir.mkdir(parents=True, exist_ok=True)
    for i, res in enumerate(results):
        record = res.params.to_dict()
        record["residual_rms"] = res.residual_rms
        record["frame_index"] = i
        container.atomic_write_json(params_dir / f"{i:06d}.json", record)

    container.save_container(
        cache / "renderings",
        {"frames": frames, "masks": masks, "uv": uv, "tex": tex},
        extra={"crop_box": crop_box.to_dict(), "render_size": render_size},
    )
    summary = {
        "video_id": dataset.name,
        "n_frames": n,
        "render_size": render_size,
        "crop_box": crop_box.to_dict(),
        "mean_residual_rms": float(np.mean([r.residual_rms for r in results])),
        "max_residual_rms": float(np.max([r.residual_rms for r in results])),
    }
    container.atomic_write_json(cache / "summary.json", summary)
    return summary


def load_param_stream(dataset: DatasetLayout) -> ParamStream:
    params_dir = dataset.cache_dir / "params"
    files = sorted(params_dir.glob("*.json"))
    if not files:
        raise DatasetError(f"no tracked params in {params_dir}; run tracking first")
    params = [FaceParams.from_dict(json.loads(f.read_text())) for f in files]
    return ParamStream(params=params, video_id=dataset.name)


def load_cache_arrays(dataset: DatasetLayout):
    arrays, extra = container.load_container(dataset.cache_dir / "renderings")
    return arrays, CropBox.from_dict(extra["crop_box"]), int(extra["render_size"])


def load_video_data(dataset: DatasetLayout, identity_index: int = 0) -> VideoData:
    """Training-ready tensors from a tracked dataset's cache."""
    arrays, _, _ = load_cache_arrays(dataset)
    return video_from_arrays(
        dataset.name,
        arrays["frames"],
        arrays["masks"],
        arrays["uv"],
        arrays["tex"],
        identity_index=identity_index,
    )


# --- inference -------------------------------------------------------------------


class AvatarInference:
    """Frame-by-frame inference with cached static canvases.

    Only the two StyleUNets run per frame: the two feature generators are
    evaluated once per identity and reused. generator_evals counts the
    generator forward passes for the caching contract.
    """

    def __init__(self, networks: AvatarNetworks, model: MorphableModel, crop_box: CropBox,
                 identity_index: int, z_tmp_value: float, cache_canvases: bool = True):
        self.networks = networks
        self.model = model
        self.crop_box = crop_box
        self.identity_index = identity_index
        self.z_tmp_value = z_tmp_value
        self.cache_canvases = cache_canvases
        self.generator_evals = 0
        self._canvases = None

    def _static_canvases(self):
        if self._canvases is not None and self.cache_canvases:
            return self._canvases
        cfg = self.networks.config
        z_id = identity_code(self.identity_index, cfg.latent_dim)[None]
        with torch.no_grad():
            face_canvas = self.networks.face_gen(z_id)
            bg_canvas = self.networks.bg_gen(z_id)
        self.generator_evals += 2
        canvases = (face_canvas, bg_canvas)
        if self.cache_canvases:
            self._canvases = canvases
        return canvases

    def render_conditioning(self, params: FaceParams, resolution: int):
        uv = rasterize(self.model, params, "uv", self.crop_box, resolution).uv_image
        tex = rasterize(self.model, params, "texture", self.crop_box, resolution).tex_image
        return uv, tex

    def infer_params(self, params: FaceParams) -> tuple:
        """Full-frame output image (F, F, 3 numpy) plus the predicted mask."""
        cfg = self.networks.config
        f = cfg.frame_size
        uv_np, tex_np = self.render_conditioning(params, f)
        uv = torch.from_numpy(uv_np).permute(2, 0, 1)[None].float()
        tex = torch.from_numpy(tex_np).permute(2, 0, 1)[None].float()
        face_canvas, bg_canvas = self._static_canvases()

        full = windowing.SampleWindow((0, 0), (f, f), (f, f))
        bg_win = windowing.SampleWindow(
            (cfg.bg_margin, cfg.bg_margin), (f, f), (cfg.bg_canvas_size, cfg.bg_canvas_size)
        )
        z_id = identity_code(self.identity_index, cfg.latent_dim)[None]
        z_tmp = temporal_code(self.z_tmp_value, cfg.latent_dim)[None]
        with torch.no_grad():
            combined, mask, _ = compose_frame(
                self.networks, uv, tex, uv, [full], [bg_win], z_id, z_tmp,
                static_canvases=(face_canvas, bg_canvas),
            )
            image = render_final_image(self.networks, combined, uv, [bg_win], z_tmp)
        out = image[0].permute(1, 2, 0).clamp(0, 1).numpy()
        return out, mask[0, 0].numpy()


def middle_timestamp(n_frames: int) -> float:
    return (n_frames // 2) / max(n_frames - 1, 1)


def open_inference(checkpoint_path, avatar_dataset: DatasetLayout,
                   z_tmp_policy="middle", cache_canvases: bool = True) -> AvatarInference:
    """Build an inference session from a checkpoint plus its avatar dataset."""
    networks, meta, _ = load_checkpoint(checkpoint_path)
    model = avatar_dataset.load_model()
    _, crop_box, render_size = load_cache_arrays(avatar_dataset)
    if render_size != networks.config.frame_size:
        raise DatasetError(
            f"cache resolution {render_size} does not match checkpoint frame size "
            f"{networks.config.frame_size}"
        )
    entry = meta["zid_table"].get(avatar_dataset.name)
    if entry is None:
        raise DatasetError(
            f"checkpoint has no identity entry for video '{avatar_dataset.name}'"
        )
    if z_tmp_policy == "middle":
        z_tmp_value = middle_timestamp(int(entry["n_frames"]))
    else:
        z_tmp_value = float(z_tmp_policy)
    return AvatarInference(
        networks, model, crop_box, int(entry["index"]), z_tmp_value, cache_canvases
    )


def infer_stream(session: AvatarInference, stream: ParamStream, out_dir=None,
                 frame_ids=None) -> list:
    """Run inference over a parameter stream; optionally write PNG frames."""
    ids = list(range(len(stream))) if frame_ids is None else list(frame_ids)
    outputs = []
    for i in ids:
        image, _ = session.infer_params(stream.params[i])
        outputs.append(image)
        if out_dir is not None:
            save_image(Path(out_dir) / f"{i:06d}.png", image)
    return outputs


def reenact_stream(avatar_stream: ParamStream, driver_stream: ParamStream) -> ParamStream:
    """Driver expression/pose on the avatar's shape and texture."""
    if not avatar_stream.params:
        raise DatasetError("avatar stream is empty")
    avatar = avatar_stream.params[0]
    out = []
    for drv in driver_stream.params:
        p = drv.copy()
        p.theta_shape = avatar.theta_shape.copy()
        p.theta_tex = avatar.theta_tex.copy()
        out.append(p)
    return ParamStream(params=out, video_id=f"{driver_stream.video_id}->{avatar_stream.video_id}")


def evaluate_directories(out_dir, ref_dir, split: str = "all") -> dict:
    """PSNR/SSIM between two frame directories (matched by sorted order)."""
    out_files = sorted(Path(out_dir).glob("*.png"))
    ref_files = sorted(Path(ref_dir).glob("*.png"))
    if len(out_files) != len(ref_files):
        raise DatasetError(
            f"frame count mismatch: {len(out_files)} outputs vs {len(ref_files)} references"
        )
    n = len(out_files)
    train_ids, test_ids = evalmetrics.split_train_test(n)
    keep = {"all": list(range(n)), "train": train_ids, "test": test_ids}[split]
    outputs = [load_image(out_files[i]) for i in keep]
    refs = [load_image(ref_files[i]) for i in keep]
    report = evalmetrics.evaluate_frames(outputs, refs)
    report["split"] = split
    return report
