"""Dataset layout, image IO, the synthetic toy-video generator, and the cache.

A dataset is a directory:

    frames/%06d.png      RGB video frames
    landmarks/%06d.json  {"points": Lx3, "iris": 2x3} per frame
    masks/%06d.png       grayscale matting alpha
    model/               morphable-model container
    cache/               written by tracking: params + renderings + crops

Landmarks and matting masks are precomputed inputs; the synthetic generator
writes perfectly-labeled toy clips (plus ground-truth params under truth/)
so every stage of the pipeline can be verified end to end.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import container
from .errors import DatasetError
from .facemodel import (
    FaceParams,
    MorphableModel,
    eye_forward_points,
    landmark_points,
    load_model,
    save_model,
    synth_toy_model,
)
from .rasterizer import CropBox, Lighting, rasterize
from .tracker import LandmarkFrame, _yaw_pitch_rotation

CACHE_ENV_VAR = "AVATAR_CACHE"


def save_image(path, image: np.ndarray) -> None:
    """Write a float [0,1] (H, W[, 3]) array as an 8-bit PNG, atomically."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    img = Image.fromarray(data)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    img.save(tmp, format="PNG")
    os.replace(tmp, path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float32) / 255.0


@dataclass
class DatasetLayout:
    root: Path

    def __init__(self, root):
        self.root = Path(root)

    @property
    def frames_dir(self) -> Path:
        return self.root / "frames"

    @property
    def landmarks_dir(self) -> Path:
        return self.root / "landmarks"

    @property
    def masks_dir(self) -> Path:
        return self.root / "masks"

    @property
    def model_dir(self) -> Path:
        return self.root / "model"

    @property
    def cache_dir(self) -> Path:
        override = os.environ.get(CACHE_ENV_VAR)
        if override:
            return Path(override) / self.root.name
        return self.root / "cache"

    @property
    def name(self) -> str:
        return self.root.name

    def frame_path(self, i: int) -> Path:
        return self.frames_dir / f"{i:06d}.png"

    def landmark_path(self, i: int) -> Path:
        return self.landmarks_dir / f"{i:06d}.json"

    def mask_path(self, i: int) -> Path:
        return self.masks_dir / f"{i:06d}.png"

    def n_frames(self) -> int:
        if not self.frames_dir.is_dir():
            raise DatasetError(f"missing frames directory: {self.frames_dir}")
        return len(sorted(self.frames_dir.glob("*.png")))

    def validate(self) -> int:
        """Check counts and resolutions line up; returns the frame count."""
        for attr in ("frames_dir", "landmarks_dir", "masks_dir", "model_dir"):
            path = getattr(self, attr)
            if not path.is_dir():
                raise DatasetError(f"missing dataset directory: {path}")
        n = self.n_frames()
        n_lm = len(sorted(self.landmarks_dir.glob("*.json")))
        n_mask = len(sorted(self.masks_dir.glob("*.png")))
        if not (n == n_lm == n_mask):
            raise DatasetError(
                f"count mismatch in {self.root}: {n} frames, {n_lm} landmark files, "
                f"{n_mask} masks"
            )
        if n == 0:
            raise DatasetError(f"dataset {self.root} is empty")
        first = load_image(self.frame_path(0))
        for i in (0, n - 1):
            if load_image(self.frame_path(i)).shape != first.shape:
                raise DatasetError(f"inconsistent frame resolution in {self.root}")
        return n

    def load_landmarks(self, i: int) -> LandmarkFrame:
        d = json.loads(self.landmark_path(i).read_text())
        iris = np.asarray(d["iris"], dtype=np.float64) if d.get("iris") is not None else None
        return LandmarkFrame(
            points=np.asarray(d["points"], dtype=np.float64), frame_index=i, iris=iris
        )

    def load_model(self) -> MorphableModel:
        return load_model(self.model_dir)

    def frame_size(self) -> tuple:
        img = load_image(self.frame_path(0))
        return img.shape[1], img.shape[0]  # (width, height)


def write_landmarks(path, points: np.ndarray, iris: np.ndarray | None) -> None:
    payload = {"points": np.asarray(points, dtype=float).tolist()}
    payload["iris"] = np.asarray(iris, dtype=float).tolist() if iris is not None else None
    container.atomic_write_json(Path(path), payload)


# --- synthetic toy videos -------------------------------------------------------


def _smooth_background(size: int, seed: int) -> np.ndarray:
    """Static low-frequency RGB background."""
    rng = np.random.default_rng([seed, 7])
    y, x = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))
    for c in range(3):
        img[:, :, c] = 0.45 + 0.12 * np.sin(2 * np.pi * (rng.uniform(0.5, 1.5) * x + rng.uniform()))
        img[:, :, c] += 0.10 * np.cos(2 * np.pi * (rng.uniform(0.5, 1.5) * y + rng.uniform()))
        img[:, :, c] += 0.05 * np.sin(2 * np.pi * (x + y) * rng.uniform(1.0, 2.0))
    return np.clip(img, 0.0, 1.0)


def _draw_shoulders(frame: np.ndarray, mask: np.ndarray, center_x: float, top_y: float,
                    size: int, seed: int) -> None:
    """Paint a shoulders/torso blob anchored under the head; edits in place."""
    rng = np.random.default_rng([seed, 13])
    color = np.array([0.25, 0.3, 0.5]) + rng.uniform(-0.05, 0.05, size=3)
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    half_w = 0.34 * size
    ell = ((x - center_x) / half_w) ** 2 + ((y - top_y) / (0.42 * size)) ** 2
    region = (ell <= 1.0) & (y >= top_y)
    shade = 1.0 - 0.25 * np.clip(ell, 0, 1)
    stripes = 0.05 * np.sin(2 * np.pi * (x - center_x) / (0.18 * size))
    for c in range(3):
        frame[:, :, c] = np.where(region, np.clip(color[c] * shade + stripes, 0, 1), frame[:, :, c])
    mask |= region


@dataclass
class MotionScript:
    """Smooth deterministic per-frame parameters for a toy clip."""

    n_frames: int
    seed: int
    translation_amp: float = 0.10  # fraction of frame size
    rotation_amp_deg: float = 8.0
    expression_amp: float = 0.9
    shift: tuple = (0.0, 0.0)  # extra constant translation, fraction of frame


def scripted_params(model: MorphableModel, script: MotionScript, frame_size: int):
    """FaceParams for every frame of a synthetic clip.

    The head sits mid-frame sized so the enlarged portrait crop roughly fills
    the frame; expression/pose/translation follow incommensurate sinusoids.
    """
    rng = np.random.default_rng([script.seed, 3])
    n = script.n_frames
    scale = 0.22 * frame_size / model.head_diameter() * 2.0  # head ~0.44 of frame
    theta_shape = 0.6 * rng.standard_normal(model.n_shape) / np.sqrt(model.n_shape)
    theta_tex = 0.5 * rng.standard_normal(model.n_tex) / np.sqrt(model.n_tex)
    exp_phase = rng.uniform(0, 2 * np.pi, size=model.n_exp)
    exp_freq = rng.uniform(0.5, 2.0, size=model.n_exp)
    amp = script.expression_amp / np.sqrt(model.n_exp)

    out = []
    for i in range(n):
        t = i / max(n - 1, 1)
        theta_exp = amp * np.sin(2 * np.pi * exp_freq * t + exp_phase)
        if i == 0:
            theta_exp = np.zeros(model.n_exp)  # neutral first frame
        yaw = np.deg2rad(script.rotation_amp_deg) * np.sin(2 * np.pi * 0.7 * t)
        pitch = np.deg2rad(0.6 * script.rotation_amp_deg) * np.sin(2 * np.pi * 1.1 * t + 1.0)
        rot = _yaw_pitch_rotation(yaw, pitch)
        tx = script.translation_amp * frame_size * np.sin(2 * np.pi * 0.9 * t + 0.5)
        ty = 0.6 * script.translation_amp * frame_size * np.sin(2 * np.pi * 1.3 * t + 2.0)
        center = np.array(
            [
                frame_size * (0.5 + script.shift[0]) + tx,
                frame_size * (0.42 + script.shift[1]) + ty,
                0.0,
            ]
        )
        eye_yaw = np.deg2rad(8.0) * np.sin(2 * np.pi * 1.7 * t)
        eye_pitch = np.deg2rad(5.0) * np.sin(2 * np.pi * 2.3 * t + 0.7)
        eye_rot = _yaw_pitch_rotation(eye_yaw, eye_pitch)
        params = FaceParams(
            theta_shape=theta_shape.copy(),
            theta_exp=theta_exp,
            theta_tex=theta_tex.copy(),
            scale=scale,
            translation=center / scale,
            rot_head=rot,
            rot_eye_left=eye_rot.copy(),
            rot_eye_right=eye_rot.copy(),
        )
        out.append(params)
    return out


def render_synthetic_frame(model: MorphableModel, params: FaceParams, background: np.ndarray,
                           seed: int, lighting: Lighting | None = None):
    """One toy frame: background, shoulders blob, rendered face on top.

    Returns (frame, fg_mask) as float arrays.
    """
    size = background.shape[0]
    frame = background.copy()
    fg_mask = np.zeros((size, size), dtype=bool)

    head_center = params.scale * (
        np.asarray(params.rot_head) @ np.zeros(3) + np.asarray(params.translation)
    )
    head_bottom = head_center[1] + 0.35 * params.scale * model.head_diameter()
    _draw_shoulders(frame, fg_mask, head_center[0], head_bottom, size, seed)

    render = rasterize(model, params, "texture", CropBox.full(size, size), size, lighting)
    frame[render.coverage] = render.tex_image[render.coverage]
    fg_mask |= render.coverage
    return frame, fg_mask.astype(np.float32)


def synth_dataset(
    out_dir,
    n_frames: int = 50,
    frame_size: int = 128,
    seed: int = 0,
    model: MorphableModel | None = None,
    script: MotionScript | None = None,
    model_kwargs: dict | None = None,
) -> DatasetLayout:
    """Write a complete synthetic dataset with exact labels and ground truth."""
    out_dir = Path(out_dir)
    layout = DatasetLayout(out_dir)
    if model is None:
        model = synth_toy_model(seed, **(model_kwargs or {}))
    script = script or MotionScript(n_frames=n_frames, seed=seed)
    params_list = scripted_params(model, script, frame_size)
    background = _smooth_background(frame_size, seed)

    save_model(layout.model_dir, model)
    truth_dir = out_dir / "truth"
    truth_dir.mkdir(parents=True, exist_ok=True)
    for i, params in enumerate(params_list):
        frame, fg_mask = render_synthetic_frame(model, params, background, seed)
        save_image(layout.frame_path(i), frame)
        save_image(layout.mask_path(i), fg_mask)
        write_landmarks(
            layout.landmark_path(i),
            landmark_points(model, params),
            eye_forward_points(model, params),
        )
        container.atomic_write_json(truth_dir / f"{i:06d}.json", params.to_dict())
    container.atomic_write_json(
        truth_dir / "meta.json",
        {
            "seed": seed,
            "n_frames": n_frames,
            "frame_size": frame_size,
            "script": {
                "translation_amp": script.translation_amp,
                "rotation_amp_deg": script.rotation_amp_deg,
                "expression_amp": script.expression_amp,
                "shift": list(script.shift),
            },
        },
    )
    return layout


def load_truth_params(dataset: DatasetLayout, i: int) -> FaceParams:
    path = dataset.root / "truth" / f"{i:06d}.json"
    return FaceParams.from_dict(json.loads(path.read_text()))
