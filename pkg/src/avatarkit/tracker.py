"""Per-frame face parameter solves from detected landmarks.

The tracker alternates two closed-form solves: a similarity (Procrustes)
solve for rotation/translation/scale via SVD, and a damped linear
least-squares solve for shape/expression coefficient increments via a
symmetric positive-definite factorization. Texture coefficients come from a
third linear solve against colors sampled at visible vertices. All solvers
are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from . import rasterizer
from .errors import (
    DegenerateConfiguration,
    ShapeMismatchError,
    SingularSystem,
    TooFewPoints,
    TooFewVisible,
)
from .facemodel import FaceParams, MorphableModel, eye_radius


@dataclass
class LandmarkFrame:
    """Detected landmarks for one frame: (L, 3) pixel x, pixel y, relative depth."""

    points: np.ndarray
    frame_index: int = 0
    iris: np.ndarray | None = None  # (2, 3): left, right iris points


@dataclass
class TrackResult:
    params: FaceParams
    residual_rms: float  # pixels
    iterations_used: int


def solve_similarity(k_src: np.ndarray, k_tgt: np.ndarray):
    """Fit k_tgt ~= s * (R @ k_src + t); returns (R, t, s).

    R comes from the SVD of the centered cross-covariance with determinant
    sign correction, s from the centroid-normalized norm ratio, t from the
    centroids.
    """
    k_src = np.asarray(k_src, dtype=np.float64)
    k_tgt = np.asarray(k_tgt, dtype=np.float64)
    if k_src.shape != k_tgt.shape or k_src.ndim != 2 or k_src.shape[1] != 3:
        raise ShapeMismatchError(f"point sets {k_src.shape} vs {k_tgt.shape}")
    n = k_src.shape[0]
    if n < 3:
        raise TooFewPoints(f"similarity solve needs >= 3 points, got {n}")

    c_src = k_src.mean(axis=0)
    c_tgt = k_tgt.mean(axis=0)
    src = k_src - c_src
    tgt = k_tgt - c_tgt

    sv = np.linalg.svd(src, compute_uv=False)
    if sv[1] <= 1e-9 * max(1.0, sv[0]):
        raise DegenerateConfiguration("source points are collinear or coincident")

    src_norm = np.linalg.norm(src)
    tgt_norm = np.linalg.norm(tgt)
    if tgt_norm <= 1e-12 * max(1.0, src_norm):
        raise DegenerateConfiguration("target points are coincident")
    s = tgt_norm / src_norm

    h = src.T @ (tgt / s)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = c_tgt / s - rot @ c_src
    return rot, t, s


def default_damping(ata: np.ndarray) -> float:
    """lambda = 1e-3 * trace(A^T A) / N; guards rank deficiency on toy models."""
    n = ata.shape[0]
    return 1e-3 * float(np.trace(ata)) / max(n, 1)


def _damped_solve(a: np.ndarray, b: np.ndarray, damping: float | None) -> np.ndarray:
    ata = a.T @ a
    lam = default_damping(ata) if damping is None else float(damping)
    m = ata + lam * np.eye(ata.shape[0])
    try:
        factor = cho_factor(m, lower=True)
    except LinAlgError as exc:
        raise SingularSystem("damped normal matrix is not positive definite") from exc
    return cho_solve(factor, a.T @ b)


def _model_frame_landmarks(model: MorphableModel, params: FaceParams) -> np.ndarray:
    """Current landmark positions in the model frame (pose not applied)."""
    shaped = (
        model.mean_shape.astype(np.float64)
        + model.b_shape @ params.theta_shape
        + model.b_exp @ params.theta_exp
    )
    return shaped[model.landmark_indices]


def solve_coefficients(
    model: MorphableModel,
    k_tgt: np.ndarray,
    pose,
    damping: float | None = None,
    theta_shape: np.ndarray | None = None,
    theta_exp: np.ndarray | None = None,
    solve_shape: bool = True,
):
    """Coefficient increments (delta_shape, delta_exp) for fixed pose.

    Minimizes || R1 @ (K_cur + B dtheta) + t - K_tgt / s ||^2 over the
    landmark rows, through damped normal equations (A^T A + lambda I)
    factored by a symmetric decomposition. With solve_shape=False only the
    expression block is solved and delta_shape is returned as zeros.
    """
    rot, t, s = pose
    rot = np.asarray(rot, dtype=np.float64)
    theta_shape = np.zeros(model.n_shape) if theta_shape is None else theta_shape
    theta_exp = np.zeros(model.n_exp) if theta_exp is None else theta_exp
    lm = model.landmark_indices

    k_cur = (
        model.mean_shape[lm].astype(np.float64)
        + model.b_shape[lm] @ theta_shape
        + model.b_exp[lm] @ theta_exp
    )
    resid = np.asarray(k_tgt, dtype=np.float64) / s - (k_cur @ rot.T + t)

    # rotate basis rows into target space: rows for landmark l are R1 @ B[l]
    b_exp_rows = np.einsum("ij,ljk->lik", rot, model.b_exp[lm].astype(np.float64))
    blocks = [b_exp_rows.reshape(-1, model.n_exp)]
    if solve_shape:
        b_shape_rows = np.einsum("ij,ljk->lik", rot, model.b_shape[lm].astype(np.float64))
        blocks.insert(0, b_shape_rows.reshape(-1, model.n_shape))
    a = np.concatenate(blocks, axis=1)

    delta = _damped_solve(a, resid.reshape(-1), damping)
    if solve_shape:
        return delta[: model.n_shape], delta[model.n_shape :]
    return np.zeros(model.n_shape), delta


def sample_bilinear(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear image sampling with border clamping; image is (H, W[, C])."""
    h, w = image.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None] if image.ndim == 3 else x - x0
    fy = (y - y0)[..., None] if image.ndim == 3 else y - y0
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def solve_texture(
    model: MorphableModel,
    image: np.ndarray,
    params: FaceParams,
    visibility: np.ndarray,
    damping: float | None = None,
    lighting: "rasterizer.Lighting | None" = None,
):
    """Texture coefficients from colors sampled at visible projected vertices.

    The target color of a vertex is the image bilinearly sampled at its
    projected pixel position; the fit runs in lit-color space, i.e. against
    shade * (mean + B theta) with the known fixed Lambertian shade, which
    downweights grazing vertices instead of amplifying them. Vertices whose
    shade is near the ambient floor carry almost no albedo signal and are
    dropped. Needs at least Nt usable vertices.
    """
    visibility = np.asarray(visibility, dtype=bool)
    lighting = lighting or rasterizer.Lighting()

    posed = rasterizer.project(model, params)
    normals = rasterizer.vertex_normals(posed, model.triangles)
    light = np.asarray(lighting.direction, dtype=np.float64)
    light = light / max(np.linalg.norm(light), 1e-12)
    shade = lighting.ambient + lighting.diffuse * np.maximum(0.0, normals @ light)
    # drop grazing vertices: near the rim the bilinear taps straddle the
    # background, and under directional light they carry little albedo signal
    confident = (normals[:, 2] >= 0.4) & (shade >= lighting.ambient + 0.3 * lighting.diffuse)
    vis = np.where(visibility & confident)[0]
    if vis.size < model.n_tex:
        raise TooFewVisible(f"{vis.size} usable visible vertices, need >= {model.n_tex}")

    sampled = sample_bilinear(np.asarray(image, dtype=np.float64), posed[vis, 0], posed[vis, 1])
    a = (model.b_tex[vis].astype(np.float64) * shade[vis, None, None]).reshape(-1, model.n_tex)
    b = (sampled - shade[vis, None] * model.mean_texture[vis]).reshape(-1)
    return _damped_solve(a, b, damping)


def _yaw_pitch_rotation(yaw: float, pitch: float) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    return ry @ rx


def solve_eyeballs(model: MorphableModel, params: FaceParams, iris_points: np.ndarray | None):
    """Yaw/pitch eyeball rotations aligning the forward axis to the iris points.

    The observed iris point is unprojected into the model frame; the rotation
    maps the neutral forward axis (0, 0, 1) onto the pivot-to-iris direction.
    Without iris points both rotations are identity.
    """
    if iris_points is None:
        return np.eye(3), np.eye(3)
    iris_points = np.asarray(iris_points, dtype=np.float64)
    rot_head = np.asarray(params.rot_head, dtype=np.float64)
    out = []
    for eye, p in ((model.eye_left, iris_points[0]), (model.eye_right, iris_points[1])):
        if not eye.indices.size or eye_radius(model, eye) <= 0:
            out.append(np.eye(3))
            continue
        local = rot_head.T @ (p / params.scale - params.translation)
        d = local - eye.pivot
        norm = np.linalg.norm(d)
        if norm < 1e-9:
            out.append(np.eye(3))
            continue
        d = d / norm
        pitch = -np.arcsin(np.clip(d[1], -1.0, 1.0))
        yaw = np.arctan2(d[0], d[2])
        out.append(_yaw_pitch_rotation(yaw, pitch))
    return out[0], out[1]


def _landmark_residual(model, params, k_tgt) -> float:
    pred = _model_frame_landmarks(model, params)
    pred = params.scale * (pred @ np.asarray(params.rot_head).T + params.translation)
    return float(np.sqrt(np.mean(np.sum((pred - k_tgt) ** 2, axis=1))))


def track_frame(
    model: MorphableModel,
    frame: LandmarkFrame,
    prev: FaceParams | None = None,
    is_first: bool = False,
    iterations: int = 3,
    damping: float | None = None,
) -> TrackResult:
    """Alternate the similarity and coefficient solves for one frame.

    Warm-starts from ``prev``. Shape coefficients are solved only on the
    first frame; afterwards theta_shape and theta_tex stay frozen and only
    the expression block is refit. Texture is solved separately (it needs an
    image), see the pipeline module.
    """
    k_tgt = np.asarray(frame.points, dtype=np.float64)
    if k_tgt.shape != (model.n_landmarks, 3):
        raise ShapeMismatchError(
            f"landmark frame has shape {k_tgt.shape}, model expects ({model.n_landmarks}, 3)"
        )
    params = prev.copy() if prev is not None else FaceParams.identity(model)

    for _ in range(iterations):
        k_cur = _model_frame_landmarks(model, params)
        rot, t, s = solve_similarity(k_cur, k_tgt)
        params.rot_head, params.translation, params.scale = rot, t, s
        d_shape, d_exp = solve_coefficients(
            model,
            k_tgt,
            (rot, t, s),
            damping=damping,
            theta_shape=params.theta_shape,
            theta_exp=params.theta_exp,
            solve_shape=is_first,
        )
        if is_first:
            params.theta_shape = params.theta_shape + d_shape
        params.theta_exp = params.theta_exp + d_exp

    if frame.iris is not None:
        params.rot_eye_left, params.rot_eye_right = solve_eyeballs(model, params, frame.iris)

    residual = _landmark_residual(model, params, k_tgt)
    return TrackResult(params=params, residual_rms=residual, iterations_used=iterations)


def track_sequence(
    model: MorphableModel,
    frames: list[LandmarkFrame],
    iterations: int = 3,
    damping: float | None = None,
    smoothing: float = 0.0,
) -> list[TrackResult]:
    """Track a whole clip: first frame solves shape, the rest warm-start.

    ``smoothing`` optionally blends translation and scale exponentially
    (params.t = a*prev + (1-a)*new); off by default.
    """
    if not frames:
        raise ValueError("empty landmark sequence")
    results: list[TrackResult] = []
    prev: FaceParams | None = None
    for i, frame in enumerate(frames):
        res = track_frame(
            model, frame, prev=prev, is_first=(i == 0), iterations=iterations, damping=damping
        )
        if smoothing > 0.0 and prev is not None:
            res.params.translation = (
                smoothing * prev.translation + (1 - smoothing) * res.params.translation
            )
            res.params.scale = smoothing * prev.scale + (1 - smoothing) * res.params.scale
            res.residual_rms = _landmark_residual(model, res.params, frame.points)
        results.append(res)
        prev = res.params
    return results
