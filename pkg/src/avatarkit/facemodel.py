"""Linear 3D morphable face model: storage, evaluation, and a synthetic toy model.

Coordinate convention used throughout the package: x = pixel column (right),
y = pixel row (down), z toward the camera (larger z is closer). The toy head
faces +z so that camera-facing normals have positive z.

Geometry of a parameterized face:

    posed = s * (R1 @ (mean + B_shape @ th_shape + B_exp @ th_exp) + t)

with the two eyeball vertex sets rotated by R2/R3 about their pivots before
the head transform is applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import ConvexHull

from . import container
from .errors import IndexRangeError, MissingArrayError, ShapeMismatchError

# container key names for the model assets
_MODEL_KEYS = (
    "mean_shape",
    "b_shape",
    "b_exp",
    "mean_texture",
    "b_tex",
    "triangles",
    "uv_coords",
    "landmark_indices",
    "eye_left_idx",
    "eye_left_pivot",
    "eye_right_idx",
    "eye_right_pivot",
)


@dataclass
class Eyeball:
    """One eyeball: the vertex indices it owns and the pivot it rotates about."""

    indices: np.ndarray  # (k,) int32
    pivot: np.ndarray  # (3,) float32


@dataclass
class MorphableModel:
    mean_shape: np.ndarray  # (V, 3)
    b_shape: np.ndarray  # (V, 3, Ns)
    b_exp: np.ndarray  # (V, 3, Ne)
    mean_texture: np.ndarray  # (V, 3) in [0, 1]
    b_tex: np.ndarray  # (V, 3, Nt)
    triangles: np.ndarray  # (F, 3) int32
    uv_coords: np.ndarray  # (V, 2) in [0, 1]
    landmark_indices: np.ndarray  # (L,) int32
    eye_left: Eyeball
    eye_right: Eyeball

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def n_shape(self) -> int:
        return self.b_shape.shape[2]

    @property
    def n_exp(self) -> int:
        return self.b_exp.shape[2]

    @property
    def n_tex(self) -> int:
        return self.b_tex.shape[2]

    @property
    def n_landmarks(self) -> int:
        return self.landmark_indices.shape[0]

    def head_diameter(self) -> float:
        ext = self.mean_shape.max(axis=0) - self.mean_shape.min(axis=0)
        return float(np.max(ext))

    def validate(self) -> None:
        v = self.n_vertices
        if self.mean_shape.shape != (v, 3):
            raise ShapeMismatchError(f"mean_shape has shape {self.mean_shape.shape}")
        for name, arr, cols in (
            ("b_shape", self.b_shape, 3),
            ("b_exp", self.b_exp, 3),
            ("b_tex", self.b_tex, 3),
        ):
            if arr.ndim != 3 or arr.shape[0] != v or arr.shape[1] != cols:
                raise ShapeMismatchError(f"{name} has shape {arr.shape}, expected ({v}, {cols}, N)")
        if self.mean_texture.shape != (v, 3):
            raise ShapeMismatchError(f"mean_texture has shape {self.mean_texture.shape}")
        if self.uv_coords.shape != (v, 2):
            raise ShapeMismatchError(f"uv_coords has shape {self.uv_coords.shape}")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ShapeMismatchError(f"triangles has shape {self.triangles.shape}")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= v):
            raise IndexRangeError("triangle index out of range")
        if self.landmark_indices.size and (
            self.landmark_indices.min() < 0 or self.landmark_indices.max() >= v
        ):
            raise IndexRangeError("landmark index out of range")
        for side, eye in (("left", self.eye_left), ("right", self.eye_right)):
            if eye.indices.size and (eye.indices.min() < 0 or eye.indices.max() >= v):
                raise IndexRangeError(f"{side} eyeball index out of range")
            if eye.pivot.shape != (3,):
                raise ShapeMismatchError(f"{side} eyeball pivot has shape {eye.pivot.shape}")
        if np.intersect1d(self.eye_left.indices, self.eye_right.indices).size:
            raise IndexRangeError("eyeball vertex sets overlap")
        if self.uv_coords.size and (self.uv_coords.min() < -1e-6 or self.uv_coords.max() > 1 + 1e-6):
            raise ShapeMismatchError("uv_coords outside [0, 1]")


@dataclass
class FaceParams:
    """Per-frame tracked state for one face."""

    theta_shape: np.ndarray
    theta_exp: np.ndarray
    theta_tex: np.ndarray
    scale: float = 1.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rot_head: np.ndarray = field(default_factory=lambda: np.eye(3))
    rot_eye_left: np.ndarray = field(default_factory=lambda: np.eye(3))
    rot_eye_right: np.ndarray = field(default_factory=lambda: np.eye(3))

    @classmethod
    def identity(cls, model: MorphableModel) -> "FaceParams":
        return cls(
            theta_shape=np.zeros(model.n_shape),
            theta_exp=np.zeros(model.n_exp),
            theta_tex=np.zeros(model.n_tex),
        )

    def copy(self) -> "FaceParams":
        return replace(
            self,
            theta_shape=self.theta_shape.copy(),
            theta_exp=self.theta_exp.copy(),
            theta_tex=self.theta_tex.copy(),
            translation=self.translation.copy(),
            rot_head=self.rot_head.copy(),
            rot_eye_left=self.rot_eye_left.copy(),
            rot_eye_right=self.rot_eye_right.copy(),
        )

    def validate(self, tol: float = 1e-5) -> None:
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        for name, rot in (
            ("rot_head", self.rot_head),
            ("rot_eye_left", self.rot_eye_left),
            ("rot_eye_right", self.rot_eye_right),
        ):
            if rot.shape != (3, 3):
                raise ShapeMismatchError(f"{name} has shape {rot.shape}")
            if np.abs(rot @ rot.T - np.eye(3)).max() > tol or abs(np.linalg.det(rot) - 1) > tol:
                raise ValueError(f"{name} is not a proper rotation")

    def to_dict(self) -> dict:
        return {
            "theta_shape": self.theta_shape.tolist(),
            "theta_exp": self.theta_exp.tolist(),
            "theta_tex": self.theta_tex.tolist(),
            "scale": float(self.scale),
            "translation": self.translation.tolist(),
            "rot_head": np.asarray(self.rot_head).reshape(-1).tolist(),
            "rot_eye_left": np.asarray(self.rot_eye_left).reshape(-1).tolist(),
            "rot_eye_right": np.asarray(self.rot_eye_right).reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FaceParams":
        return cls(
            theta_shape=np.asarray(d["theta_shape"], dtype=np.float64),
            theta_exp=np.asarray(d["theta_exp"], dtype=np.float64),
            theta_tex=np.asarray(d["theta_tex"], dtype=np.float64),
            scale=float(d["scale"]),
            translation=np.asarray(d["translation"], dtype=np.float64),
            rot_head=np.asarray(d["rot_head"], dtype=np.float64).reshape(3, 3),
            rot_eye_left=np.asarray(d["rot_eye_left"], dtype=np.float64).reshape(3, 3),
            rot_eye_right=np.asarray(d["rot_eye_right"], dtype=np.float64).reshape(3, 3),
        )


def save_model(path, model: MorphableModel) -> None:
    """Write a model to an array container directory."""
    arrays = {
        "mean_shape": model.mean_shape.astype(np.float32),
        "b_shape": model.b_shape.astype(np.float32),
        "b_exp": model.b_exp.astype(np.float32),
        "mean_texture": model.mean_texture.astype(np.float32),
        "b_tex": model.b_tex.astype(np.float32),
        "triangles": model.triangles.astype(np.int32),
        "uv_coords": model.uv_coords.astype(np.float32),
        "landmark_indices": model.landmark_indices.astype(np.int32),
        "eye_left_idx": model.eye_left.indices.astype(np.int32),
        "eye_left_pivot": model.eye_left.pivot.astype(np.float32),
        "eye_right_idx": model.eye_right.indices.astype(np.int32),
        "eye_right_pivot": model.eye_right.pivot.astype(np.float32),
    }
    container.save_container(path, arrays)


def load_model(path) -> MorphableModel:
    """Load and validate a model container; raises distinct errors per defect."""
    manifest = container.load_manifest(path)
    arrays = {}
    for key in _MODEL_KEYS:
        if key not in manifest["arrays"]:
            raise MissingArrayError(f"model container {path} lacks array '{key}'")
        arrays[key] = container.load_array(path, key, manifest)
    model = MorphableModel(
        mean_shape=arrays["mean_shape"],
        b_shape=arrays["b_shape"],
        b_exp=arrays["b_exp"],
        mean_texture=arrays["mean_texture"],
        b_tex=arrays["b_tex"],
        triangles=arrays["triangles"],
        uv_coords=arrays["uv_coords"],
        landmark_indices=arrays["landmark_indices"],
        eye_left=Eyeball(arrays["eye_left_idx"], arrays["eye_left_pivot"]),
        eye_right=Eyeball(arrays["eye_right_idx"], arrays["eye_right_pivot"]),
    )
    model.validate()
    return model


def evaluate_geometry(model: MorphableModel, params: FaceParams) -> np.ndarray:
    """Pose the model: returns (V, 3) vertices in pixel-comparable units.

    Eyeball vertices rotate about their pivots first, then the head similarity
    transform s * (R1 @ x + t) is applied to everything.
    """
    shaped = (
        model.mean_shape.astype(np.float64)
        + model.b_shape @ params.theta_shape
        + model.b_exp @ params.theta_exp
    )
    for eye, rot in (
        (model.eye_left, params.rot_eye_left),
        (model.eye_right, params.rot_eye_right),
    ):
        rot = np.asarray(rot, dtype=np.float64)
        # identity rotations are skipped so the neutral pose is bit-exact
        if eye.indices.size and not np.array_equal(rot, np.eye(3)):
            local = shaped[eye.indices] - eye.pivot
            shaped[eye.indices] = local @ rot.T + eye.pivot
    posed = shaped @ np.asarray(params.rot_head, dtype=np.float64).T + params.translation
    return params.scale * posed


def evaluate_texture(model: MorphableModel, theta_tex: np.ndarray) -> np.ndarray:
    """Per-vertex albedo: mean texture plus basis offset, clamped to [0, 1]."""
    theta_tex = np.asarray(theta_tex, dtype=np.float64)
    if theta_tex.shape != (model.n_tex,):
        raise ShapeMismatchError(
            f"theta_tex has shape {theta_tex.shape}, model expects ({model.n_tex},)"
        )
    tex = model.mean_texture.astype(np.float64) + model.b_tex @ theta_tex
    return np.clip(tex, 0.0, 1.0)


def landmark_points(model: MorphableModel, params: FaceParams) -> np.ndarray:
    """The (L, 3) landmark subset of the posed geometry."""
    return evaluate_geometry(model, params)[model.landmark_indices]


def eye_forward_points(model: MorphableModel, params: FaceParams) -> np.ndarray:
    """Posed positions of the two iris reference points (2, 3), left then right.

    The reference point of an eye is pivot + r * (0, 0, 1) in the rest model,
    with r the mean vertex distance from the pivot; it follows R2/R3 and the
    head transform like any eye vertex would.
    """
    out = np.zeros((2, 3))
    rot_head = np.asarray(params.rot_head, dtype=np.float64)
    for i, (eye, rot) in enumerate(
        ((model.eye_left, params.rot_eye_left), (model.eye_right, params.rot_eye_right))
    ):
        radius = eye_radius(model, eye)
        rest = eye.pivot + radius * np.array([0.0, 0.0, 1.0])
        local = np.asarray(rot, dtype=np.float64) @ (rest - eye.pivot) + eye.pivot
        out[i] = params.scale * (rot_head @ local + params.translation)
    return out


def eye_radius(model: MorphableModel, eye: Eyeball) -> float:
    if not eye.indices.size:
        return 0.0
    return float(np.linalg.norm(model.mean_shape[eye.indices] - eye.pivot, axis=1).mean())


def _fibonacci_sphere(n: int) -> np.ndarray:
    """Deterministic, nearly uniform unit-sphere point set."""
    i = np.arange(n, dtype=np.float64)
    golden = (1 + np.sqrt(5.0)) / 2
    z = 1 - 2 * (i + 0.5) / n
    theta = 2 * np.pi * i / golden
    r = np.sqrt(np.maximum(0.0, 1 - z * z))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _smooth_fields(rng: np.random.Generator, points: np.ndarray, n_fields: int, n_anchors: int = 12,
                   width: float = 0.8) -> np.ndarray:
    """Random smooth (V, 3, n_fields) deformation fields from RBF mixtures."""
    v = points.shape[0]
    fields = np.zeros((v, 3, n_fields))
    for k in range(n_fields):
        anchors = points[rng.integers(0, v, size=n_anchors)]
        weights = rng.normal(size=(n_anchors, 3))
        d2 = ((points[:, None, :] - anchors[None, :, :]) ** 2).sum(axis=2)
        fields[:, :, k] = np.exp(-d2 / (2 * width**2)) @ weights
    return fields


def _similarity_fields(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    """The 7 infinitesimal similarity modes (V, 3, 7): translate/rotate/scale."""
    v = points.shape[0]
    rel = points - center
    modes = np.zeros((v, 3, 7))
    for axis in range(3):
        modes[:, axis, axis] = 1.0
    gen = [
        np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float),
        np.array([[0, 0, 1], [0, 0, 0], [-1, 0, 0]], dtype=float),
        np.array([[0, -1, 0], [1, 0, 0], [0, 0, 0]], dtype=float),
    ]
    for i, g in enumerate(gen):
        modes[:, :, 3 + i] = rel @ g.T
    modes[:, :, 6] = rel
    return modes


def _condition_fields(fields: np.ndarray, points: np.ndarray, landmark_idx: np.ndarray) -> np.ndarray:
    """Make the bases behave like statistical face bases on the landmarks.

    Two linear clean-ups: (1) subtract global similarity fields so the
    landmark rows carry no net translation/rotation/scale (a tracker's pose
    solve would otherwise fight the coefficients for them); (2) mix the
    bases so their landmark-row matrix has orthonormal columns, keeping the
    coefficient solve well conditioned. Both operations preserve smoothness.
    """
    lm = landmark_idx
    center = points[lm].mean(axis=0)
    rigid = _similarity_fields(points, center)
    m = rigid[lm].reshape(-1, 7)
    for k in range(fields.shape[2]):
        alpha, *_ = np.linalg.lstsq(m, fields[lm, :, k].reshape(-1), rcond=None)
        fields[:, :, k] -= rigid @ alpha
    n = fields.shape[2]
    a = fields[lm].reshape(-1, n)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    mix = vt.T @ np.diag(1.0 / np.maximum(s, 1e-12))
    return (fields.reshape(-1, n) @ mix).reshape(fields.shape)


def _farthest_point_sample(points: np.ndarray, candidates: np.ndarray, k: int,
                           start: int = 0) -> np.ndarray:
    """Pick k spread-out indices from ``candidates`` by farthest-point sampling."""
    chosen = [candidates[start % len(candidates)]]
    dist = np.linalg.norm(points[candidates] - points[chosen[0]], axis=1)
    for _ in range(k - 1):
        nxt = candidates[int(np.argmax(dist))]
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points[candidates] - points[nxt], axis=1))
    return np.asarray(chosen, dtype=np.int32)


def synth_toy_model(seed: int, v: int = 502, n_shape: int = 20, n_exp: int = 10,
                    n_tex: int = 10, n_landmarks: int = 68) -> MorphableModel:
    """Generate a deterministic toy head model with V vertices.

    The mean shape is a head-like ellipsoid (Fibonacci sphere triangulated by
    its convex hull, anisotropically scaled). Bases are smooth random fields
    scaled so a unit-norm coefficient vector displaces any vertex by at most
    5% of the head diameter. Eye patches are rigid: their basis rows are
    zeroed so eyeball rotation composes cleanly with expression.
    """
    if v < 4:
        raise ValueError(f"need at least 4 vertices, got {v}")
    if n_landmarks > v:
        raise ValueError(f"landmark count {n_landmarks} exceeds vertex count {v}")
    rng = np.random.default_rng(seed)

    sphere = _fibonacci_sphere(v)
    hull = ConvexHull(sphere)
    triangles = hull.simplices.astype(np.int32)

    # head-like ellipsoid, unit-ish scale; y is down, z toward the camera
    radii = np.array([0.80, 1.00, 0.90])
    mean_shape = sphere * radii
    diameter = 2.0 * radii.max()

    # UV atlas: plain spherical unwrap of the unit sphere
    u = np.arctan2(sphere[:, 1], sphere[:, 0]) / (2 * np.pi) + 0.5
    vv = np.arccos(np.clip(sphere[:, 2], -1, 1)) / np.pi
    uv_coords = np.clip(np.stack([u, vv], axis=1), 0.0, 1.0)

    # eye patches: camera-facing (+z), above center (y < 0), left/right in x
    eyes = []
    for direction in (np.array([-0.38, -0.30, 0.88]), np.array([0.38, -0.30, 0.88])):
        direction = direction / np.linalg.norm(direction)
        cosang = sphere @ direction
        idx = np.where(cosang > np.cos(0.22))[0].astype(np.int32)
        center = mean_shape[idx].mean(axis=0) if idx.size else direction * radii
        pivot = center * 0.88  # slightly inside the surface
        eyes.append(Eyeball(indices=idx, pivot=pivot.astype(np.float64)))
    eye_left, eye_right = eyes
    eye_idx = np.concatenate([eye_left.indices, eye_right.indices])

    # landmarks: spread over the camera-facing half, away from the eyes
    front = np.where(sphere[:, 2] > 0.05)[0]
    front = np.setdiff1d(front, eye_idx)
    if front.size < n_landmarks:
        front = np.setdiff1d(np.arange(v), eye_idx)
    landmark_indices = _farthest_point_sample(mean_shape, front, n_landmarks)

    # shape and expression bases are conditioned jointly: the first-frame
    # solve stacks them, so the combined landmark-row matrix must be sane
    fields = _smooth_fields(rng, mean_shape, n_shape + n_exp)
    fields[eye_idx] = 0.0  # eyes stay rigid; they articulate via R2/R3
    fields = _condition_fields(fields, mean_shape, landmark_indices)
    fields[eye_idx] = 0.0
    # single scale so any unit-norm coefficient vector moves a vertex by
    # <= 5% of the head diameter (see module tests)
    cap = 0.05 * diameter / max(1.0, np.sqrt(n_shape + n_exp))
    top = np.linalg.norm(fields, axis=1).max()
    fields = fields * (cap / max(top, 1e-12))
    b_shape = fields[:, :, :n_shape]
    b_exp = fields[:, :, n_shape:]

    # smooth skin-like texture plus smooth color bases; texture bases are
    # orthonormalized so the visible-subset solve stays well conditioned
    base = np.array([0.68, 0.55, 0.45])
    wobble = _smooth_fields(rng, mean_shape, 1)[:, :, 0]
    # headroom on both ends keeps basis offsets inside [0, 1] (no clamping),
    # so the linear texture solve sees the model it assumes
    mean_texture = np.clip(base + 0.2 * wobble / max(np.abs(wobble).max(), 1e-9), 0.2, 0.82)
    b_tex = _smooth_fields(rng, mean_shape, n_tex)
    flat = b_tex.reshape(-1, n_tex)
    _, sv, vt = np.linalg.svd(flat, full_matrices=False)
    b_tex = (flat @ vt.T @ np.diag(1.0 / np.maximum(sv, 1e-12))).reshape(b_tex.shape)
    b_tex = 0.10 * b_tex / max(np.abs(b_tex).max(), 1e-12)

    model = MorphableModel(
        mean_shape=mean_shape.astype(np.float32),
        b_shape=b_shape.astype(np.float32),
        b_exp=b_exp.astype(np.float32),
        mean_texture=mean_texture.astype(np.float32),
        b_tex=b_tex.astype(np.float32),
        triangles=triangles,
        uv_coords=uv_coords.astype(np.float32),
        landmark_indices=landmark_indices,
        eye_left=Eyeball(eye_left.indices, eye_left.pivot.astype(np.float32)),
        eye_right=Eyeball(eye_right.indices, eye_right.pivot.astype(np.float32)),
    )
    model.validate()
    return model
