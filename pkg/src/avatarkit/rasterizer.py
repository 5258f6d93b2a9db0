"""Software triangle rasterizer for the two conditioning images.

Projection is orthographic: posed vertices already live in source pixel
coordinates (x column, y row, z toward the camera), and the crop box maps
source pixels to output pixels. Depth is stored as -z so that smaller depth
means closer to the camera; background pixels hold +inf.

UV mode writes interpolated texture coordinates into red/green (blue stays
0); texture mode writes per-vertex albedo shaded by a fixed Lambertian light
and interpolated across each triangle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .facemodel import FaceParams, MorphableModel, evaluate_geometry, evaluate_texture


@dataclass
class Lighting:
    """Fixed lighting for the texture rendering; direction points at the camera."""

    direction: tuple = (0.0, 0.0, 1.0)
    ambient: float = 0.3
    diffuse: float = 0.7


@dataclass
class CropBox:
    """Square crop window in source pixel coordinates."""

    center: np.ndarray  # (2,) pixels, (x, y)
    size: float  # pixels, square side
    source_resolution: tuple  # (width, height)

    @classmethod
    def full(cls, width: int, height: int) -> "CropBox":
        """Box that maps output pixels 1:1 onto source pixels (square input)."""
        size = float(max(width, height))
        return cls(
            center=np.array([size / 2 - 0.5, size / 2 - 0.5]),
            size=size,
            source_resolution=(width, height),
        )

    def to_dict(self) -> dict:
        return {
            "center": np.asarray(self.center, dtype=float).tolist(),
            "size": float(self.size),
            "source_resolution": [int(v) for v in self.source_resolution],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CropBox":
        return cls(
            center=np.asarray(d["center"], dtype=np.float64),
            size=float(d["size"]),
            source_resolution=tuple(int(v) for v in d["source_resolution"]),
        )


@dataclass
class RenderOutput:
    uv_image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    tex_image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W) float32, +inf background
    coverage: np.ndarray  # (H, W) bool
    crop_box: CropBox
    visibility: np.ndarray  # (V,) bool, vertex wins the depth test at its pixel


def compute_crop_box(landmarks: np.ndarray, enlarge: float = 1.5, image_size=(512, 512)) -> CropBox:
    """Square box around the landmark bbox, enlarged and shifted to fit.

    Side length is enlarge * max(bbox width, height). When the box pokes past
    the border it is shifted (never shrunk) back inside; if it cannot fit at
    all it is centered on the image.
    """
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.size == 0:
        raise ValueError("no landmarks to crop around")
    width, height = int(image_size[0]), int(image_size[1])
    lo = landmarks[:, :2].min(axis=0)
    hi = landmarks[:, :2].max(axis=0)
    center = (lo + hi) / 2
    size = float(enlarge * max(hi[0] - lo[0], hi[1] - lo[1]))
    size = max(size, 1.0)

    out = center.copy()
    for axis, dim in ((0, width), (1, height)):
        if size <= dim:
            out[axis] = min(max(out[axis], size / 2 - 0.5), dim - size / 2 - 0.5)
        else:
            out[axis] = dim / 2 - 0.5
    return CropBox(center=out, size=size, source_resolution=(width, height))


def project(model: MorphableModel, params: FaceParams) -> np.ndarray:
    """Posed vertices in source pixel coordinates (orthographic, identity)."""
    return evaluate_geometry(model, params)


def face_normals_outward(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Unnormalized face normals oriented away from the mesh centroid.

    Winding-independent orientation; fine for the closed, convex-ish toy
    heads this package renders. Lengths are proportional to face area.
    """
    v0 = vertices[triangles[:, 0]]
    v1 = vertices[triangles[:, 1]]
    v2 = vertices[triangles[:, 2]]
    n = np.cross(v1 - v0, v2 - v0)
    centroid = vertices.mean(axis=0)
    face_center = (v0 + v1 + v2) / 3
    sign = np.sign(np.einsum("ij,ij->i", n, face_center - centroid))
    sign[sign == 0] = 1.0
    return n * sign[:, None]


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals (outward-oriented), unit length."""
    normals = np.zeros_like(vertices, dtype=np.float64)
    if triangles.size:
        fn = face_normals_outward(vertices, triangles)
        for k in range(3):
            np.add.at(normals, triangles[:, k], fn)
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.maximum(lengths, 1e-12)


def vertex_shades(vertices: np.ndarray, triangles: np.ndarray, lighting: Lighting) -> np.ndarray:
    """Per-vertex Lambertian shade factor: ambient + diffuse * max(0, n.l)."""
    n = vertex_normals(vertices, triangles)
    l = np.asarray(lighting.direction, dtype=np.float64)
    l = l / max(np.linalg.norm(l), 1e-12)
    return lighting.ambient + lighting.diffuse * np.maximum(0.0, n @ l)


def _to_crop_pixels(xy: np.ndarray, crop_box: CropBox, resolution: int) -> np.ndarray:
    x0 = np.asarray(crop_box.center, dtype=np.float64) - crop_box.size / 2
    return (xy - x0) * (resolution / crop_box.size) - 0.5


def rasterize(
    model: MorphableModel,
    params: FaceParams,
    mode: str,
    crop_box: CropBox,
    resolution: int,
    lighting: Lighting | None = None,
) -> RenderOutput:
    """Render the posed model into the crop box at a square resolution.

    mode "uv" interpolates the UV atlas into red/green; mode "texture"
    interpolates lit per-vertex albedo. Front-most triangle wins per pixel
    (strictly smaller depth; ties keep the first writer, so output is
    deterministic for a fixed triangle order).
    """
    if mode not in ("uv", "texture"):
        raise ValueError(f"unknown render mode {mode!r}")
    if resolution <= 0 or resolution % 2:
        raise ValueError(f"resolution must be a positive multiple of 2, got {resolution}")
    lighting = lighting or Lighting()
    res = int(resolution)

    uv_image = np.zeros((res, res, 3), dtype=np.float64)
    tex_image = np.zeros((res, res, 3), dtype=np.float64)
    depth = np.full((res, res), np.inf, dtype=np.float64)

    posed = project(model, params)
    n_vertices = posed.shape[0]
    visibility = np.zeros(n_vertices, dtype=bool)
    if n_vertices == 0 or model.triangles.size == 0:
        return RenderOutput(
            uv_image.astype(np.float32),
            tex_image.astype(np.float32),
            depth.astype(np.float32),
            np.zeros((res, res), dtype=bool),
            crop_box,
            visibility,
        )

    pix = _to_crop_pixels(posed[:, :2], crop_box, res)
    vert_depth = -posed[:, 2]

    if mode == "uv":
        attrs = np.concatenate([model.uv_coords.astype(np.float64), np.zeros((n_vertices, 1))], axis=1)
    else:
        albedo = evaluate_texture(model, params.theta_tex)
        shade = vertex_shades(posed, model.triangles, lighting)
        attrs = np.clip(albedo * shade[:, None], 0.0, 1.0)

    image = uv_image if mode == "uv" else tex_image
    tris = model.triangles
    for tri in tris:
        p = pix[tri]  # (3, 2)
        xmin = max(int(np.ceil(p[:, 0].min())), 0)
        xmax = min(int(np.floor(p[:, 0].max())), res - 1)
        ymin = max(int(np.ceil(p[:, 1].min())), 0)
        ymax = min(int(np.floor(p[:, 1].max())), res - 1)
        if xmin > xmax or ymin > ymax:
            continue
        area = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1])
        if abs(area) < 1e-12:
            continue
        xs = np.arange(xmin, xmax + 1)
        ys = np.arange(ymin, ymax + 1)
        gx, gy = np.meshgrid(xs, ys)
        w0 = (p[2, 0] - p[1, 0]) * (gy - p[1, 1]) - (p[2, 1] - p[1, 1]) * (gx - p[1, 0])
        w1 = (p[0, 0] - p[2, 0]) * (gy - p[2, 1]) - (p[0, 1] - p[2, 1]) * (gx - p[2, 0])
        w2 = (p[1, 0] - p[0, 0]) * (gy - p[0, 1]) - (p[1, 1] - p[0, 1]) * (gx - p[0, 0])
        if area > 0:
            inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        else:
            inside = (w0 <= 0) & (w1 <= 0) & (w2 <= 0)
        if not inside.any():
            continue
        b0 = w0[inside] / area
        b1 = w1[inside] / area
        b2 = w2[inside] / area
        d = -(b0 * posed[tri[0], 2] + b1 * posed[tri[1], 2] + b2 * posed[tri[2], 2])
        iy = gy[inside]
        ix = gx[inside]
        closer = d < depth[iy, ix]
        if not closer.any():
            continue
        iy, ix, d = iy[closer], ix[closer], d[closer]
        vals = (
            b0[closer, None] * attrs[tri[0]]
            + b1[closer, None] * attrs[tri[1]]
            + b2[closer, None] * attrs[tri[2]]
        )
        depth[iy, ix] = d
        image[iy, ix] = vals

    coverage = np.isfinite(depth)
    if mode == "uv":
        uv_image = np.clip(uv_image, 0.0, 1.0)
        uv_image[~coverage] = 0.0

    # vertex visibility: the vertex survives the depth test at its own pixel.
    # The buffer holds pixel-center depths, which differ from the vertex depth
    # by surface slope over <= half a pixel; 5% of the depth extent clears
    # that while staying far below the front-to-back surface separation.
    vx = np.round(pix[:, 0]).astype(int)
    vy = np.round(pix[:, 1]).astype(int)
    in_bounds = (vx >= 0) & (vx < res) & (vy >= 0) & (vy < res)
    finite = vert_depth[np.isfinite(vert_depth)]
    extent = float(finite.max() - finite.min()) if finite.size else 1.0
    eps = 0.05 * max(extent, 1e-6)
    idx = np.where(in_bounds)[0]
    visibility[idx] = coverage[vy[idx], vx[idx]] & (vert_depth[idx] <= depth[vy[idx], vx[idx]] + eps)

    return RenderOutput(
        uv_image=uv_image.astype(np.float32),
        tex_image=np.clip(tex_image, 0.0, 1.0).astype(np.float32),
        depth=depth.astype(np.float32),
        coverage=coverage,
        crop_box=crop_box,
        visibility=visibility,
    )
