import numpy as np
import pytest

from avatarkit.facemodel import Eyeball, FaceParams, MorphableModel
from avatarkit.rasterizer import (
    CropBox,
    Lighting,
    compute_crop_box,
    rasterize,
    vertex_normals,
)


def tiny_model(vertices, triangles, uvs=None):
    """Hand-built model for single-triangle style tests."""
    v = len(vertices)
    return MorphableModel(
        mean_shape=np.asarray(vertices, dtype=np.float32),
        b_shape=np.zeros((v, 3, 1), dtype=np.float32),
        b_exp=np.zeros((v, 3, 1), dtype=np.float32),
        mean_texture=np.full((v, 3), 0.5, dtype=np.float32),
        b_tex=np.zeros((v, 3, 1), dtype=np.float32),
        triangles=np.asarray(triangles, dtype=np.int32).reshape(-1, 3),
        uv_coords=np.asarray(
            uvs if uvs is not None else np.zeros((v, 2)), dtype=np.float32
        ),
        landmark_indices=np.zeros(0, dtype=np.int32),
        eye_left=Eyeball(np.zeros(0, dtype=np.int32), np.zeros(3, dtype=np.float32)),
        eye_right=Eyeball(np.zeros(0, dtype=np.int32), np.zeros(3, dtype=np.float32)),
    )


def identity_params(model):
    return FaceParams.identity(model)


class TestComputeCropBox:
    def test_direct_rule(self):
        lm = np.array([[100.0, 100.0], [200.0, 200.0], [150.0, 120.0]])
        box = compute_crop_box(lm, enlarge=1.5, image_size=(512, 512))
        assert np.allclose(box.center, [150.0, 150.0])
        assert box.size == pytest.approx(150.0)

    def test_enlarge_one_is_tight_square(self):
        lm = np.array([[60.0, 80.0], [160.0, 120.0]])
        box = compute_crop_box(lm, enlarge=1.0, image_size=(512, 512))
        assert box.size == pytest.approx(100.0)  # max(width=100, height=40)
        assert np.allclose(box.center, [110.0, 100.0])

    def test_shifted_inside_not_shrunk(self):
        lm = np.array([[5.0, 5.0], [105.0, 105.0]])
        box = compute_crop_box(lm, enlarge=1.5, image_size=(256, 256))
        assert box.size == pytest.approx(150.0)
        lo = np.asarray(box.center) - box.size / 2
        hi = np.asarray(box.center) + box.size / 2
        assert (lo >= -0.5 - 1e-9).all() and (hi <= 255.5 + 1e-9).all()

    def test_unfittable_box_centered(self):
        lm = np.array([[0.0, 0.0], [300.0, 300.0]])
        box = compute_crop_box(lm, enlarge=1.5, image_size=(256, 256))
        assert np.allclose(box.center, [128.0 - 0.5, 128.0 - 0.5])

    def test_empty_landmarks(self):
        with pytest.raises(ValueError):
            compute_crop_box(np.zeros((0, 2)), image_size=(64, 64))


class TestRasterizeSingleTriangle:
    def test_barycentric_uv_oracle(self):
        # triangle covering pixel (5, 5); weights solved independently
        verts = [[2.0, 1.0, 0.0], [9.0, 2.5, 0.0], [4.0, 9.0, 0.0]]
        uvs = [[0.1, 0.2], [0.8, 0.3], [0.3, 0.9]]
        model = tiny_model(verts, [[0, 1, 2]], uvs)
        out = rasterize(model, identity_params(model), "uv", CropBox.full(16, 16), 16)
        assert out.coverage[5, 5]

        p = np.array(verts)[:, :2]
        a = np.array([[p[1, 0] - p[0, 0], p[2, 0] - p[0, 0]],
                      [p[1, 1] - p[0, 1], p[2, 1] - p[0, 1]]])
        w12 = np.linalg.solve(a, np.array([5.0, 5.0]) - p[0])
        weights = np.array([1 - w12.sum(), w12[0], w12[1]])
        assert (weights >= 0).all()
        expected = weights @ np.array(uvs)
        assert np.abs(out.uv_image[5, 5, :2] - expected).max() <= 1e-5
        assert out.uv_image[5, 5, 2] == 0.0

    def test_empty_mesh_is_background(self):
        model = tiny_model(np.zeros((0, 3)), np.zeros((0, 3)))
        out = rasterize(model, identity_params(model), "uv", CropBox.full(8, 8), 8)
        assert not out.coverage.any()
        assert (out.uv_image == 0).all()
        assert np.isinf(out.depth).all()

    def test_zbuffer_front_wins(self):
        # two stacked triangles covering the same pixels at depths 1 and 2
        verts = [[0.0, 0.0, -1.0], [7.0, 0.0, -1.0], [0.0, 7.0, -1.0],
                 [0.0, 0.0, -2.0], [7.0, 0.0, -2.0], [0.0, 7.0, -2.0]]
        uvs = [[1.0, 1.0]] * 3 + [[0.0, 0.0]] * 3
        model = tiny_model(verts, [[0, 1, 2], [3, 4, 5]], uvs)
        out = rasterize(model, identity_params(model), "uv", CropBox.full(8, 8), 8)
        covered = out.coverage
        assert covered[1, 1]
        assert (out.depth[covered] == 1.0).all()  # depth = -z
        assert (out.uv_image[covered][:, 0] == 1.0).all()  # near triangle's uv

    def test_resolution_validation(self):
        model = tiny_model([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        with pytest.raises(ValueError):
            rasterize(model, identity_params(model), "uv", CropBox.full(8, 8), 7)
        with pytest.raises(ValueError):
            rasterize(model, identity_params(model), "nope", CropBox.full(8, 8), 8)


@pytest.fixture()
def frontal(small_model):
    params = FaceParams.identity(small_model)
    params.scale = 24.0
    params.translation = np.array([32 / 24.0, 32 / 24.0, 0.0])
    return params


class TestRasterizeToyModel:

    def test_render_invariants(self, small_model, frontal):
        out = rasterize(small_model, frontal, "uv", CropBox.full(64, 64), 64)
        cov = out.coverage
        assert cov.any() and not cov.all()
        # uv zero exactly off-coverage, in [0,1]^2 on coverage
        assert (out.uv_image[~cov] == 0).all()
        assert out.uv_image.min() >= 0 and out.uv_image.max() <= 1
        assert (out.uv_image[..., 2] == 0).all()
        # depth finite exactly where covered
        assert np.isfinite(out.depth[cov]).all()
        assert np.isinf(out.depth[~cov]).all()

    def test_lighting_bounds(self, small_model, frontal):
        lighting = Lighting(ambient=0.3, diffuse=0.7)
        out = rasterize(small_model, frontal, "texture", CropBox.full(64, 64), 64, lighting)
        peak = (lighting.ambient + lighting.diffuse) * small_model.mean_texture.max()
        assert out.tex_image.max() <= peak + 1e-6
        assert out.tex_image.min() >= 0.0

    def test_deterministic(self, small_model, frontal):
        a = rasterize(small_model, frontal, "texture", CropBox.full(64, 64), 64)
        b = rasterize(small_model, frontal, "texture", CropBox.full(64, 64), 64)
        assert np.array_equal(a.tex_image, b.tex_image)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.visibility, b.visibility)

    def test_translation_equivariance(self, small_model, frontal):
        base_box = CropBox(center=np.array([32.0, 32.0]), size=64.0, source_resolution=(128, 128))
        out0 = rasterize(small_model, frontal, "uv", base_box, 64)
        delta = (5, 3)
        shifted_box = CropBox(
            center=np.array([32.0 + delta[0], 32.0 + delta[1]]),
            size=64.0,
            source_resolution=(128, 128),
        )
        out1 = rasterize(small_model, frontal, "uv", shifted_box, 64)
        # shifting the box by +delta shifts content by -delta
        a = out0.uv_image[10:50, 10:50]
        b = out1.uv_image[10 - delta[1] : 50 - delta[1], 10 - delta[0] : 50 - delta[0]]
        assert np.array_equal(a, b)

    def test_visibility_front_facing(self, small_model, frontal):
        out = rasterize(small_model, frontal, "uv", CropBox.full(64, 64), 64)
        normals = vertex_normals(
            small_model.mean_shape.astype(np.float64), small_model.triangles
        )
        front = normals[:, 2] > 0.5
        back = normals[:, 2] < -0.5
        assert out.visibility[front].mean() > 0.9
        assert out.visibility[back].mean() < 0.05


class TestVertexNormals:
    def test_sphere_normals_point_outward(self, small_model):
        n = vertex_normals(small_model.mean_shape.astype(np.float64), small_model.triangles)
        radial = small_model.mean_shape / np.linalg.norm(small_model.mean_shape, axis=1, keepdims=True)
        cos = np.einsum("ij,ij->i", n, radial)
        assert cos.min() > 0.7  # ellipsoid normals roughly radial, always outward
        assert np.abs(np.linalg.norm(n, axis=1) - 1).max() <= 1e-9
