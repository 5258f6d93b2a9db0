import numpy as np
import pytest
import torch

from avatarkit.composer import (
    combine,
    compose_frame,
    map_noise_via_uv,
    predict_mask,
    render_final_image,
    sample_neural_texture,
)
from avatarkit.errors import ShapeMismatchError
from avatarkit.facemodel import FaceParams
from avatarkit.networks import (
    MaskHead,
    NetworkConfig,
    build_networks,
    identity_code,
    temporal_code,
)
from avatarkit.rasterizer import CropBox, rasterize
from avatarkit.windowing import SampleWindow
from util import check_gradients


@pytest.fixture()
def uv_rendering(small_model):
    params = FaceParams.identity(small_model)
    params.scale = 24.0
    params.translation = np.array([32 / 24.0, 32 / 24.0, 0.0])
    out = rasterize(small_model, params, "uv", CropBox.full(64, 64), 64)
    return torch.from_numpy(out.uv_image).permute(2, 0, 1)[None].float()


class TestSampleNeuralTexture:
    def test_uv_ramp_oracle(self, uv_rendering):
        # canvas channel0 = u ramp, channel1 = v ramp: sampling must return
        # the uv rendering's own red/green values
        t = 32
        ramp = torch.zeros(1, 2, t, t)
        ramp[0, 0] = torch.linspace(0, 1, t)[None, :].expand(t, t)
        ramp[0, 1] = torch.linspace(0, 1, t)[:, None].expand(t, t)
        out = sample_neural_texture(ramp, uv_rendering)
        face = (uv_rendering[:, :2].amax(dim=1, keepdim=True) > 0).float()
        assert ((out[:, 0:1] - uv_rendering[:, 0:1]) * face).abs().max().item() <= 1e-3
        assert ((out[:, 1:2] - uv_rendering[:, 1:2]) * face).abs().max().item() <= 1e-3

    def test_constant_canvas(self, uv_rendering):
        canvas = torch.full((1, 3, 16, 16), 0.7)
        out = sample_neural_texture(canvas, uv_rendering)
        face = uv_rendering[:, :2].amax(dim=1, keepdim=True) > 0
        assert torch.allclose(out[face.expand_as(out)], torch.tensor(0.7))
        assert (out[~face.expand_as(out)] == 0).all()

    def test_all_background(self):
        canvas = torch.rand(1, 4, 8, 8)
        uv = torch.zeros(1, 3, 16, 16)
        out = sample_neural_texture(canvas, uv)
        assert (out == 0).all()

    def test_gradient_wrt_canvas(self):
        torch.manual_seed(0)
        canvas = torch.randn(1, 2, 5, 5, dtype=torch.float64, requires_grad=True)
        uv = torch.rand(1, 3, 4, 4, dtype=torch.float64) * 0.9 + 0.05
        uv[:, 2] = 0
        probe = torch.randn(1, 2, 4, 4, dtype=torch.float64)

        def loss():
            return (sample_neural_texture(canvas, uv) * probe).sum()

        check_gradients(loss, [canvas], rtol=1e-3)


class TestMapNoise:
    def test_fully_background_returns_bg_noise(self):
        torch.manual_seed(0)
        canvas = torch.randn(1, 1, 8, 8)
        bg = torch.randn(1, 1, 16, 16)
        uv = torch.zeros(1, 3, 16, 16)
        out = map_noise_via_uv(canvas, uv, bg)
        assert torch.equal(out, bg)

    def test_constant_canvas_fills_face(self, uv_rendering):
        canvas = torch.full((1, 1, 8, 8), 2.5)
        out = map_noise_via_uv(canvas, uv_rendering, torch.zeros(1, 1, 64, 64))
        face = uv_rendering[:, :2].amax(dim=1, keepdim=True) > 0
        assert torch.allclose(out[face], torch.tensor(2.5))
        assert (out[~face] == 0).all()

    def test_noise_sticks_to_uv_across_poses(self, small_model):
        # a smooth noise canvas sampled through two head poses agrees at
        # matching uv locations
        coarse = torch.randn(1, 1, 4, 4, generator=torch.Generator().manual_seed(1))
        canvas = torch.nn.functional.interpolate(
            coarse, size=(64, 64), mode="bilinear", align_corners=True
        )

        def screen_noise(yaw):
            params = FaceParams.identity(small_model)
            params.scale = 24.0
            params.translation = np.array([32 / 24.0, 32 / 24.0, 0.0])
            c, s = np.cos(yaw), np.sin(yaw)
            params.rot_head = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
            render = rasterize(small_model, params, "uv", CropBox.full(64, 64), 64)
            uv = torch.from_numpy(render.uv_image).permute(2, 0, 1)[None].float()
            return map_noise_via_uv(canvas, uv), render

        noise_a, render_a = screen_noise(0.0)
        noise_b, render_b = screen_noise(0.25)
        uv_a = render_a.uv_image[render_a.coverage][:, :2]
        val_a = noise_a[0, 0].numpy()[render_a.coverage]
        uv_b = render_b.uv_image[render_b.coverage][:, :2]
        val_b = noise_b[0, 0].numpy()[render_b.coverage]
        # nearest-uv matching; the canvas is smooth so nearby uv -> nearby value
        from scipy.spatial import cKDTree

        tree = cKDTree(uv_b)
        dist, idx = tree.query(uv_a)
        close = dist < 2e-3
        assert close.sum() > 50
        assert np.abs(val_a[close] - val_b[idx[close]]).max() <= 1e-3 + 5.0 * dist[close].max()


class TestCombine:
    def test_mask_one_is_face_plus_fg(self, rng):
        face, fg, bg = (torch.randn(1, 4, 8, 8) for _ in range(3))
        out = combine(face, fg, bg, torch.ones(1, 1, 8, 8))
        assert torch.equal(out, face + fg)

    def test_mask_zero_is_background(self):
        face, fg, bg = (torch.randn(1, 4, 8, 8) for _ in range(3))
        out = combine(face, fg, bg, torch.zeros(1, 1, 8, 8))
        assert torch.equal(out, bg)

    def test_mask_half_is_mean(self):
        face, fg, bg = (torch.randn(1, 4, 8, 8) for _ in range(3))
        out = combine(face, fg, bg, torch.full((1, 1, 8, 8), 0.5))
        assert torch.allclose(out, 0.5 * (face + fg) + 0.5 * bg)

    def test_affine_superposition(self):
        torch.manual_seed(0)
        mask = torch.rand(1, 1, 8, 8)
        face1, face2, fg, bg = (torch.randn(1, 4, 8, 8) for _ in range(4))
        a, b = 0.3, 1.9
        lhs = combine(a * face1 + b * face2, fg, bg, mask)
        rhs = a * combine(face1, fg, bg, mask) + b * combine(face2, fg, bg, mask) \
            - (a + b - 1) * combine(torch.zeros_like(fg), fg, bg, mask)
        assert (lhs - rhs).abs().max().item() <= 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            combine(torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 8, 8),
                    torch.zeros(1, 4, 4, 4), torch.ones(1, 1, 8, 8))


class TestPredictMask:
    def test_bounded_open_interval(self):
        torch.manual_seed(0)
        head = MaskHead(4)
        out = predict_mask(torch.randn(2, 4, 8, 8) * 50, torch.randn(2, 4, 8, 8) * 50, head)
        assert out.min().item() > 0.0 and out.max().item() < 1.0

    def test_swapping_inputs_changes_output(self):
        torch.manual_seed(1)
        head = MaskHead(4)
        fg = torch.randn(1, 4, 8, 8)
        bg = torch.randn(1, 4, 8, 8)
        assert (predict_mask(fg, bg, head) - predict_mask(bg, fg, head)).abs().max() > 0


def _frame_inputs(cfg, seed=0):
    g = torch.Generator().manual_seed(seed)
    f, w = cfg.frame_size, cfg.window_size
    uv_win = torch.rand(2, 3, w, w, generator=g)
    tex_pad = torch.rand(2, 3, f, f, generator=g)
    uv_pad = torch.rand(2, 3, f, f, generator=g)
    boxes = [SampleWindow((4, 8), (w, w), (f, f)), SampleWindow((0, 0), (w, w), (f, f))]
    bg_wins = [
        SampleWindow((b.origin[0] + cfg.bg_margin, b.origin[1] + cfg.bg_margin),
                     (w, w), (cfg.bg_canvas_size, cfg.bg_canvas_size))
        for b in boxes
    ]
    z_id = torch.stack([identity_code(0), identity_code(1)])
    z_tmp = torch.stack([temporal_code(0.2), temporal_code(0.8)])
    return uv_win, tex_pad, uv_pad, boxes, bg_wins, z_id, z_tmp


class TestComposeFrame:
    CFG = NetworkConfig(frame_size=64, window_size=32, uv_canvas_size=32, bg_margin=8)

    def test_deterministic(self):
        nets = build_networks(self.CFG, seed=0)
        args = _frame_inputs(self.CFG)
        a_comb, a_mask, _ = compose_frame(nets, *args)
        b_comb, b_mask, _ = compose_frame(nets, *args)
        assert torch.equal(a_comb, b_comb)
        assert torch.equal(a_mask, b_mask)

    def test_neural_texture_ablation_still_valid(self):
        cfg = NetworkConfig(frame_size=64, window_size=32, uv_canvas_size=32,
                            bg_margin=8, use_neural_texture=False)
        nets = build_networks(cfg, seed=0)
        combined, mask, extras = compose_frame(nets, *_frame_inputs(cfg))
        assert torch.isfinite(combined).all()
        assert (extras["face_map"] == 0).all()

    def test_static_canvas_caching_is_invisible(self):
        nets = build_networks(self.CFG, seed=0)
        args = _frame_inputs(self.CFG)
        base, base_mask, extras = compose_frame(nets, *args)
        cached, cached_mask, _ = compose_frame(
            nets, *args, static_canvases=(extras["face_canvas"], extras["bg_canvas"])
        )
        assert torch.equal(base, cached)
        assert torch.equal(base_mask, cached_mask)

    def test_render_final_image_shape(self):
        nets = build_networks(self.CFG, seed=0)
        args = _frame_inputs(self.CFG)
        combined, _, _ = compose_frame(nets, *args)
        image = render_final_image(nets, combined, args[0], args[4], args[6])
        assert image.shape == (2, 3, 32, 32)
