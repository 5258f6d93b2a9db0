"""Loss assembly and the adversarial training loop.

The generator side (both feature generators, both StyleUNets, the mask head)
minimizes  w_l1*L1 + w_p*perceptual + w_m*mask + w_g*GAN  (all weights
default 1, the plain unweighted sum). The discriminator sees the texture
rendering channel-concatenated with either the generated or the real image,
trained with non-saturating logistic losses and a lazy R1 penalty.

Every step is deterministic: per-step randomness (frame picks, sample boxes)
is derived from (seed, iteration), so resuming from a checkpoint reproduces
the continuous run.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import composer, wavelet, windowing
from .container import atomic_write_text
from .errors import ConfigError, ShapeMismatchError
from .networks import (
    AvatarNetworks,
    NetworkConfig,
    build_networks,
    identity_code,
    load_checkpoint,
    save_checkpoint,
    temporal_code,
)


@dataclass
class LossReport:
    l1: float
    perceptual: float
    mask: float
    gan_g: float
    gan_d: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossWeights:
    l1: float = 1.0
    perceptual: float = 1.0
    mask: float = 1.0
    gan: float = 1.0


@dataclass
class TrainConfig:
    net: NetworkConfig = field(default_factory=NetworkConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-2  # 2e-3 (the family convention) undershoots toy budgets
    betas: tuple = (0.0, 0.99)
    iterations: int = 2000
    batch_size: int = 4
    seed: int = 0
    augment: bool = True
    r1_interval: int = 16
    r1_weight: float = 10.0
    eval_interval: int = 100
    target_psnr: float | None = None
    snapshot_interval: int = 0  # 0 disables image snapshots

    def validate(self) -> None:
        self.net.validate()
        if self.iterations < 0 or self.batch_size <= 0:
            raise ConfigError("iterations must be >= 0 and batch_size positive")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        for name in ("l1", "perceptual", "mask", "gan"):
            if getattr(self.weights, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")

    def to_json(self) -> str:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        d = json.loads(text)
        d["net"] = NetworkConfig.from_dict(d["net"])
        d["weights"] = LossWeights(**d["weights"])
        d["betas"] = tuple(d["betas"])
        return cls(**d)


# --- losses -------------------------------------------------------------------


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all elements."""
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"l1 shapes disagree: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def mask_loss(pred_mask: torch.Tensor, matting_mask: torch.Tensor) -> torch.Tensor:
    return l1_loss(pred_mask, matting_mask)


class PerceptualNet(nn.Module):
    """Fixed randomly-initialized 5-level convolutional pyramid, frozen.

    Stand-in for a pretrained deep feature extractor at toy scale. The
    pyramid is linear (conv + average pool per level, no nonlinearity) so
    feature distances behave monotonically along image interpolation.
    """

    MIN_INPUT = 32

    def __init__(self, in_channels=3, channels=8, levels=5, seed=1234):
        super().__init__()
        self.levels = levels
        gen = torch.Generator().manual_seed(seed)
        convs = []
        c_in = in_channels
        for _ in range(levels):
            w = torch.randn(channels, c_in, 3, 3, generator=gen) / math.sqrt(c_in * 9)
            convs.append(w)
            c_in = channels
        for i, w in enumerate(convs):
            self.register_buffer(f"w{i}", w)

    def forward(self, x) -> list:
        if min(x.shape[-2], x.shape[-1]) < self.MIN_INPUT:
            raise ShapeMismatchError(
                f"perceptual net needs inputs >= {self.MIN_INPUT}px, got {tuple(x.shape)}"
            )
        feats = []
        for i in range(self.levels):
            x = F.conv2d(x, getattr(self, f"w{i}"), padding=1)
            feats.append(x)
            x = F.avg_pool2d(x, 2)
        return feats


def perceptual_loss(pred, target, feature_net: PerceptualNet) -> torch.Tensor:
    """Sum of L1 distances between pyramid activations of the two images."""
    fp = feature_net(pred)
    ft = feature_net(target)
    return sum((a - b).abs().mean() for a, b in zip(fp, ft))


def gan_losses(disc, real_pair, fake_pair, compute_r1: bool = False):
    """Non-saturating logistic losses on (rendering, image) concatenations.

    Returns (g_loss, d_loss, r1_penalty); r1 is zero unless compute_r1. The
    discriminator input order is rendering first, image second.
    """
    real_in = torch.cat(real_pair, dim=1)
    fake_in = torch.cat(fake_pair, dim=1)
    if compute_r1:
        real_in = real_in.detach().requires_grad_(True)
    real_score = disc(real_in)
    fake_score = disc(fake_in)
    d_loss = F.softplus(fake_score).mean() + F.softplus(-real_score).mean()
    g_loss = F.softplus(-fake_score).mean()
    if compute_r1:
        (grad,) = torch.autograd.grad(real_score.sum(), real_in, create_graph=True)
        r1 = grad.pow(2).reshape(grad.shape[0], -1).sum(dim=1).mean()
    else:
        r1 = torch.zeros((), device=real_in.device)
    return g_loss, d_loss, r1


# --- data ---------------------------------------------------------------------


@dataclass
class VideoData:
    """One training video, fully cached in memory as channels-first float32."""

    name: str
    frames: torch.Tensor  # (N, 3, F, F)
    masks: torch.Tensor  # (N, 1, F, F)
    uv: torch.Tensor  # (N, 3, F, F)
    tex: torch.Tensor  # (N, 3, F, F)
    identity_index: int = 0

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def timestamp(self, idx: int) -> float:
        return idx / max(self.n_frames - 1, 1)


def video_from_arrays(name, frames, masks, uv, tex, identity_index=0) -> VideoData:
    """Build VideoData from (N, H, W, C) float numpy arrays."""

    def chw(a):
        t = torch.from_numpy(np.ascontiguousarray(a)).float()
        if t.ndim == 3:
            t = t[:, None]
        else:
            t = t.permute(0, 3, 1, 2)
        return t.contiguous()

    return VideoData(
        name=name,
        frames=chw(frames),
        masks=chw(masks),
        uv=chw(uv),
        tex=chw(tex),
        identity_index=identity_index,
    )


# --- trainer ------------------------------------------------------------------


class Trainer:
    """Owns the networks, optimizers, and the seeded augmentation stream."""

    def __init__(self, config: TrainConfig, videos: list[VideoData],
                 networks: AvatarNetworks | None = None, iteration: int = 0,
                 zid_table: dict | None = None):
        config.validate()
        if not videos:
            raise ConfigError("need at least one video to train on")
        self.config = config
        self.videos = videos
        self.networks = networks if networks is not None else build_networks(config.net, config.seed)
        self.percep = PerceptualNet()
        self.iteration = iteration
        self.metrics: list[dict] = []
        self.zid_table = zid_table if zid_table is not None else {
            v.name: {"index": v.identity_index, "n_frames": v.n_frames} for v in videos
        }
        self._check_resolution()
        self._freeze_gated()
        self.opt_g, self.g_param_names = self._make_optimizer(self._generator_params())
        d_named = [(n, p) for n, p in self.networks.disc.named_parameters("disc") if p.requires_grad]
        self.opt_d, self.d_param_names = self._make_optimizer(d_named)

    def _check_resolution(self):
        f = self.config.net.frame_size
        for v in self.videos:
            if v.frames.shape[-1] != f or v.frames.shape[-2] != f:
                raise ConfigError(
                    f"video '{v.name}' has frames {tuple(v.frames.shape[-2:])}, "
                    f"config expects {f}x{f}"
                )

    def _freeze_gated(self):
        # zero loss weights freeze the parameters they gate
        if self.config.weights.mask == 0:
            for p in self.networks.mask_head.parameters():
                p.requires_grad_(False)
        if self.config.weights.gan == 0:
            for p in self.networks.disc.parameters():
                p.requires_grad_(False)

    def _generator_params(self):
        named = []
        for mod_name, module in self.networks.generator_modules().items():
            named.extend(module.named_parameters(mod_name))
        return [(n, p) for n, p in named if p.requires_grad]

    def _make_optimizer(self, named_params):
        names = [n for n, _ in named_params]
        params = [p for _, p in named_params]
        if not params:
            return None, names
        opt = torch.optim.Adam(params, lr=self.config.lr, betas=self.config.betas)
        return opt, names

    # -- batch assembly --

    def _step_rng(self, salt: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, self.iteration, salt])

    def _draw_batch(self):
        cfg = self.config
        f, w = cfg.net.frame_size, cfg.net.window_size
        rng = self._step_rng()
        picks = []
        for _ in range(cfg.batch_size):
            vid = int(rng.integers(0, len(self.videos)))
            frame = int(rng.integers(0, self.videos[vid].n_frames))
            if cfg.augment:
                box = windowing.draw_sample_box(rng, f, w)
            else:
                box = windowing.centered_box(f, w)
            picks.append((vid, frame, box))
        return picks

    def _assemble(self, picks):
        cfg = self.config.net
        f, w = cfg.frame_size, cfg.window_size
        gt, gt_mask, uv_win, tex_win, tex_pad, uv_pad = [], [], [], [], [], []
        fg_windows, bg_windows, z_ids, z_tmps = [], [], [], []
        bg_spec = windowing.CanvasSpec(
            "bg", (cfg.bg_canvas_size, cfg.bg_canvas_size), margin=cfg.bg_margin
        )
        fg_spec = windowing.CanvasSpec("fg", (f, f))
        for vid, frame, box in picks:
            video = self.videos[vid]
            gt.append(windowing.crop_window(video.frames[frame], box))
            gt_mask.append(windowing.crop_window(video.masks[frame], box))
            uv_crop = windowing.crop_window(video.uv[frame], box)
            tex_crop = windowing.crop_window(video.tex[frame], box)
            uv_win.append(uv_crop)
            tex_win.append(tex_crop)
            tex_pad.append(windowing.pad_to_training_size(tex_crop, box)[0])
            uv_pad.append(windowing.pad_to_training_size(uv_crop, box)[0])
            aligned = windowing.align_windows(box, [fg_spec, bg_spec])
            fg_windows.append(aligned["fg"])
            bg_windows.append(aligned["bg"])
            z_ids.append(identity_code(video.identity_index, cfg.latent_dim))
            if cfg.use_temporal_code:
                z_tmps.append(temporal_code(video.timestamp(frame), cfg.latent_dim))
            else:
                z_tmps.append(temporal_code(0.0, cfg.latent_dim))
        batch = {
            "gt": torch.stack(gt),
            "gt_mask": torch.stack(gt_mask),
            "uv_win": torch.stack(uv_win),
            "tex_win": torch.stack(tex_win),
            "tex_pad": torch.stack(tex_pad),
            "uv_pad": torch.stack(uv_pad),
            "fg_windows": fg_windows,
            "bg_windows": bg_windows,
            "z_id": torch.stack(z_ids),
            "z_tmp": torch.stack(z_tmps),
        }
        return batch

    def _forward_generator(self, batch):
        nets = self.networks
        combined, mask, extras = composer.compose_frame(
            nets,
            batch["uv_win"],
            batch["tex_pad"],
            batch["uv_pad"],
            batch["fg_windows"],
            batch["bg_windows"],
            batch["z_id"],
            batch["z_tmp"],
        )
        image = composer.render_final_image(
            nets, combined, batch["uv_win"], batch["bg_windows"], batch["z_tmp"]
        )
        return image, mask, extras

    # -- one optimization step --

    def step(self) -> LossReport:
        cfg = self.config
        batch = self._assemble(self._draw_batch())
        image, mask, _ = self._forward_generator(batch)

        tex_pack = wavelet.dwt_nchw(batch["tex_win"])
        gan_d_val = 0.0
        if cfg.weights.gan > 0:
            compute_r1 = cfg.r1_interval > 0 and self.iteration % cfg.r1_interval == 0
            _, d_loss, r1 = gan_losses(
                self.networks.disc,
                (tex_pack, wavelet.dwt_nchw(batch["gt"])),
                (tex_pack, wavelet.dwt_nchw(image.detach())),
                compute_r1=compute_r1,
            )
            d_total = d_loss
            if compute_r1:
                d_total = d_total + (cfg.r1_weight / 2) * r1 * cfg.r1_interval
            self.opt_d.zero_grad(set_to_none=True)
            d_total.backward()
            self.opt_d.step()
            gan_d_val = float(d_loss.detach())

        losses = {}
        losses["l1"] = l1_loss(image, batch["gt"])
        losses["perceptual"] = perceptual_loss(image, batch["gt"], self.percep)
        losses["mask"] = mask_loss(mask, batch["gt_mask"])
        if cfg.weights.gan > 0:
            g_loss, _, _ = gan_losses(
                self.networks.disc,
                (tex_pack.detach(), wavelet.dwt_nchw(batch["gt"])),
                (tex_pack, wavelet.dwt_nchw(image)),
            )
        else:
            g_loss = torch.zeros(())
        losses["gan_g"] = g_loss

        total = (
            cfg.weights.l1 * losses["l1"]
            + cfg.weights.perceptual * losses["perceptual"]
            + cfg.weights.mask * losses["mask"]
            + cfg.weights.gan * losses["gan_g"]
        )
        if not torch.isfinite(total):
            raise RuntimeError(
                f"non-finite loss at iteration {self.iteration}: "
                + ", ".join(f"{k}={float(v):g}" for k, v in losses.items())
            )
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()

        report = LossReport(
            l1=float(losses["l1"].detach()),
            perceptual=float(losses["perceptual"].detach()),
            mask=float(losses["mask"].detach()),
            gan_g=float(losses["gan_g"].detach()),
            gan_d=gan_d_val,
            total=float(total.detach()),
        )
        self.metrics.append({"iteration": self.iteration, **report.to_dict(), "time": time.time()})
        self.iteration += 1
        return report

    # -- full-frame self-driven probe (early stopping / smoke metrics) --

    def infer_frames(self, video: VideoData, frame_ids, z_tmp_value: float | None = None):
        """Full-frame inference on cached renderings; returns (B, 3, F, F)."""
        cfg = self.config.net
        f = cfg.frame_size
        if z_tmp_value is None:
            mid = video.n_frames // 2
            z_tmp_value = video.timestamp(mid)
        full = windowing.SampleWindow((0, 0), (f, f), (f, f))
        bg_win = windowing.SampleWindow(
            (cfg.bg_margin, cfg.bg_margin), (f, f), (cfg.bg_canvas_size, cfg.bg_canvas_size)
        )
        outs = []
        with torch.no_grad():
            for idx in frame_ids:
                uv = video.uv[idx][None]
                tex = video.tex[idx][None]
                z_id = identity_code(video.identity_index, cfg.latent_dim)[None]
                z_tmp = temporal_code(z_tmp_value, cfg.latent_dim)[None]
                combined, _, _ = composer.compose_frame(
                    nets=self.networks,
                    uv_window=uv,
                    tex_padded=tex,
                    uv_padded=uv,
                    fg_windows=[full],
                    bg_windows=[bg_win],
                    z_id=z_id,
                    z_tmp=z_tmp,
                )
                outs.append(
                    composer.render_final_image(self.networks, combined, uv, [bg_win], z_tmp)
                )
        return torch.cat(outs, dim=0)

    def train_psnr(self, max_frames: int = 8) -> float:
        """Mean PSNR of self-driven full-frame inference over training frames."""
        video = self.videos[0]
        ids = np.linspace(0, video.n_frames - 1, min(max_frames, video.n_frames)).astype(int)
        out = self.infer_frames(video, ids)
        gt = video.frames[ids]
        mse = float(((out - gt) ** 2).mean())
        if mse <= 0:
            return 99.0
        return min(99.0, 10 * math.log10(1.0 / mse))

    def train(self, iterations: int | None = None, log_path=None, progress=None):
        """Run the loop; stops early when target_psnr is reached (if set)."""
        cfg = self.config
        n = cfg.iterations if iterations is None else iterations
        stop_iteration = self.iteration + n
        while self.iteration < stop_iteration:
            report = self.step()
            done = self.iteration
            if progress is not None:
                progress(done, report)
            if (
                cfg.target_psnr is not None
                and cfg.eval_interval > 0
                and done % cfg.eval_interval == 0
            ):
                if self.train_psnr() >= cfg.target_psnr:
                    break
        if log_path is not None:
            self.write_metrics(log_path)
        return self

    def write_metrics(self, path):
        lines = [json.dumps(m, sort_keys=True) for m in self.metrics]
        atomic_write_text(Path(path), "\n".join(lines) + "\n")

    # -- persistence --

    def _optimizer_arrays(self):
        arrays = {}
        for tag, opt, names in (("g", self.opt_g, self.g_param_names),
                                ("d", self.opt_d, self.d_param_names)):
            if opt is None:
                continue
            params = opt.param_groups[0]["params"]
            for name, p in zip(names, params):
                state = opt.state.get(p)
                if not state:
                    continue
                arrays[f"opt.{tag}.{name}.exp_avg"] = state["exp_avg"].numpy().astype(np.float32)
                arrays[f"opt.{tag}.{name}.exp_avg_sq"] = (
                    state["exp_avg_sq"].numpy().astype(np.float32)
                )
                arrays[f"opt.{tag}.{name}.step"] = np.asarray(
                    [float(state["step"])], dtype=np.float32
                )
        return arrays

    def save(self, path):
        save_checkpoint(
            path,
            self.networks,
            self.iteration,
            self.zid_table,
            optimizer_arrays=self._optimizer_arrays(),
            extra_meta={"train_config": json.loads(self.config.to_json())},
        )

    def _restore_optimizers(self, arrays):
        for tag, opt, names in (("g", self.opt_g, self.g_param_names),
                                ("d", self.opt_d, self.d_param_names)):
            if opt is None:
                continue
            params = opt.param_groups[0]["params"]
            for name, p in zip(names, params):
                key = f"opt.{tag}.{name}"
                if f"{key}.exp_avg" not in arrays:
                    continue
                opt.state[p] = {
                    "step": torch.tensor(float(arrays[f"{key}.step"][0])),
                    "exp_avg": torch.from_numpy(np.array(arrays[f"{key}.exp_avg"])),
                    "exp_avg_sq": torch.from_numpy(np.array(arrays[f"{key}.exp_avg_sq"])),
                }


def trainer_from_checkpoint(path, config: TrainConfig, videos: list[VideoData]) -> Trainer:
    """Resume training from a checkpoint (networks + optimizer state)."""
    networks, meta, arrays = load_checkpoint(path)
    trainer = Trainer(
        config,
        videos,
        networks=networks,
        iteration=int(meta["iteration"]),
        zid_table=dict(meta["zid_table"]),
    )
    trainer._restore_optimizers(arrays)
    return trainer


def pretrain(videos: list[VideoData], config: TrainConfig, log_path=None) -> Trainer:
    """Multi-video pre-training with one identity code per video."""
    if not videos:
        raise ConfigError("pretrain needs at least one video")
    for i, v in enumerate(videos):
        v.identity_index = i
    trainer = Trainer(config, videos)
    trainer.train(log_path=log_path)
    return trainer


def finetune(checkpoint_path, video: VideoData, config: TrainConfig, log_path=None) -> Trainer:
    """Fine-tune a pre-trained checkpoint on a single video with a fresh z_id."""
    networks, meta, arrays = load_checkpoint(checkpoint_path)
    if networks.config.frame_size != config.net.frame_size:
        raise ConfigError(
            f"checkpoint was trained at {networks.config.frame_size}, config wants "
            f"{config.net.frame_size}"
        )
    table = dict(meta["zid_table"])
    used = [entry["index"] for entry in table.values()]
    video.identity_index = (max(used) + 1) if used else 0
    table[video.name] = {"index": video.identity_index, "n_frames": video.n_frames}
    trainer = Trainer(config, [video], networks=networks, iteration=0, zid_table=table)
    trainer.train(log_path=log_path)
    return trainer


def train_single(video: VideoData, config: TrainConfig, log_path=None) -> Trainer:
    """From-scratch training on one video."""
    video.identity_index = 0
    trainer = Trainer(config, [video])
    trainer.train(log_path=log_path)
    return trainer
