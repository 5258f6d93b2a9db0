"""Style-based networks: two feature generators, two StyleUNets, discriminator.

All networks run in the wavelet-packed domain (half spatial resolution, 4x
channels); generators and StyleUNets unpack to the pixel domain at their
output. Convolutions use unit-normal initialized weights with runtime
fan-in scaling and zero biases. Every forward pass is deterministic under
fixed parameters, latents, and noise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import container
from .errors import ConfigError, ShapeMismatchError
from .wavelet import idwt_nchw

LATENT_DIM = 64


def positional_embed(value, dims: int = 64, max_freq: float = 1.0e4) -> torch.Tensor:
    """Interleaved sin/cos embedding at geometrically spaced frequencies.

    ``value`` may be a python scalar or a 1-D tensor; output is (dims,) or
    (B, dims). Even slots hold sines, odd slots cosines, so value 0 maps to
    (0, 1, 0, 1, ...).
    """
    if dims % 2:
        raise ValueError(f"embedding dims must be even, got {dims}")
    if not torch.is_tensor(value):
        value = torch.as_tensor(value, dtype=torch.float32)
    scalar = value.ndim == 0
    value = value.reshape(-1, 1).to(torch.float32)
    k = dims // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(max_freq), k, dtype=torch.float32))
    ang = value * freqs
    out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).reshape(-1, dims)
    return out[0] if scalar else out


def identity_code(index: int, dims: int = LATENT_DIM) -> torch.Tensor:
    """Deterministic identity latent for a video index."""
    return positional_embed(float(index) + 1.0, dims)


def temporal_code(timestamp: float, dims: int = LATENT_DIM) -> torch.Tensor:
    """Deterministic temporal latent for a normalized timestamp in [0, 1]."""
    return positional_embed(float(timestamp), dims)


class EqualLinear(nn.Module):
    """Linear layer with unit-normal weights and runtime 1/sqrt(fan_in) scale."""

    def __init__(self, in_dim, out_dim, bias_init=0.0, lr_mul=1.0, activate=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init)))
        self.scale = lr_mul / math.sqrt(in_dim)
        self.lr_mul = lr_mul
        self.activate = activate

    def forward(self, x):
        out = F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)
        if self.activate:
            out = F.leaky_relu(out, 0.2) * math.sqrt(2.0)
        return out


class EqualConv2d(nn.Module):
    """Plain conv with the same equalized initialization scheme."""

    def __init__(self, in_ch, out_ch, kernel, stride=1):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.stride = stride
        self.padding = kernel // 2

    def forward(self, x):
        return F.conv2d(
            x, self.weight * self.scale, self.bias, stride=self.stride, padding=self.padding
        )


class MappingNetwork(nn.Module):
    """Small MLP mapping a latent code to a style vector."""

    def __init__(self, latent_dim=LATENT_DIM, style_dim=64, depth=4):
        super().__init__()
        dims = [latent_dim] + [style_dim] * depth
        self.layers = nn.ModuleList(
            EqualLinear(dims[i], dims[i + 1], activate=True) for i in range(depth)
        )

    def forward(self, z):
        if z.shape[-1] != self.layers[0].weight.shape[1]:
            raise ShapeMismatchError(
                f"latent has dim {z.shape[-1]}, mapping expects {self.layers[0].weight.shape[1]}"
            )
        w = z
        for layer in self.layers:
            w = layer(w)
        return w


def modulated_conv2d(x, weight, styles, demodulate=True, eps=1e-8):
    """Per-sample style-modulated convolution with same padding.

    x: (B, Cin, H, W); weight: (Cout, Cin, k, k), already runtime-scaled;
    styles: (B, Cin) per-input-channel scales. With demodulate=True each
    sample's per-output-channel effective weight is normalized to unit norm.
    """
    bsz, in_ch, h, w = x.shape
    out_ch, w_in, kh, kw = weight.shape
    if w_in != in_ch or styles.shape != (bsz, in_ch):
        raise ShapeMismatchError(
            f"modulated conv shapes disagree: x {tuple(x.shape)}, weight {tuple(weight.shape)}, "
            f"styles {tuple(styles.shape)}"
        )
    wmod = weight.unsqueeze(0) * styles[:, None, :, None, None]
    if demodulate:
        denom = torch.rsqrt(wmod.pow(2).sum(dim=(2, 3, 4)) + eps)
        wmod = wmod * denom[:, :, None, None, None]
    x = x.reshape(1, bsz * in_ch, h, w)
    wmod = wmod.reshape(bsz * out_ch, in_ch, kh, kw)
    out = F.conv2d(x, wmod, padding=kh // 2, groups=bsz)
    return out.reshape(bsz, out_ch, h, w)


class ModulatedConv2d(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, style_dim, demodulate=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.affine = EqualLinear(style_dim, in_ch, bias_init=1.0)
        self.demodulate = demodulate

    def forward(self, x, w_style):
        styles = self.affine(w_style)
        return modulated_conv2d(x, self.weight * self.scale, styles, self.demodulate)


class StyleBlock(nn.Module):
    """Modulated 3x3 conv + optional upsample + noise + bias + leaky."""

    def __init__(self, in_ch, out_ch, style_dim, upsample=False):
        super().__init__()
        self.upsample = upsample
        self.conv = ModulatedConv2d(in_ch, out_ch, 3, style_dim)
        self.noise_scale = nn.Parameter(torch.zeros(()))
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x, w_style, noise=None):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv(x, w_style)
        if noise is not None:
            x = x + self.noise_scale * noise
        return F.leaky_relu(x + self.bias[None, :, None, None], 0.2) * math.sqrt(2.0)


def _pyramid(target: int):
    """Factor target = start * 2^n with 4 <= start < 8; raises if impossible."""
    start, n = target, 0
    while start >= 8 and start % 2 == 0:
        start //= 2
        n += 1
    if start < 4 or start >= 8:
        raise ConfigError(f"cannot build a pyramid to size {target}")
    return start, n


class FeatureGenerator(nn.Module):
    """StyleGAN-style generator of a static feature canvas from a latent code.

    Synthesizes in the wavelet domain (canvas_size/2 spatial, 4x channels)
    from a learned constant, then unpacks to (out_channels, canvas, canvas).
    Per-level noise is a fixed buffer, so the canvas is a deterministic
    function of the parameters and the latent code.
    """

    def __init__(self, canvas_size, out_channels, style_dim=64, latent_dim=LATENT_DIM,
                 mapping_depth=4, max_channels=48, min_channels=16):
        super().__init__()
        self.canvas_size = canvas_size
        self.out_channels = out_channels
        start, n_up = _pyramid(canvas_size // 2)
        chans = [max(min_channels, max_channels // (2**i)) for i in range(n_up + 1)]
        self.mapping = MappingNetwork(latent_dim, style_dim, mapping_depth)
        self.const = nn.Parameter(torch.randn(chans[0], start, start))
        self.blocks = nn.ModuleList()
        sizes = [start]
        self.blocks.append(StyleBlock(chans[0], chans[0], style_dim))
        for i in range(n_up):
            self.blocks.append(StyleBlock(chans[i], chans[i + 1], style_dim, upsample=True))
            sizes.append(start * 2 ** (i + 1))
        self.to_bands = ModulatedConv2d(chans[-1], 4 * out_channels, 1, style_dim, demodulate=False)
        self.band_bias = nn.Parameter(torch.zeros(4 * out_channels))
        for i, size in enumerate(sizes):
            self.register_buffer(f"noise_{i}", torch.randn(1, 1, size, size))

    def forward(self, z):
        if z.ndim == 1:
            z = z[None]
        w = self.mapping(z)
        x = self.const[None].expand(z.shape[0], -1, -1, -1)
        for i, block in enumerate(self.blocks):
            x = block(x, w, getattr(self, f"noise_{i}"))
        bands = self.to_bands(x, w) + self.band_bias[None, :, None, None]
        return idwt_nchw(bands)


class StyleUNet(nn.Module):
    """Encoder/decoder translation network with style-modulated decoder.

    Input and output are wavelet packs with matching spatial size. The
    encoder is a plain strided-conv pyramid whose per-level features feed the
    decoder through concatenation skips; decoder convs are modulated by the
    mapped latent code and can take per-level injected noise. Fully
    convolutional: any input size divisible by 2^depth works.
    """

    def __init__(self, in_channels, out_channels, style_dim=64, latent_dim=LATENT_DIM,
                 mapping_depth=4, base_channels=16, max_channels=48, depth=3):
        super().__init__()
        self.depth = depth
        self.out_channels = out_channels
        chans = [min(max_channels, base_channels * 2**i) for i in range(depth + 1)]
        self.mapping = MappingNetwork(latent_dim, style_dim, mapping_depth)
        self.from_input = EqualConv2d(in_channels, chans[0], 3)
        self.encoder = nn.ModuleList(
            EqualConv2d(chans[i], chans[i + 1], 3, stride=2) for i in range(depth)
        )
        self.decoder = nn.ModuleList(
            StyleBlock(chans[i + 1] + chans[i], chans[i], style_dim) for i in reversed(range(depth))
        )
        self.to_output = ModulatedConv2d(chans[0], out_channels, 1, style_dim, demodulate=False)
        self.out_bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, pack, z, noise_maps=None):
        if pack.shape[-1] % 2**self.depth or pack.shape[-2] % 2**self.depth:
            raise ShapeMismatchError(
                f"input size {tuple(pack.shape)} not divisible by 2^{self.depth}"
            )
        if z.ndim == 1:
            z = z[None]
        w = self.mapping(z)
        skips = []
        x = F.leaky_relu(self.from_input(pack), 0.2) * math.sqrt(2.0)
        for enc in self.encoder:
            skips.append(x)
            x = F.leaky_relu(enc(x), 0.2) * math.sqrt(2.0)
        for i, dec in enumerate(self.decoder):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = torch.cat([x, skips[-1 - i]], dim=1)
            noise = None
            if noise_maps is not None:
                noise = F.adaptive_avg_pool2d(noise_maps, x.shape[-2:])
            x = dec(x, w, noise)
        return self.to_output(x, w) + self.out_bias[None, :, None, None]


class Discriminator(nn.Module):
    """Convolutional critic over the concatenated (rendering, image) packs."""

    def __init__(self, in_channels=24, base_channels=16, max_channels=48, input_size=32):
        super().__init__()
        self.input_size = input_size
        n_down = 0
        size = input_size
        while size > 4:
            if size % 2:
                raise ConfigError(f"discriminator input size {input_size} not reducible to 4")
            size //= 2
            n_down += 1
        chans = [min(max_channels, base_channels * 2**i) for i in range(n_down + 1)]
        self.from_input = EqualConv2d(in_channels, chans[0], 3)
        self.blocks = nn.ModuleList(
            EqualConv2d(chans[i], chans[i + 1], 3, stride=2) for i in range(n_down)
        )
        self.final_conv = EqualConv2d(chans[-1], chans[-1], 3)
        self.final_linear = EqualLinear(chans[-1] * size * size, 1)

    def forward(self, pack):
        if pack.shape[-1] != self.input_size or pack.shape[-2] != self.input_size:
            raise ShapeMismatchError(
                f"discriminator expects {self.input_size}^2 input, got {tuple(pack.shape)}"
            )
        x = F.leaky_relu(self.from_input(pack), 0.2) * math.sqrt(2.0)
        for block in self.blocks:
            x = F.leaky_relu(block(x), 0.2) * math.sqrt(2.0)
        x = F.leaky_relu(self.final_conv(x), 0.2) * math.sqrt(2.0)
        return self.final_linear(x.flatten(1)).squeeze(1)


class MaskHead(nn.Module):
    """Two 3x3 convs with a leaky rectifier, then sigmoid; predicts fg alpha."""

    def __init__(self, feature_channels, hidden=8):
        super().__init__()
        self.conv1 = EqualConv2d(2 * feature_channels, hidden, 3)
        self.conv2 = EqualConv2d(hidden, 1, 3)

    def forward(self, fg_map, bg_map):
        if fg_map.shape != bg_map.shape:
            raise ShapeMismatchError(
                f"mask head inputs disagree: {tuple(fg_map.shape)} vs {tuple(bg_map.shape)}"
            )
        x = torch.cat([fg_map, bg_map], dim=1)
        x = F.leaky_relu(self.conv1(x), 0.2)
        return torch.sigmoid(self.conv2(x))


class NoiseBank(nn.Module):
    """Fixed noise fields: UV-space noise for the face, canvas noise for the
    background. Buffers only; persisted with checkpoints."""

    def __init__(self, uv_size, bg_size):
        super().__init__()
        self.register_buffer("uv_noise", torch.randn(1, 1, uv_size, uv_size))
        self.register_buffer("bg_noise", torch.randn(1, 1, bg_size, bg_size))


@dataclass
class NetworkConfig:
    """Sizes and toggles for the whole network family.

    frame_size is the training video resolution, window_size the sliding
    window (half the frame), uv_canvas_size the neural-texture resolution.
    The background canvas adds bg_margin on each side of the frame.
    """

    frame_size: int = 128
    window_size: int = 64
    uv_canvas_size: int = 64
    bg_margin: int = 16
    feature_channels: int = 16
    latent_dim: int = LATENT_DIM
    style_dim: int = 64
    mapping_depth: int = 4
    gen_max_channels: int = 32
    gen_min_channels: int = 16
    unet_base_channels: int = 8
    unet_max_channels: int = 16
    unet_depth: int = 3
    disc_base_channels: int = 16
    disc_max_channels: int = 32
    use_neural_texture: bool = True
    use_noise: bool = True
    use_temporal_code: bool = True

    @property
    def bg_canvas_size(self) -> int:
        return self.frame_size + 2 * self.bg_margin

    def validate(self) -> None:
        for name in ("frame_size", "window_size", "uv_canvas_size"):
            val = getattr(self, name)
            if val <= 0 or val & (val - 1):
                raise ConfigError(f"{name} must be a positive power of two, got {val}")
        if self.window_size * 2 != self.frame_size:
            raise ConfigError(
                f"window_size must be half the frame (crop:train = 1:2), got "
                f"{self.window_size} vs {self.frame_size}"
            )
        for name in ("feature_channels", "style_dim", "mapping_depth", "bg_margin"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        _pyramid(self.uv_canvas_size // 2)
        _pyramid(self.bg_canvas_size // 2)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


class AvatarNetworks(nn.Module):
    """Bundle of the five networks plus the mask head and fixed noise."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config
        self.face_gen = FeatureGenerator(
            c.uv_canvas_size, c.feature_channels, c.style_dim, c.latent_dim,
            c.mapping_depth, c.gen_max_channels, c.gen_min_channels,
        )
        self.bg_gen = FeatureGenerator(
            c.bg_canvas_size, c.feature_channels, c.style_dim, c.latent_dim,
            c.mapping_depth, c.gen_max_channels, c.gen_min_channels,
        )
        self.fg_unet = StyleUNet(
            12, 4 * c.feature_channels, c.style_dim, c.latent_dim, c.mapping_depth,
            c.unet_base_channels, c.unet_max_channels, c.unet_depth,
        )
        self.refine_unet = StyleUNet(
            4 * c.feature_channels, 12, c.style_dim, c.latent_dim, c.mapping_depth,
            c.unet_base_channels, c.unet_max_channels, c.unet_depth,
        )
        self.disc = Discriminator(
            24, c.disc_base_channels, c.disc_max_channels, input_size=c.window_size // 2
        )
        self.mask_head = MaskHead(c.feature_channels)
        self.noise = NoiseBank(c.uv_canvas_size, c.bg_canvas_size)

    def generator_modules(self) -> dict[str, nn.Module]:
        return {
            "face_gen": self.face_gen,
            "bg_gen": self.bg_gen,
            "fg_unet": self.fg_unet,
            "refine_unet": self.refine_unet,
            "mask_head": self.mask_head,
        }

    def parameter_counts(self) -> dict[str, int]:
        counts = {}
        for name in ("face_gen", "bg_gen", "fg_unet", "refine_unet", "disc", "mask_head"):
            counts[name] = sum(p.numel() for p in getattr(self, name).parameters())
        return counts


def build_networks(config: NetworkConfig, seed: int = 0) -> AvatarNetworks:
    """Construct the bundle with fully seeded initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        nets = AvatarNetworks(config)
    return nets


def generator_forward(gen: FeatureGenerator, z_id: torch.Tensor) -> torch.Tensor:
    """Static feature canvas for an identity code; (B, C, T, T)."""
    return gen(z_id)


def styleunet_forward(net: StyleUNet, input_pack, z_tmp, noise_maps=None) -> torch.Tensor:
    return net(input_pack, z_tmp, noise_maps)


def discriminator_forward(disc: Discriminator, image_pack, rendering_pack) -> torch.Tensor:
    """Score per sample for the channel-concatenated (rendering, image) pair."""
    if image_pack.shape[-2:] != rendering_pack.shape[-2:]:
        raise ShapeMismatchError(
            f"resolution mismatch: image {tuple(image_pack.shape)} vs "
            f"rendering {tuple(rendering_pack.shape)}"
        )
    return disc(torch.cat([rendering_pack, image_pack], dim=1))


def mapping_forward(mapping: MappingNetwork, z: torch.Tensor) -> torch.Tensor:
    return mapping(z)


# --- checkpoint container ----------------------------------------------------

def _state_to_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for key, tensor in module.state_dict().items():
        out[f"{prefix}.{key}"] = tensor.detach().cpu().numpy().astype(np.float32)
    return out


def save_checkpoint(path, networks: AvatarNetworks, iteration: int, zid_table: dict,
                    optimizer_arrays: dict[str, np.ndarray] | None = None,
                    extra_meta: dict | None = None) -> None:
    """Persist the network bundle under the manifest+binary convention."""
    arrays = _state_to_arrays(networks, "net")
    if optimizer_arrays:
        arrays.update(optimizer_arrays)
    meta = {
        "iteration": int(iteration),
        "config": networks.config.to_dict(),
        "zid_table": zid_table,
    }
    if extra_meta:
        meta.update(extra_meta)
    container.save_container(path, arrays, extra=meta)


def load_checkpoint(path):
    """Rebuild networks from a checkpoint; returns (networks, meta, raw_arrays)."""
    arrays, meta = container.load_container(path)
    config = NetworkConfig.from_dict(meta["config"])
    networks = build_networks(config, seed=0)
    state = {}
    for name, arr in arrays.items():
        if name.startswith("net."):
            state[name[len("net."):]] = torch.from_numpy(np.array(arr))
    networks.load_state_dict(state)
    return networks, meta, arrays
