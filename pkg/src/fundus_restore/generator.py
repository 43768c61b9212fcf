"""U-shaped window-attention restoration generator."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import flops_w_msa, wsab_stage
from .errors import ConfigError, NonFiniteError, ShapeError


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 16
    stages: int = 4
    blocks_per_stage: int = 2
    bottleneck_blocks: int = 2
    window_size: int = 8
    heads: tuple = (1, 2, 4, 8)
    shift: bool = True
    masked_shift: bool = False
    ffn_ratio: float = 2.0
    leaky_slope: float = 0.2
    in_channels: int = 3
    # one downsample after every encoder stage instead of between stages
    downsample_every_stage: bool = False
    zero_init_output: bool = True

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(self.heads))
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if len(self.heads) < self.stages:
            raise ConfigError(f"need {self.stages} head counts, got {self.heads}")
        C = self.base_channels
        for i in range(self.stages):
            if (2**i * C) % self.heads[i]:
                raise ConfigError(f"stage {i}: {2**i * C} channels not divisible by {self.heads[i]} heads")

    @property
    def num_downsamples(self) -> int:
        return self.stages if self.downsample_every_stage else self.stages - 1

    @property
    def pad_multiple(self) -> int:
        return self.window_size * 2**self.num_downsamples

    def encoder_channels(self, i: int) -> int:
        return 2**i * self.base_channels

    def decoder_channels(self, i: int) -> int:
        return 2 ** (i + 1) * self.base_channels

    @property
    def bottleneck_channels(self) -> int:
        return 2**self.num_downsamples * self.base_channels

    @property
    def bottleneck_heads(self) -> int:
        h = self.heads[self.stages - 1]
        return 2 * h if self.downsample_every_stage else h

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads"] = list(self.heads)
        return d


# base width at which generator + discriminator of that same width come closest to 21.1 M parameters
PAPER_CALIBRATED = GeneratorConfig(base_channels=45)


class CropRecord(NamedTuple):
    height: int
    width: int
    pad_bottom: int
    pad_right: int


def pad_for_model(image: torch.Tensor, multiple: int):
    """Reflect-pad a ``(B, C, H, W)`` tensor so H and W are multiples of ``multiple``."""
    H, W = image.shape[-2:]
    pb = -H % multiple
    pr = -W % multiple
    record = CropRecord(H, W, pb, pr)
    if pb == 0 and pr == 0:
        return image, record
    if pb >= H or pr >= W:
        # reflect padding needs pad < size; fall back to replicate for tiny inputs
        return F.pad(image, (0, pr, 0, pb), mode="replicate"), record
    return F.pad(image, (0, pr, 0, pb), mode="reflect"), record


def crop_to(image: torch.Tensor, record: CropRecord) -> torch.Tensor:
    return image[..., : record.height, : record.width]


def conv3x3(c_in: int, c_out: int) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, 3, padding=1, padding_mode="reflect")


class ProjectIn(nn.Module):
    def __init__(self, c_in: int, c_out: int, slope: float = 0.2):
        super().__init__()
        self.conv = conv3x3(c_in, c_out)
        self.slope = slope

    def forward(self, x):
        return F.leaky_relu(self.conv(x), self.slope)


class Downsample(nn.Module):
    """4x4 conv, stride 2: halves H and W, doubles channels by default."""

    def __init__(self, c_in: int, c_out: int | None = None):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out or 2 * c_in, 4, stride=2, padding=1)

    def forward(self, x):
        H, W = x.shape[-2:]
        if H % 2 or W % 2:
            raise ShapeError(f"downsample needs even spatial dims, got {H}x{W}")
        return self.conv(x)


class Upsample(nn.Module):
    """Bilinear x2 followed by a 3x3 conv (halves channels by default)."""

    def __init__(self, c_in: int, c_out: int | None = None):
        super().__init__()
        if c_out is None:
            if c_in % 2:
                raise ShapeError(f"cannot halve an odd channel count ({c_in})")
            c_out = c_in // 2
        self.conv = conv3x3(c_in, c_out)

    @staticmethod
    def interpolate(x):
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)

    def forward(self, x):
        return self.conv(self.interpolate(x))


def skip_fuse(dec: torch.Tensor, enc_skip: torch.Tensor) -> torch.Tensor:
    """Channel concatenation ``[dec | enc_skip]``."""
    if dec.shape[-2:] != enc_skip.shape[-2:]:
        raise ShapeError(
            f"skip fusion needs equal spatial dims, got {tuple(dec.shape[-2:])} "
            f"and {tuple(enc_skip.shape[-2:])}"
        )
    return torch.cat([dec, enc_skip], dim=1)


class Generator(nn.Module):
    """Projection, encoder, bottleneck, mirrored decoder with concat skips, residual output.

    With the default layout the encoder halves resolution between stages (three
    downsamples for four stages), so stage i works at H/2^i with 2^i C channels
    and decoder stage i at H/2^i with 2^(i+1) C channels after fusion.
    """

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        C, L = cfg.base_channels, cfg.window_size
        stage = lambda ch, heads, depth: wsab_stage(ch, heads, depth, L, cfg.shift,
                                                    cfg.masked_shift, cfg.ffn_ratio)

        self.project_in = ProjectIn(cfg.in_channels, C, cfg.leaky_slope)
        self.encoder = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i in range(cfg.stages):
            self.encoder.append(stage(cfg.encoder_channels(i), cfg.heads[i], cfg.blocks_per_stage))
            if i < cfg.num_downsamples:
                self.downs.append(Downsample(cfg.encoder_channels(i)))
        self.bottleneck = stage(cfg.bottleneck_channels, cfg.bottleneck_heads, cfg.bottleneck_blocks)

        # decoder modules are stored deepest-first
        self.ups = nn.ModuleList()
        self.decoder = nn.ModuleList()
        prev = cfg.bottleneck_channels
        for i in reversed(range(cfg.stages)):
            if i < cfg.num_downsamples:
                self.ups.append(Upsample(prev, cfg.encoder_channels(i)))
            self.decoder.append(stage(cfg.decoder_channels(i), 2 * cfg.heads[i], cfg.blocks_per_stage))
            prev = cfg.decoder_channels(i)
        self.project_out = conv3x3(cfg.decoder_channels(0), 3)
        if cfg.zero_init_output:
            nn.init.zeros_(self.project_out.weight)
            nn.init.zeros_(self.project_out.bias)

    def features(self, x):
        """Run the network on a padded input; returns (residual, per-stage shapes)."""
        cfg = self.cfg
        trace = {}
        x = self.project_in(x)
        skips = []
        for i, blocks in enumerate(self.encoder):
            x = blocks(x)
            trace[f"enc{i}"] = tuple(x.shape[1:])
            skips.append(x)
            if i < cfg.num_downsamples:
                x = self.downs[i](x)
        x = self.bottleneck(x)
        trace["bottleneck"] = tuple(x.shape[1:])
        ups = iter(self.ups)
        for blocks, i in zip(self.decoder, reversed(range(cfg.stages))):
            if i < cfg.num_downsamples:
                x = next(ups)(x)
            x = skip_fuse(x, skips[i])
            x = blocks(x)
            trace[f"dec{i}"] = tuple(x.shape[1:])
        return self.project_out(x), trace

    def residual(self, x):
        padded, record = pad_for_model(x, self.cfg.pad_multiple)
        res, _ = self.features(padded)
        return crop_to(res, record)

    def forward(self, x, clamp: bool = False):
        """``x``: (B, 3, H, W) degraded image. Returns ``x + residual``, clamped if asked."""
        out = x + self.residual(x)
        return out.clamp(0.0, 1.0) if clamp else out

    @torch.no_grad()
    def restore(self, x):
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise NonFiniteError(f"generator parameter {name} is not finite")
        return self(x, clamp=True)


def param_count(model_or_cfg) -> int:
    """Number of learnable scalars of a module, or of a generator built from a config."""
    if isinstance(model_or_cfg, GeneratorConfig):
        with torch.device("meta"):
            model_or_cfg = Generator(model_or_cfg)
    return sum(p.numel() for p in model_or_cfg.parameters())


def _conv_macs(h, w, k, c_in, c_out, groups=1):
    return h * w * k * k * (c_in // groups) * c_out


def _wsab_macs(cfg: GeneratorConfig, h, w, c, depth):
    hidden = int(round(c * cfg.ffn_ratio))
    per_block = (
        flops_w_msa(cfg.window_size, c, h, w)
        + _conv_macs(h, w, 1, c, hidden)
        + _conv_macs(h, w, 3, hidden, hidden, groups=hidden)
        + _conv_macs(h, w, 1, hidden, c)
    )
    return depth * per_block


def generator_macs(cfg: GeneratorConfig, height: int, width: int) -> int:
    """Multiply-accumulate count of one forward pass on a (padded) H x W input.

    Counts convolutions, projections and attention products; normalisation,
    activations and interpolation are ignored.
    """
    m = cfg.pad_multiple
    H, W = -(-height // m) * m, -(-width // m) * m
    C = cfg.base_channels
    total = _conv_macs(H, W, 3, cfg.in_channels, C)
    for i in range(cfg.stages):
        h, w = H >> i, W >> i
        c = cfg.encoder_channels(i)
        total += _wsab_macs(cfg, h, w, c, cfg.blocks_per_stage)
        if i < cfg.num_downsamples:
            total += _conv_macs(h // 2, w // 2, 4, c, 2 * c)
    nb = cfg.num_downsamples
    total += _wsab_macs(cfg, H >> nb, W >> nb, cfg.bottleneck_channels, cfg.bottleneck_blocks)
    prev = cfg.bottleneck_channels
    for i in reversed(range(cfg.stages)):
        h, w = H >> i, W >> i
        if i < nb:
            total += _conv_macs(h, w, 3, prev, cfg.encoder_channels(i))
        total += _wsab_macs(cfg, h, w, cfg.decoder_channels(i), cfg.blocks_per_stage)
        prev = cfg.decoder_channels(i)
    total += _conv_macs(H, W, 3, cfg.decoder_channels(0), 3)
    return total


def to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(H, W, 3)`` array -> ``(1, 3, H, W)`` tensor."""
    return torch.as_tensor(np.ascontiguousarray(image)).permute(2, 0, 1)[None].to(dtype)


def to_image(x: torch.Tensor) -> np.ndarray:
    """``(1, 3, H, W)`` tensor -> ``(H, W, 3)`` float array."""
    return x[0].detach().permute(1, 2, 0).cpu().numpy()
