"""Transformer patch discriminator producing a realism score map."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .attention import wsab_stage
from .errors import ConfigError
from .generator import Downsample, ProjectIn, conv3x3, crop_to, pad_for_model


@dataclass(frozen=True)
class DiscriminatorConfig:
    base_channels: int = 16
    stages: int = 3
    blocks_per_stage: int = 2
    window_size: int = 8
    heads: tuple = (1, 2, 4, 8)
    shift: bool = False
    masked_shift: bool = False
    ffn_ratio: float = 2.0
    leaky_slope: float = 0.2
    # 6-channel input: the judged image concatenated with the HQ reference
    paired_input: bool = False

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(self.heads))
        if self.stages < 0:
            raise ConfigError("stages must be >= 0")
        if self.blocks_per_stage and len(self.heads) < self.stages:
            raise ConfigError(f"need {self.stages} head counts, got {self.heads}")
        for i in range(self.stages if self.blocks_per_stage else 0):
            if (2**i * self.base_channels) % self.heads[i]:
                raise ConfigError(f"stage {i}: channels not divisible by {self.heads[i]} heads")

    @property
    def in_channels(self) -> int:
        return 6 if self.paired_input else 3

    @property
    def pad_multiple(self) -> int:
        if self.stages == 0:
            return 1
        unit = math.lcm(self.window_size, 2) if self.blocks_per_stage else 2
        return unit * 2 ** (self.stages - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads"] = list(self.heads)
        return d


class Discriminator(nn.Module):
    """Projection, ``stages`` x (WSABs + stride-2 downsample), 3x3 conv to one channel.

    Scores are raw (no sigmoid); a score map cell judges one input patch.
    ``blocks_per_stage=0`` gives a purely convolutional PatchGAN-style variant.
    """

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        C = cfg.base_channels
        self.project_in = ProjectIn(cfg.in_channels, C, cfg.leaky_slope)
        self.stages = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i in range(cfg.stages):
            ch = 2**i * C
            self.stages.append(
                wsab_stage(ch, cfg.heads[i], cfg.blocks_per_stage, cfg.window_size,
                           cfg.shift, cfg.masked_shift, cfg.ffn_ratio)
                if cfg.blocks_per_stage else nn.Identity()
            )
            self.downs.append(Downsample(ch))
        self.score = conv3x3(2**cfg.stages * C, 1)

    def forward(self, x, reference=None):
        """``x``: (B, 3, H, W). Returns a (B, 1, ceil(H / 2^D), ceil(W / 2^D)) score map."""
        if self.cfg.paired_input:
            if reference is None:
                raise ValueError("paired discriminator needs a reference image")
            x = torch.cat([x, reference], dim=1)
        H, W = x.shape[-2:]
        x, _ = pad_for_model(x, self.cfg.pad_multiple)
        x = self.project_in(x)
        for blocks, down in zip(self.stages, self.downs):
            x = down(blocks(x))
        scores = self.score(x)
        f = 2**self.cfg.stages
        return scores[..., : -(-H // f), : -(-W // f)]


def receptive_field(cfg: DiscriminatorConfig) -> int:
    """Receptive field (pixels per side) of one score cell through the convolution stack.

    Standard recurrence r += (k - 1) * j, j *= stride over the projection conv,
    the stride-2 4x4 downsamples and the final 3x3 conv. WSABs are not counted:
    with blocks enabled a cell also sees every attention window its
    convolutional footprint touches, so the true footprint is window-aligned
    and larger.
    """
    r, j = 1, 1
    layers = [(3, 1)] + [(4, 2)] * cfg.stages + [(3, 1)]
    for k, s in layers:
        r += (k - 1) * j
        j *= s
    return r
