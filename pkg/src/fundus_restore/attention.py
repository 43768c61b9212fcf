"""Window-based multi-head self-attention and the residual block built on it.

Functional operators work on channels-last tensors of shape ``(B, H, W, C)``;
the ``nn.Module`` wrappers take ``(B, C, H, W)`` like the surrounding conv
layers and permute internally.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NonFiniteError, ShapeError


@dataclass(frozen=True)
class AttentionConfig:
    window_size: int = 8
    num_heads: int = 1
    channels: int = 16
    shift: bool = False
    masked: bool = False

    def __post_init__(self):
        if self.window_size < 1:
            raise ConfigError(f"window_size must be >= 1, got {self.window_size}")
        if self.num_heads < 1 or self.channels < 1:
            raise ConfigError("num_heads and channels must be positive")
        if self.channels % self.num_heads:
            raise ConfigError(
                f"channels ({self.channels}) not divisible by num_heads ({self.num_heads})"
            )

    @property
    def head_dim(self) -> int:
        return self.channels // self.num_heads

    @property
    def shift_size(self) -> int:
        return self.window_size // 2 if self.shift else 0


class AttentionParams(NamedTuple):
    """Projection matrices (C x C, applied as ``x @ W``) and the L^2 x C position embedding."""

    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_o: torch.Tensor
    pos: torch.Tensor


def window_partition(x: torch.Tensor, window_size: int) -> torch.Tensor:
    """Split ``(B, H, W, C)`` into ``(B * N, L, L, C)`` windows in row-major window order."""
    if x.dim() != 4:
        raise ShapeError(f"expected (B, H, W, C), got shape {tuple(x.shape)}")
    B, H, W, C = x.shape
    L = window_size
    if H % L:
        raise ShapeError(f"height {H} is not divisible by window size {L}")
    if W % L:
        raise ShapeError(f"width {W} is not divisible by window size {L}")
    x = x.reshape(B, H // L, L, W // L, L, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, L, L, C)


def window_merge(windows: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Inverse of :func:`window_partition`."""
    if windows.dim() != 4 or windows.shape[1] != windows.shape[2]:
        raise ShapeError(f"expected (N, L, L, C) windows, got {tuple(windows.shape)}")
    L = windows.shape[1]
    if height % L or width % L:
        raise ShapeError(f"{height}x{width} map cannot be tiled by {L}x{L} windows")
    per_image = (height // L) * (width // L)
    if windows.shape[0] % per_image:
        raise ShapeError(
            f"{windows.shape[0]} windows is not a multiple of the {per_image} "
            f"windows per {height}x{width} map"
        )
    B = windows.shape[0] // per_image
    x = windows.reshape(B, height // L, width // L, L, L, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, height, width, -1)


def cyclic_shift(x: torch.Tensor, shift: int) -> torch.Tensor:
    """Move entry (r, c) to ((r + shift) mod H, (c + shift) mod W); ``-shift`` undoes it."""
    if shift == 0:
        return x
    return torch.roll(x, shifts=(shift, shift), dims=(1, 2))


def shift_attention_mask(height: int, width: int, window_size: int, shift: int,
                         device=None) -> torch.Tensor:
    """Additive ``(N, L^2, L^2)`` mask blocking attention across the wrap-around seam.

    After a cyclic shift by ``shift``, the pixel at (r, c) came from
    ((r - shift) mod H, ...); pixels originally in the last ``shift`` rows
    (columns) are not neighbours of the rest and are kept apart.
    """
    rows = (torch.arange(height, device=device) - shift) % height >= height - shift
    cols = (torch.arange(width, device=device) - shift) % width >= width - shift
    region = (rows[:, None].long() * 2 + cols[None, :].long()).float()
    region = window_partition(region[None, :, :, None], window_size).flatten(1)
    mask = region[:, :, None] != region[:, None, :]
    return torch.zeros(mask.shape, device=device).masked_fill(mask, float("-inf"))


def window_attention(tokens: torch.Tensor, params: AttentionParams, num_heads: int,
                     mask: Optional[torch.Tensor] = None, return_weights: bool = False):
    """Multi-head self-attention inside each window.

    tokens: ``(N, L^2, C)``. Per head ``softmax(Q K^T / sqrt(d_k)) V``; heads are
    concatenated, projected by ``W_O`` and the position embedding is added.
    """
    if tokens.dim() != 3:
        raise ShapeError(f"expected (N, L^2, C) tokens, got {tuple(tokens.shape)}")
    N, T, C = tokens.shape
    if C % num_heads:
        raise ShapeError(f"channels ({C}) not divisible by num_heads ({num_heads})")
    for name, w in zip(("w_q", "w_k", "w_v", "w_o"), params[:4]):
        if tuple(w.shape) != (C, C):
            raise ShapeError(f"{name} has shape {tuple(w.shape)}, expected {(C, C)}")
    if tuple(params.pos.shape) != (T, C):
        raise ShapeError(f"position embedding has shape {tuple(params.pos.shape)}, expected {(T, C)}")
    if not torch.isfinite(tokens).all():
        raise NonFiniteError("window_attention received non-finite input")

    d = C // num_heads

    def heads(t):
        return t.reshape(N, T, num_heads, d).transpose(1, 2)

    q = heads(tokens @ params.w_q)
    k = heads(tokens @ params.w_k)
    v = heads(tokens @ params.w_v)
    logits = (q @ k.transpose(-2, -1)) / math.sqrt(d)
    if mask is not None:
        nw = mask.shape[0]
        logits = logits.view(N // nw, nw, num_heads, T, T) + mask[None, :, None]
        logits = logits.view(N, num_heads, T, T)
    weights = logits.softmax(dim=-1)
    out = (weights @ v).transpose(1, 2).reshape(N, T, C)
    out = out @ params.w_o + params.pos
    if return_weights:
        return out, weights
    return out


def w_msa(x: torch.Tensor, cfg: AttentionConfig, params: AttentionParams) -> torch.Tensor:
    """Window attention over a ``(B, H, W, C)`` map, optionally on cyclically shifted windows."""
    B, H, W, C = x.shape
    L = cfg.window_size
    s = cfg.shift_size
    x = cyclic_shift(x, s)
    windows = window_partition(x, L).reshape(-1, L * L, C)
    mask = None
    if s and cfg.masked:
        mask = shift_attention_mask(H, W, L, s, device=x.device).to(x.dtype)
    out = window_attention(windows, params, cfg.num_heads, mask=mask)
    out = window_merge(out.reshape(-1, L, L, C), H, W)
    return cyclic_shift(out, -s)


def flops_w_msa(window_size: int, channels: int, height: int, width: int) -> int:
    """Multiply-accumulates of one W-MSA: per window 4 L^2 C^2 (projections) + 2 L^4 C (attention)."""
    L, C = window_size, channels
    if height % L or width % L:
        raise ShapeError(f"{height}x{width} is not divisible by window size {L}")
    n = (height * width) // (L * L)
    return n * (4 * L**2 * C**2 + 2 * L**4 * C)


def flops_msa_terms(channels: int, height: int, width: int) -> tuple[int, int]:
    """(projection, attention) parts of :func:`flops_msa`: 4 n C^2 is linear in n, 2 n^2 C quadratic."""
    n = height * width
    return 4 * n * channels**2, 2 * n**2 * channels


def flops_msa(channels: int, height: int, width: int) -> int:
    """Same accounting for global attention over all H*W tokens (quadratic in H*W)."""
    return sum(flops_msa_terms(channels, height, width))


class WindowMSA(nn.Module):
    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        C, L = cfg.channels, cfg.window_size
        self.w_q = nn.Parameter(torch.empty(C, C))
        self.w_k = nn.Parameter(torch.empty(C, C))
        self.w_v = nn.Parameter(torch.empty(C, C))
        self.w_o = nn.Parameter(torch.empty(C, C))
        # shared by every window of this block
        self.pos = nn.Parameter(torch.zeros(L * L, C))
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            nn.init.trunc_normal_(w, std=0.02)

    @property
    def params(self) -> AttentionParams:
        return AttentionParams(self.w_q, self.w_k, self.w_v, self.w_o, self.pos)

    def forward(self, x):
        # x: (B, H, W, C)
        return w_msa(x, self.cfg, self.params)


class FeedForward(nn.Module):
    """1x1 conv + GELU, depth-wise 3x3 conv + GELU, 1x1 conv. Shape preserving."""

    def __init__(self, channels: int, ratio: float = 2.0):
        super().__init__()
        hidden = int(round(channels * ratio))
        self.expand = nn.Conv2d(channels, hidden, 1)
        self.depthwise = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden,
                                   padding_mode="reflect")
        self.project = nn.Conv2d(hidden, channels, 1)

    def hidden(self, x):
        return F.gelu(self.expand(x))

    def forward(self, x):
        x = self.hidden(x)
        x = F.gelu(self.depthwise(x))
        return self.project(x)


class WSAB(nn.Module):
    """Window self-attention block: pre-norm W-MSA and FFN, each with a residual add."""

    def __init__(self, cfg: AttentionConfig, ffn_ratio: float = 2.0):
        super().__init__()
        self.cfg = cfg
        self.norm1 = nn.LayerNorm(cfg.channels, eps=1e-5)
        self.attn = WindowMSA(cfg)
        self.norm2 = nn.LayerNorm(cfg.channels, eps=1e-5)
        self.ffn = FeedForward(cfg.channels, ffn_ratio)

    def attention_branch(self, x):
        """F' = W-MSA(LN(F_in)) + F_in on a channels-last map."""
        return self.attn(self.norm1(x)) + x

    def forward(self, x):
        x = x.permute(0, 2, 3, 1)
        x = self.attention_branch(x)
        y = self.norm2(x).permute(0, 3, 1, 2)
        return self.ffn(y) + x.permute(0, 3, 1, 2)


def wsab_stage(channels: int, heads: int, depth: int, window_size: int, shift: bool,
               masked: bool = False, ffn_ratio: float = 2.0) -> nn.Sequential:
    """``depth`` blocks; with ``shift`` on, every second block uses shifted windows."""
    blocks = []
    for j in range(depth):
        cfg = AttentionConfig(window_size=window_size, num_heads=heads, channels=channels,
                              shift=shift and j % 2 == 1, masked=masked)
        blocks.append(WSAB(cfg, ffn_ratio))
    return nn.Sequential(*blocks)
