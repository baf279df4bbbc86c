"""Patchification, the page encoder and the tanh modal aligner."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .rendering import PATCH, RenderedPage


@dataclass(frozen=True, eq=False)
class PatchGrid:
    patches: np.ndarray  # (m, PATCH*PATCH)
    grid_shape: tuple[int, int]

    @property
    def m(self) -> int:
        return self.patches.shape[0]


@dataclass(frozen=True, eq=False)
class VisualTokenBlock:
    embeddings: torch.Tensor  # (m, d_lm), entries in (-1, 1)
    source_chunk: int

    @property
    def m(self) -> int:
        return self.embeddings.shape[0]


def patchify(page: RenderedPage) -> PatchGrid:
    pix = np.asarray(page.pixels)
    H, W = pix.shape
    if H % PATCH or W % PATCH:
        raise ValueError(f"page {H}x{W} is not patch aligned")
    gh, gw = H // PATCH, W // PATCH
    tiles = pix.reshape(gh, PATCH, gw, PATCH).transpose(0, 2, 1, 3).reshape(gh * gw, PATCH * PATCH)
    return PatchGrid(np.ascontiguousarray(tiles), (gh, gw))


def depatchify(grid: PatchGrid) -> np.ndarray:
    gh, gw = grid.grid_shape
    return grid.patches.reshape(gh, gw, PATCH, PATCH).transpose(0, 2, 1, 3).reshape(gh * PATCH, gw * PATCH)


def patchify_batch(pixels: torch.Tensor) -> torch.Tensor:
    """(B, H, W) -> (B, m, 256), same ordering as :func:`patchify`."""
    B, H, W = pixels.shape
    gh, gw = H // PATCH, W // PATCH
    return pixels.reshape(B, gh, PATCH, gw, PATCH).permute(0, 1, 3, 2, 4).reshape(B, gh * gw, PATCH * PATCH)


@dataclass
class EncoderConfig:
    d_v: int = 64
    layer_count: int = 2
    head_count: int = 4
    num_patches: int = 256
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d_v % self.head_count:
            raise ValueError("d_v must be divisible by head_count")


class EncoderBlock(nn.Module):
    """Pre-norm transformer block with full (bidirectional) self-attention."""

    def __init__(self, d: int, heads: int, ffn: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, ffn)
        self.fc2 = nn.Linear(ffn, d)

    def forward(self, x):
        B, m, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.ln1(x)).view(B, m, 3, h, d // h).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-1, -2)) / (d // h) ** 0.5
        y = (att.softmax(-1) @ v).transpose(1, 2).reshape(B, m, d)
        x = x + self.proj(y)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class OpticalEncoder(nn.Module):
    """Patch projection + learned per-patch position embeddings + bidirectional blocks."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_projection = nn.Linear(PATCH * PATCH, cfg.d_v)
        self.pos = nn.Parameter(torch.randn(cfg.num_patches, cfg.d_v) * 0.02)
        self.layers = nn.ModuleList(
            EncoderBlock(cfg.d_v, cfg.head_count, cfg.ffn_mult * cfg.d_v) for _ in range(cfg.layer_count)
        )
        self.ln_f = nn.LayerNorm(cfg.d_v)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        """(B, m, 256) or (m, 256) patches -> raw embeddings of shape (..., m, d_v)."""
        squeeze = patches.dim() == 2
        if squeeze:
            patches = patches.unsqueeze(0)
        if patches.shape[-1] != PATCH * PATCH:
            raise ValueError(f"expected {PATCH * PATCH}-dim patches, got {patches.shape[-1]}")
        m = patches.shape[1]
        if m > self.cfg.num_patches:
            raise ValueError(f"{m} patches exceed the encoder's {self.cfg.num_patches} position slots")
        x = self.patch_projection(patches) + self.pos[:m]
        for layer in self.layers:
            x = layer(x)
        x = self.ln_f(x)
        return x.squeeze(0) if squeeze else x


class ModalAligner(nn.Module):
    """``tanh(raw @ W_m + b_m)``; extra hidden layers only when ``hidden_layers > 0``."""

    def __init__(self, d_v: int, d_lm: int, hidden_layers: int = 0, hidden_width: int | None = None):
        super().__init__()
        layers: list[nn.Module] = []
        d_in = d_v
        for _ in range(hidden_layers):
            layers += [nn.Linear(d_in, hidden_width or 4 * d_lm), nn.GELU()]
            d_in = hidden_width or 4 * d_lm
        self.hidden = nn.Sequential(*layers)
        self.W_m = nn.Parameter(torch.empty(d_in, d_lm))
        self.b_m = nn.Parameter(torch.zeros(d_lm))
        nn.init.xavier_uniform_(self.W_m)

    def forward(self, raw: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.hidden(raw) @ self.W_m + self.b_m)


def encode(grid: PatchGrid, encoder: OpticalEncoder) -> torch.Tensor:
    p = next(encoder.parameters())
    return encoder(torch.as_tensor(grid.patches, dtype=p.dtype, device=p.device))


def align(raw: torch.Tensor, aligner: ModalAligner, source_chunk: int = 0) -> VisualTokenBlock:
    return VisualTokenBlock(aligner(raw), source_chunk)
