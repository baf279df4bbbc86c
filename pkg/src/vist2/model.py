"""Decoder over interleaved text/visual embeddings with an evictable KV cache."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .interleave import InterleavedLayout, MaskPolicy, build_mask, visibility_matrix


class CacheError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    d_lm: int = 128
    layer_count: int = 4
    head_count: int = 4
    vocab_size: int = 100
    ffn_width: int = 512
    max_position: int = 65536
    rope_theta: float = 10000.0

    def __post_init__(self):
        if self.d_lm % self.head_count:
            raise ValueError("d_lm must be divisible by head_count")
        if (self.d_lm // self.head_count) % 2:
            raise ValueError("head dimension must be even for rotary phases")


def rotary(x: torch.Tensor, positions: torch.Tensor, theta: float) -> torch.Tensor:
    """Rotate channel pairs of ``x`` (..., T, dh) by angles set from explicit ``positions`` (T,)."""
    dh = x.shape[-1]
    inv = 1.0 / theta ** (torch.arange(0, dh, 2, dtype=x.dtype, device=x.device) / dh)
    ang = positions.to(x.dtype)[:, None] * inv[None, :]
    cos, sin = ang.cos(), ang.sin()
    x1, x2 = x[..., 0::2], x[..., 1::2]
    return torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1).flatten(-2)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_lm
        self.heads = cfg.head_count
        self.theta = cfg.rope_theta
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, cfg.ffn_width)
        self.fc2 = nn.Linear(cfg.ffn_width, d)

    def qkv_heads(self, x, positions):
        B, T, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).view(B, T, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        return rotary(q, positions, self.theta), rotary(k, positions, self.theta), v

    def attend(self, x, q, k, v, mask):
        # mask: (Tq, Tk) bool; invisible scores are -inf so their probability is exactly zero
        B, T, d = x.shape
        att = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
        att = att.masked_fill(~mask, float("-inf"))
        y = (att.softmax(-1) @ v).transpose(1, 2).reshape(B, T, d)
        x = x + self.proj(y)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class GCCTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.d_lm)
        self.layers = nn.ModuleList(Block(cfg) for _ in range(cfg.layer_count))
        self.ln_f = nn.LayerNorm(cfg.d_lm)
        self.head = nn.Linear(cfg.d_lm, cfg.vocab_size, bias=False)
        self.reset_parameters()

    def reset_parameters(self):
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                nn.init.normal_(mod.weight, std=0.02)
                if mod.bias is not None:
                    nn.init.zeros_(mod.bias)
        nn.init.normal_(self.token_embedding.weight, std=0.5)
        for blk in self.layers:
            nn.init.normal_(blk.proj.weight, std=0.02 / math.sqrt(2 * self.cfg.layer_count))
            nn.init.normal_(blk.fc2.weight, std=0.02 / math.sqrt(2 * self.cfg.layer_count))

    def embed(self, layout: InterleavedLayout, text_ids: torch.Tensor, visual: torch.Tensor | None) -> torch.Tensor:
        """Scatter text embeddings and aligned visual embeddings into layout order."""
        tt = layout.tokens
        text_ids = torch.as_tensor(text_ids, device=self.head.weight.device)
        if text_ids.dim() == 1:
            text_ids = text_ids.unsqueeze(0)
        B = text_ids.shape[0]
        n_vis = int(tt.is_visual.sum())
        if text_ids.shape[1] != layout.text_count:
            raise ValueError(f"layout has {layout.text_count} text tokens, got {text_ids.shape[1]}")
        if n_vis:
            if visual is None:
                raise ValueError("layout has visual tokens but no visual embeddings were given")
            if visual.dim() == 2:
                visual = visual.unsqueeze(0).expand(B, -1, -1)
            if visual.shape[1:] != (n_vis, self.cfg.d_lm):
                raise ValueError(f"expected visual embeddings of shape (*, {n_vis}, {self.cfg.d_lm}), got {tuple(visual.shape)}")
        te = self.token_embedding(text_ids)
        x = te.new_zeros(B, layout.total_length, self.cfg.d_lm)
        vis_idx = torch.from_numpy(np.flatnonzero(tt.is_visual)).to(x.device)
        txt_idx = torch.from_numpy(np.flatnonzero(~tt.is_visual)).to(x.device)
        x = x.index_copy(1, txt_idx, te)
        if n_vis:
            x = x.index_copy(1, vis_idx, visual.to(x.dtype))
        return x

    def forward(self, layout: InterleavedLayout, text_ids, visual=None, mask: np.ndarray | None = None) -> torch.Tensor:
        """Logits at every flat position of ``layout``: shape (B, total_length, vocab)."""
        pos = layout.tokens.position
        if pos.size and pos.max() > self.cfg.max_position:
            raise ValueError(f"position {pos.max()} exceeds max_position {self.cfg.max_position}")
        mask = build_mask(layout).matrix() if mask is None else mask
        if not mask.any(axis=1).all():
            raise ValueError("a query token has no visible keys")
        x = self.embed(layout, text_ids, visual)
        positions = torch.from_numpy(pos).to(x.device)
        m = torch.from_numpy(np.array(mask, dtype=bool)).to(x.device)
        for blk in self.layers:
            q, k, v = blk.qkv_heads(x, positions)
            x = blk.attend(x, q, k, v, m)
        return self.head(self.ln_f(x))

    def plain_causal_forward(self, text_ids) -> torch.Tensor:
        """Reference dense causal pass with positions 0..T-1 (no layout machinery)."""
        text_ids = torch.as_tensor(text_ids, device=self.head.weight.device)
        if text_ids.dim() == 1:
            text_ids = text_ids.unsqueeze(0)
        x = self.token_embedding(text_ids)
        T = x.shape[1]
        positions = torch.arange(T, device=x.device)
        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()
        for blk in self.layers:
            q, k, v = blk.qkv_heads(x, positions)
            x = blk.attend(x, q, k, v, causal)
        return self.head(self.ln_f(x))


def text_logits(layout: InterleavedLayout, logits: torch.Tensor) -> torch.Tensor:
    """Logits at the TEXT positions of ``layout`` (B, n_text, vocab)."""
    idx = torch.from_numpy(np.flatnonzero(~layout.tokens.is_visual)).to(logits.device)
    return logits.index_select(1, idx)


class EvictableKVCache:
    """Per-layer rotated keys and values plus one shared descriptor per entry.

    Every layer holds the same entries in append order; descriptors record
    modality, chunk index, in-chunk offset and position id.
    """

    def __init__(self, layer_count: int, policy: MaskPolicy | None = None):
        self.policy = policy or MaskPolicy()
        self.keys: list[torch.Tensor | None] = [None] * layer_count
        self.values: list[torch.Tensor | None] = [None] * layer_count
        self.is_visual = np.zeros(0, dtype=bool)
        self.chunk = np.zeros(0, dtype=np.int64)
        self.offset = np.zeros(0, dtype=np.int64)
        self.position = np.zeros(0, dtype=np.int64)
        self.compressed: set[int] = set()
        self.evicted: set[int] = set()

    def __len__(self) -> int:
        return int(self.is_visual.size)

    def sizes(self) -> list[int]:
        return [0 if k is None else k.shape[2] for k in self.keys]

    @property
    def text_entries(self) -> int:
        return int((~self.is_visual).sum())

    @property
    def visual_entries(self) -> int:
        return int(self.is_visual.sum())

    def _append(self, layer: int, k: torch.Tensor, v: torch.Tensor):
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = k, v
        else:
            self.keys[layer] = torch.cat([self.keys[layer], k], dim=2)
            self.values[layer] = torch.cat([self.values[layer], v], dim=2)

    def evict_chunk(self, chunk_index: int) -> "EvictableKVCache":
        """Drop every TEXT entry of a chunk whose block is already cached."""
        if chunk_index in self.evicted:
            raise CacheError(f"chunk {chunk_index} was already evicted")
        if chunk_index not in self.compressed:
            raise CacheError(f"chunk {chunk_index} has no visual block in the cache")
        keep = ~((~self.is_visual) & (self.chunk == chunk_index))
        idx = torch.from_numpy(np.flatnonzero(keep))
        for layer in range(len(self.keys)):
            if self.keys[layer] is not None:
                self.keys[layer] = self.keys[layer].index_select(2, idx.to(self.keys[layer].device))
                self.values[layer] = self.values[layer].index_select(2, idx.to(self.values[layer].device))
        self.is_visual, self.chunk = self.is_visual[keep], self.chunk[keep]
        self.offset, self.position = self.offset[keep], self.position[keep]
        self.evicted.add(chunk_index)
        return self


def evict_chunk(cache: EvictableKVCache, chunk_index: int) -> EvictableKVCache:
    return cache.evict_chunk(chunk_index)


@torch.no_grad()
def step(model: GCCTransformer, cache: EvictableKVCache, *, is_visual, chunk, offset, position,
         text_ids=None, visual=None) -> torch.Tensor:
    """Append new tokens to ``cache`` and return their logits (B, n_new, vocab).

    New tokens are described like layout tokens. TEXT tokens take their ids
    from ``text_ids`` in order, VISUAL tokens their embeddings from ``visual``.
    """
    is_visual = np.asarray(is_visual, dtype=bool)
    chunk = np.asarray(chunk, dtype=np.int64)
    offset = np.asarray(offset, dtype=np.int64)
    position = np.asarray(position, dtype=np.int64)
    n = is_visual.size
    if len(cache) and chunk.size and chunk.min() < cache.chunk.max():
        raise CacheError("new tokens belong to a chunk older than the cache tail")
    if set(chunk[~is_visual].tolist()) & cache.compressed:
        raise CacheError("text for a chunk that is already compressed")
    if position.size and position.max() > model.cfg.max_position:
        raise ValueError(f"position {position.max()} exceeds max_position {model.cfg.max_position}")

    device = model.head.weight.device
    dtype = model.head.weight.dtype
    x = torch.zeros(1, n, model.cfg.d_lm, dtype=dtype, device=device)
    if (~is_visual).any():
        ids = torch.as_tensor(text_ids, device=device).reshape(1, -1)
        x[:, torch.from_numpy(np.flatnonzero(~is_visual))] = model.token_embedding(ids)
    if is_visual.any():
        vis = torch.as_tensor(visual, dtype=dtype, device=device).reshape(1, -1, model.cfg.d_lm)
        x[:, torch.from_numpy(np.flatnonzero(is_visual))] = vis
        x = x.contiguous()

    compressed = cache.compressed | set(chunk[is_visual].tolist())
    k_vis = np.concatenate([cache.is_visual, is_visual])
    k_chunk = np.concatenate([cache.chunk, chunk])
    k_off = np.concatenate([cache.offset, offset])
    k_comp = np.array([c in compressed for c in k_chunk.tolist()], dtype=bool)
    q_comp = np.array([c in compressed for c in chunk.tolist()], dtype=bool)
    mask = visibility_matrix(is_visual, chunk, offset, q_comp, cache.policy, k_vis, k_chunk, k_off, k_comp)
    if not mask.any(axis=1).all():
        raise CacheError("a new token has no visible keys")
    m = torch.from_numpy(mask).to(device)
    positions = torch.from_numpy(position).to(device)
    for layer, blk in enumerate(model.layers):
        q, k, v = blk.qkv_heads(x, positions)
        cache._append(layer, k, v)
        x = blk.attend(x, q, cache.keys[layer], cache.values[layer], m)
    cache.is_visual = k_vis
    cache.chunk = k_chunk
    cache.offset = k_off
    cache.position = np.concatenate([cache.position, position])
    cache.compressed = compressed
    return model.head(model.ln_f(x))


def step_layout(model: GCCTransformer, cache: EvictableKVCache, layout: InterleavedLayout,
                text_ids=None, visual=None, start: int = 0, stop: int | None = None) -> torch.Tensor:
    """Step the flat slice ``[start, stop)`` of ``layout`` into the cache."""
    tt = layout.tokens
    sl = slice(start, stop)
    text_before = int((~tt.is_visual[:start]).sum())
    vis_before = int(tt.is_visual[:start].sum())
    n_text = int((~tt.is_visual[sl]).sum())
    n_vis = int(tt.is_visual[sl].sum())
    ids = None if text_ids is None else torch.as_tensor(text_ids).reshape(-1)[text_before:text_before + n_text]
    vis = None if visual is None else visual.reshape(-1, model.cfg.d_lm)[vis_before:vis_before + n_vis]
    return step(model, cache, is_visual=tt.is_visual[sl], chunk=tt.chunk[sl], offset=tt.offset[sl],
                position=tt.position[sl], text_ids=ids, visual=vis)
