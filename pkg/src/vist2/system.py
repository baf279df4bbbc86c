"""The assembled model: renderer + optical encoder + aligner + language model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .encoder import EncoderConfig, ModalAligner, OpticalEncoder, VisualTokenBlock, patchify_batch
from .model import GCCTransformer, ModelConfig
from .rendering import ChunkingConfig, GlyphAtlas, PageGeometry, TextChunk, render_chunk

PARAM_GROUPS = ("encoder", "aligner", "llm")


@dataclass
class SystemConfig:
    chunking: ChunkingConfig
    geometry: PageGeometry
    encoder: EncoderConfig
    model: ModelConfig
    aligner_hidden_layers: int = 0

    def __post_init__(self):
        if self.chunking.beta != self.geometry.patch_count:
            raise ValueError(
                f"beta={self.chunking.beta} must equal the page patch count {self.geometry.patch_count}"
            )
        if self.encoder.num_patches < self.geometry.patch_count:
            raise ValueError("encoder has fewer position slots than the page has patches")


class Vist2(nn.Module):
    def __init__(self, cfg: SystemConfig, atlas: GlyphAtlas):
        super().__init__()
        if cfg.model.vocab_size < len(atlas):
            raise ValueError(f"vocab_size {cfg.model.vocab_size} is smaller than the atlas ({len(atlas)})")
        if atlas.capacity(cfg.geometry) < cfg.chunking.K:
            raise ValueError(f"K={cfg.chunking.K} does not fit a page holding {atlas.capacity(cfg.geometry)} glyphs")
        self.cfg = cfg
        self.atlas = atlas
        self.encoder = OpticalEncoder(cfg.encoder)
        self.aligner = ModalAligner(cfg.encoder.d_v, cfg.model.d_lm, cfg.aligner_hidden_layers)
        self.lm = GCCTransformer(cfg.model)

    @property
    def K(self) -> int:
        return self.cfg.chunking.K

    @property
    def beta(self) -> int:
        return self.cfg.chunking.beta

    def param_group(self, name: str) -> nn.Module:
        return {"encoder": self.encoder, "aligner": self.aligner, "llm": self.lm}[name]

    def named_group_parameters(self):
        for group in PARAM_GROUPS:
            for name, p in self.param_group(group).named_parameters():
                yield group, f"{group}.{name}", p

    def render(self, token_chunks: Sequence[Sequence[int]]) -> torch.Tensor:
        """Rendered pages (N, H, W) in the model's dtype."""
        p = self.lm.head.weight
        pages = [render_chunk(TextChunk(0, tuple(c)), self.atlas, self.cfg.geometry).pixels for c in token_chunks]
        return torch.from_numpy(np.stack(pages)).to(dtype=p.dtype, device=p.device)

    def encode_pages(self, pixels: torch.Tensor) -> torch.Tensor:
        """(N, H, W) pages -> aligned visual embeddings (N, m, d_lm)."""
        return self.aligner(self.encoder(patchify_batch(pixels)))

    def encode_chunks(self, token_chunks: Sequence[Sequence[int]]) -> torch.Tensor:
        if not token_chunks:
            p = self.lm.head.weight
            return p.new_zeros(0, self.beta, self.cfg.model.d_lm)
        return self.encode_pages(self.render(token_chunks))

    def block(self, chunk: TextChunk) -> VisualTokenBlock:
        return VisualTokenBlock(self.encode_chunks([chunk.token_ids])[0], chunk.chunk_index)


def build_system(cfg: SystemConfig, atlas: GlyphAtlas, seed: int = 0, dtype=torch.float32) -> Vist2:
    torch.manual_seed(seed)
    return Vist2(cfg, atlas).to(dtype)
