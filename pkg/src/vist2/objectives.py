"""Training samples, loss batches, the MT-OCR / OLM / SFT losses and the curriculum.

Every loss is the mean next-token cross-entropy over the TEXT tokens in its
scope. The logits for a text token come from the token right before it in
surface order, which is a visual token at the start of every compressed
chunk's successor (STANDARD) or of every chunk (FLIPPED).

Sample files are JSON lines, one record per sample::

    {"task": "olm", "mode": "standard",
     "chunks": [[3, 1, 4, 1], [5, 9]], "compressed": [true, false],
     "scope": [[0, 6]]}

``scope`` holds half-open spans over the sample's flat text-token index
(chunk tokens concatenated in order); tokens outside every span are ignored
by the loss but stay visible to attention.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .interleave import InterleavedLayout, OrderMode, assemble, build_mask
from .rendering import ASSISTANT, EOS, USER, GlyphAtlas, TextChunk

IGNORE = -100

TASKS = ("lm", "mt_ocr", "olm", "sft")


class LossScopeError(ValueError):
    pass


# -- tail rule & curriculum ---------------------------------------------------

class TailAction(enum.Enum):
    RAW = "raw"
    COMPRESS = "compress"


@dataclass(frozen=True)
class TailRule:
    residual_length: int
    beta: int

    @property
    def action(self) -> TailAction:
        return TailAction.COMPRESS if self.residual_length > self.beta else TailAction.RAW


def tail_action(residual_length: int, beta: int) -> TailAction:
    return TailRule(residual_length, beta).action


class CurriculumLevel(enum.Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"


def curriculum_level(progress: float, a: float = 0.3, b: float = 0.7) -> CurriculumLevel:
    if not 0 < a < b < 1:
        raise ValueError(f"curriculum boundaries must satisfy 0 < a < b < 1, got a={a} b={b}")
    if progress < a:
        return CurriculumLevel.EASY
    if progress < b:
        return CurriculumLevel.MEDIUM
    return CurriculumLevel.HARD


def images_per_sample(level: CurriculumLevel, rng: np.random.Generator, hard_max: int = 6) -> int:
    """EASY: 1 image; MEDIUM: uniform on [2, 4]; HARD: uniform on [5, hard_max]."""
    if level is CurriculumLevel.EASY:
        return 1
    if level is CurriculumLevel.MEDIUM:
        return int(rng.integers(2, 5))
    if hard_max < 5:
        raise ValueError("HARD needs room for more than 4 images")
    return int(rng.integers(5, hard_max + 1))


# -- samples ------------------------------------------------------------------

@dataclass
class Sample:
    task: str
    chunks: list[tuple[int, ...]]
    compressed: list[bool]
    mode: OrderMode = OrderMode.STANDARD
    scope: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        self.chunks = [tuple(int(t) for t in c) for c in self.chunks]
        self.compressed = [bool(c) for c in self.compressed]
        self.scope = [(int(a), int(b)) for a, b in self.scope]
        if len(self.chunks) != len(self.compressed):
            raise ValueError("chunks and compressed flags differ in length")

    @property
    def text_ids(self) -> list[int]:
        return [t for c in self.chunks for t in c]

    def structure(self):
        return (self.mode, tuple(len(c) for c in self.chunks), tuple(self.compressed))

    def layout(self, beta: int) -> InterleavedLayout:
        chunks = [TextChunk(i, c) for i, c in enumerate(self.chunks)]
        blocks = [(i, beta) for i, flag in enumerate(self.compressed) if flag]
        return assemble(chunks, blocks, self.mode)

    def scope_mask(self) -> np.ndarray:
        m = np.zeros(len(self.text_ids), dtype=bool)
        for a, b in self.scope:
            m[a:b] = True
        return m

    def to_json(self) -> str:
        return json.dumps({
            "task": self.task, "mode": self.mode.value, "chunks": [list(c) for c in self.chunks],
            "compressed": self.compressed, "scope": [list(s) for s in self.scope],
        }, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "Sample":
        d = json.loads(line)
        return cls(d["task"], d["chunks"], d["compressed"], OrderMode(d["mode"]), d["scope"])


def write_samples(path: str | Path, samples: Iterable[Sample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")


def read_samples(path: str | Path) -> list[Sample]:
    with open(path, encoding="utf-8") as fh:
        return [Sample.from_json(line) for line in fh if line.strip()]


def lm_sample(tokens: Sequence[int]) -> Sample:
    return Sample("lm", [tuple(tokens)], [False], OrderMode.STANDARD, [(0, len(tokens))])


def ocr_sample(chunks: Sequence[Sequence[int]]) -> Sample:
    n = sum(len(c) for c in chunks)
    return Sample("mt_ocr", list(chunks), [True] * len(chunks), OrderMode.FLIPPED, [(0, n)])


def olm_sample(tokens: Sequence[int], K: int) -> Sample:
    chunks = [tuple(tokens[i:i + K]) for i in range(0, len(tokens), K)]
    flags = [True] * (len(chunks) - 1) + [False]
    return Sample("olm", chunks, flags, OrderMode.STANDARD, [(0, len(tokens))])


def split_with_tail(tokens: Sequence[int], K: int, beta: int) -> tuple[list[tuple[int, ...]], list[bool]]:
    """Full K-chunks are compressed; the residual follows the tail rule."""
    chunks, flags = [], []
    full = len(tokens) // K
    for i in range(full):
        chunks.append(tuple(tokens[i * K:(i + 1) * K]))
        flags.append(True)
    tail = tuple(tokens[full * K:])
    if tail:
        chunks.append(tail)
        flags.append(tail_action(len(tail), beta) is TailAction.COMPRESS)
    return chunks, flags


def sft_sample(query: Sequence[int], response: Sequence[int], K: int, beta: int) -> Sample:
    """Query compressed per the tail rule; response chunked independently, loss on the response only."""
    query, response = [int(t) for t in query], [int(t) for t in response]
    if not response:
        raise LossScopeError("SFT sample needs a non-empty response")
    q_chunks, q_flags = split_with_tail(query, K, beta)
    r_chunks = [tuple(response[i:i + K]) for i in range(0, len(response), K)]
    r_flags = [True] * (len(r_chunks) - 1) + [False]
    start = len(query)
    return Sample("sft", q_chunks + r_chunks, q_flags + r_flags, OrderMode.STANDARD,
                  [(start, start + len(response))])


def chat_query(atlas: GlyphAtlas, text: str) -> list[int]:
    return [atlas.token_id(USER)] + atlas.encode(text) + [atlas.token_id(ASSISTANT)]


def chat_response(atlas: GlyphAtlas, text: str) -> list[int]:
    return atlas.encode(text) + [atlas.token_id(EOS)]


# -- batches ------------------------------------------------------------------

@dataclass(eq=False)
class LossBatch:
    task: str
    layout: InterleavedLayout
    text_ids: torch.Tensor        # (B, n_text)
    targets: torch.Tensor         # (B, n_text); IGNORE outside the loss scope
    block_tokens: list[list[tuple[int, ...]]]  # per sample, the chunks to render
    mask: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.text_ids.shape[0]


def collate(samples: Sequence[Sample], beta: int) -> LossBatch:
    if not samples:
        raise ValueError("empty batch")
    s0 = samples[0]
    if any(s.structure() != s0.structure() or s.task != s0.task for s in samples):
        raise ValueError("all samples in a batch must share task and layout structure")
    layout = s0.layout(beta)
    ids = torch.tensor([s.text_ids for s in samples], dtype=torch.long)
    targets = ids.clone()
    for b, s in enumerate(samples):
        targets[b, torch.from_numpy(~s.scope_mask())] = IGNORE
    blocks = [[c for c, flag in zip(s.chunks, s.compressed) if flag] for s in samples]
    return LossBatch(s0.task, layout, ids, targets, blocks, build_mask(layout).matrix())


def batch_visuals(system, batch: LossBatch) -> torch.Tensor | None:
    n_blocks = len(batch.block_tokens[0])
    if n_blocks == 0:
        return None
    flat = [c for per in batch.block_tokens for c in per]
    emb = system.encode_chunks(flat)
    return emb.reshape(batch.batch_size, n_blocks * system.beta, -1)


def scoped_cross_entropy(layout: InterleavedLayout, logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean CE of each in-scope TEXT target against its predecessor's logits."""
    text_flat = np.flatnonzero(~layout.tokens.is_visual)
    pred = layout.predictor_index()[text_flat]
    has_pred = pred >= 0
    if not has_pred.any():
        raise LossScopeError("no text token has a predictor")
    sel_logits = logits[:, torch.from_numpy(pred[has_pred]).to(logits.device)]
    sel_targets = targets[:, torch.from_numpy(np.flatnonzero(has_pred))].to(logits.device)
    if not (sel_targets != IGNORE).any():
        raise LossScopeError("loss scope is empty")
    return F.cross_entropy(sel_logits.reshape(-1, sel_logits.shape[-1]), sel_targets.reshape(-1),
                           ignore_index=IGNORE)


def batch_logits(system, batch: LossBatch, visual: torch.Tensor | None = None) -> torch.Tensor:
    if visual is None:
        visual = batch_visuals(system, batch)
    return system.lm(batch.layout, batch.text_ids.to(system.lm.head.weight.device), visual, mask=batch.mask)


def loss_mt_ocr(system, batch: LossBatch, visual=None) -> torch.Tensor:
    if batch.layout.order_mode is not OrderMode.FLIPPED:
        raise LossScopeError("MT-OCR needs a FLIPPED layout")
    return scoped_cross_entropy(batch.layout, batch_logits(system, batch, visual), batch.targets)


def loss_olm(system, batch: LossBatch, visual=None) -> torch.Tensor:
    layout = batch.layout
    if layout.order_mode is not OrderMode.STANDARD:
        raise LossScopeError("OLM needs a STANDARD layout")
    missing = [c for c in layout.chunk_indices[:-1] if c not in layout.compressed_chunks]
    if missing:
        raise LossScopeError(f"chunks {missing} precede later chunks but have no visual block")
    return scoped_cross_entropy(layout, batch_logits(system, batch, visual), batch.targets)


def loss_sft(system, batch: LossBatch, visual=None) -> torch.Tensor:
    if batch.layout.order_mode is not OrderMode.STANDARD:
        raise LossScopeError("SFT needs a STANDARD layout")
    return scoped_cross_entropy(batch.layout, batch_logits(system, batch, visual), batch.targets)


def loss_lm(system, batch: LossBatch, visual=None) -> torch.Tensor:
    return scoped_cross_entropy(batch.layout, batch_logits(system, batch, visual), batch.targets)


LOSSES = {"lm": loss_lm, "mt_ocr": loss_mt_ocr, "olm": loss_olm, "sft": loss_sft}


def compute_loss(system, batch: LossBatch, visual=None) -> torch.Tensor:
    return LOSSES[batch.task](system, batch, visual)


def uniform_loss(vocab_size: int) -> float:
    return math.log(vocab_size)
