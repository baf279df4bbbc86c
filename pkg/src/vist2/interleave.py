"""Interleaved text/visual layouts, the sparse visibility rule and position ids.

A layout is a list of segments, each either the raw text of one chunk or the
visual block standing in for it. Visibility and positions are defined over
(modality, chunk_index, offset) triples, never over surface order, so the
STANDARD and FLIPPED orders of the same content share one rule.

Default visibility (``MaskPolicy.for_mode``):

* a TEXT token of chunk i sees the earlier tokens of its own chunk, every
  visual block of a chunk < i, and the raw text of earlier chunks that were
  never compressed;
* a VISUAL token sees its own block (bidirectionally) and nothing else.

Text of a compressed chunk therefore reaches later chunks only through the
block's input embeddings. FLIPPED layouts additionally let text see its own
block and all earlier text, which is the conditioning set of the OCR loss.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np


class Modality(enum.Enum):
    TEXT = "T"
    VISUAL = "V"


class OrderMode(enum.Enum):
    STANDARD = "standard"
    FLIPPED = "flipped"


class PairingError(ValueError):
    pass


@dataclass(frozen=True)
class MaskPolicy:
    text_sees_own_block: bool = False
    text_sees_prior_text: bool = False
    visual_sees_own_block: bool = True
    visual_sees_source: bool = False
    visual_sees_prior_blocks: bool = False

    @classmethod
    def for_mode(cls, mode: OrderMode) -> "MaskPolicy":
        if mode is OrderMode.FLIPPED:
            return cls(text_sees_own_block=True, text_sees_prior_text=True)
        return cls()

    @classmethod
    def literal(cls, mode: OrderMode = OrderMode.STANDARD) -> "MaskPolicy":
        """Visual queries see their source chunk and earlier blocks, not their own block."""
        return replace(
            cls.for_mode(mode), visual_sees_own_block=False, visual_sees_source=True, visual_sees_prior_blocks=True
        )


@dataclass(frozen=True)
class Segment:
    modality: Modality
    chunk_index: int
    length: int

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("segments must be non-empty")

    def __repr__(self):
        return f"{self.modality.value}{self.length}@{self.chunk_index}"


@dataclass(frozen=True)
class InterleavedLayout:
    segments: tuple[Segment, ...]
    order_mode: OrderMode = OrderMode.STANDARD
    policy: MaskPolicy = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if self.policy is None:
            object.__setattr__(self, "policy", MaskPolicy.for_mode(self.order_mode))
        self._validate()

    def _validate(self):
        seen_text: dict[int, int] = {}
        seen_vis: dict[int, int] = {}
        for seg in self.segments:
            table = seen_text if seg.modality is Modality.TEXT else seen_vis
            if seg.chunk_index in table:
                raise PairingError(f"duplicate {seg.modality.name} segment for chunk {seg.chunk_index}")
            table[seg.chunk_index] = seg.length
        order = [s.chunk_index for s in self.segments]
        if order != sorted(order):
            raise PairingError(f"chunk indices out of order: {order}")
        if not set(seen_vis) <= set(seen_text):
            raise PairingError("visual block without a matching text chunk")

    @property
    def total_length(self) -> int:
        return sum(s.length for s in self.segments)

    @cached_property
    def compressed_chunks(self) -> frozenset[int]:
        return frozenset(s.chunk_index for s in self.segments if s.modality is Modality.VISUAL)

    @cached_property
    def chunk_indices(self) -> tuple[int, ...]:
        return tuple(s.chunk_index for s in self.segments if s.modality is Modality.TEXT)

    @cached_property
    def tokens(self) -> "TokenTable":
        mod, chunk, off = [], [], []
        for seg in self.segments:
            mod += [seg.modality is Modality.VISUAL] * seg.length
            chunk += [seg.chunk_index] * seg.length
            off += range(seg.length)
        table = TokenTable(
            is_visual=np.array(mod, dtype=bool),
            chunk=np.array(chunk, dtype=np.int64),
            offset=np.array(off, dtype=np.int64),
        )
        table.position = np.asarray(assign_positions(self), dtype=np.int64)
        return table

    @property
    def positions(self) -> list[int]:
        return self.tokens.position.tolist()

    @property
    def text_count(self) -> int:
        return int((~self.tokens.is_visual).sum())

    @property
    def visual_count(self) -> int:
        return int(self.tokens.is_visual.sum())

    def with_policy(self, policy: MaskPolicy) -> "InterleavedLayout":
        return InterleavedLayout(self.segments, self.order_mode, policy)

    def predictor_index(self) -> np.ndarray:
        """For each flat position t, the flat index whose logits predict token t (-1 if none).

        Prediction follows surface order: the token right before t predicts t.
        Only TEXT targets are meaningful; VISUAL entries are always -1.
        """
        n = self.total_length
        pred = np.arange(-1, n - 1, dtype=np.int64)
        pred[self.tokens.is_visual] = -1
        return pred


@dataclass(eq=False)
class TokenTable:
    is_visual: np.ndarray
    chunk: np.ndarray
    offset: np.ndarray
    position: np.ndarray = None  # type: ignore[assignment]


def assemble(chunks, blocks, order_mode: OrderMode = OrderMode.STANDARD, policy: MaskPolicy | None = None):
    """Interleave text chunks with the visual blocks of the compressed ones.

    ``chunks`` are TextChunk-like (``chunk_index``, ``length``); ``blocks`` are
    VisualTokenBlock-like (``source_chunk``, ``m``) or plain ``(chunk_index, m)``
    pairs. A chunk without a block stays raw. FLIPPED needs a block for every chunk.
    """
    block_m: dict[int, int] = {}
    for b in blocks:
        idx, m = (b if isinstance(b, tuple) else (b.source_chunk, b.m))
        if idx in block_m:
            raise PairingError(f"two blocks for chunk {idx}")
        block_m[idx] = m
    chunk_ids = [c.chunk_index for c in chunks]
    if not set(block_m) <= set(chunk_ids):
        raise PairingError(f"blocks {sorted(set(block_m) - set(chunk_ids))} have no chunk")
    if order_mode is OrderMode.FLIPPED and set(block_m) != set(chunk_ids):
        raise PairingError("FLIPPED layouts need a block for every chunk")
    segs: list[Segment] = []
    for c in chunks:
        t = Segment(Modality.TEXT, c.chunk_index, c.length)
        v = Segment(Modality.VISUAL, c.chunk_index, block_m[c.chunk_index]) if c.chunk_index in block_m else None
        if order_mode is OrderMode.FLIPPED:
            segs += [v, t]
        else:
            segs += [t] + ([v] if v else [])
    return InterleavedLayout(tuple(segs), order_mode, policy)


def chunk_bases(layout: InterleavedLayout) -> dict[int, int]:
    """Position base of every chunk: the summed visual size of the chunks before it.

    A chunk without a block contributes its raw text length.
    """
    size: dict[int, int] = {}
    for seg in layout.segments:
        if seg.modality is Modality.VISUAL or seg.chunk_index not in size:
            size[seg.chunk_index] = seg.length
    bases, acc = {}, 0
    for idx in sorted(size):
        bases[idx] = acc
        acc += size[idx]
    return bases


def assign_positions(layout: InterleavedLayout) -> list[int]:
    bases = chunk_bases(layout)
    out: list[int] = []
    for seg in layout.segments:
        b = bases[seg.chunk_index]
        out.extend(range(b, b + seg.length))
    return out


class VisibilityRule:
    """``visible(q, k)`` over flat token indices of one layout."""

    def __init__(self, layout: InterleavedLayout):
        self.layout = layout
        self._matrix = None

    def visible(self, q: int, k: int) -> bool:
        return bool(self.matrix()[q, k])

    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            tt = self.layout.tokens
            compressed = np.array([c in self.layout.compressed_chunks for c in tt.chunk.tolist()], dtype=bool)
            self._matrix = visibility_matrix(
                tt.is_visual, tt.chunk, tt.offset, compressed, self.layout.policy
            )
            self._matrix.setflags(write=False)
        return self._matrix

    def pair_count(self) -> int:
        return int(self.matrix().sum())


def visibility_matrix(is_visual, chunk, offset, compressed, policy: MaskPolicy,
                      key_is_visual=None, key_chunk=None, key_offset=None, key_compressed=None) -> np.ndarray:
    """Boolean (queries x keys) visibility from per-token descriptors.

    Keys default to the queries; passing separate key descriptors lets the
    incremental decoder reuse the rule against cache entries.
    """
    if key_is_visual is None:
        key_is_visual, key_chunk, key_offset, key_compressed = is_visual, chunk, offset, compressed
    qv, qc, qo = is_visual[:, None], chunk[:, None], offset[:, None]
    kv, kc, ko = key_is_visual[None, :], key_chunk[None, :], key_offset[None, :]
    kcomp = key_compressed[None, :]
    same, earlier = kc == qc, kc < qc
    p = policy

    text_text = same & (ko <= qo)
    text_text |= earlier & (~kcomp | p.text_sees_prior_text)
    text_vis = earlier | (same & p.text_sees_own_block)
    vis_vis = (same & p.visual_sees_own_block) | (earlier & p.visual_sees_prior_blocks)
    vis_text = same & p.visual_sees_source

    qt, kt = ~qv, ~kv
    return (qt & kt & text_text) | (qt & kv & text_vis) | (qv & kv & vis_vis) | (qv & kt & vis_text)


def build_mask(layout: InterleavedLayout) -> VisibilityRule:
    return VisibilityRule(layout)


def causal_layout(length: int) -> InterleavedLayout:
    return InterleavedLayout((Segment(Modality.TEXT, 0, length),))


def dump_layout(layout: InterleavedLayout, rule: VisibilityRule | None = None) -> str:
    """One line per token: modality chunk offset position visible-set-size."""
    rule = rule or build_mask(layout)
    tt = layout.tokens
    sizes = rule.matrix().sum(axis=1)
    lines = [f"# order={layout.order_mode.value} tokens={layout.total_length} policy={_policy_tag(layout.policy)}"]
    for i in range(layout.total_length):
        mod = "V" if tt.is_visual[i] else "T"
        lines.append(f"{mod} {tt.chunk[i]} {tt.offset[i]} {tt.position[i]} {sizes[i]}")
    return "\n".join(lines) + "\n"


def _policy_tag(p: MaskPolicy) -> str:
    return "".join("1" if v else "0" for v in (
        p.text_sees_own_block, p.text_sees_prior_text, p.visual_sees_own_block,
        p.visual_sees_source, p.visual_sees_prior_blocks,
    ))


def uniform_layout(n: int, K: int, beta: int, order_mode=OrderMode.STANDARD, policy=None,
                   last_block: bool = True) -> InterleavedLayout:
    """n full chunks of K tokens, each compressed into beta visual tokens."""
    from .rendering import TextChunk

    chunks = [TextChunk(i, (0,) * K) for i in range(n)]
    blocks = [(i, beta) for i in range(n) if last_block or i < n - 1 or order_mode is OrderMode.FLIPPED]
    return assemble(chunks, blocks, order_mode, policy)


def segments_from_lengths(spec: Sequence[tuple[str, int, int]]) -> tuple[Segment, ...]:
    """Build segments from ``(modality letter, chunk_index, length)`` triples."""
    return tuple(Segment(Modality(m), c, n) for m, c, n in spec)
