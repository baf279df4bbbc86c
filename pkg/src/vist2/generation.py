"""Chunk-wise generation with the prompt and the model's own output folded into visual blocks.

The prompt's full chunks enter the cache only as visual blocks; a residual
tail follows the tail rule. During decoding the current chunk stays raw.
When it reaches K tokens it is rendered from the emitted ids, encoded, and
appended as one block at the chunk's position base, and its text entries are
evicted. The last visual token of that block predicts the next chunk's first
token, exactly as in training.

Traces are JSON lines::

    {"type": "header", "K": 8, "beta": 2, "prompt_length": 20, "prompt_entries": 6, ...}
    {"type": "step", "t": 1, "token": 41, "cache": [7, 7], "text_entries": 1, "visual_entries": 6}
    {"type": "compress", "t": 8, "chunk": 3, "positions": [6, 8]}
    {"type": "end", "emitted": [...], "reason": "max_new_tokens"}

Wall-clock timings are kept on the trace object but not written to the file,
so equal seeds give byte-identical files.
"""
from __future__ import annotations

import enum
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .model import EvictableKVCache, step
from .objectives import TailAction, tail_action
from .rendering import CapacityError, TextChunk, decode_page_oracle, render_chunk


class Decoding(enum.Enum):
    GREEDY = "greedy"
    TOP_K = "top_k"


class GenerationError(RuntimeError):
    pass


@dataclass
class GenerationConfig:
    K: int
    beta: int
    max_new_tokens: int = 64
    decoding: Decoding = Decoding.GREEDY
    top_k: int = 1
    seed: int = 0
    stop_ids: tuple[int, ...] = ()
    compress: bool = True    # fold completed output chunks into visual blocks
    evict: bool = True       # drop the text entries of folded chunks

    def __post_init__(self):
        if isinstance(self.decoding, str):
            self.decoding = Decoding(self.decoding)
        self.stop_ids = tuple(int(s) for s in self.stop_ids)
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.decoding is Decoding.TOP_K and self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.K < 1 or self.beta < 1:
            raise ValueError("K and beta must be positive")


@dataclass
class CompressionEvent:
    t: int
    chunk: int
    positions: tuple[int, int]


@dataclass
class GenerationTrace:
    prompt_length: int
    prompt_entries: int
    emitted: list[int] = field(default_factory=list)
    cache_sizes: list[list[int]] = field(default_factory=list)   # index t: after t emitted tokens
    text_entries: list[int] = field(default_factory=list)
    visual_entries: list[int] = field(default_factory=list)
    events: list[CompressionEvent] = field(default_factory=list)
    stop_reason: str = ""
    timing: dict = field(default_factory=dict)

    def records(self, header: dict | None = None) -> list[dict]:
        recs = [{"type": "header", "prompt_length": self.prompt_length, "prompt_entries": self.prompt_entries,
                 **(header or {})}]
        ev = {e.t: e for e in self.events}
        for t in range(1, len(self.cache_sizes)):
            recs.append({"type": "step", "t": t, "token": self.emitted[t - 1], "cache": self.cache_sizes[t],
                         "text_entries": self.text_entries[t], "visual_entries": self.visual_entries[t]})
            if t in ev:
                recs.append({"type": "compress", "t": t, "chunk": ev[t].chunk, "positions": list(ev[t].positions)})
        recs.append({"type": "end", "emitted": self.emitted, "reason": self.stop_reason})
        return recs

    def to_jsonl(self, header: dict | None = None) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self.records(header))

    def write(self, path: str | Path, header: dict | None = None) -> None:
        Path(path).write_text(self.to_jsonl(header))


@dataclass
class PromptState:
    cache: EvictableKVCache
    next_chunk: int
    next_base: int
    logits: torch.Tensor | None   # (vocab,) predicting the first response token
    prefill_tokens: int
    blocks: int


def expected_cache_size(t: int, K: int, beta: int, prompt_entries: int) -> int:
    return (t % K) + beta * (t // K) + prompt_entries


def _encode_block(system, tokens: Sequence[int], chunk_index: int) -> torch.Tensor:
    try:
        page = render_chunk(TextChunk(chunk_index, tuple(tokens)), system.atlas, system.cfg.geometry)
    except CapacityError as exc:
        raise CapacityError(f"chunk {chunk_index} ({len(tokens)} tokens) does not fit the page: {exc}") from exc
    if decode_page_oracle(page, system.atlas) != list(tokens):
        raise GenerationError(f"rendered chunk {chunk_index} does not decode back to its tokens")
    p = system.lm.head.weight
    pixels = torch.from_numpy(np.array(page.pixels[None])).to(dtype=p.dtype, device=p.device)
    return system.encode_pages(pixels)[0]


def _step_block(system, cache, chunk_index: int, base: int, emb: torch.Tensor) -> torch.Tensor:
    m = emb.shape[0]
    return step(system.lm, cache, is_visual=np.ones(m, bool), chunk=np.full(m, chunk_index),
                offset=np.arange(m), position=base + np.arange(m), visual=emb)


def _step_text(system, cache, ids: Sequence[int], chunk_index: int, base: int, start: int) -> torch.Tensor:
    n = len(ids)
    return step(system.lm, cache, is_visual=np.zeros(n, bool), chunk=np.full(n, chunk_index),
                offset=start + np.arange(n), position=base + start + np.arange(n),
                text_ids=torch.as_tensor(list(ids), dtype=torch.long))


@torch.no_grad()
def compress_prompt(system, prompt: Sequence[int], K: int | None = None, beta: int | None = None,
                    policy=None) -> PromptState:
    """Prefill the cache with the prompt's blocks and, if the tail stays raw, its text."""
    K = K or system.K
    beta = beta or system.beta
    prompt = [int(t) for t in prompt]
    cache = EvictableKVCache(len(system.lm.layers), policy)
    full = len(prompt) // K
    pieces = [(prompt[i * K:(i + 1) * K], True) for i in range(full)]
    tail = prompt[full * K:]
    if tail:
        pieces.append((tail, tail_action(len(tail), beta) is TailAction.COMPRESS))
    logits, base, blocks = None, 0, 0
    for idx, (toks, compressed) in enumerate(pieces):
        if compressed:
            emb = _encode_block(system, toks, idx)
            logits = _step_block(system, cache, idx, base, emb)
            base += emb.shape[0]
            blocks += 1
        else:
            logits = _step_text(system, cache, toks, idx, base, 0)
            base += len(toks)
    return PromptState(cache, len(pieces), base, None if logits is None else logits[0, -1],
                       len(cache), blocks)


def _choose(logits: torch.Tensor, cfg: GenerationConfig, rng: np.random.Generator) -> int:
    x = logits.detach().to(torch.float64).cpu().numpy()
    if cfg.decoding is Decoding.GREEDY:
        return int(np.argmax(x))  # first maximum, i.e. the lowest id on ties
    order = np.lexsort((np.arange(x.size), -x))[: cfg.top_k]
    z = x[order] - x[order].max()
    p = np.exp(z) / np.exp(z).sum()
    return int(order[rng.choice(len(order), p=p)])


@torch.no_grad()
def generate(system, prompt: Sequence[int], cfg: GenerationConfig, policy=None) -> GenerationTrace:
    if not prompt:
        raise GenerationError("generation needs a non-empty prompt")
    if cfg.K != system.K or cfg.beta != system.beta:
        raise GenerationError(f"config K={cfg.K}, beta={cfg.beta} does not match the model ({system.K}, {system.beta})")
    was_training = system.training
    system.eval()
    try:
        return _generate(system, prompt, cfg, policy)
    finally:
        system.train(was_training)


def _generate(system, prompt, cfg: GenerationConfig, policy) -> GenerationTrace:
    t0 = time.perf_counter()
    state = compress_prompt(system, prompt, cfg.K, cfg.beta, policy)
    cache = state.cache
    timing = {"prefill_s": time.perf_counter() - t0, "decode_s": 0.0, "compress_s": 0.0}
    trace = GenerationTrace(len(prompt), state.prefill_tokens, timing=timing)

    def record():
        trace.cache_sizes.append(cache.sizes())
        trace.text_entries.append(cache.text_entries)
        trace.visual_entries.append(cache.visual_entries)

    record()
    rng = np.random.default_rng(cfg.seed)
    logits = state.logits
    chunk, base, current = state.next_chunk, state.next_base, []
    while True:
        tok = _choose(logits, cfg, rng)
        trace.emitted.append(tok)
        t = len(trace.emitted)
        ts = time.perf_counter()
        logits = _step_text(system, cache, [tok], chunk, base, len(current))[0, -1]
        timing["decode_s"] += time.perf_counter() - ts
        current.append(tok)
        if len(current) == cfg.K:
            ts = time.perf_counter()
            if cfg.compress:
                emb = _encode_block(system, current, chunk)
                logits = _step_block(system, cache, chunk, base, emb)[0, -1]
                if cfg.evict:
                    cache.evict_chunk(chunk)
                trace.events.append(CompressionEvent(t, chunk, (base, base + emb.shape[0])))
                base += emb.shape[0]
            else:
                base += cfg.K
            chunk += 1
            current = []
            timing["compress_s"] += time.perf_counter() - ts
        record()
        if tok in cfg.stop_ids:
            trace.stop_reason = "stop_symbol"
            break
        if t >= cfg.max_new_tokens:
            trace.stop_reason = "max_new_tokens"
            break
    return trace
