"""Attention-pair, KV-cache and prefill accounting for no compression, prompt-only
compression (PCC) and global compression (GCC).

Pair counts are the number of (query, key) pairs the mask admits, summed over
every query the regime actually computes. For GCC this is the inference
layout: prompt chunks that were compressed contribute only their blocks, and
each generated chunk contributes its text plus its block.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .interleave import MaskPolicy, visibility_matrix
from .objectives import TailAction, tail_action

SOFTMAX_FLOPS_PER_HEAD = 5   # exp, max, sum, divide, scale per pair and head


class Regime(enum.Enum):
    NONE = "none"
    PCC = "pcc"
    GCC = "gcc"


@dataclass(frozen=True)
class ChunkCost:
    """One chunk as seen by the attention: live text tokens and block size (0 if raw)."""
    text: int
    block: int
    compressed: bool


def dense_causal_pairs(n: int) -> int:
    return n * (n + 1) // 2


def prompt_entries(L: int, K: int, beta: int) -> int:
    """Cache entries after prefill: beta per full chunk plus the tail per the tail rule."""
    full, tail = divmod(L, K)
    if tail == 0:
        return beta * full
    return beta * full + (beta if tail_action(tail, beta) is TailAction.COMPRESS else tail)


def gcc_chunks(L: int, M: int, K: int, beta: int) -> list[ChunkCost]:
    """Inference-time chunk list for a prompt of L tokens and M generated tokens."""
    chunks = []
    full, tail = divmod(L, K)
    chunks += [ChunkCost(0, beta, True)] * full
    if tail:
        if tail_action(tail, beta) is TailAction.COMPRESS:
            chunks.append(ChunkCost(0, beta, True))
        else:
            chunks.append(ChunkCost(tail, 0, False))
    done, rest = divmod(M, K)
    chunks += [ChunkCost(K, beta, True)] * done
    if rest:
        chunks.append(ChunkCost(rest, 0, False))
    return chunks


def chunk_pairs(chunks: Sequence[ChunkCost], policy: MaskPolicy | None = None) -> int:
    """Closed-form pair count summed chunk by chunk."""
    p = policy or MaskPolicy()
    total = prior_blocks = prior_text_raw = prior_text_all = 0
    for c in chunks:
        t, b = c.text, c.block
        total += t * (t + 1) // 2
        total += t * prior_blocks
        total += t * (prior_text_all if p.text_sees_prior_text else prior_text_raw)
        if p.text_sees_own_block:
            total += t * b
        if p.visual_sees_own_block:
            total += b * b
        if p.visual_sees_source:
            total += b * t
        if p.visual_sees_prior_blocks:
            total += b * prior_blocks
        prior_blocks += b
        prior_text_all += t
        if not c.compressed:
            prior_text_raw += t
    return total


def uniform_pairs(n: int, K: int, beta: int, policy: MaskPolicy | None = None) -> int:
    """n compressed chunks, each with all K text tokens live (the training layout)."""
    p = policy or MaskPolicy()
    tri = n * (n - 1) // 2
    total = n * K * (K + 1) // 2 + K * beta * tri
    if p.text_sees_own_block:
        total += n * K * beta
    if p.text_sees_prior_text:
        total += K * K * tri
    if p.visual_sees_own_block:
        total += n * beta * beta
    if p.visual_sees_source:
        total += n * beta * K
    if p.visual_sees_prior_blocks:
        total += beta * beta * tri
    return total


def chunk_descriptors(chunks: Sequence[ChunkCost]):
    is_vis, chunk, off, comp = [], [], [], []
    for i, c in enumerate(chunks):
        for part, n in ((False, c.text), (True, c.block)):
            is_vis += [part] * n
            chunk += [i] * n
            off += range(n)
            comp += [c.compressed] * n
    return (np.array(is_vis, bool), np.array(chunk, np.int64), np.array(off, np.int64), np.array(comp, bool))


def brute_force_pairs(chunks: Sequence[ChunkCost], policy: MaskPolicy | None = None) -> int:
    """Materialize the mask and count admitted pairs."""
    is_vis, chunk, off, comp = chunk_descriptors(chunks)
    return int(visibility_matrix(is_vis, chunk, off, comp, policy or MaskPolicy()).sum())


@dataclass
class CostReport:
    regime: Regime
    attention_pair_count: int
    attention_flops: int
    kv_entries: int
    kv_bytes: int
    prefill_token_count: int
    pair_reduction: float = 0.0
    kv_reduction: float = 0.0
    prefill_ratio: float = 1.0     # NONE prefill tokens / this regime's prefill tokens

    def lines(self) -> list[str]:
        return [
            f"[{self.regime.name}]",
            f"attention_pairs = {self.attention_pair_count}",
            f"attention_flops = {self.attention_flops}",
            f"kv_entries = {self.kv_entries}",
            f"kv_bytes = {self.kv_bytes}",
            f"prefill_tokens = {self.prefill_token_count}",
            f"pair_reduction = {self.pair_reduction:.6f}",
            f"kv_reduction = {self.kv_reduction:.6f}",
            f"prefill_ratio = {self.prefill_ratio:.6f}",
        ]


@dataclass(frozen=True)
class CostModel:
    d_lm: int = 4096
    layers: int = 32
    heads: int = 32
    bytes_per_scalar: int = 2

    @property
    def flops_per_pair(self) -> int:
        return self.layers * (4 * self.d_lm + SOFTMAX_FLOPS_PER_HEAD * self.heads)

    def kv_bytes(self, entries: int) -> int:
        return entries * 2 * self.d_lm * self.bytes_per_scalar * self.layers


def cost_reports(L: int, M: int, K: int, beta: int, model: CostModel | None = None,
                 policy: MaskPolicy | None = None) -> dict[Regime, CostReport]:
    if L < 0 or M < 0 or L + M == 0:
        raise ValueError("need a non-empty sequence")
    if beta < 1 or K < 1:
        raise ValueError("K and beta must be positive")
    model = model or CostModel()
    P = prompt_entries(L, K, beta)
    chunks = gcc_chunks(L, M, K, beta)
    gcc_kv = sum(c.block + (0 if c.compressed else c.text) for c in chunks)
    raw = {
        Regime.NONE: (dense_causal_pairs(L + M), L + M, L),
        Regime.PCC: (dense_causal_pairs(P + M), P + M, P),
        Regime.GCC: (chunk_pairs(chunks, policy), gcc_kv, P),
    }
    base_pairs, base_kv, base_prefill = raw[Regime.NONE]
    out = {}
    for regime, (pairs, kv, prefill) in raw.items():
        out[regime] = CostReport(
            regime, pairs, pairs * model.flops_per_pair, kv, model.kv_bytes(kv), prefill,
            1.0 - pairs / base_pairs, 1.0 - kv / base_kv, base_prefill / prefill if prefill else 1.0,
        )
    return out


def report_text(reports: dict[Regime, CostReport], L: int, M: int, K: int, beta: int,
                model: CostModel | None = None, extra: dict | None = None) -> str:
    model = model or CostModel()
    head = [
        "# attention/kv cost report",
        f"# flops_per_pair = layers * (4 * d_lm + {SOFTMAX_FLOPS_PER_HEAD} * heads) = {model.flops_per_pair}",
        "# kv_bytes = kv_entries * 2 * d_lm * bytes_per_scalar * layers",
        f"prompt_tokens = {L}", f"generated_tokens = {M}", f"K = {K}", f"beta = {beta}",
        f"d_lm = {model.d_lm}", f"layers = {model.layers}", f"heads = {model.heads}",
        f"bytes_per_scalar = {model.bytes_per_scalar}",
    ]
    head += [f"{k} = {v}" for k, v in (extra or {}).items()]
    body = []
    for r in Regime:
        body += [""] + reports[r].lines()
    return "\n".join(head + body) + "\n"


def parse_report(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {"": {}}
    cur = ""
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            cur = line[1:-1]
            sections[cur] = {}
        else:
            k, v = (s.strip() for s in line.split("=", 1))
            sections[cur][k] = v
    return sections


def write_report(path: str | Path, text: str) -> None:
    Path(path).write_text(text)


def bench_table(reports: dict[Regime, CostReport]) -> str:
    rows = [f"{'regime':<6} {'pairs':>14} {'kv_entries':>11} {'prefill':>8} {'pair_red':>9} {'kv_red':>7} {'prefill_x':>9}"]
    for r in Regime:
        c = reports[r]
        rows.append(f"{r.name:<6} {c.attention_pair_count:>14} {c.kv_entries:>11} {c.prefill_token_count:>8} "
                    f"{c.pair_reduction:>9.2%} {c.kv_reduction:>7.2%} {c.prefill_ratio:>9.2f}")
    return "\n".join(rows)


@torch.no_grad()
def measure_first_token(system, prompt: Sequence[int], regimes: Sequence[Regime] = tuple(Regime)) -> dict:
    """Prefill token counts (exact) and wall time to the first token's logits (informational)."""
    from .generation import compress_prompt
    from .model import EvictableKVCache, step

    out = {}
    L = len(prompt)
    for regime in regimes:
        t0 = time.perf_counter()
        if regime is Regime.NONE:
            cache = EvictableKVCache(len(system.lm.layers))
            step(system.lm, cache, is_visual=np.zeros(L, bool), chunk=np.zeros(L, np.int64),
                 offset=np.arange(L), position=np.arange(L), text_ids=torch.as_tensor(list(prompt)))
            tokens = L
        else:
            tokens = compress_prompt(system, prompt).prefill_tokens
        out[regime.value] = {"prefill_tokens": tokens, "seconds": time.perf_counter() - t0}
    if "none" in out:
        for v in out.values():
            v["token_ratio"] = out["none"]["prefill_tokens"] / v["prefill_tokens"]
    return out
