"""Held-out evaluation: OCR recovery from rendered pages and OLM vs plain LM loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from .objectives import collate, lm_sample, ocr_sample, olm_sample, scoped_cross_entropy, batch_logits


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


@dataclass
class OcrReport:
    ratio: str
    chunks: int
    token_recovery: float      # fraction of tokens decoded exactly in place
    exact_match: float         # fraction of chunks decoded without any error
    edit_similarity: float     # 1 - mean normalized edit distance

    def to_dict(self) -> dict:
        return asdict(self)


@torch.no_grad()
def greedy_ocr(system, chunks: Sequence[Sequence[int]], batch_size: int = 64) -> list[list[int]]:
    """Decode each chunk from its own rendered page, one token at a time (ties -> lowest id)."""
    out: list[list[int]] = []
    was_training = system.training
    system.eval()
    try:
        for s in range(0, len(chunks), batch_size):
            part = [tuple(c) for c in chunks[s:s + batch_size]]
            K = len(part[0])
            if any(len(c) != K for c in part):
                raise ValueError("greedy_ocr batches need equal-length chunks")
            batch = collate([ocr_sample([c]) for c in part], system.beta)
            visual = system.encode_chunks(part).reshape(len(part), system.beta, -1)
            guess = torch.zeros_like(batch.text_ids)
            text_flat = np.flatnonzero(~batch.layout.tokens.is_visual)
            pred = batch.layout.predictor_index()[text_flat]
            for j in range(K):
                logits = system.lm(batch.layout, guess, visual, mask=batch.mask)
                guess[:, j] = logits[:, int(pred[j])].argmax(-1)
            out.extend(guess.tolist())
    finally:
        system.train(was_training)
    return out


def eval_ocr(system, chunks: Sequence[Sequence[int]], batch_size: int = 64) -> OcrReport:
    if not chunks:
        raise ValueError("no chunks to evaluate")
    decoded = greedy_ocr(system, chunks, batch_size)
    hits = total = exact = 0
    sim = 0.0
    for ref, hyp in zip(chunks, decoded):
        ref = list(ref)
        n_ok = sum(int(a == b) for a, b in zip(ref, hyp))
        hits += n_ok
        total += len(ref)
        exact += int(n_ok == len(ref))
        sim += 1.0 - edit_distance(ref, hyp) / max(len(ref), 1)
    r = system.cfg.chunking.r
    return OcrReport(f"{r.numerator}/{r.denominator}" if r.denominator != 1 else str(r.numerator),
                     len(chunks), hits / total, exact / len(chunks), sim / len(chunks))


def heldout_chunks(docs: Sequence[np.ndarray], K: int, count: int, seed: int = 0) -> list[tuple[int, ...]]:
    rng = np.random.default_rng([seed, 7])
    eligible = [d for d in docs if len(d) >= K]
    out = []
    for _ in range(count):
        d = eligible[int(rng.integers(len(eligible)))]
        s = int(rng.integers(0, len(d) - K + 1))
        out.append(tuple(int(t) for t in d[s:s + K]))
    return out


def heldout_windows(docs: Sequence[np.ndarray], length: int, count: int, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng([seed, 11])
    eligible = [d for d in docs if len(d) >= length]
    out = []
    for _ in range(count):
        d = eligible[int(rng.integers(len(eligible)))]
        s = int(rng.integers(0, len(d) - length + 1))
        out.append(np.asarray(d[s:s + length]))
    return out


@torch.no_grad()
def heldout_loss(system, windows: Sequence[np.ndarray], task: str, batch_size: int = 32) -> float:
    """Mean next-token CE over tokens 1..T-1 of each window (``task`` is "olm" or "lm")."""
    total, count = 0.0, 0
    for s in range(0, len(windows), batch_size):
        part = windows[s:s + batch_size]
        samples = [olm_sample(w, system.K) if task == "olm" else lm_sample(w) for w in part]
        batch = collate(samples, system.beta)
        loss = scoped_cross_entropy(batch.layout, batch_logits(system, batch), batch.targets)
        total += float(loss) * len(part)
        count += len(part)
    return total / count
