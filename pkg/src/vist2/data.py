"""Synthetic corpora standing in for natural-language training text.

Corpus files hold one document per line. ``gen_data`` also writes a manifest
with the generating spec and SHA-256 checksums.
"""
from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

DEFAULT_ALPHABET = "abcdefghijklmnopqrstuvwxyz .,;!?"

_WORDS = {
    "det": ["the", "a", "every", "some"],
    "noun": ["cat", "dog", "bird", "ship", "tree", "river", "stone", "lamp", "road", "king"],
    "verb": ["sees", "likes", "finds", "holds", "moves", "paints", "builds", "hears"],
    "adj": ["red", "old", "quiet", "small", "bright", "cold"],
}
_TEMPLATES = {
    "simple": [
        "{det} {noun} {verb} {det} {noun}.",
        "{det} {adj} {noun} {verb} {det} {noun}.",
        "{det} {noun} {verb} {det} {adj} {noun}!",
    ],
}


@dataclass
class SyntheticCorpusSpec:
    generator: str = "markov"          # "markov" | "template"
    order: int = 2
    seed: int = 0
    doc_count: int = 200
    doc_length: tuple[int, int] = (256, 256)  # inclusive range of characters per document
    alphabet: str = DEFAULT_ALPHABET
    concentration: float = 0.1          # Dirichlet concentration of Markov transitions
    grammar: str = "simple"

    def __post_init__(self):
        self.doc_length = tuple(self.doc_length)
        lo, hi = self.doc_length
        if not 1 <= lo <= hi:
            raise ValueError(f"bad document length range {self.doc_length}")
        if self.generator not in ("markov", "template"):
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.generator == "template" and self.grammar not in _TEMPLATES:
            raise ValueError(f"unknown grammar {self.grammar!r}")
        if len(set(self.alphabet)) != len(self.alphabet):
            raise ValueError("alphabet has repeated symbols")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticCorpusSpec":
        return cls(**d)


def markov_table(spec: SyntheticCorpusSpec) -> np.ndarray:
    """Transition probabilities indexed by the ``order`` previous symbols: shape (V,)*order + (V,)."""
    V = len(spec.alphabet)
    rng = np.random.default_rng([spec.seed, 1])
    probs = rng.dirichlet(np.full(V, spec.concentration), size=V ** spec.order)
    return probs.reshape((V,) * spec.order + (V,))


def _markov_docs(spec: SyntheticCorpusSpec) -> list[str]:
    V = len(spec.alphabet)
    table = markov_table(spec)
    cdf = np.cumsum(table, axis=-1)
    rng = np.random.default_rng([spec.seed, 2])
    lo, hi = spec.doc_length
    docs = []
    for _ in range(spec.doc_count):
        n = int(rng.integers(lo, hi + 1))
        ctx = list(rng.integers(0, V, size=spec.order))
        out = list(ctx)
        u = rng.random(n)
        while len(out) < n:
            row = cdf[tuple(out[-spec.order:])]
            out.append(min(int(np.searchsorted(row, u[len(out)], side="right")), V - 1))
        docs.append("".join(spec.alphabet[i] for i in out[:n]))
    return docs


def _template_docs(spec: SyntheticCorpusSpec) -> list[str]:
    rng = np.random.default_rng([spec.seed, 3])
    templates = _TEMPLATES[spec.grammar]
    lo, hi = spec.doc_length
    docs = []
    for _ in range(spec.doc_count):
        n = int(rng.integers(lo, hi + 1))
        parts = []
        while sum(len(p) + 1 for p in parts) < n:
            t = templates[int(rng.integers(len(templates)))]
            parts.append(t.format_map(_Picker(rng)))
        docs.append(" ".join(parts)[:n])
    return docs


class _Picker(dict):
    def __init__(self, rng):
        super().__init__()
        self.rng = rng

    def __missing__(self, key):
        words = _WORDS[key]
        return words[int(self.rng.integers(len(words)))]


def generate_documents(spec: SyntheticCorpusSpec) -> list[str]:
    docs = _markov_docs(spec) if spec.generator == "markov" else _template_docs(spec)
    bad = set("".join(docs)) - set(spec.alphabet)
    if bad:
        raise ValueError(f"generated symbols {sorted(bad)} are outside the alphabet")
    return docs


def gen_data(spec: SyntheticCorpusSpec, out_dir: str | Path, holdout_fraction: float = 0.1) -> dict:
    """Write train/held-out corpora plus ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    docs = generate_documents(spec)
    n_hold = max(1, int(round(len(docs) * holdout_fraction))) if len(docs) > 1 else 0
    splits = {"train.txt": docs[: len(docs) - n_hold], "heldout.txt": docs[len(docs) - n_hold:]}
    files = {}
    for name, part in splits.items():
        blob = "".join(d + "\n" for d in part).encode("utf-8")
        (out / name).write_bytes(blob)
        files[name] = {"documents": len(part), "sha256": hashlib.sha256(blob).hexdigest()}
    manifest = {"spec": asdict(spec), "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_corpus(path: str | Path) -> list[str]:
    return [line.rstrip("\n") for line in open(path, encoding="utf-8") if line.rstrip("\n")]


def conditional_entropy(docs: list[str], order: int) -> float:
    """Plug-in estimate (nats) of H(next symbol | previous ``order`` symbols)."""
    joint: Counter = Counter()
    ctx: Counter = Counter()
    for d in docs:
        for i in range(order, len(d)):
            joint[d[i - order:i + 1]] += 1
            ctx[d[i - order:i]] += 1
    total = sum(joint.values())
    return -sum(c / total * math.log(c / ctx[k[:-1]]) for k, c in joint.items())
