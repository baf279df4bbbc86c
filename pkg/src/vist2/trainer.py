"""Staged training: freeze flags, AdamW with warmup + cosine decay, checkpoints.

Batches are a pure function of ``(seed, step)``, so a run resumed from a
checkpoint replays the uninterrupted loss trace exactly.
"""
from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .interleave import OrderMode
from .objectives import (
    LossBatch, collate, compute_loss, curriculum_level, images_per_sample, lm_sample, ocr_sample,
    olm_sample, sft_sample,
)
from .rendering import ASSISTANT, EOS, USER
from .system import PARAM_GROUPS, Vist2

log = logging.getLogger(__name__)


class Stage(enum.Enum):
    WARMUP = "warmup"   # joint warm-up standing in for pretrained encoder/backbone weights
    MT_OCR = "mt_ocr"
    OLM = "olm"
    SFT = "sft"
    LM = "lm"           # plain causal LM (baseline)


@dataclass(frozen=True)
class FreezeFlags:
    encoder: bool
    aligner: bool
    llm: bool

    def frozen(self, group: str) -> bool:
        return getattr(self, group)


FREEZE = {
    Stage.WARMUP: FreezeFlags(encoder=False, aligner=False, llm=False),
    Stage.MT_OCR: FreezeFlags(encoder=False, aligner=False, llm=True),
    Stage.OLM: FreezeFlags(encoder=True, aligner=True, llm=False),
    Stage.SFT: FreezeFlags(encoder=True, aligner=True, llm=False),
    Stage.LM: FreezeFlags(encoder=True, aligner=True, llm=False),
}


class TrainingError(RuntimeError):
    pass


@dataclass
class StageConfig:
    stage: Stage
    learning_rate: float = 5e-4
    batch_size: int = 8
    max_steps: int = 1000
    seed: int = 0
    warmup_ratio: float = 0.01
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    log_every: int = 1
    # data shaping
    chunks_per_sample: int = 4
    curriculum: tuple[float, float] | None = (0.3, 0.7)   # None: one image per OCR sample
    hard_max_images: int = 6
    random_chunk_fraction: float = 0.0

    def __post_init__(self):
        if isinstance(self.stage, str):
            self.stage = Stage(self.stage)
        if self.curriculum is not None:
            self.curriculum = tuple(self.curriculum)
        if self.max_steps < 1 or self.batch_size < 1:
            raise ValueError("max_steps and batch_size must be positive")

    @property
    def freeze_flags(self) -> FreezeFlags:
        return FREEZE[self.stage]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage"] = self.stage.value
        d["curriculum"] = None if self.curriculum is None else list(self.curriculum)
        return d


def warmup_steps(max_steps: int, warmup_ratio: float) -> int:
    return max(1, round(warmup_ratio * max_steps))


def lr_at(step: int, max_steps: int, peak: float, warmup_ratio: float = 0.01) -> float:
    """Linear ramp 0 -> peak over the warmup steps, then cosine decay to 0 at ``max_steps``."""
    w = warmup_steps(max_steps, warmup_ratio)
    if step < w:
        return peak * step / w
    span = max(1, max_steps - w)
    return peak * 0.5 * (1.0 + math.cos(math.pi * min(step - w, span) / span))


# -- data streams ---------------------------------------------------------------

BatchFn = Callable[[int], LossBatch]


def _window(rng: np.random.Generator, docs: Sequence[np.ndarray], length: int) -> np.ndarray:
    eligible = [d for d in docs if len(d) >= length]
    if not eligible:
        raise ValueError(f"no document has {length} tokens")
    d = eligible[int(rng.integers(len(eligible)))]
    start = int(rng.integers(0, len(d) - length + 1))
    return d[start:start + length]


def make_batch_fn(system: Vist2, cfg: StageConfig, docs: Sequence[np.ndarray]) -> BatchFn:
    """Deterministic batch source for a stage; batch ``s`` depends only on (seed, s)."""
    K, beta, V = system.K, system.beta, len(system.atlas)
    corpus_symbols = np.unique(np.concatenate(list(docs)))

    def chunk_from(rng, length):
        if cfg.random_chunk_fraction and rng.random() < cfg.random_chunk_fraction:
            return rng.choice(corpus_symbols, size=length)
        return _window(rng, docs, length)

    def fn(step: int) -> LossBatch:
        rng = np.random.default_rng([cfg.seed, step])
        B = cfg.batch_size
        if cfg.stage in (Stage.WARMUP, Stage.MT_OCR):
            if cfg.curriculum is None:
                n = 1
            else:
                level = curriculum_level(step / cfg.max_steps, *cfg.curriculum)
                n = images_per_sample(level, rng, cfg.hard_max_images)
            samples = []
            for _ in range(B):
                toks = chunk_from(rng, n * K)
                samples.append(ocr_sample([toks[i * K:(i + 1) * K] for i in range(n)]))
        elif cfg.stage is Stage.OLM:
            samples = [olm_sample(_window(rng, docs, cfg.chunks_per_sample * K), K) for _ in range(B)]
        elif cfg.stage is Stage.LM:
            samples = [lm_sample(_window(rng, docs, cfg.chunks_per_sample * K)) for _ in range(B)]
        elif cfg.stage is Stage.SFT:
            q_len = int(rng.integers(1, 2 * K))
            r_len = int(rng.integers(1, 2 * K))
            user, asst, eos = (system.atlas.token_id(s) for s in (USER, ASSISTANT, EOS))
            samples = []
            for _ in range(B):
                w = _window(rng, docs, q_len + r_len - 1)
                query = [user] + list(w[: q_len - 1]) + [asst] if q_len > 1 else [user, asst]
                response = list(w[q_len - 1:q_len - 1 + r_len - 1]) + [eos]
                samples.append(sft_sample(query, response, K, beta))
        else:
            raise ValueError(f"no data stream for {cfg.stage}")
        if any(max(s.text_ids) >= V for s in samples):
            raise ValueError("token id outside the atlas vocabulary")
        return collate(samples, beta)

    return fn


# -- trainer ------------------------------------------------------------------

class Trainer:
    def __init__(self, system: Vist2, cfg: StageConfig, batch_fn: BatchFn, out_dir: str | Path | None = None):
        self.system = system
        self.cfg = cfg
        self.batch_fn = batch_fn
        self.out_dir = Path(out_dir) if out_dir else None
        self.step = 0
        self.history: list[dict] = []
        flags = cfg.freeze_flags
        self.trainable: dict[str, torch.nn.Parameter] = {}
        for group, name, p in system.named_group_parameters():
            p.requires_grad_(not flags.frozen(group))
            if not flags.frozen(group):
                self.trainable[name] = p
        if not self.trainable:
            raise TrainingError(f"stage {cfg.stage.value} leaves no parameters trainable")
        self.encoder_frozen = flags.encoder and flags.aligner
        self.optimizer = torch.optim.AdamW(
            list(self.trainable.values()), lr=0.0, betas=(0.9, 0.999), eps=1e-8,
            weight_decay=cfg.weight_decay,
        )
        torch.manual_seed(cfg.seed)

    # one update ------------------------------------------------------------
    def train_step(self) -> dict:
        cfg = self.cfg
        lr = lr_at(self.step, cfg.max_steps, cfg.learning_rate, cfg.warmup_ratio)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        batch = self.batch_fn(self.step)
        t0 = time.perf_counter()
        visual = None
        if self.encoder_frozen:
            from .objectives import batch_visuals
            with torch.no_grad():
                visual = batch_visuals(self.system, batch)
        loss = compute_loss(self.system, batch, visual)
        if not torch.isfinite(loss):
            self._abort(loss)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(list(self.trainable.values()), cfg.grad_clip)
        self.optimizer.step()
        dt = time.perf_counter() - t0
        tokens = int(batch.text_ids.numel())
        rec = {"step": self.step, "stage": cfg.stage.value, "loss": float(loss.item()), "lr": lr,
               "tokens": tokens, "tokens_per_sec": tokens / dt if dt > 0 else float("inf")}
        self.step += 1
        self.history.append(rec)
        self._log(rec)
        if self.out_dir and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
            self.save_checkpoint(self.out_dir / f"{cfg.stage.value}-step{self.step}.ckpt")
        return rec

    def run(self, until: int | None = None) -> list[dict]:
        end = self.cfg.max_steps if until is None else min(until, self.cfg.max_steps)
        start = len(self.history)
        while self.step < end:
            self.train_step()
        return self.history[start:]

    def _log(self, rec: dict):
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / "metrics.log", "a") as fh:
            fh.write(f"{rec['step']}\t{rec['stage']}\t{rec['loss']:.9g}\t{rec['lr']:.9g}\t{rec['tokens']}\n")
        with open(self.out_dir / "timing.log", "a") as fh:
            fh.write(f"{rec['step']}\t{rec['stage']}\t{rec['tokens_per_sec']:.1f}\n")
        if self.cfg.log_every and rec["step"] % self.cfg.log_every == 0:
            log.info("%s step %d loss %.4f lr %.3g", rec["stage"], rec["step"], rec["loss"], rec["lr"])

    def _abort(self, loss):
        msg = f"non-finite loss {loss.item()} at {self.cfg.stage.value} step {self.step}"
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            snap = self.out_dir / f"nan-{self.cfg.stage.value}-step{self.step}.ckpt"
            self.save_checkpoint(snap)
            msg += f"; snapshot written to {snap}"
        raise TrainingError(msg)

    # checkpoints -------------------------------------------------------------
    def state_tensors(self) -> tuple[dict[str, torch.Tensor], dict]:
        tensors = system_tensors(self.system)
        names = {id(p): n for n, p in self.trainable.items()}
        for p, st in self.optimizer.state.items():
            name = names[id(p)]
            for key, val in st.items():
                tensors[f"optim.{name}.{key}"] = torch.as_tensor(val)
        tensors["rng.torch"] = torch.get_rng_state()
        meta = {"stage_config": self.cfg.to_dict(), "step": self.step}
        return tensors, meta

    def save_checkpoint(self, path: str | Path) -> None:
        tensors, meta = self.state_tensors()
        ckpt.save(path, tensors, meta)

    def load_checkpoint(self, path: str | Path) -> None:
        tensors, meta = ckpt.load(path)
        if meta.get("stage_config", {}).get("stage") != self.cfg.stage.value:
            raise ckpt.CheckpointError(
                f"checkpoint is for stage {meta.get('stage_config', {}).get('stage')}, not {self.cfg.stage.value}"
            )
        load_system_tensors(self.system, tensors)
        self.optimizer.state.clear()
        for name, p in self.trainable.items():
            prefix = f"optim.{name}."
            st = {k[len(prefix):]: v.clone() for k, v in tensors.items() if k.startswith(prefix)}
            if st:
                self.optimizer.state[p] = st
        if "rng.torch" in tensors:
            torch.set_rng_state(tensors["rng.torch"])
        self.step = int(meta["step"])


def system_tensors(system: Vist2) -> dict[str, torch.Tensor]:
    return {name: p.detach().clone() for _, name, p in system.named_group_parameters()}


def load_system_tensors(system: Vist2, tensors: dict[str, torch.Tensor], strict: bool = True) -> None:
    seen = set()
    with torch.no_grad():
        for _, name, p in system.named_group_parameters():
            if name not in tensors:
                if strict:
                    raise ckpt.CheckpointError(f"checkpoint lacks parameter {name}")
                continue
            t = tensors[name]
            if tuple(t.shape) != tuple(p.shape):
                raise ckpt.CheckpointError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(p.shape)}")
            p.copy_(t.to(p.dtype))
            seen.add(name)


def save_system(system: Vist2, path: str | Path, meta: dict | None = None) -> None:
    ckpt.save(path, system_tensors(system), meta or {})


def load_system(system: Vist2, path: str | Path) -> dict:
    tensors, meta = ckpt.load(path)
    load_system_tensors(system, tensors)
    return meta


def run_stage(system: Vist2, cfg: StageConfig, docs: Sequence[np.ndarray] | None = None,
              batch_fn: BatchFn | None = None, out_dir: str | Path | None = None) -> list[dict]:
    """Train one stage to ``cfg.max_steps``; returns the per-step metrics."""
    if batch_fn is None:
        if docs is None:
            raise ValueError("run_stage needs docs or a batch_fn")
        batch_fn = make_batch_fn(system, cfg, docs)
    trainer = Trainer(system, cfg, batch_fn, out_dir)
    return trainer.run()


def group_snapshot(system: Vist2) -> dict[str, dict[str, torch.Tensor]]:
    snap: dict[str, dict[str, torch.Tensor]] = {g: {} for g in PARAM_GROUPS}
    for group, name, p in system.named_group_parameters():
        snap[group][name] = p.detach().clone()
    return snap


__all__ = [
    "Stage", "FreezeFlags", "FREEZE", "StageConfig", "Trainer", "TrainingError", "lr_at", "warmup_steps",
    "make_batch_fn", "run_stage", "save_system", "load_system", "group_snapshot", "OrderMode",
]
