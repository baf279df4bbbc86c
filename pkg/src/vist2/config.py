"""Experiment configuration: one JSON file per experiment, validated across fields at load."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticCorpusSpec
from .encoder import EncoderConfig
from .model import ModelConfig
from .rendering import ChunkingConfig, GlyphAtlas, PageGeometry, builtin_atlas
from .system import SystemConfig
from .trainer import Stage, StageConfig

OUTPUT_ROOT_ENV = "VIST2_OUTPUT_ROOT"
PIPELINE = (Stage.WARMUP, Stage.MT_OCR, Stage.OLM, Stage.SFT)
# stage whose checkpoint a stage starts from; the LM baseline branches off the warm-up
PREDECESSOR = {Stage.WARMUP: None, Stage.MT_OCR: Stage.WARMUP, Stage.OLM: Stage.MT_OCR,
               Stage.SFT: Stage.OLM, Stage.LM: Stage.WARMUP}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    raw: dict
    atlas: GlyphAtlas
    system: SystemConfig
    corpus: SyntheticCorpusSpec
    stages: dict[Stage, StageConfig]
    seed: int
    output_dir: Path
    generation: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)

    @property
    def checksum(self) -> str:
        # where results go is not part of what the experiment is
        return config_checksum({k: v for k, v in self.raw.items() if k != "output_dir"})

    def stage(self, stage: Stage | str) -> StageConfig:
        stage = Stage(stage) if isinstance(stage, str) else stage
        if stage not in self.stages:
            raise ConfigError(f"config has no settings for stage {stage.value!r}")
        return self.stages[stage]

    def predecessor(self, stage: Stage) -> Stage | None:
        prev = PREDECESSOR[stage]
        while prev is not None and prev not in self.stages:
            prev = PREDECESSOR[prev]
        return prev

    @property
    def data_dir(self) -> Path:
        return self.output_dir / "data"

    def checkpoint_path(self, stage: Stage) -> Path:
        return self.output_dir / "checkpoints" / f"{stage.value}.ckpt"


def canonical_json(d: dict) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def config_checksum(d: dict) -> str:
    return hashlib.sha256(canonical_json(d).encode()).hexdigest()


def apply_override(d: dict, assignment: str) -> dict:
    """``a.b.c=<json>`` sets a nested field; non-JSON values are taken as strings."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, value = assignment.split("=", 1)
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    out = copy.deepcopy(d)
    node = out
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-object")
    node[parts[-1]] = parsed
    return out


def _build(cls, d: dict, what: str):
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{what}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{what}: {exc}") from exc


def resolve_output_dir(path: str) -> Path:
    p = Path(path)
    if p.is_absolute():
        return p
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p


def from_dict(d: dict) -> ExperimentConfig:
    required = ("atlas", "chunking", "page", "encoder", "model", "corpus", "stages")
    missing = [k for k in required if k not in d]
    if missing:
        raise ConfigError(f"config is missing {missing}")
    try:
        atlas = builtin_atlas(d["atlas"]) if not str(d["atlas"]).endswith(".atlas") else GlyphAtlas.load(d["atlas"])
    except (KeyError, FileNotFoundError, ValueError) as exc:
        raise ConfigError(f"atlas: {exc}") from exc
    chunking = _build(ChunkingConfig, d["chunking"], "chunking")
    geometry = _build(PageGeometry, d["page"], "page")
    enc = dict(d["encoder"])
    enc.setdefault("num_patches", geometry.patch_count)
    encoder = _build(EncoderConfig, enc, "encoder")
    mdl = dict(d["model"])
    mdl.setdefault("vocab_size", len(atlas))
    model = _build(ModelConfig, mdl, "model")
    if model.vocab_size != len(atlas):
        raise ConfigError(f"model vocab_size {model.vocab_size} does not match the atlas ({len(atlas)} symbols)")
    if atlas.capacity(geometry) < chunking.K:
        raise ConfigError(f"K={chunking.K} exceeds the page capacity {atlas.capacity(geometry)}")
    system = _build(SystemConfig, {
        "chunking": chunking, "geometry": geometry, "encoder": encoder, "model": model,
        "aligner_hidden_layers": d.get("aligner", {}).get("hidden_layers", 0),
    }, "system")
    corpus = _build(SyntheticCorpusSpec, d["corpus"], "corpus")
    missing_syms = [c for c in corpus.alphabet if c not in atlas]
    if missing_syms:
        raise ConfigError(f"corpus symbols {missing_syms} are not in the atlas")
    seed = int(d.get("seed", 0))
    stages = {}
    for name, sd in d["stages"].items():
        try:
            stage = Stage(name)
        except ValueError as exc:
            raise ConfigError(f"unknown stage {name!r}") from exc
        sd = dict(sd)
        sd.setdefault("seed", seed)
        stages[stage] = _build(StageConfig, {"stage": stage, **sd}, f"stages.{name}")
    gen = dict(d.get("generation", {}))
    if gen.get("max_new_tokens", 1) < 1:
        raise ConfigError("generation.max_new_tokens must be >= 1")
    return ExperimentConfig(
        raw=d, atlas=atlas, system=system, corpus=corpus, stages=stages, seed=seed,
        output_dir=resolve_output_dir(d.get("output_dir", "runs/default")),
        generation=gen, evaluation=dict(d.get("evaluation", {})), bench=dict(d.get("bench", {})),
    )


def load_config(path: str | Path, overrides: list[str] | None = None, seed: int | None = None) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    for o in overrides or []:
        d = apply_override(d, o)
    if seed is not None:
        d = apply_override(d, f"seed={int(seed)}")
    return from_dict(d)
