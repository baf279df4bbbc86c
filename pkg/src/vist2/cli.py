"""``vist2 gen-data|train|eval-ocr|generate|bench --config <path> [--seed N] [--stage S] [--trace]``

Exit codes: 0 success, 1 validation error (bad config or arguments),
2 runtime failure (missing checkpoint, training abort, ...).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np
import torch

from .config import PIPELINE, ConfigError, ExperimentConfig, canonical_json, load_config
from .data import gen_data, read_corpus
from .effmeter import CostModel, bench_table, cost_reports, report_text
from .evaluation import eval_ocr, heldout_chunks
from .generation import GenerationConfig, generate
from .system import build_system
from .objectives import chat_query
from .trainer import Stage, Trainer, load_system, make_batch_fn, save_system

log = logging.getLogger("vist2")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vist2", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment JSON file")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. stages.mt_ocr.max_steps=100")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("gen-data", help="write the synthetic corpus"))
    t = common(sub.add_parser("train", help="run one stage, or the whole pipeline"))
    t.add_argument("--stage", choices=[s.value for s in Stage])
    t.add_argument("--resume", action="store_true", help="continue from the stage's last checkpoint")
    e = common(sub.add_parser("eval-ocr", help="greedy OCR recovery on held-out chunks"))
    e.add_argument("--stage", default=Stage.MT_OCR.value, choices=[s.value for s in Stage])
    e.add_argument("--init", action="store_true", help="evaluate freshly initialized parameters")
    g = common(sub.add_parser("generate", help="generate with global context compression"))
    g.add_argument("--stage", default=Stage.SFT.value, choices=[s.value for s in Stage])
    g.add_argument("--init", action="store_true", help="use freshly initialized parameters")
    g.add_argument("--prompt", default=None, help="prompt text (default: generation.prompt)")
    g.add_argument("--trace", action="store_true", help="write the full trace file")
    b = common(sub.add_parser("bench", help="print the attention/KV cost comparison"))
    b.add_argument("--stage", default=None, help=argparse.SUPPRESS)
    return p


# -- helpers ------------------------------------------------------------------

def _write_effective_config(cfg: ExperimentConfig) -> None:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / "effective_config.json").write_text(
        json.dumps({"config_sha256": cfg.checksum, "config": cfg.raw}, indent=2, sort_keys=True) + "\n")


def _ensure_data(cfg: ExperimentConfig) -> None:
    manifest = cfg.data_dir / "manifest.json"
    if not manifest.exists():
        gen_data(cfg.corpus, cfg.data_dir)


def _docs(cfg: ExperimentConfig, split: str) -> list[np.ndarray]:
    _ensure_data(cfg)
    return [np.array(cfg.atlas.encode(d), dtype=np.int64) for d in read_corpus(cfg.data_dir / f"{split}.txt")]


def _system(cfg: ExperimentConfig, stage: Stage | None, init: bool = False):
    system = build_system(cfg.system, cfg.atlas, cfg.seed)
    if stage is None or init:
        return system
    path = cfg.checkpoint_path(stage)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}; run `vist2 train --stage {stage.value}` first")
    meta = load_system(system, path)
    if meta.get("config_sha256") not in (None, cfg.checksum):
        log.warning("checkpoint %s was written under a different config", path)
    return system


# -- commands -----------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    manifest = gen_data(cfg.corpus, cfg.data_dir)
    manifest["config_sha256"] = cfg.checksum
    print(json.dumps(manifest, sort_keys=True))
    return EXIT_OK


def train_stage(cfg: ExperimentConfig, stage: Stage, resume: bool = False) -> list[dict]:
    sc = cfg.stage(stage)
    prev = cfg.predecessor(stage)
    system = _system(cfg, prev)
    docs = _docs(cfg, "train")
    out = cfg.output_dir / stage.value
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(system, sc, make_batch_fn(system, sc, docs), out)
    ckpt_path = cfg.checkpoint_path(stage)
    last = out / "last.ckpt"
    if resume and last.exists():
        trainer.load_checkpoint(last)
    else:
        for name in ("metrics.log", "timing.log"):
            (out / name).unlink(missing_ok=True)
        (out / "metrics.log").write_text(f"# config_sha256={cfg.checksum} stage={stage.value}\n")
    history = trainer.run()
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    trainer.save_checkpoint(last)
    save_system(system, ckpt_path, {"config_sha256": cfg.checksum, "stage": stage.value,
                                    "steps": trainer.step, "config": canonical_json(cfg.raw)})
    return history


def cmd_train(cfg: ExperimentConfig, args) -> int:
    stages = [Stage(args.stage)] if args.stage else [s for s in PIPELINE if s in cfg.stages]
    for stage in stages:
        hist = train_stage(cfg, stage, resume=args.resume)
        final = hist[-1]["loss"] if hist else float("nan")
        print(json.dumps({"stage": stage.value, "steps": cfg.stage(stage).max_steps, "final_loss": final,
                          "config_sha256": cfg.checksum}, sort_keys=True))
    return EXIT_OK


def cmd_eval_ocr(cfg: ExperimentConfig, args) -> int:
    system = _system(cfg, Stage(args.stage), init=args.init)
    ev = cfg.evaluation
    chunks = heldout_chunks(_docs(cfg, "heldout"), system.K, int(ev.get("ocr_chunks", 256)), cfg.seed)
    report = eval_ocr(system, chunks)
    rec = {"config_sha256": cfg.checksum, "stage": None if args.init else args.stage, **report.to_dict()}
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / "eval_ocr.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
    print(json.dumps(rec, sort_keys=True))
    return EXIT_OK


def cmd_generate(cfg: ExperimentConfig, args) -> int:
    system = _system(cfg, Stage(args.stage), init=args.init)
    g = cfg.generation
    text = args.prompt if args.prompt is not None else g.get("prompt", "")
    prompt = chat_query(cfg.atlas, text) if g.get("chat", True) else cfg.atlas.encode(text)
    stops = [cfg.atlas.token_id(s) for s in g.get("stop", [])]
    gc = GenerationConfig(system.K, system.beta, max_new_tokens=int(g.get("max_new_tokens", 64)),
                          decoding=g.get("decoding", "greedy"), top_k=int(g.get("top_k", 1)),
                          seed=int(g.get("seed", cfg.seed)), stop_ids=stops)
    trace = generate(system, prompt, gc)
    header = {"config_sha256": cfg.checksum, "K": system.K, "beta": system.beta}
    sys.stdout.write(trace.to_jsonl(header))
    print(cfg.atlas.decode(trace.emitted))
    if args.trace:
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        path = cfg.output_dir / "trace.jsonl"
        trace.write(path, header)
        log.info("trace written to %s", path)
    log.info("timing %s", json.dumps(trace.timing, sort_keys=True))
    return EXIT_OK


def cmd_bench(cfg: ExperimentConfig, args) -> int:
    b = cfg.bench
    L, M = int(b.get("prompt_tokens", 4096)), int(b.get("generated_tokens", 28672))
    K, beta = int(b.get("K", cfg.system.chunking.K)), int(b.get("beta", cfg.system.chunking.beta))
    cm = CostModel(**b.get("cost_model", {}))
    reports = cost_reports(L, M, K, beta, cm)
    text = report_text(reports, L, M, K, beta, cm, {"config_sha256": cfg.checksum})
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / "cost_report.txt").write_text(text)
    print(bench_table(reports))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval-ocr": cmd_eval_ocr,
            "generate": cmd_generate, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"vist2: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.set, args.seed)
    except ConfigError as exc:
        print(f"vist2: invalid config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        torch.manual_seed(cfg.seed)
        if args.command != "bench":
            _write_effective_config(cfg)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"vist2: invalid config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - the exit-code contract covers every runtime failure
        log.debug("failure", exc_info=True)
        print(f"vist2: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
