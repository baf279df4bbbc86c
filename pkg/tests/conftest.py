from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from vist2.encoder import EncoderConfig  # noqa: E402
from vist2.model import ModelConfig  # noqa: E402
from vist2.rendering import ChunkingConfig, PageGeometry, builtin_atlas  # noqa: E402
from vist2.system import SystemConfig, build_system  # noqa: E402


def toy_system(K=8, beta=2, page=(16, 32), atlas="mono8x8", d_lm=32, d_v=32, layers=2, heads=2,
               enc_layers=1, seed=0, dtype=torch.float64, aligner_hidden_layers=0):
    a = builtin_atlas(atlas)
    cfg = SystemConfig(
        ChunkingConfig(K, beta), PageGeometry(*page),
        EncoderConfig(d_v=d_v, layer_count=enc_layers, head_count=heads, num_patches=beta),
        ModelConfig(d_lm=d_lm, layer_count=layers, head_count=heads, vocab_size=len(a), ffn_width=2 * d_lm),
        aligner_hidden_layers=aligner_hidden_layers,
    )
    return build_system(cfg, a, seed, dtype)


@pytest.fixture
def system64():
    return toy_system()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {name}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
