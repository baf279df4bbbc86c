from __future__ import annotations

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import toy_system
from vist2.interleave import OrderMode
from vist2.objectives import (
    IGNORE, CurriculumLevel, LossScopeError, Sample, TailAction, batch_logits, batch_visuals, collate, compute_loss,
    curriculum_level, images_per_sample, lm_sample, loss_mt_ocr, loss_olm, ocr_sample, olm_sample,
    read_samples, scoped_cross_entropy, sft_sample, split_with_tail, tail_action, uniform_loss, write_samples,
)

V = 100


def zero_head(system):
    with torch.no_grad():
        system.lm.head.weight.zero_()
    return system


def oracle_loss(layout, logits, targets):
    """Walk the surface order: each TEXT token is scored against the nearest earlier token."""
    tt = layout.tokens
    text_rank = np.cumsum(~tt.is_visual) - 1
    terms = []
    for b in range(logits.shape[0]):
        for q in range(1, layout.total_length):
            if tt.is_visual[q]:
                continue
            y = int(targets[b, text_rank[q]])
            if y == IGNORE:
                continue
            terms.append(-torch.log_softmax(logits[b, q - 1], -1)[y])
    return torch.stack(terms).mean()


@pytest.mark.parametrize("make", [
    lambda r: ocr_sample([r.integers(0, V, 8), r.integers(0, V, 8)]),
    lambda r: olm_sample(r.integers(0, V, 20), 8),
    lambda r: sft_sample(r.integers(0, V, 11), r.integers(0, V, 13), 8, 2),
    lambda r: lm_sample(r.integers(0, V, 9)),
])
def test_uniform_logits_give_ln_v(make, rng):
    s = zero_head(toy_system())
    batch = collate([make(rng)], 2)
    assert compute_loss(s, batch).item() == pytest.approx(math.log(V), abs=1e-12)
    assert uniform_loss(V) == math.log(V)


@pytest.mark.parametrize("make", [
    lambda r: ocr_sample([r.integers(0, V, 8) for _ in range(3)]),
    lambda r: olm_sample(r.integers(0, V, 21), 8),
    lambda r: sft_sample(r.integers(0, V, 19), r.integers(0, V, 10), 8, 2),
])
def test_scope_matches_enumeration_oracle(make, rng):
    samples = [make(np.random.default_rng(k)) for k in range(3)]
    batch = collate(samples, 2)
    logits = torch.as_tensor(rng.normal(size=(3, batch.layout.total_length, V)))
    got = scoped_cross_entropy(batch.layout, logits, batch.targets)
    assert torch.allclose(got, oracle_loss(batch.layout, logits, batch.targets), rtol=1e-12)


def test_visual_positions_add_nothing_to_the_denominator(rng):
    # same text, same per-text-token logits; one layout has blocks in between
    toks = [tuple(rng.integers(0, V, 4)) for _ in range(2)]
    plain = Sample("lm", toks, [False, False], OrderMode.STANDARD, [(0, 8)])
    with_blocks = Sample("olm", toks, [True, False], OrderMode.STANDARD, [(0, 8)])
    a, b = collate([plain], 2), collate([with_blocks], 2)
    scores = torch.as_tensor(rng.normal(size=(1, 8, V)))
    la = torch.zeros(1, a.layout.total_length, V, dtype=torch.float64)
    lb = torch.zeros(1, b.layout.total_length, V, dtype=torch.float64)
    # place predictor logits so that text token i is predicted by the same score row
    for lay, out in ((a.layout, la), (b.layout, lb)):
        text = np.flatnonzero(~lay.tokens.is_visual)
        pred = lay.predictor_index()[text]
        for i, p in enumerate(pred):
            if p >= 0:
                out[0, p] = scores[0, i]
    ca = scoped_cross_entropy(a.layout, la, a.targets)
    cb = scoped_cross_entropy(b.layout, lb, b.targets)
    assert torch.allclose(ca, cb, rtol=1e-12)


def test_poisoned_out_of_scope_labels_do_not_move_the_loss(rng):
    s = toy_system()
    sample = sft_sample(rng.integers(0, V, 19), rng.integers(0, V, 10), 8, 2)
    batch = collate([sample], 2)
    base = compute_loss(s, batch)
    scope = torch.from_numpy(sample.scope_mask())
    assert (batch.targets[0, ~scope] == IGNORE).all()
    assert (batch.targets[0, scope] == batch.text_ids[0, scope]).all()
    # a wrong label placed where no predictor exists must not enter the loss either
    olm = collate([olm_sample(rng.integers(0, V, 16), 8)], 2)
    before = compute_loss(s, olm)
    olm.targets[0, 0] = (olm.targets[0, 0] + 7) % V
    assert torch.equal(compute_loss(s, olm), before)
    # while poisoning an in-scope label does
    batch.targets[0, scope.nonzero()[0]] = (batch.targets[0, scope.nonzero()[0]] + 1) % V
    assert not torch.equal(compute_loss(s, batch), base)


def test_single_chunk_olm_equals_plain_causal_lm(rng):
    s = toy_system()
    toks = rng.integers(0, V, 8)
    olm = compute_loss(s, collate([olm_sample(toks, 8)], 2))
    lm = compute_loss(s, collate([lm_sample(toks)], 2))
    ids = torch.as_tensor(toks)[None]
    ref = F.cross_entropy(s.lm.plain_causal_forward(ids)[0, :-1], ids[0, 1:])
    assert torch.equal(olm, lm)
    assert torch.allclose(olm, ref, rtol=1e-12)


def _chunk_losses(system, batch, visual, lengths):
    out = []
    offs = np.cumsum([0] + list(lengths))
    for a, b in zip(offs[:-1], offs[1:]):
        t = batch.targets.clone()
        keep = torch.zeros(t.shape[1], dtype=torch.bool)
        keep[a:b] = True
        t[:, ~keep] = IGNORE
        try:
            out.append(scoped_cross_entropy(batch.layout, batch_logits(system, batch, visual), t))
        except LossScopeError:
            out.append(None)
    return out


def test_zeroed_block_moves_chunk1_loss_only(rng):
    s = toy_system()
    batch = collate([olm_sample(rng.integers(0, V, 16), 8)], 2)
    vis = batch_visuals(s, batch)
    zeroed = vis.clone()
    zeroed[:, :2] = 0
    before, after = _chunk_losses(s, batch, vis, [8, 8]), _chunk_losses(s, batch, zeroed, [8, 8])
    assert torch.equal(before[0], after[0])
    assert not torch.allclose(before[1], after[1])


def test_olm_gradient_to_earlier_chunk_text_is_exactly_zero(rng):
    s = toy_system()
    batch = collate([olm_sample(rng.integers(0, V, 24), 8)], 2)
    batch.targets[:, :8] = IGNORE  # keep only the terms of chunks 1 and 2
    grabbed = {}

    def hook(_, __, out):
        out.retain_grad()
        grabbed["emb"] = out

    h = s.lm.token_embedding.register_forward_hook(hook)
    loss_olm(s, batch).backward()
    h.remove()
    g = grabbed["emb"].grad[0]
    assert torch.count_nonzero(g[:8]) == 0
    assert torch.count_nonzero(g[8:16]) > 0


def test_loss_errors(rng):
    s = toy_system()
    flipped = collate([ocr_sample([rng.integers(0, V, 8)])], 2)
    with pytest.raises(LossScopeError):
        loss_olm(s, flipped)
    std = collate([olm_sample(rng.integers(0, V, 16), 8)], 2)
    with pytest.raises(LossScopeError):
        loss_mt_ocr(s, std)
    gap = collate([Sample("olm", [(1,) * 8, (2,) * 8], [False, False], OrderMode.STANDARD, [(0, 16)])], 2)
    with pytest.raises(LossScopeError, match="no visual block"):
        loss_olm(s, gap)
    with pytest.raises(LossScopeError):
        sft_sample([1, 2, 3], [], 8, 2)
    with pytest.raises(ValueError):
        Sample("caption", [(1,)], [False])


def test_tail_rule_boundaries():
    assert tail_action(255, 256) is TailAction.RAW
    assert tail_action(256, 256) is TailAction.RAW
    assert tail_action(257, 256) is TailAction.COMPRESS
    assert tail_action(100, 256) is TailAction.RAW
    assert tail_action(300, 256) is TailAction.COMPRESS
    chunks, flags = split_with_tail(list(range(3784)), 1024, 256)
    assert [len(c) for c in chunks] == [1024, 1024, 1024, 712] and all(flags)
    chunks, flags = split_with_tail(list(range(100)), 1024, 256)
    assert flags == [False]


def test_sft_query_raw_or_compressed():
    raw = sft_sample(list(range(100)), [1, 2, 3], 1024, 256)
    assert raw.compressed[0] is False and raw.scope == [(100, 103)]
    comp = sft_sample(list(range(300)), [1, 2, 3], 1024, 256)
    assert comp.compressed[0] is True
    assert comp.chunks[0] == tuple(range(300))


def test_curriculum_levels():
    assert curriculum_level(0.0) is CurriculumLevel.EASY
    assert curriculum_level(0.5, 0.3, 0.7) is CurriculumLevel.MEDIUM
    assert curriculum_level(1.0) is CurriculumLevel.HARD
    assert curriculum_level(0.3) is CurriculumLevel.MEDIUM
    order = [CurriculumLevel.EASY, CurriculumLevel.MEDIUM, CurriculumLevel.HARD]
    levels = [order.index(curriculum_level(p)) for p in np.linspace(0, 1, 101)]
    assert levels == sorted(levels)
    for a, b in ((0.0, 0.5), (0.5, 0.5), (0.3, 1.0)):
        with pytest.raises(ValueError):
            curriculum_level(0.1, a, b)


def test_images_per_sample_ranges(rng):
    assert {images_per_sample(CurriculumLevel.EASY, rng) for _ in range(50)} == {1}
    assert {images_per_sample(CurriculumLevel.MEDIUM, rng) for _ in range(200)} == {2, 3, 4}
    assert {images_per_sample(CurriculumLevel.HARD, rng, 6) for _ in range(200)} == {5, 6}


def test_sample_jsonl_roundtrip(tmp_path, rng):
    samples = [ocr_sample([rng.integers(0, V, 8)]), olm_sample(rng.integers(0, V, 12), 8),
               sft_sample(rng.integers(0, V, 5), rng.integers(0, V, 4), 8, 2)]
    write_samples(tmp_path / "s.jsonl", samples)
    back = read_samples(tmp_path / "s.jsonl")
    assert back == samples
    first = (tmp_path / "s.jsonl").read_text().splitlines()[0]
    assert '"mode":"flipped"' in first


def test_overfit_one_sample_within_500_steps():
    s = toy_system(dtype=torch.float32)
    a = s.atlas
    batch = collate([ocr_sample([a.encode("abcdefgh"), a.encode("ijklmnop")])], 2)
    opt = torch.optim.Adam(s.parameters(), lr=3e-3)
    for _ in range(500):
        loss = compute_loss(s, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if loss.item() < 0.01:
            break
    assert loss.item() < 0.01
