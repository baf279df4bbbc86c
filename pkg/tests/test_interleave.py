from __future__ import annotations

import itertools
from dataclasses import asdict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_visible, positions_one_liner
from vist2.effmeter import uniform_pairs
from vist2.interleave import (
    MaskPolicy, Modality, OrderMode, PairingError, Segment, assemble, assign_positions, build_mask,
    causal_layout, chunk_bases, dump_layout, segments_from_lengths, uniform_layout,
)
from vist2.rendering import TextChunk

STANDARD, FLIPPED = OrderMode.STANDARD, OrderMode.FLIPPED


def seg_triples(layout):
    return [(s.modality.value, s.chunk_index, s.length) for s in layout.segments]


def chunks(*lengths):
    return [TextChunk(i, (0,) * n) for i, n in enumerate(lengths)]


def token_index(layout, mod, chunk, offset):
    tt = layout.tokens
    hit = np.flatnonzero((tt.is_visual == (mod == "V")) & (tt.chunk == chunk) & (tt.offset == offset))
    assert hit.size == 1
    return int(hit[0])


def test_assemble_examples():
    lay = assemble(chunks(4, 4), [(0, 2), (1, 2)], STANDARD)
    assert [repr(s) for s in lay.segments] == ["T4@0", "V2@0", "T4@1", "V2@1"]
    assert lay.total_length == 12
    flipped = assemble(chunks(4, 4), [(0, 2), (1, 2)], FLIPPED)
    assert [repr(s) for s in flipped.segments] == ["V2@0", "T4@0", "V2@1", "T4@1"]
    single = assemble(chunks(4), [], STANDARD)
    assert [repr(s) for s in single.segments] == ["T4@0"]


def test_assemble_errors():
    with pytest.raises(PairingError):
        assemble(chunks(4), [(1, 2)])
    with pytest.raises(PairingError):
        assemble(chunks(4, 4), [(0, 2), (0, 2)])
    with pytest.raises(PairingError):
        assemble(chunks(4, 4), [(0, 2)], FLIPPED)
    with pytest.raises(ValueError):
        Segment(Modality.TEXT, 0, 0)


def test_single_chunk_is_causal():
    m = build_mask(causal_layout(6)).matrix()
    assert np.array_equal(m, np.tril(np.ones((6, 6), dtype=bool)))


def test_text_query_example():
    lay = assemble(chunks(2, 2), [(0, 1)], STANDARD)
    assert seg_triples(lay) == [("T", 0, 2), ("V", 0, 1), ("T", 1, 2)]
    rule = build_mask(lay)
    q = token_index(lay, "T", 1, 0)
    seen = {(("V" if lay.tokens.is_visual[k] else "T"), int(lay.tokens.chunk[k]), int(lay.tokens.offset[k]))
            for k in np.flatnonzero(rule.matrix()[q])}
    assert seen == {("V", 0, 0), ("T", 1, 0)}


def test_visual_query_example_under_literal_policy():
    lay = assemble(chunks(2, 2), [(0, 1), (1, 1)], STANDARD, MaskPolicy.literal())
    rule = build_mask(lay)
    q = token_index(lay, "V", 1, 0)
    seen = {(("V" if lay.tokens.is_visual[k] else "T"), int(lay.tokens.chunk[k]), int(lay.tokens.offset[k]))
            for k in np.flatnonzero(rule.matrix()[q])}
    assert seen == {("T", 1, 0), ("T", 1, 1), ("V", 0, 0)}


def test_visual_query_default_policy_sees_only_its_block():
    lay = assemble(chunks(2, 2), [(0, 2), (1, 2)], STANDARD)
    m = build_mask(lay).matrix()
    for q in np.flatnonzero(lay.tokens.is_visual):
        keys = np.flatnonzero(m[q])
        assert set(lay.tokens.chunk[keys]) == {lay.tokens.chunk[q]}
        assert lay.tokens.is_visual[keys].all()


POLICIES = [MaskPolicy(), MaskPolicy.literal(), MaskPolicy.for_mode(FLIPPED), MaskPolicy.literal(FLIPPED)]


def all_small_layouts():
    for n in range(1, 6):
        for K in range(1, 9):
            for beta in range(1, 5):
                yield n, K, beta


@pytest.mark.parametrize("policy", POLICIES, ids=["default", "literal", "flipped", "literal-flipped"])
def test_mask_equals_brute_force_exhaustive(policy):
    for n, K, beta in all_small_layouts():
        for mode in (STANDARD, FLIPPED):
            lay = uniform_layout(n, K, beta, mode, policy)
            assert np.array_equal(build_mask(lay).matrix(), brute_visible(seg_triples(lay), **asdict(policy)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 6), st.booleans(), st.integers(1, 4)), min_size=1, max_size=5),
       st.sampled_from(POLICIES))
def test_mask_equals_brute_force_ragged(spec, policy):
    cs = [TextChunk(i, (0,) * n) for i, (n, _, _) in enumerate(spec)]
    blocks = [(i, b) for i, (_, flag, b) in enumerate(spec) if flag]
    lay = assemble(cs, blocks, STANDARD, policy)
    assert np.array_equal(build_mask(lay).matrix(), brute_visible(seg_triples(lay), **asdict(policy)))


@pytest.mark.parametrize("policy", POLICIES[:2], ids=["default", "literal"])
def test_pair_count_closed_form(policy):
    for n, K, beta in all_small_layouts():
        lay = uniform_layout(n, K, beta, STANDARD, policy)
        assert build_mask(lay).pair_count() == uniform_pairs(n, K, beta, policy)


def test_flip_invariance():
    for n, K, beta in itertools.islice(all_small_layouts(), 0, None, 7):
        for policy in POLICIES:
            a = uniform_layout(n, K, beta, STANDARD, policy)
            b = uniform_layout(n, K, beta, FLIPPED, policy)
            ka = list(zip(a.tokens.is_visual, a.tokens.chunk, a.tokens.offset))
            kb = list(zip(b.tokens.is_visual, b.tokens.chunk, b.tokens.offset))
            perm = [kb.index(t) for t in ka]
            mb = build_mask(b).matrix()[np.ix_(perm, perm)]
            assert np.array_equal(build_mask(a).matrix(), mb)


def test_no_text_leakage_rule():
    lay = uniform_layout(4, 5, 2, STANDARD)
    tt, m = lay.tokens, build_mask(lay).matrix()
    for q in range(lay.total_length):
        for k in range(lay.total_length):
            if not tt.is_visual[k] and tt.chunk[k] < tt.chunk[q]:
                assert not m[q, k]


def test_text_sees_itself_and_no_lookahead():
    for policy in POLICIES[:1]:
        lay = uniform_layout(3, 4, 2, STANDARD, policy)
        m = build_mask(lay).matrix()
        tt = lay.tokens
        for q in np.flatnonzero(~tt.is_visual):
            assert m[q, q]
            later = np.arange(lay.total_length) > q
            assert not (m[q] & later).any()


def test_position_examples():
    lay = uniform_layout(4, 8, 4, STANDARD)
    pos = assign_positions(lay)
    assert pos[token_index(lay, "T", 0, 0)] == 0
    assert pos[token_index(lay, "T", 3, 2)] == 14
    assert pos[token_index(lay, "V", 2, 1)] == pos[token_index(lay, "T", 2, 1)] == 9


def test_raw_chunk_contributes_its_length():
    lay = assemble(chunks(5, 3, 4), [(1, 2)], STANDARD)
    assert chunk_bases(lay) == {0: 0, 1: 5, 2: 7}


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 9), st.booleans(), st.integers(1, 5)), min_size=1, max_size=6),
       st.sampled_from([STANDARD, FLIPPED]))
def test_positions_match_one_liner(spec, mode):
    cs = [TextChunk(i, (0,) * n) for i, (n, _, _) in enumerate(spec)]
    flags = [f or mode is FLIPPED for _, f, _ in spec]
    blocks = [(i, b) for i, ((_, _, b), f) in enumerate(zip(spec, flags)) if f]
    lay = assemble(cs, blocks, mode)
    assert assign_positions(lay) == positions_one_liner(seg_triples(lay))


def test_bases_strictly_increase():
    lay = uniform_layout(5, 6, 3, STANDARD)
    b = chunk_bases(lay)
    assert all(b[i + 1] == b[i] + 3 for i in range(4))


def test_dump_layout_format():
    lay = assemble(chunks(2, 2), [(0, 1)], STANDARD)
    lines = dump_layout(lay).splitlines()
    assert lines[0].startswith("# order=standard tokens=5")
    assert lines[1:] == ["T 0 0 0 1", "T 0 1 1 2", "V 0 0 0 1", "T 1 0 1 2", "T 1 1 2 3"]


def test_segments_from_lengths():
    segs = segments_from_lengths([("T", 0, 2), ("V", 0, 1)])
    assert segs[1].modality is Modality.VISUAL and segs[1].length == 1


def test_mask_is_immutable():
    m = build_mask(uniform_layout(2, 3, 1)).matrix()
    with pytest.raises(ValueError):
        m[0, 0] = False
