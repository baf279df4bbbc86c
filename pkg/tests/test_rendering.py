from __future__ import annotations

import numpy as np
import pytest

from oracles import page_crc, straight_line_render
from vist2.rendering import (
    ASSISTANT, EOS, RESERVED_SYMBOLS, USER, AtlasFormatError, CapacityError, ChunkingConfig, GlyphAtlas,
    NoMatchError, PageGeometry, RenderedPage, TextChunk, builtin_atlas, chunk_text, decode_page_oracle,
    page_checksum, render_chunk, write_pgm,
)

REFERENCE_TEXT = "The quick brown fox jumps over the lazy dog; 0123456789 ~!@#$%^&"
# computed once with the straight-line rasterizer in tests/oracles.py
GOLDEN = {"mono8x16": "e9bf3aa0", "mono8x8": "a5a58e29"}


def test_chunk_text_examples():
    cfg = ChunkingConfig(4, 2)
    assert [c.length for c in chunk_text(range(10), cfg)] == [4, 4, 2]
    assert chunk_text([], cfg) == []
    assert len(chunk_text(range(4096), ChunkingConfig(1024, 256))) == 4
    chunks = chunk_text(range(10), cfg)
    assert [c.chunk_index for c in chunks] == [0, 1, 2]
    assert sum((list(c.token_ids) for c in chunks), []) == list(range(10))


def test_compression_ratio_is_exact():
    assert ChunkingConfig(1024, 256).r == 4
    assert ChunkingConfig(6, 4).r.denominator == 2
    with pytest.raises(ValueError):
        ChunkingConfig(0, 1)


@pytest.mark.parametrize("name", ["mono8x16", "mono8x8"])
def test_builtin_atlas_contract(name):
    a = builtin_atlas(name)
    assert len(a) == 100
    assert all(s in a for s in RESERVED_SYMBOLS)
    assert len({b.tobytes() for b in a.bitmaps}) == len(a)
    assert a.bitmaps.shape[1:] == ((16, 8) if name == "mono8x16" else (8, 8))
    assert a.decode(a.encode("hello, world!")) == "hello, world!"


def test_atlas_serialization_roundtrip_and_corruption(tmp_path):
    a = builtin_atlas()
    blob = a.to_bytes()
    b = GlyphAtlas.from_bytes(blob)
    assert b.symbols == a.symbols and np.array_equal(b.bitmaps, a.bitmaps)
    a.save(tmp_path / "x.atlas")
    assert GlyphAtlas.load(tmp_path / "x.atlas").to_bytes() == blob
    bad = bytearray(blob)
    bad[40] ^= 0x01
    with pytest.raises(AtlasFormatError):
        GlyphAtlas.from_bytes(bytes(bad))
    with pytest.raises(AtlasFormatError):
        GlyphAtlas.from_bytes(b"nonsense" * 4)


def test_atlas_rejects_duplicate_or_blank_glyphs():
    g = np.zeros((2, 2, 2), dtype=np.uint8)
    g[0, 0, 0] = 1
    g[1, 0, 0] = 1
    with pytest.raises(ValueError):
        GlyphAtlas(["a", "b"], g)
    g[1] = 0
    with pytest.raises(ValueError):
        GlyphAtlas(["a", "b"], g)


def test_empty_chunk_renders_blank_page():
    page = render_chunk(TextChunk(0, ()), builtin_atlas(), PageGeometry(32, 32))
    assert not page.pixels.any()
    assert decode_page_oracle(page, builtin_atlas()) == []


def test_single_symbol_placed_at_origin():
    a = builtin_atlas()
    t = a.token_id("g")
    page = render_chunk(TextChunk(0, (t,)), a, PageGeometry(32, 32))
    assert np.array_equal(page.pixels[:16, :8], a.bitmaps[t].astype(float))
    rest = page.pixels.copy()
    rest[:16, :8] = 0
    assert not rest.any()


@pytest.mark.parametrize("name", ["mono8x16", "mono8x8"])
def test_golden_reference_render(name):
    a = builtin_atlas(name)
    ids = a.encode(REFERENCE_TEXT)
    assert len(ids) == 64
    page = render_chunk(TextChunk(0, tuple(ids)), a, PageGeometry(256, 256))
    assert page_checksum(page) == GOLDEN[name]
    assert page_crc(straight_line_render(ids, a.bitmaps, 256, 256)) == GOLDEN[name]


def test_render_matches_straight_line_rasterizer(rng):
    a = builtin_atlas("mono8x8")
    for _ in range(20):
        ids = rng.integers(0, len(a), size=int(rng.integers(0, 17))).tolist()
        page = render_chunk(TextChunk(0, tuple(ids)), a, PageGeometry(32, 32))
        assert page.pixels.tolist() == straight_line_render(ids, a.bitmaps, 32, 32)


def test_roundtrip_1000_random_chunks(rng):
    a = builtin_atlas()
    geo = PageGeometry(64, 64)
    cap = a.capacity(geo)
    for _ in range(1000):
        ids = tuple(rng.integers(0, len(a), size=int(rng.integers(1, cap + 1))).tolist())
        assert decode_page_oracle(render_chunk(TextChunk(0, ids), a, geo), a) == list(ids)


def test_render_is_pure():
    a = builtin_atlas()
    c = TextChunk(3, tuple(a.encode("abc")))
    p1, p2 = render_chunk(c, a, PageGeometry(32, 32)), render_chunk(c, a, PageGeometry(32, 32))
    assert p1.pixels.tobytes() == p2.pixels.tobytes()
    assert p1.source_chunk == 3


def test_corrupted_pixel_is_rejected():
    a = builtin_atlas()
    page = render_chunk(TextChunk(0, tuple(a.encode("abcd"))), a, PageGeometry(32, 32))
    pix = page.pixels.copy()
    ys, xs = np.nonzero(pix[:16, 8:16])
    pix[ys[0], 8 + xs[0]] = 0.0
    with pytest.raises(NoMatchError):
        decode_page_oracle(RenderedPage(pix, 0), a)


def test_ink_after_end_or_outside_grid_is_rejected():
    a = builtin_atlas()
    pix = np.zeros((32, 32))
    pix[16:32, 0:8] = a.bitmaps[5]
    with pytest.raises(NoMatchError):
        decode_page_oracle(RenderedPage(pix, 0), a)


def test_capacity_error_names_the_chunk():
    a = builtin_atlas()
    with pytest.raises(CapacityError, match="chunk 7"):
        render_chunk(TextChunk(7, (1,) * 9), a, PageGeometry(32, 32))


def test_page_geometry_must_be_patch_aligned():
    with pytest.raises(ValueError):
        PageGeometry(30, 32)
    assert PageGeometry(256, 256).patch_count == 256


def test_reference_page_capacity():
    assert builtin_atlas().capacity(PageGeometry(256, 256)) == 512
    assert builtin_atlas("mono8x8").capacity(PageGeometry(256, 256)) == 1024


def test_pgm_export(tmp_path):
    a = builtin_atlas()
    page = render_chunk(TextChunk(0, tuple(a.encode("hi"))), a, PageGeometry(16, 32))
    write_pgm(page, tmp_path / "p.pgm")
    blob = (tmp_path / "p.pgm").read_bytes()
    assert blob.startswith(b"P5\n32 16\n255\n")
    body = np.frombuffer(blob[len(b"P5\n32 16\n255\n"):], dtype=np.uint8).reshape(16, 32)
    assert np.array_equal(body == 0, page.pixels == 1.0)


def test_reserved_symbols_are_single_tokens():
    a = builtin_atlas()
    ids = [a.token_id(USER), a.token_id(ASSISTANT), a.token_id(EOS)]
    assert len(set(ids)) == 3
    with pytest.raises(KeyError):
        a.encode("é")
