"""Chunking, glyph atlases and the deterministic page renderer.

Pages are single-channel float grids with background 0.0 and ink 1.0. Glyphs
are placed on a fixed grid, left-to-right then top-to-bottom, so rendering is
exactly invertible by template matching (see :func:`decode_page_oracle`).

Atlas blob layout (all integers little-endian)::

    magic      8 bytes   b"VIST2ATL"
    version    u16       ATLAS_VERSION
    glyph_w    u16
    glyph_h    u16
    count      u16
    count x {
        name_len  u8
        name      utf-8 bytes
        bitmap    ceil(glyph_w * glyph_h / 8) bytes, row-major, MSB first
    }
    crc32      u32       over every preceding byte
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

ATLAS_MAGIC = b"VIST2ATL"
ATLAS_VERSION = 1

PATCH = 16
BACKGROUND = 0.0
INK = 1.0

# Reserved symbols used by the chat template; they render as patterned boxes.
USER = "<user>"
ASSISTANT = "<assistant>"
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
EOS = "<eos>"
RESERVED_SYMBOLS = (USER, ASSISTANT, THINK_OPEN, THINK_CLOSE, EOS)


class CapacityError(ValueError):
    """A chunk has more tokens than the page has glyph cells."""


class NoMatchError(ValueError):
    """A page cell matches neither the background nor any glyph."""


class AtlasFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ChunkingConfig:
    K: int
    beta: int

    def __post_init__(self):
        if self.K < 1 or self.beta < 1:
            raise ValueError(f"K and beta must be positive, got K={self.K} beta={self.beta}")

    @property
    def r(self) -> Fraction:
        return Fraction(self.K, self.beta)


@dataclass(frozen=True)
class TextChunk:
    chunk_index: int
    token_ids: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.token_ids)


@dataclass(frozen=True)
class PageGeometry:
    height: int
    width: int

    def __post_init__(self):
        if self.height % PATCH or self.width % PATCH or self.height <= 0 or self.width <= 0:
            raise ValueError(f"page {self.height}x{self.width} is not a positive multiple of {PATCH}")

    @property
    def patch_count(self) -> int:
        return (self.height // PATCH) * (self.width // PATCH)


@dataclass(frozen=True, eq=False)
class RenderedPage:
    pixels: np.ndarray  # (H, W) float64
    source_chunk: int

    @property
    def H(self) -> int:
        return self.pixels.shape[0]

    @property
    def W(self) -> int:
        return self.pixels.shape[1]


def chunk_text(token_ids: Sequence[int], config: ChunkingConfig) -> list[TextChunk]:
    ids = tuple(int(t) for t in token_ids)
    K = config.K
    return [TextChunk(i, ids[i * K:(i + 1) * K]) for i in range(math.ceil(len(ids) / K))]


class GlyphAtlas:
    """Fixed-size monochrome glyphs for a closed symbol vocabulary.

    Token ids are positions in ``symbols``; the tokenizer is character level,
    with the reserved chat markers as extra whole symbols.
    """

    def __init__(self, symbols: Sequence[str], bitmaps: np.ndarray):
        bitmaps = np.asarray(bitmaps, dtype=np.uint8)
        if bitmaps.ndim != 3 or bitmaps.shape[0] != len(symbols):
            raise ValueError("bitmaps must have shape (len(symbols), h_g, w_g)")
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate symbols in atlas")
        keys = {b.tobytes() for b in bitmaps}
        if len(keys) != len(symbols):
            raise ValueError("atlas glyphs are not pairwise distinct")
        if any(not b.any() for b in bitmaps):
            raise ValueError("a glyph may not be blank (it would read as background)")
        self.symbols: tuple[str, ...] = tuple(symbols)
        self.bitmaps = bitmaps
        self.bitmaps.setflags(write=False)
        self._index = {s: i for i, s in enumerate(self.symbols)}
        self._by_bytes = {b.tobytes(): i for i, b in enumerate(bitmaps)}

    @property
    def h_g(self) -> int:
        return self.bitmaps.shape[1]

    @property
    def w_g(self) -> int:
        return self.bitmaps.shape[2]

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    def token_id(self, symbol: str) -> int:
        return self._index[symbol]

    def capacity(self, geometry: PageGeometry) -> int:
        return (geometry.width // self.w_g) * (geometry.height // self.h_g)

    def encode(self, text: str) -> list[int]:
        """Character-level tokenization; raises KeyError on out-of-vocabulary characters."""
        try:
            return [self._index[c] for c in text]
        except KeyError as exc:
            raise KeyError(f"character {exc.args[0]!r} is not in the atlas vocabulary") from None

    def decode(self, token_ids: Sequence[int]) -> str:
        return "".join(self.symbols[t] for t in token_ids)

    def lookup_bitmap(self, cell: np.ndarray) -> int | None:
        return self._by_bytes.get(np.asarray(cell, dtype=np.uint8).tobytes())

    def subset(self, symbols: Sequence[str]) -> "GlyphAtlas":
        """Atlas restricted to ``symbols`` (re-indexed in the given order)."""
        return GlyphAtlas(symbols, self.bitmaps[[self._index[s] for s in symbols]])

    # serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        out = bytearray(ATLAS_MAGIC)
        out += struct.pack("<HHHH", ATLAS_VERSION, self.w_g, self.h_g, len(self.symbols))
        for sym, bm in zip(self.symbols, self.bitmaps):
            name = sym.encode("utf-8")
            out += struct.pack("<B", len(name)) + name
            out += np.packbits(bm.reshape(-1)).tobytes()
        out += struct.pack("<I", zlib.crc32(bytes(out)))
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GlyphAtlas":
        if len(blob) < 20 or blob[:8] != ATLAS_MAGIC:
            raise AtlasFormatError("not an atlas blob")
        body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
        if zlib.crc32(body) != crc:
            raise AtlasFormatError("atlas checksum mismatch")
        version, w, h, count = struct.unpack_from("<HHHH", body, 8)
        if version != ATLAS_VERSION:
            raise AtlasFormatError(f"unsupported atlas version {version}")
        nbytes = (w * h + 7) // 8
        off = 16
        symbols, bitmaps = [], []
        for _ in range(count):
            n = body[off]
            symbols.append(body[off + 1:off + 1 + n].decode("utf-8"))
            off += 1 + n
            bits = np.unpackbits(np.frombuffer(body[off:off + nbytes], dtype=np.uint8))
            bitmaps.append(bits[: w * h].reshape(h, w))
            off += nbytes
        if off != len(body):
            raise AtlasFormatError("trailing bytes in atlas blob")
        return cls(symbols, np.stack(bitmaps))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "GlyphAtlas":
        return cls.from_bytes(Path(path).read_bytes())


BUILTIN_ATLASES = {"mono8x16": "mono8x16.atlas", "mono8x8": "mono8x8.atlas"}


def builtin_atlas(name: str = "mono8x16") -> GlyphAtlas:
    """Load one of the atlases shipped in ``vist2/data``."""
    try:
        fname = BUILTIN_ATLASES[name]
    except KeyError:
        raise ValueError(f"unknown atlas {name!r}; choose from {sorted(BUILTIN_ATLASES)}") from None
    blob = resources.files("vist2").joinpath("data", fname).read_bytes()
    return GlyphAtlas.from_bytes(blob)


def render_chunk(chunk: TextChunk, atlas: GlyphAtlas, geometry: PageGeometry) -> RenderedPage:
    cols = geometry.width // atlas.w_g
    cap = atlas.capacity(geometry)
    if chunk.length > cap:
        raise CapacityError(
            f"chunk {chunk.chunk_index} has {chunk.length} tokens but a "
            f"{geometry.height}x{geometry.width} page holds {cap}"
        )
    pixels = np.full((geometry.height, geometry.width), BACKGROUND, dtype=np.float64)
    hg, wg = atlas.h_g, atlas.w_g
    for k, tok in enumerate(chunk.token_ids):
        row, col = divmod(k, cols)
        pixels[row * hg:(row + 1) * hg, col * wg:(col + 1) * wg] = atlas.bitmaps[tok] * INK
    pixels.setflags(write=False)
    return RenderedPage(pixels, chunk.chunk_index)


def decode_page_oracle(page: RenderedPage, atlas: GlyphAtlas) -> list[int]:
    """Invert :func:`render_chunk` by exact template matching.

    Reading stops at the first blank cell; every later cell must be blank too.
    """
    pix = page.pixels
    hg, wg = atlas.h_g, atlas.w_g
    rows, cols = pix.shape[0] // hg, pix.shape[1] // wg
    out: list[int] = []
    ended = False
    for k in range(rows * cols):
        r, c = divmod(k, cols)
        cell = pix[r * hg:(r + 1) * hg, c * wg:(c + 1) * wg]
        if not cell.any():
            ended = True
            continue
        if ended:
            raise NoMatchError(f"ink after end of text at cell {k}")
        if not np.all((cell == BACKGROUND) | (cell == INK)):
            raise NoMatchError(f"cell {k} has non-binary intensities")
        tok = atlas.lookup_bitmap(cell == INK)
        if tok is None:
            raise NoMatchError(f"cell {k} matches no glyph")
        out.append(tok)
    # margins outside the glyph grid must stay blank
    if pix[rows * hg:, :].any() or pix[:, cols * wg:].any():
        raise NoMatchError("ink outside the glyph grid")
    return out


def write_pgm(page: RenderedPage, path: str | Path) -> None:
    """Binary P5 graymap, 8-bit, ink rendered black on white."""
    data = np.round((1.0 - np.clip(page.pixels, 0.0, 1.0)) * 255).astype(np.uint8)
    header = f"P5\n{page.W} {page.H}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def page_checksum(page: RenderedPage) -> str:
    """CRC32 of the page as a 1-bit-per-pixel row-major buffer (hex)."""
    bits = np.packbits((page.pixels == INK).reshape(-1))
    return f"{zlib.crc32(bits.tobytes()):08x}"
