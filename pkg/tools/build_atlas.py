"""Regenerate the built-in glyph atlases in src/vist2/data from DejaVu Sans Mono.

Needs Pillow and the font file; the package itself only reads the blobs.

    python tools/build_atlas.py [--font PATH]
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from vist2.rendering import RESERVED_SYMBOLS, GlyphAtlas

FONT = "/usr/share/fonts/truetype/dejavu/DejaVuSansMono.ttf"
OUT = Path(__file__).resolve().parents[1] / "src" / "vist2" / "data"

# (name, cell w, cell h, font size, vertical offset); chosen so every glyph is distinct
LAYOUTS = [("mono8x16", 8, 16, 13, 0), ("mono8x8", 8, 8, 8, -2)]


def printable_glyph(font, ch, w, h, dy):
    im = Image.new("1", (w, h), 0)
    draw = ImageDraw.Draw(im)
    draw.fontmode = "1"
    draw.text((0, dy), ch, fill=1, font=font)
    return np.array(im, dtype=np.uint8)


def space_glyph(w, h):
    # a visible-space mark; a blank glyph would be indistinguishable from background
    g = np.zeros((h, w), np.uint8)
    g[h - 1, 1:w - 2] = 1
    g[h - 2, 1] = g[h - 2, w - 3] = 1
    return g


def reserved_glyph(i, w, h):
    g = np.zeros((h, w), np.uint8)
    g[0, :] = g[-1, :] = g[:, 0] = g[:, -1] = 1
    bits = [(i + 1) >> b & 1 for b in range(4)]
    for b, on in enumerate(bits):
        g[1 + b * (h - 2) // 4:1 + (b + 1) * (h - 2) // 4, 2:w - 2] = on
    return g


def build(font_path, name, w, h, size, dy):
    font = ImageFont.truetype(font_path, size)
    symbols, bitmaps = [" "], [space_glyph(w, h)]
    for code in range(0x21, 0x7F):
        symbols.append(chr(code))
        bitmaps.append(printable_glyph(font, chr(code), w, h, dy))
    for i, sym in enumerate(RESERVED_SYMBOLS):
        symbols.append(sym)
        bitmaps.append(reserved_glyph(i, w, h))
    return GlyphAtlas(symbols, np.stack(bitmaps))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--font", default=FONT)
    args = ap.parse_args()
    OUT.mkdir(parents=True, exist_ok=True)
    for name, w, h, size, dy in LAYOUTS:
        atlas = build(args.font, name, w, h, size, dy)
        atlas.save(OUT / f"{name}.atlas")
        print(f"{name}: {len(atlas)} glyphs {w}x{h}")


if __name__ == "__main__":
    main()
