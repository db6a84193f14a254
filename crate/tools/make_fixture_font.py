#!/usr/bin/env python3
"""Render a 16x16 BDF test font from Noto Sans SC.

Usage:
    npm pack @fontsource/noto-sans-sc && tar xzf fontsource-noto-sans-sc-*.tgz
    python3 tools/make_fixture_font.py package/files crates/core/tests/fixtures/cjk16.bdf

The glyph set is every character of the toy corpus and tagging fixtures plus a
few extras used by the tests. U+2F00 (KANGXI RADICAL ONE) is written with the
bitmap of U+4E00 so the tests have two distinct code points with equal glyphs.
"""
import glob
import os
import sys

from fontTools.ttLib import TTFont
from PIL import Image, ImageDraw, ImageFont

CELL = 16
ASCENT = 14
DESCENT = 2
EXTRA = "一我你好吗。龙凤鹿"
FIXTURES = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "tests", "fixtures")


def wanted_chars():
    chars = set(EXTRA)
    for name in ("toy_corpus.txt", "toy_tagging_train.txt", "toy_tagging_test.txt", "toy_cls.tsv"):
        path = os.path.join(FIXTURES, name)
        if not os.path.exists(path):
            continue
        with open(path, encoding="utf-8") as f:
            for line in f:
                for ch in line:
                    if ord(ch) > 0x2000:
                        chars.add(ch)
    return sorted(chars)


def font_for(files, cp):
    for path, cmap in files:
        if cp in cmap:
            return path
    raise SystemExit(f"no font file covers U+{cp:04X}")


def render(path, ch):
    font = ImageFont.truetype(path, CELL)
    img = Image.new("L", (CELL, CELL), 0)
    ImageDraw.Draw(img).text((CELL // 2, ASCENT), ch, font=font, fill=255, anchor="ms")
    px = img.load()
    return [[1 if px[x, y] >= 128 else 0 for x in range(CELL)] for y in range(CELL)]


def bdf_record(cp, bits):
    rows = [r for r in range(CELL) if any(bits[r])]
    cols = [c for c in range(CELL) if any(bits[r][c] for r in range(CELL))]
    out = [f"STARTCHAR uni{cp:04X}", f"ENCODING {cp}", "SWIDTH 1000 0", f"DWIDTH {CELL} 0"]
    if not rows:
        out += ["BBX 0 0 0 0", "BITMAP", "ENDCHAR"]
        return out
    top, bottom, left, right = rows[0], rows[-1], cols[0], cols[-1]
    w, h = right - left + 1, bottom - top + 1
    out.append(f"BBX {w} {h} {left} {ASCENT - 1 - bottom}")
    out.append("BITMAP")
    nbytes = (w + 7) // 8
    for r in range(top, bottom + 1):
        v = 0
        for c in range(nbytes * 8):
            bit = bits[r][left + c] if c < w else 0
            v = (v << 1) | bit
        out.append(f"{v:0{nbytes * 2}X}")
    out.append("ENDCHAR")
    return out


def main():
    src, dst = sys.argv[1], sys.argv[2]
    files = []
    for path in sorted(glob.glob(os.path.join(src, "noto-sans-sc-*-400-normal.woff"))):
        files.append((path, set(TTFont(path).getBestCmap().keys())))
    glyphs = {}
    for ch in wanted_chars():
        glyphs[ord(ch)] = render(font_for(files, ord(ch)), ch)
    glyphs[0x2F00] = glyphs[0x4E00]
    lines = [
        "STARTFONT 2.1",
        "FONT -Noto-Sans-SC-Regular-R-Normal--16-160-75-75-P-160-ISO10646-1",
        "SIZE 16 75 75",
        f"FONTBOUNDINGBOX {CELL} {CELL} 0 -{DESCENT}",
        "STARTPROPERTIES 2",
        f"FONT_ASCENT {ASCENT}",
        f"FONT_DESCENT {DESCENT}",
        "ENDPROPERTIES",
        f"CHARS {len(glyphs)}",
    ]
    for cp in sorted(glyphs):
        lines += bdf_record(cp, glyphs[cp])
    lines.append("ENDFONT")
    with open(dst, "w", encoding="ascii", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
