#!/usr/bin/env python3
"""Write 48x48 golden bitmaps for chosen characters of a BDF font.

Usage:
    python3 tools/golden_bitmaps.py crates/core/tests/fixtures/cjk16.bdf 一我

Decodes each glyph's hex rows into the font bounding box, scales the cell by
nearest-neighbour replication (floor(48 / cell)), centers it in a 48x48 grid
and writes golden_XXXX.txt (one row of 0/1 per line) next to the font. A
native cell file golden_XXXX_native.txt is written alongside.
"""
import os
import sys

SIZE = 48


def parse(path):
    fbx = None
    glyphs = {}
    cur = None
    with open(path, encoding="ascii") as f:
        lines = iter(f.read().splitlines())
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        if key == "FONTBOUNDINGBOX":
            fbx = tuple(int(v) for v in parts[1:5])
        elif key == "STARTCHAR":
            cur = {}
        elif key == "ENCODING":
            cur["code"] = int(parts[1])
        elif key == "BBX":
            cur["bbx"] = tuple(int(v) for v in parts[1:5])
        elif key == "BITMAP":
            rows = []
            for row in lines:
                if row.strip() == "ENDCHAR":
                    break
                rows.append(row.strip())
            cur["rows"] = rows
            glyphs[cur["code"]] = cur
            cur = None
    return fbx, glyphs


def native(fbx, g):
    fw, fh, fx, fy = fbx
    w, h, x, y = g["bbx"]
    cell = [[0] * fw for _ in range(fh)]
    top = (fh + fy) - (h + y)
    left = x - fx
    for r, hexrow in enumerate(g["rows"]):
        bits = bin(int(hexrow, 16))[2:].zfill(len(hexrow) * 4)
        for c in range(w):
            if bits[c] == "1":
                cell[top + r][left + c] = 1
    return cell


def scaled(cell):
    h, w = len(cell), len(cell[0])
    k = SIZE // max(h, w)
    out = [[0] * SIZE for _ in range(SIZE)]
    r0 = (SIZE - h * k) // 2
    c0 = (SIZE - w * k) // 2
    for r in range(h):
        for c in range(w):
            if cell[r][c]:
                for dr in range(k):
                    for dc in range(k):
                        out[r0 + r * k + dr][c0 + c * k + dc] = 1
    return out


def write(path, grid):
    with open(path, "w", encoding="ascii") as f:
        for row in grid:
            f.write("".join(str(v) for v in row) + "\n")


def main():
    font, chars = sys.argv[1], sys.argv[2]
    fbx, glyphs = parse(font)
    out_dir = os.path.dirname(font)
    for ch in chars:
        cell = native(fbx, glyphs[ord(ch)])
        write(os.path.join(out_dir, f"golden_{ord(ch):04X}_native.txt"), cell)
        write(os.path.join(out_dir, f"golden_{ord(ch):04X}.txt"), scaled(cell))


if __name__ == "__main__":
    main()
