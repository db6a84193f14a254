//! BDF 2.1 bitmap-font reader and writer.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// A binary bitmap, row-major, one byte (0 or 1) per pixel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Bitmap {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<u8>,
}

impl Bitmap {
    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![0; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.bits[row * self.width + col] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

/// Glyph bounding box: size plus offset of its lower-left corner from the
/// origin, in pixels (y up).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub width: usize,
    pub height: usize,
    pub x_off: i32,
    pub y_off: i32,
}

/// One `STARTCHAR` .. `ENDCHAR` record as it appeared in the file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlyphRecord {
    pub name: String,
    /// `None` for `ENCODING -1` (unencoded) glyphs.
    pub encoding: Option<u32>,
    pub bbx: BoundingBox,
    /// Lines between `STARTCHAR` and `BITMAP`, verbatim.
    pub attributes: Vec<String>,
    /// Bytes per hex row in the source.
    pub row_bytes: usize,
    /// Decoded rows of the glyph's own bounding box.
    pub bitmap: Bitmap,
}

/// A parsed bitmap font.
#[derive(Clone, Debug)]
pub struct FontAtlas {
    name: String,
    native_size: (usize, usize),
    font_bbx: BoundingBox,
    header: Vec<String>,
    records: Vec<GlyphRecord>,
    cells: BTreeMap<char, Bitmap>,
}

impl FontAtlas {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// `(width, height)` of every glyph cell.
    pub fn native_size(&self) -> (usize, usize) {
        self.native_size
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn contains(&self, ch: char) -> bool {
        self.cells.contains_key(&ch)
    }

    /// The glyph placed in its native cell; a missing code point is an error.
    pub fn glyph(&self, ch: char) -> Result<&Bitmap> {
        self.cells.get(&ch).ok_or(Error::GlyphMiss(ch))
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.cells.keys().copied()
    }

    pub fn records(&self) -> &[GlyphRecord] {
        &self.records
    }

    /// Serializes back to BDF text. Header and per-glyph attribute lines are
    /// emitted verbatim; bitmaps are re-encoded as uppercase hex rows.
    pub fn to_bdf(&self) -> String {
        let mut out = String::new();
        for line in &self.header {
            out.push_str(line);
            out.push('\n');
        }
        for rec in &self.records {
            let _ = writeln!(out, "STARTCHAR {}", rec.name);
            for line in &rec.attributes {
                out.push_str(line);
                out.push('\n');
            }
            out.push_str("BITMAP\n");
            for row in 0..rec.bitmap.height {
                out.push_str(&encode_row(&rec.bitmap, row, rec.row_bytes));
                out.push('\n');
            }
            out.push_str("ENDCHAR\n");
        }
        out.push_str("ENDFONT\n");
        out
    }
}

/// Hex-encodes one bitmap row MSB-first, padded to `row_bytes` bytes.
pub fn encode_row(bm: &Bitmap, row: usize, row_bytes: usize) -> String {
    let mut s = String::with_capacity(row_bytes * 2);
    for byte in 0..row_bytes {
        let mut v = 0u8;
        for bit in 0..8 {
            let col = byte * 8 + bit;
            if col < bm.width && bm.get(row, col) == 1 {
                v |= 0x80 >> bit;
            }
        }
        let _ = write!(s, "{v:02X}");
    }
    s
}

fn decode_row(hex: &str, width: usize, line: usize) -> Result<Vec<u8>> {
    let err = |msg: &str| Error::Bdf {
        line,
        msg: msg.to_string(),
    };
    if !hex.len().is_multiple_of(2) || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(err("bitmap row is not whole hex bytes"));
    }
    if hex.len() * 4 < width {
        return Err(err("bitmap row shorter than BBX width"));
    }
    let mut bits = Vec::with_capacity(width);
    for col in 0..width {
        let nibble = hex.as_bytes()[col / 4];
        let v = (nibble as char).to_digit(16).expect("checked hex digit");
        bits.push(((v >> (3 - col % 4)) & 1) as u8);
    }
    Ok(bits)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Option<(usize, &'a str)> {
        let (i, l) = self.inner.next()?;
        self.last = i + 1;
        Some((i + 1, l.trim_end_matches('\r')))
    }
}

fn nums<const N: usize>(args: &str, line: usize, what: &str) -> Result<[i32; N]> {
    let parts: Vec<&str> = args.split_whitespace().collect();
    if parts.len() < N {
        return Err(Error::Bdf {
            line,
            msg: format!("{what} needs {N} numbers"),
        });
    }
    let mut out = [0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| Error::Bdf {
            line,
            msg: format!("bad number {p:?} in {what}"),
        })?;
    }
    Ok(out)
}

fn split_kw(line: &str) -> (&str, &str) {
    match line.split_once(char::is_whitespace) {
        Some((k, rest)) => (k, rest.trim()),
        None => (line, ""),
    }
}

/// Parses a BDF font. Hex rows are decoded MSB-first, and each glyph is
/// placed in the font bounding-box cell according to its `BBX` offsets
/// (pixels falling outside the cell are clipped).
pub fn parse_bdf(bytes: &[u8]) -> Result<FontAtlas> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        Error::Bdf {
            line,
            msg: "file is not ASCII text".into(),
        }
    })?;
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let bad = |line: usize, msg: &str| Error::Bdf {
        line,
        msg: msg.to_string(),
    };

    let mut header = Vec::new();
    match lines.next() {
        Some((_, l)) if l.starts_with("STARTFONT") => header.push(l.to_string()),
        Some((n, _)) => return Err(bad(n, "expected STARTFONT")),
        None => return Err(bad(1, "empty input")),
    }

    let mut name = String::new();
    let mut font_bbx = None;
    let mut records = Vec::new();
    let mut ended = false;
    let mut in_props = false;
    while let Some((n, l)) = lines.next() {
        let (kw, args) = split_kw(l);
        if in_props {
            header.push(l.to_string());
            if kw == "ENDPROPERTIES" {
                in_props = false;
            }
            continue;
        }
        match kw {
            "STARTCHAR" => {
                let fbb = font_bbx.ok_or_else(|| bad(n, "STARTCHAR before FONTBOUNDINGBOX"))?;
                records.push(parse_glyph(args, &mut lines, fbb)?);
            }
            "ENDFONT" => {
                ended = true;
                break;
            }
            _ if !records.is_empty() => return Err(bad(n, &format!("unexpected {kw:?} between glyphs"))),
            "FONT" => {
                name = args.to_string();
                header.push(l.to_string());
            }
            "SIZE" => {
                let parts: Vec<&str> = args.split_whitespace().collect();
                if parts.len() < 3 {
                    return Err(bad(n, "SIZE needs point size and resolution"));
                }
                if let Some(depth) = parts.get(3) {
                    if *depth != "1" {
                        return Err(bad(n, &format!("unsupported bit depth {depth}")));
                    }
                }
                header.push(l.to_string());
            }
            "FONTBOUNDINGBOX" => {
                let [w, h, x, y] = nums::<4>(args, n, "FONTBOUNDINGBOX")?;
                if w <= 0 || h <= 0 {
                    return Err(bad(n, "FONTBOUNDINGBOX must be positive"));
                }
                font_bbx = Some(BoundingBox {
                    width: w as usize,
                    height: h as usize,
                    x_off: x,
                    y_off: y,
                });
                header.push(l.to_string());
            }
            "STARTPROPERTIES" => {
                in_props = true;
                header.push(l.to_string());
            }
            _ => header.push(l.to_string()),
        }
    }
    if !ended {
        return Err(bad(lines.last + 1, "missing ENDFONT"));
    }
    let fbb = font_bbx.ok_or_else(|| bad(lines.last, "missing FONTBOUNDINGBOX"))?;

    let mut cells = BTreeMap::new();
    for rec in &records {
        let Some(ch) = rec.encoding.and_then(char::from_u32) else {
            continue;
        };
        cells.insert(ch, place_in_cell(rec, &fbb));
    }
    Ok(FontAtlas {
        name,
        native_size: (fbb.width, fbb.height),
        font_bbx: fbb,
        header,
        records,
        cells,
    })
}

fn parse_glyph(name: &str, lines: &mut Lines<'_>, fbb: BoundingBox) -> Result<GlyphRecord> {
    let bad = |line: usize, msg: &str| Error::Bdf {
        line,
        msg: msg.to_string(),
    };
    let mut attributes = Vec::new();
    let mut encoding = None;
    let mut bbx = None;
    loop {
        let (n, l) = lines
            .next()
            .ok_or_else(|| bad(lines.last + 1, "truncated glyph record"))?;
        let (kw, args) = split_kw(l);
        match kw {
            "BITMAP" => break,
            "ENDCHAR" | "STARTCHAR" | "ENDFONT" => return Err(bad(n, "glyph record without BITMAP")),
            "ENCODING" => {
                let [code] = nums::<1>(args, n, "ENCODING")?;
                encoding = Some(if code < 0 { None } else { Some(code as u32) });
            }
            "BBX" => {
                let [w, h, x, y] = nums::<4>(args, n, "BBX")?;
                if w < 0 || h < 0 {
                    return Err(bad(n, "negative BBX size"));
                }
                bbx = Some(BoundingBox {
                    width: w as usize,
                    height: h as usize,
                    x_off: x,
                    y_off: y,
                });
            }
            _ => {}
        }
        attributes.push(l.to_string());
    }
    let start_line = lines.last;
    let encoding = encoding.ok_or_else(|| bad(start_line, "glyph without ENCODING"))?;
    // glyphs without BBX inherit the font bounding box
    let bbx = bbx.unwrap_or(fbb);
    let mut bitmap = Bitmap::blank(bbx.width, bbx.height);
    let mut row_bytes = bbx.width.div_ceil(8);
    for row in 0..bbx.height {
        let (n, l) = lines
            .next()
            .ok_or_else(|| bad(lines.last + 1, "truncated glyph record"))?;
        let hex = l.trim();
        if hex == "ENDCHAR" {
            return Err(bad(n, "truncated glyph record: fewer bitmap rows than BBX height"));
        }
        let bits = decode_row(hex, bbx.width, n)?;
        if row == 0 {
            row_bytes = hex.len() / 2;
        }
        bitmap.bits[row * bbx.width..(row + 1) * bbx.width].copy_from_slice(&bits);
    }
    match lines.next() {
        Some((_, l)) if l.trim() == "ENDCHAR" => {}
        Some((n, _)) => return Err(bad(n, "expected ENDCHAR")),
        None => return Err(bad(lines.last + 1, "truncated glyph record")),
    }
    Ok(GlyphRecord {
        name: name.to_string(),
        encoding,
        bbx,
        attributes,
        row_bytes,
        bitmap,
    })
}

fn place_in_cell(rec: &GlyphRecord, fbb: &BoundingBox) -> Bitmap {
    let mut cell = Bitmap::blank(fbb.width, fbb.height);
    let top = (fbb.height as i32 + fbb.y_off) - (rec.bbx.y_off + rec.bbx.height as i32);
    let left = rec.bbx.x_off - fbb.x_off;
    for r in 0..rec.bbx.height {
        for c in 0..rec.bbx.width {
            let (y, x) = (top + r as i32, left + c as i32);
            if y >= 0 && x >= 0 && (y as usize) < fbb.height && (x as usize) < fbb.width {
                cell.set(y as usize, x as usize, rec.bitmap.get(r, c));
            }
        }
    }
    cell
}

impl FontAtlas {
    /// Font bounding box from the header.
    pub fn font_bbx(&self) -> BoundingBox {
        self.font_bbx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE_GLYPH: &str = "STARTFONT 2.1\nFONT tiny\nSIZE 8 75 75\nFONTBOUNDINGBOX 8 1 0 0\nCHARS 1\n\
STARTCHAR A\nENCODING 65\nBBX 8 1 0 0\nBITMAP\n80\nENDCHAR\nENDFONT\n";

    #[test]
    fn single_bit_decodes_msb_first() {
        let atlas = parse_bdf(ONE_GLYPH.as_bytes()).unwrap();
        assert_eq!(atlas.glyph('A').unwrap().bits, vec![1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(atlas.to_bdf(), ONE_GLYPH);
    }

    #[test]
    fn empty_input_is_an_error() {
        let err = parse_bdf(b"").unwrap_err();
        assert!(matches!(err, Error::Bdf { line: 1, .. }));
    }

    #[test]
    fn missing_glyph_is_detectable() {
        let atlas = parse_bdf(ONE_GLYPH.as_bytes()).unwrap();
        assert!(matches!(atlas.glyph('B'), Err(Error::GlyphMiss('B'))));
    }

    #[test]
    fn truncated_record_names_line() {
        let text = "STARTFONT 2.1\nFONTBOUNDINGBOX 8 2 0 0\nCHARS 1\nSTARTCHAR A\nENCODING 65\nBBX 8 2 0 0\nBITMAP\nFF\nENDCHAR\nENDFONT\n";
        match parse_bdf(text.as_bytes()).unwrap_err() {
            Error::Bdf { line, msg } => {
                assert_eq!(line, 9);
                assert!(msg.contains("truncated"));
            }
            e => panic!("unexpected {e}"),
        }
        let cut = "STARTFONT 2.1\nFONTBOUNDINGBOX 8 2 0 0\nSTARTCHAR A\nENCODING 65\n";
        assert!(matches!(parse_bdf(cut.as_bytes()), Err(Error::Bdf { line: 5, .. })));
    }

    #[test]
    fn rejects_grey_fonts_and_bad_headers() {
        let grey = "STARTFONT 2.3\nSIZE 16 75 75 8\nFONTBOUNDINGBOX 8 1 0 0\nENDFONT\n";
        match parse_bdf(grey.as_bytes()).unwrap_err() {
            Error::Bdf { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("bit depth"));
            }
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(parse_bdf(b"FONT x\n"), Err(Error::Bdf { line: 1, .. })));
        let no_fbb = "STARTFONT 2.1\nSTARTCHAR A\nENCODING 65\nBITMAP\nENDCHAR\nENDFONT\n";
        assert!(matches!(parse_bdf(no_fbb.as_bytes()), Err(Error::Bdf { line: 2, .. })));
    }

    #[test]
    fn offsets_place_glyph_in_cell() {
        // 2x2 block 3 px right of the origin and 1 px above the baseline;
        // the 8x8 cell has its baseline 2 px above the bottom edge
        let text = "STARTFONT 2.1\nFONTBOUNDINGBOX 8 8 0 -2\nCHARS 1\nSTARTCHAR x\nENCODING 120\nBBX 2 2 3 1\nBITMAP\nC0\nC0\nENDCHAR\nENDFONT\n";
        let atlas = parse_bdf(text.as_bytes()).unwrap();
        let g = atlas.glyph('x').unwrap();
        let ones: Vec<(usize, usize)> = (0..8)
            .flat_map(|r| (0..8).map(move |c| (r, c)))
            .filter(|&(r, c)| g.get(r, c) == 1)
            .collect();
        assert_eq!(ones, vec![(3, 3), (3, 4), (4, 3), (4, 4)]);
    }
}
