//! Glyph rasterization, special-token glyphs and position maps.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::bdf::FontAtlas;

/// Side length of every rendered glyph.
pub const GLYPH_SIZE: usize = 48;
const GLYPH_PIXELS: usize = GLYPH_SIZE * GLYPH_SIZE;
/// Position-map values span `[-POSITION_RANGE, +POSITION_RANGE]`.
pub const POSITION_RANGE: f64 = 0.2;

/// The five reserved tokens, in vocabulary-id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Special {
    Pad,
    Unk,
    Cls,
    Sep,
    Mask,
}

impl Special {
    pub const ALL: [Special; 5] = [Special::Pad, Special::Unk, Special::Cls, Special::Sep, Special::Mask];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Special::Pad => "[PAD]",
            Special::Unk => "[UNK]",
            Special::Cls => "[CLS]",
            Special::Sep => "[SEP]",
            Special::Mask => "[MASK]",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::UnknownSpecial(name.to_string()))
    }
}

impl fmt::Display for Special {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What a sequence position shows to the glyph encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Token {
    Char(char),
    Special(Special),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Char(c) => write!(f, "{c}"),
            Token::Special(s) => s.fmt(f),
        }
    }
}

/// 48x48 binary glyph raster.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct GlyphBitmap {
    pixels: Vec<u8>,
}

impl GlyphBitmap {
    pub fn blank() -> Self {
        Self {
            pixels: vec![0; GLYPH_PIXELS],
        }
    }

    fn from_fn(f: impl Fn(usize, usize) -> bool) -> Self {
        let mut g = Self::blank();
        for r in 0..GLYPH_SIZE {
            for c in 0..GLYPH_SIZE {
                g.pixels[r * GLYPH_SIZE + c] = u8::from(f(r, c));
            }
        }
        g
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * GLYPH_SIZE + col]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn count_ones(&self) -> usize {
        self.pixels.iter().filter(|&&p| p == 1).count()
    }

    /// Plain PGM (P2) with maxval 1.
    pub fn to_pgm(&self) -> String {
        pgm_strip(std::slice::from_ref(self))
    }
}

impl fmt::Debug for GlyphBitmap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "GlyphBitmap(")?;
        for r in 0..GLYPH_SIZE {
            let row: String = (0..GLYPH_SIZE)
                .map(|c| if self.get(r, c) == 1 { '#' } else { '.' })
                .collect();
            writeln!(f, "  {row}")?;
        }
        write!(f, ")")
    }
}

/// Glyphs laid side by side as one P2 image.
pub fn pgm_strip(glyphs: &[GlyphBitmap]) -> String {
    let width = GLYPH_SIZE * glyphs.len().max(1);
    let mut s = format!("P2\n{width} {GLYPH_SIZE}\n1\n");
    for r in 0..GLYPH_SIZE {
        let row: Vec<&str> = glyphs
            .iter()
            .flat_map(|g| (0..GLYPH_SIZE).map(move |c| if g.get(r, c) == 1 { "1" } else { "0" }))
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

/// Integer replication factor used for a native glyph cell.
pub fn scale_factor(native: (usize, usize)) -> usize {
    GLYPH_SIZE / native.0.max(native.1).max(1)
}

/// Renders `ch` from `atlas`: the native cell is scaled by nearest-neighbour
/// replication (`floor(48 / native)`) and centered; the border stays 0.
pub fn rasterize(ch: char, atlas: &FontAtlas) -> Result<GlyphBitmap> {
    let native = atlas.glyph(ch)?;
    let scale = scale_factor((native.width, native.height));
    if scale == 0 {
        return Err(Error::Contract(format!(
            "glyph cell {}x{} exceeds {GLYPH_SIZE}x{GLYPH_SIZE}",
            native.width, native.height
        )));
    }
    let off_r = (GLYPH_SIZE - native.height * scale) / 2;
    let off_c = (GLYPH_SIZE - native.width * scale) / 2;
    let mut out = GlyphBitmap::blank();
    for r in 0..native.height {
        for c in 0..native.width {
            if native.get(r, c) == 0 {
                continue;
            }
            for dr in 0..scale {
                let row = off_r + r * scale + dr;
                let start = row * GLYPH_SIZE + off_c + c * scale;
                out.pixels[start..start + scale].fill(1);
            }
        }
    }
    Ok(out)
}

/// Fixed synthetic glyph for a reserved token.
pub fn special_glyph(token: Special) -> GlyphBitmap {
    const N: usize = GLYPH_SIZE;
    match token {
        Special::Pad => GlyphBitmap::blank(),
        // 12-pixel-wide filled border ring
        Special::Cls => GlyphBitmap::from_fn(|r, c| r.min(c).min(N - 1 - r).min(N - 1 - c) < 12),
        // 12-pixel-wide vertical bar through the center
        Special::Sep => GlyphBitmap::from_fn(|_, c| (18..30).contains(&c)),
        // checkerboard of 8x8 squares
        Special::Mask => GlyphBitmap::from_fn(|r, c| (r / 8 + c / 8) % 2 == 0),
        // both diagonals, 8 pixels thick along each row
        Special::Unk => GlyphBitmap::from_fn(|r, c| {
            let d = r as i64 - c as i64;
            let a = (r + c) as i64 - (N as i64 - 1);
            (-4..4).contains(&d) || (-4..4).contains(&a)
        }),
    }
}

/// Looks up a special token by its bracketed name, e.g. `"[CLS]"`.
pub fn special_glyph_named(name: &str) -> Result<GlyphBitmap> {
    Special::from_name(name).map(special_glyph)
}

/// The two coordinate channels shared by every character.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionMaps {
    pub abscissa: Vec<f32>,
    pub ordinate: Vec<f32>,
}

/// Coordinate of index `j` on the centered axis: `-0.2 + 0.4 * j / 47`.
///
/// The upper half is computed by negating the lower half so the axis is
/// exactly antisymmetric in `f32`.
pub fn axis_coordinate(j: usize) -> f32 {
    let last = GLYPH_SIZE - 1;
    if j * 2 > last {
        return -axis_coordinate(last - j);
    }
    (-POSITION_RANGE + 2.0 * POSITION_RANGE * j as f64 / last as f64) as f32
}

pub fn position_maps() -> PositionMaps {
    let axis: Vec<f32> = (0..GLYPH_SIZE).map(axis_coordinate).collect();
    let mut abscissa = Vec::with_capacity(GLYPH_PIXELS);
    let mut ordinate = Vec::with_capacity(GLYPH_PIXELS);
    for &row in &axis {
        for &col in &axis {
            abscissa.push(col);
            ordinate.push(row);
        }
    }
    PositionMaps { abscissa, ordinate }
}

/// Three-channel model input: glyph plane, abscissa map, ordinate map.
#[derive(Clone, Debug, PartialEq)]
pub struct CharInput {
    data: Vec<f32>,
}

impl CharInput {
    pub const CHANNELS: usize = 3;

    pub fn from_glyph(glyph: &GlyphBitmap) -> Self {
        let maps = position_maps();
        let mut data = Vec::with_capacity(3 * GLYPH_PIXELS);
        data.extend(glyph.pixels().iter().map(|&p| f32::from(p)));
        data.extend_from_slice(&maps.abscissa);
        data.extend_from_slice(&maps.ordinate);
        Self { data }
    }

    /// `3 x 48 x 48` values, channel-major.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * GLYPH_PIXELS..(c + 1) * GLYPH_PIXELS]
    }
}

/// Glyph for any token: specials use their synthetic pattern, characters are
/// rasterized from `atlas`.
pub fn token_glyph(token: Token, atlas: &FontAtlas) -> Result<GlyphBitmap> {
    match token {
        Token::Special(s) => Ok(special_glyph(s)),
        Token::Char(c) => rasterize(c, atlas),
    }
}

pub fn encode_char(token: Token, atlas: &FontAtlas) -> Result<CharInput> {
    token_glyph(token, atlas).map(|g| CharInput::from_glyph(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyphsource::parse_bdf;

    fn cell16(pixels: &[(usize, usize)]) -> FontAtlas {
        let mut rows = vec![0u16; 16];
        for &(r, c) in pixels {
            rows[r] |= 0x8000 >> c;
        }
        let mut text = String::from("STARTFONT 2.1\nFONTBOUNDINGBOX 16 16 0 0\nCHARS 1\nSTARTCHAR t\nENCODING 84\nBBX 16 16 0 0\nBITMAP\n");
        for r in rows {
            text.push_str(&format!("{r:04X}\n"));
        }
        text.push_str("ENDCHAR\nENDFONT\n");
        parse_bdf(text.as_bytes()).unwrap()
    }

    #[test]
    fn blank_glyph_stays_blank() {
        let g = rasterize('T', &cell16(&[])).unwrap();
        assert_eq!(g.count_ones(), 0);
    }

    #[test]
    fn corner_pixel_scales_to_three_by_three() {
        let g = rasterize('T', &cell16(&[(0, 0)])).unwrap();
        for r in 0..GLYPH_SIZE {
            for c in 0..GLYPH_SIZE {
                assert_eq!(g.get(r, c), u8::from(r < 3 && c < 3), "({r},{c})");
            }
        }
    }

    #[test]
    fn missing_char_is_glyph_miss() {
        assert!(matches!(rasterize('x', &cell16(&[])), Err(Error::GlyphMiss('x'))));
    }

    #[test]
    fn small_cells_are_centered() {
        let text = "STARTFONT 2.1\nFONTBOUNDINGBOX 5 5 0 0\nSTARTCHAR d\nENCODING 100\nBBX 1 1 2 2\nBITMAP\n80\nENDCHAR\nENDFONT\n";
        let atlas = parse_bdf(text.as_bytes()).unwrap();
        // scale 9, cell 45 px, offset 1
        let g = rasterize('d', &atlas).unwrap();
        assert_eq!(g.count_ones(), 81);
        assert_eq!(g.get(1 + 18, 1 + 18), 1);
        assert_eq!(g.get(1 + 17, 1 + 18), 0);
        assert_eq!(g.get(1 + 26, 1 + 26), 1);
        assert_eq!(g.get(1 + 27, 1 + 26), 0);
    }

    #[test]
    fn position_axis_endpoints() {
        assert_eq!(axis_coordinate(0), -0.2);
        assert_eq!(axis_coordinate(47), 0.2);
        assert!((axis_coordinate(23) as f64 + 0.0042553).abs() < 1e-7);
        for j in 0..GLYPH_SIZE {
            assert_eq!(axis_coordinate(j) + axis_coordinate(47 - j), 0.0);
        }
    }

    #[test]
    fn position_maps_structure() {
        let m = position_maps();
        for i in 0..GLYPH_SIZE {
            for j in 0..GLYPH_SIZE {
                let at = |v: &Vec<f32>, r: usize, c: usize| v[r * GLYPH_SIZE + c];
                assert_eq!(at(&m.abscissa, i, j), at(&m.abscissa, 0, j));
                assert_eq!(at(&m.ordinate, i, j), at(&m.ordinate, i, 0));
                assert_eq!(at(&m.abscissa, i, j), -at(&m.abscissa, i, 47 - j));
                assert_eq!(at(&m.ordinate, i, j), -at(&m.ordinate, 47 - i, j));
                assert!(at(&m.abscissa, i, j).abs() <= 0.2);
            }
        }
        assert_eq!(position_maps(), m);
    }

    #[test]
    fn special_glyphs_are_distinct_and_deterministic() {
        assert_eq!(special_glyph(Special::Pad).count_ones(), 0);
        for (i, a) in Special::ALL.iter().enumerate() {
            assert_eq!(special_glyph(*a), special_glyph(*a));
            for b in &Special::ALL[i + 1..] {
                assert_ne!(special_glyph(*a), special_glyph(*b), "{a} vs {b}");
            }
        }
        assert!(special_glyph_named("[BOS]").is_err());
        assert_eq!(special_glyph_named("[SEP]").unwrap(), special_glyph(Special::Sep));
        // ring: 48^2 - 24^2
        assert_eq!(special_glyph(Special::Cls).count_ones(), 48 * 48 - 24 * 24);
        assert_eq!(special_glyph(Special::Sep).count_ones(), 12 * 48);
        assert_eq!(special_glyph(Special::Mask).count_ones(), 48 * 48 / 2);
    }

    #[test]
    fn pad_input_has_canonical_maps() {
        let atlas = cell16(&[]);
        let x = encode_char(Token::Special(Special::Pad), &atlas).unwrap();
        assert!(x.channel(0).iter().all(|&v| v == 0.0));
        let maps = position_maps();
        assert_eq!(x.channel(1), maps.abscissa.as_slice());
        assert_eq!(x.channel(2), maps.ordinate.as_slice());
    }

    #[test]
    fn pgm_header() {
        let p = special_glyph(Special::Sep).to_pgm();
        assert!(p.starts_with("P2\n48 48\n1\n"));
        assert_eq!(p.lines().count(), 3 + 48);
        let strip = pgm_strip(&[GlyphBitmap::blank(), GlyphBitmap::blank()]);
        assert!(strip.starts_with("P2\n96 48\n1\n"));
    }
}
