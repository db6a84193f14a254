use std::fs;
use std::path::PathBuf;

use glyphcrm::glyphsource::{
    encode_char, parse_bdf, position_maps, rasterize, FontAtlas, Token, GLYPH_SIZE,
};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn font() -> FontAtlas {
    parse_bdf(&fs::read(fixture("cjk16.bdf")).unwrap()).unwrap()
}

/// Rows of `0`/`1` written by `tools/golden_bitmaps.py`.
fn golden(name: &str) -> Vec<Vec<u8>> {
    fs::read_to_string(fixture(name))
        .unwrap()
        .lines()
        .map(|l| l.bytes().map(|b| b - b'0').collect())
        .collect()
}

#[test]
fn crafted_font_round_trips_byte_exact() {
    let text = fs::read(fixture("crafted.bdf")).unwrap();
    let atlas = parse_bdf(&text).unwrap();
    assert_eq!(atlas.len(), 4);
    assert_eq!(atlas.to_bdf().as_bytes(), &text[..]);
}

#[test]
fn fixture_font_round_trips_byte_exact() {
    let text = fs::read(fixture("cjk16.bdf")).unwrap();
    assert_eq!(font().to_bdf().as_bytes(), &text[..]);
}

#[test]
fn golden_native_cells() {
    let atlas = font();
    for (ch, file) in [('一', "golden_4E00_native.txt"), ('我', "golden_6211_native.txt")] {
        let want = golden(file);
        let cell = atlas.glyph(ch).unwrap();
        assert_eq!((cell.width, cell.height), (16, 16));
        for (r, row) in want.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert_eq!(cell.get(r, c), v, "{ch} native ({r}, {c})");
            }
        }
    }
}

#[test]
fn golden_rasters() {
    let atlas = font();
    for (ch, file) in [('一', "golden_4E00.txt"), ('我', "golden_6211.txt")] {
        let want: Vec<u8> = golden(file).concat();
        assert_eq!(rasterize(ch, &atlas).unwrap().pixels(), &want[..], "{ch}");
    }
}

#[test]
fn yi_is_a_horizontal_band() {
    let g = rasterize('一', &font()).unwrap();
    let rows: Vec<usize> = (0..GLYPH_SIZE).filter(|&r| (0..GLYPH_SIZE).any(|c| g.get(r, c) == 1)).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2] - rows[0], 2);
}

#[test]
fn replication_scales_area_ninefold() {
    let atlas = font();
    for ch in ['一', '我', '龙'] {
        assert_eq!(rasterize(ch, &atlas).unwrap().count_ones(), 9 * atlas.glyph(ch).unwrap().count_ones());
    }
}

#[test]
fn axis_value_at_23() {
    let maps = position_maps();
    // -0.2 + 0.4 * 23 / 47
    let want = -0.004_255_319_f32;
    assert!((maps.abscissa[23] - want).abs() < 1e-7);
    assert!((maps.ordinate[23 * GLYPH_SIZE] - want).abs() < 1e-7);
}

#[test]
fn input_channel_zero_is_the_raster() {
    let atlas = font();
    let input = encode_char(Token::Char('我'), &atlas).unwrap();
    let raster = rasterize('我', &atlas).unwrap();
    let plane: Vec<f32> = raster.pixels().iter().map(|&p| f32::from(p)).collect();
    assert_eq!(input.channel(0), &plane[..]);
    let maps = position_maps();
    assert_eq!(input.channel(1), &maps.abscissa[..]);
    assert_eq!(input.channel(2), &maps.ordinate[..]);
}

fn bdf_text(glyphs: &[(u32, usize, usize, Vec<u32>)]) -> String {
    let mut s = String::from("STARTFONT 2.1\nFONTBOUNDINGBOX 24 24 0 0\nCHARS ");
    s.push_str(&format!("{}\n", glyphs.len()));
    for (code, w, h, rows) in glyphs {
        let bytes = w.div_ceil(8).max(1);
        s.push_str(&format!("STARTCHAR g{code}\nENCODING {code}\nBBX {w} {h} 0 0\nBITMAP\n"));
        for r in rows {
            let mask = if *w == 0 { 0 } else { (u32::MAX << (32 - w)) >> (32 - 8 * bytes) };
            s.push_str(&format!("{:0width$X}\n", r & mask, width = bytes * 2));
        }
        s.push_str("ENDCHAR\n");
    }
    s.push_str("ENDFONT\n");
    s
}

fn glyph_strategy() -> impl Strategy<Value = (usize, usize, Vec<u32>)> {
    (1usize..=24, 1usize..=24).prop_flat_map(|(w, h)| (Just(w), Just(h), prop::collection::vec(any::<u32>(), h)))
}

proptest! {
    #[test]
    fn random_fonts_round_trip(glyphs in prop::collection::vec(glyph_strategy(), 1..6)) {
        let glyphs: Vec<_> = glyphs.into_iter().enumerate().map(|(i, (w, h, r))| (0x4E00 + i as u32, w, h, r)).collect();
        let text = bdf_text(&glyphs);
        let atlas = parse_bdf(text.as_bytes()).unwrap();
        prop_assert_eq!(atlas.to_bdf(), text);
    }

    #[test]
    fn raster_pixels_are_binary_and_scaled(idx in 0usize..80) {
        let atlas = font();
        let ch = atlas.chars().nth(idx % atlas.len()).unwrap();
        let g = rasterize(ch, &atlas).unwrap();
        prop_assert!(g.pixels().iter().all(|&p| p <= 1));
        prop_assert_eq!(g.count_ones(), 9 * atlas.glyph(ch).unwrap().count_ones());
    }
}
