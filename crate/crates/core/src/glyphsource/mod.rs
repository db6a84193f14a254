//! Bitmap-font ingestion, glyph rasterization and position maps.

pub mod bdf;
pub mod raster;

pub use bdf::{parse_bdf, Bitmap, FontAtlas};
pub use raster::{
    encode_char, pgm_strip, position_maps, rasterize, special_glyph, special_glyph_named, token_glyph,
    CharInput, GlyphBitmap, PositionMaps, Special, Token, GLYPH_SIZE,
};
