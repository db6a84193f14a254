//! Glyph-based Chinese character representation model.
//!
//! Characters are represented by rendered 48x48 glyph bitmaps rather than an
//! embedding table. A two-block convolutional glyph encoder turns each glyph
//! into a vector, and a Transformer encoder contextualizes the sequence. The
//! first two Transformer blocks also receive per-block glyph states.

pub mod encoder;
pub mod finetune;
pub mod error;
pub mod glyphsource;
pub mod hanglyph;
pub mod model;
pub mod parallel;
pub mod pretrain;
pub mod tensorcore;

pub use error::{Error, Result};
