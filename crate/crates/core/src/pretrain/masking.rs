use rand::Rng;

use crate::glyphsource::{Special, Token};
use crate::tensorcore::IGNORE_INDEX;

use super::corpus::{NspLabel, NspPair};
use super::vocab::{Vocabulary, RESERVED};

/// Probability that an eligible position is selected for prediction.
pub const SELECT_PROB: f64 = 0.15;
/// Of selected positions: share replaced by [MASK].
pub const MASK_SHARE: f64 = 0.8;
/// Of selected positions: share replaced by a random character.
pub const RANDOM_SHARE: f64 = 0.1;

/// Model input after corruption plus prediction targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    /// What each position shows to the glyph encoder.
    pub inputs: Vec<Token>,
    /// Original vocabulary id at selected positions, [`IGNORE_INDEX`] elsewhere.
    pub labels: Vec<usize>,
}

/// Selects in-vocabulary character positions with probability 0.15 and
/// corrupts each selected one 80/10/10 ([MASK] / random character /
/// unchanged). Specials and out-of-vocabulary characters are never selected.
pub fn apply_mlm_mask<R: Rng>(tokens: &[Token], vocab: &Vocabulary, rng: &mut R) -> MaskedSequence {
    let mut inputs = tokens.to_vec();
    let mut labels = vec![IGNORE_INDEX; tokens.len()];
    for (i, &tok) in tokens.iter().enumerate() {
        let Token::Char(c) = tok else { continue };
        let Some(id) = vocab.id(c) else { continue };
        if !rng.gen_bool(SELECT_PROB) {
            continue;
        }
        labels[i] = id;
        let r: f64 = rng.gen();
        if r < MASK_SHARE {
            inputs[i] = Token::Special(Special::Mask);
        } else if r < MASK_SHARE + RANDOM_SHARE {
            let pick = rng.gen_range(RESERVED..vocab.len());
            inputs[i] = vocab.token(pick).expect("id in range");
        }
    }
    MaskedSequence { inputs, labels }
}

/// A framed, masked pretraining example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PretrainExample {
    /// Uncorrupted vocabulary ids; out-of-vocabulary characters map to [UNK].
    pub ids: Vec<usize>,
    /// Masked input tokens that drive glyph lookup.
    pub inputs: Vec<Token>,
    pub segments: Vec<usize>,
    pub mlm_labels: Vec<usize>,
    pub nsp_label: NspLabel,
}

/// `[CLS] A [SEP] B [SEP]` with segment 0 through the first [SEP] and 1 after.
pub fn frame_pair(a: &[char], b: &[char]) -> (Vec<Token>, Vec<usize>) {
    let mut tokens = Vec::with_capacity(a.len() + b.len() + 3);
    let mut segments = Vec::with_capacity(a.len() + b.len() + 3);
    tokens.push(Token::Special(Special::Cls));
    tokens.extend(a.iter().map(|&c| Token::Char(c)));
    tokens.push(Token::Special(Special::Sep));
    segments.resize(tokens.len(), 0);
    tokens.extend(b.iter().map(|&c| Token::Char(c)));
    tokens.push(Token::Special(Special::Sep));
    segments.resize(tokens.len(), 1);
    (tokens, segments)
}

/// Frames `pair` and applies MLM corruption.
pub fn make_example<R: Rng>(pair: &NspPair, vocab: &Vocabulary, rng: &mut R) -> PretrainExample {
    let (tokens, segments) = frame_pair(&pair.a, &pair.b);
    let ids = tokens.iter().map(|&t| vocab.lookup(t)).collect();
    let masked = apply_mlm_mask(&tokens, vocab, rng);
    PretrainExample {
        ids,
        inputs: masked.inputs,
        segments,
        mlm_labels: masked.labels,
        nsp_label: pair.label,
    }
}
