use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::glyphsource::{FontAtlas, Special, Token};

/// Number of reserved ids: [PAD], [UNK], [CLS], [SEP], [MASK].
pub const RESERVED: usize = Special::ALL.len();

/// Character table for the masked-LM output layer.
///
/// Ids `0..RESERVED` are the special tokens; characters follow ordered by
/// corpus frequency (descending), then code point.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    chars: Vec<char>,
    freq: Vec<u64>,
    index: HashMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabRepr {
    chars: String,
    freq: Vec<u64>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        Self::from_parts(r.chars.chars().collect(), r.freq)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            chars: v.chars.iter().collect(),
            freq: v.freq,
        }
    }
}

impl Vocabulary {
    fn from_parts(chars: Vec<char>, mut freq: Vec<u64>) -> Self {
        freq.resize(chars.len(), 0);
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + RESERVED)).collect();
        Self { chars, freq, index }
    }

    /// Vocabulary holding only the reserved tokens.
    pub fn reserved_only() -> Self {
        Self::from_parts(Vec::new(), Vec::new())
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        RESERVED + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of character (non-reserved) entries.
    pub fn num_chars(&self) -> usize {
        self.chars.len()
    }

    pub fn id(&self, ch: char) -> Option<usize> {
        self.index.get(&ch).copied()
    }

    /// Id for any token; characters outside the table map to [UNK].
    pub fn lookup(&self, token: Token) -> usize {
        match token {
            Token::Special(s) => s.id(),
            Token::Char(c) => self.id(c).unwrap_or(Special::Unk.id()),
        }
    }

    pub fn token(&self, id: usize) -> Option<Token> {
        if id < RESERVED {
            Some(Token::Special(Special::ALL[id]))
        } else {
            self.chars.get(id - RESERVED).map(|&c| Token::Char(c))
        }
    }

    pub fn freq(&self, ch: char) -> u64 {
        self.id(ch).map_or(0, |i| self.freq[i - RESERVED])
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }
}

/// Counts every non-whitespace character of `text` and keeps those seen at
/// least `min_freq` times that the font can render.
pub fn build_vocab(text: &str, atlas: &FontAtlas, min_freq: u64) -> Vocabulary {
    let mut counts: HashMap<char, u64> = HashMap::new();
    for ch in text.chars().filter(|c| !c.is_whitespace()) {
        *counts.entry(ch).or_default() += 1;
    }
    if counts.is_empty() {
        log::warn!("empty corpus; vocabulary holds only reserved tokens");
    }
    let mut kept: Vec<(char, u64)> = counts
        .into_iter()
        .filter(|&(c, n)| n >= min_freq.max(1) && atlas.contains(c))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let (chars, freq) = kept.into_iter().unzip();
    Vocabulary::from_parts(chars, freq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyphsource::parse_bdf;

    /// Font with a blank 8x8 glyph for each character of `chars`.
    fn font(chars: &str) -> FontAtlas {
        let mut text = format!("STARTFONT 2.1\nFONTBOUNDINGBOX 8 8 0 0\nCHARS {}\n", chars.chars().count());
        for c in chars.chars() {
            text.push_str(&format!("STARTCHAR u{0:X}\nENCODING {0}\nBBX 8 8 0 0\nBITMAP\n", c as u32));
            text.push_str(&"00\n".repeat(8));
            text.push_str("ENDCHAR\n");
        }
        text.push_str("ENDFONT\n");
        parse_bdf(text.as_bytes()).unwrap()
    }

    #[test]
    fn counts_by_hand() {
        let atlas = font("你好。吗");
        let v = build_vocab("你好。你好吗。", &atlas, 1);
        assert_eq!(v.len(), 9);
        let v2 = build_vocab("你好。你好吗。", &atlas, 2);
        assert_eq!(v2.len(), 8);
        assert_eq!(v2.chars(), &['。', '你', '好']);
    }

    #[test]
    fn order_is_frequency_then_codepoint() {
        let atlas = font("abc");
        let v = build_vocab("cbbaac", &atlas, 1);
        assert_eq!(v.chars(), &['a', 'b', 'c']);
        assert_eq!(v.id('a'), Some(RESERVED));
        assert_eq!(v.freq('b'), 2);
    }

    #[test]
    fn unrenderable_excluded() {
        let atlas = font("a");
        let v = build_vocab("zzzzzza", &atlas, 1);
        assert_eq!(v.chars(), &['a']);
        assert_eq!(v.lookup(Token::Char('z')), Special::Unk.id());
    }

    #[test]
    fn empty_corpus_is_reserved_only() {
        let v = build_vocab("  \n", &font("a"), 1);
        assert_eq!(v.len(), RESERVED);
        assert_eq!(v.token(2), Some(Token::Special(Special::Cls)));
        assert_eq!(v.token(RESERVED), None);
    }

    #[test]
    fn serde_round_trip() {
        let v = build_vocab("你好你", &font("你好"), 1);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id('好'), Some(RESERVED + 1));
    }
}
