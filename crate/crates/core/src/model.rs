//! Model configuration, parameter layout and the full glyph-to-hidden-state
//! forward pass.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{block_param_count, compose_input, encode_layers, AttentionMask, SeqLayout};
use crate::error::{Error, Result};
use crate::glyphsource::{encode_char, special_glyph, CharInput, FontAtlas, Special, Token, GLYPH_SIZE};
use crate::hanglyph::{hanglyph_forward, CORE_KERNELS, ENTRY_KERNEL};
use crate::tensorcore::{Graph, ParamStore, ParamVars, Scalar, Tensor, Var};

/// Standard deviation of the normal initializer for dense layers and tables.
pub const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub c1: usize,
    pub c2: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 12,
            hidden: 768,
            heads: 12,
            ffn: 3072,
            max_len: 512,
            c1: 64,
            c2: 128,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for toy-corpus training and tests.
    pub fn tiny() -> Self {
        Self {
            blocks: 2,
            hidden: 64,
            heads: 4,
            ffn: 256,
            max_len: 64,
            c1: 8,
            c2: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blocks", self.blocks),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("max_len", self.max_len),
            ("c1", self.c1),
            ("c2", self.c2),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden ({}) is not divisible by heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.blocks < 2 {
            return Err(Error::Config("blocks must be at least 2 (glyph states feed blocks 1 and 2)".into()));
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must fit [CLS] A [SEP] B [SEP] framing".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Flattened width of block-1 features (`C1 x 12 x 12`).
    pub fn flat1(&self) -> usize {
        self.c1 * (GLYPH_SIZE / 4) * (GLYPH_SIZE / 4)
    }

    /// Flattened width of block-2 features (`C2 x 3 x 3`).
    pub fn flat2(&self) -> usize {
        self.c2 * (GLYPH_SIZE / 16) * (GLYPH_SIZE / 16)
    }
}

fn conv_shapes(out: &mut Vec<(String, Vec<usize>)>, prefix: String, cout: usize, cin: usize, k: usize) {
    out.push((format!("{prefix}.weight"), vec![cout, cin, k, k]));
    out.push((format!("{prefix}.bias"), vec![cout]));
}

fn linear_shapes(out: &mut Vec<(String, Vec<usize>)>, prefix: String, din: usize, dout: usize) {
    out.push((format!("{prefix}.weight"), vec![din, dout]));
    out.push((format!("{prefix}.bias"), vec![dout]));
}

/// Every backbone parameter name and shape, in canonical order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (b, (&cin, &c)) in [CharInput::CHANNELS, cfg.c1].iter().zip([cfg.c1, cfg.c2].iter()).enumerate() {
        let block = b + 1;
        conv_shapes(&mut out, format!("hanglyph.block{block}.entry"), c, cin, ENTRY_KERNEL);
        for i in 0..3 {
            conv_shapes(&mut out, format!("hanglyph.block{block}.core{i}"), c, c, CORE_KERNELS[b]);
        }
    }
    linear_shapes(&mut out, "hanglyph.inject1".into(), cfg.flat1(), cfg.hidden);
    linear_shapes(&mut out, "hanglyph.inject2".into(), cfg.flat2(), cfg.hidden);
    linear_shapes(&mut out, "hanglyph.glyph".into(), cfg.flat2(), cfg.hidden);

    out.push(("encoder.position".into(), vec![cfg.max_len, cfg.hidden]));
    out.push(("encoder.segment".into(), vec![2, cfg.hidden]));
    let d = cfg.hidden;
    for l in 1..=cfg.blocks {
        let p = format!("encoder.layer{l}");
        for name in ["query", "key", "value", "output"] {
            linear_shapes(&mut out, format!("{p}.attn.{name}"), d, d);
        }
        out.push((format!("{p}.norm1.gain"), vec![d]));
        out.push((format!("{p}.norm1.shift"), vec![d]));
        linear_shapes(&mut out, format!("{p}.ffn.in"), d, cfg.ffn);
        linear_shapes(&mut out, format!("{p}.ffn.out"), cfg.ffn, d);
        out.push((format!("{p}.norm2.gain"), vec![d]));
        out.push((format!("{p}.norm2.shift"), vec![d]));
    }
    out
}

/// Parameter counts by component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub hanglyph: usize,
    pub embeddings: usize,
    pub per_block: usize,
    pub blocks: usize,
    pub total: usize,
}

pub fn param_count(cfg: &ModelConfig) -> ParamCount {
    let mut hanglyph = 0;
    let mut embeddings = 0;
    let mut blocks = 0;
    for (name, shape) in param_shapes(cfg) {
        let n: usize = shape.iter().product();
        if name.starts_with("hanglyph.") {
            hanglyph += n;
        } else if name.starts_with("encoder.layer") {
            blocks += n;
        } else {
            embeddings += n;
        }
    }
    ParamCount {
        hanglyph,
        embeddings,
        per_block: block_param_count(cfg.hidden, cfg.ffn),
        blocks,
        total: hanglyph + embeddings + blocks,
    }
}

fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let sample = |std: f64, rng: &mut ChaCha8Rng| -> Vec<f32> {
        let dist = Normal::new(0.0, std).expect("positive std");
        (0..numel).map(|_| dist.sample(rng) as f32).collect()
    };
    let data = if name.ends_with(".bias") || name.ends_with(".shift") {
        vec![0.0; numel]
    } else if name.ends_with(".gain") {
        vec![1.0; numel]
    } else if shape.len() == 4 {
        let fan_in = shape[1] * shape[2] * shape[3];
        sample((2.0 / fan_in as f64).sqrt(), rng)
    } else {
        sample(INIT_STD, rng)
    };
    Tensor::new(shape, data).expect("shape from layout")
}

/// Initializes backbone parameters from `rng` in canonical order.
pub fn init_params_with(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, shape) in param_shapes(cfg) {
        let t = init_tensor(&name, &shape, rng);
        store.insert(name, t);
    }
    store
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    init_params_with(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Adds a `d_in -> d_out` linear layer named `prefix.weight` / `prefix.bias`.
pub fn init_linear_head(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) {
    let w = format!("{prefix}.weight");
    let b = format!("{prefix}.bias");
    let wt = init_tensor(&w, &[d_in, d_out], rng);
    let bt = init_tensor(&b, &[d_out], rng);
    store.insert(w, wt);
    store.insert(b, bt);
}

/// Checks that `store` holds every backbone parameter of `cfg` with the right shape.
pub fn check_params(cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    for (name, shape) in param_shapes(cfg) {
        let t = store.get(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, config expects {:?}",
                t.shape(),
                shape
            )));
        }
    }
    Ok(())
}

/// Renders and caches model inputs for tokens.
///
/// Characters missing from the font fall back to the [UNK] glyph.
#[derive(Debug)]
pub struct GlyphBank {
    atlas: FontAtlas,
    cache: HashMap<Token, CharInput>,
}

impl GlyphBank {
    pub fn new(atlas: FontAtlas) -> Self {
        Self {
            atlas,
            cache: HashMap::new(),
        }
    }

    pub fn atlas(&self) -> &FontAtlas {
        &self.atlas
    }

    pub fn renderable(&self, token: Token) -> bool {
        match token {
            Token::Char(c) => self.atlas.contains(c),
            Token::Special(_) => true,
        }
    }

    pub fn input(&mut self, token: Token) -> Result<&CharInput> {
        if !self.cache.contains_key(&token) {
            let input = if self.renderable(token) {
                encode_char(token, &self.atlas)?
            } else {
                log::warn!("no glyph for {token:?}; using [UNK]");
                CharInput::from_glyph(&special_glyph(Special::Unk))
            };
            self.cache.insert(token, input);
        }
        Ok(&self.cache[&token])
    }

    /// Deduplicated `U x 3 x 48 x 48` inputs plus the row index of each token.
    pub fn batch(&mut self, tokens: &[Token]) -> Result<GlyphBatch> {
        let mut slot: HashMap<Token, usize> = HashMap::new();
        let mut unique = Vec::new();
        let index = tokens
            .iter()
            .map(|&t| {
                *slot.entry(t).or_insert_with(|| {
                    unique.push(t);
                    unique.len() - 1
                })
            })
            .collect();
        let plane = CharInput::CHANNELS * GLYPH_SIZE * GLYPH_SIZE;
        let mut data = Vec::with_capacity(unique.len() * plane);
        for &t in &unique {
            data.extend_from_slice(self.input(t)?.data());
        }
        let pixels = Tensor::new(&[unique.len().max(1), CharInput::CHANNELS, GLYPH_SIZE, GLYPH_SIZE], data)
            .map_err(|_| Error::Contract("empty token batch".into()))?;
        Ok(GlyphBatch { unique, index, pixels })
    }
}

/// Glyph inputs for the distinct tokens of a batch.
#[derive(Clone, Debug)]
pub struct GlyphBatch {
    pub unique: Vec<Token>,
    /// Row of `pixels` for each batch position.
    pub index: Vec<usize>,
    pub pixels: Tensor,
}

/// One framed sequence before padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<Token>,
    pub segments: Vec<usize>,
}

/// Padded batch of sequences, flattened row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchInput {
    pub layout: SeqLayout,
    pub tokens: Vec<Token>,
    pub segments: Vec<usize>,
    pub mask: AttentionMask,
}

impl BatchInput {
    /// Pads every sequence with [PAD] (segment 0, masked) to the longest length.
    pub fn pad(seqs: &[Sequence]) -> Result<Self> {
        let len = seqs.iter().map(|s| s.tokens.len()).max().unwrap_or(0);
        if len == 0 {
            return Err(Error::Contract("batch has no tokens".into()));
        }
        let layout = SeqLayout {
            batch: seqs.len(),
            len,
        };
        let mut tokens = Vec::with_capacity(layout.rows());
        let mut segments = Vec::with_capacity(layout.rows());
        let mut valid = Vec::with_capacity(layout.rows());
        for s in seqs {
            if s.segments.len() != s.tokens.len() {
                return Err(Error::shape("sequence segments", &[s.tokens.len()], &[s.segments.len()]));
            }
            for (&t, &seg) in s.tokens.iter().zip(&s.segments) {
                tokens.push(t);
                segments.push(seg);
                valid.push(t != Token::Special(Special::Pad));
            }
            for _ in s.tokens.len()..len {
                tokens.push(Token::Special(Special::Pad));
                segments.push(0);
                valid.push(false);
            }
        }
        Ok(Self {
            layout,
            tokens,
            segments,
            mask: AttentionMask(valid),
        })
    }

    pub fn single(seq: Sequence) -> Result<Self> {
        Self::pad(&[seq])
    }
}

/// Graph handles produced by [`encode`].
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// Final hidden states, `rows x D`.
    pub hidden: Var,
    /// Glyph vectors per position, `rows x D`.
    pub r: Var,
}

/// Glyph encoder, input composition and every Transformer block.
///
/// `pixels` holds one glyph input per distinct token and `index` maps each
/// batch row onto it, so repeated characters are encoded once.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    pixels: Var,
    index: &[usize],
    batch: &BatchInput,
) -> Result<EncoderOutput> {
    if index.len() != batch.layout.rows() || batch.mask.0.len() != batch.layout.rows() {
        return Err(Error::shape("encode", &[batch.layout.rows()], &[index.len(), batch.mask.0.len()]));
    }
    let states = hanglyph_forward(g, pv, pixels)?;
    let r = g.gather_rows(states.r, index)?;
    let g1 = g.gather_rows(states.g1, index)?;
    let g2 = g.gather_rows(states.g2, index)?;
    let h0 = compose_input(
        g,
        r,
        pv.get("encoder.position")?,
        pv.get("encoder.segment")?,
        &batch.segments,
        batch.layout,
    )?;
    let hidden = encode_layers(g, pv, h0, g1, g2, cfg.blocks, cfg.heads, &batch.mask, batch.layout)?;
    Ok(EncoderOutput { hidden, r })
}

/// [`encode`] in `f32` with glyphs rendered through `bank`.
pub fn encode_batch(
    g: &mut Graph<f32>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    bank: &mut GlyphBank,
    batch: &BatchInput,
) -> Result<EncoderOutput> {
    let glyphs = bank.batch(&batch.tokens)?;
    let pixels = g.constant(glyphs.pixels);
    encode(g, pv, cfg, pixels, &glyphs.index, batch)
}

/// Glyph vector and final hidden state for one input character.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharEmbedding {
    pub index: usize,
    pub ch: char,
    pub r: Vec<f32>,
    pub hidden: Vec<f32>,
}

/// Encodes `[CLS] text [SEP]` and returns one record per character of `text`.
pub fn embed_text(params: &ParamStore, cfg: &ModelConfig, bank: &mut GlyphBank, text: &[char]) -> Result<Vec<CharEmbedding>> {
    if text.len() + 2 > cfg.max_len {
        return Err(Error::Length {
            len: text.len() + 2,
            max_len: cfg.max_len,
        });
    }
    let mut tokens = vec![Token::Special(Special::Cls)];
    tokens.extend(text.iter().map(|&c| Token::Char(c)));
    tokens.push(Token::Special(Special::Sep));
    let batch = BatchInput::single(Sequence {
        segments: vec![0; tokens.len()],
        tokens,
    })?;
    let mut g = Graph::inference();
    let pv = params.register(&mut g);
    let out = encode_batch(&mut g, &pv, cfg, bank, &batch)?;
    let d = cfg.hidden;
    let (r, h) = (g.value(out.r).data(), g.value(out.hidden).data());
    Ok(text
        .iter()
        .enumerate()
        .map(|(i, &ch)| CharEmbedding {
            index: i,
            ch,
            r: r[(i + 1) * d..(i + 2) * d].to_vec(),
            hidden: h[(i + 1) * d..(i + 2) * d].to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts() {
        let cfg = ModelConfig::default();
        let c = param_count(&cfg);
        assert_eq!(c.per_block, 7_087_872);
        assert_eq!(c.blocks, 12 * c.per_block);
        assert_eq!(c.embeddings, 514 * 768);
        assert_eq!(c.total, param_shapes(&cfg).iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>());
    }

    #[test]
    fn tiny_store_matches_layout() {
        let cfg = ModelConfig::tiny();
        let p = init_params(&cfg, 7);
        assert_eq!(p.num_scalars(), param_count(&cfg).total);
        check_params(&cfg, &p).unwrap();
        assert_eq!(p.get("encoder.layer1.norm1.gain").unwrap().data()[0], 1.0);
        assert_eq!(p.get("hanglyph.block2.core1.weight").unwrap().shape(), &[16, 16, 3, 3]);
        assert_eq!(p.get("hanglyph.block1.core0.weight").unwrap().shape(), &[8, 8, 9, 9]);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::tiny();
        assert!(init_params(&cfg, 1).bit_eq(&init_params(&cfg, 1)));
        assert!(!init_params(&cfg, 1).bit_eq(&init_params(&cfg, 2)));
    }

    #[test]
    fn validate_rejects_bad_heads() {
        let cfg = ModelConfig { heads: 5, ..ModelConfig::tiny() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn config_rejects_unknown_key() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"hiden": 3}"#).unwrap_err();
        assert!(err.to_string().contains("hiden"));
        let cfg: ModelConfig = serde_json::from_str(r#"{"blocks": 4}"#).unwrap();
        assert_eq!(cfg.hidden, 768);
    }

    #[test]
    fn pad_marks_tail_invalid() {
        let c = |ch| Token::Char(ch);
        let seqs = [
            Sequence { tokens: vec![c('a'), c('b'), c('c')], segments: vec![0, 0, 1] },
            Sequence { tokens: vec![c('a')], segments: vec![0] },
        ];
        let b = BatchInput::pad(&seqs).unwrap();
        assert_eq!(b.layout, SeqLayout { batch: 2, len: 3 });
        assert_eq!(b.mask.0, vec![true, true, true, true, false, false]);
        assert_eq!(b.tokens[5], Token::Special(Special::Pad));
    }
}
