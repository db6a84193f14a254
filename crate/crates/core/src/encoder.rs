//! Bidirectional Transformer encoder with glyph injection.
//!
//! Blocks are post-norm:
//!
//! ```text
//! h_mid = LayerNorm(h + MHA(h))
//! h_out = LayerNorm(h_mid + FFN(h_mid) [+ g])
//! ```
//!
//! where `g` is the glyph injection state, supplied to blocks 1 and 2 only.

use crate::error::{Error, Result};
use crate::tensorcore::{AttentionShape, Graph, ParamVars, Scalar, Var};

/// `batch` sequences of `len` positions, flattened row-major to
/// `batch * len` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub len: usize,
}

impl SeqLayout {
    pub fn rows(&self) -> usize {
        self.batch * self.len
    }
}

/// Per-position validity; `false` marks padding, which no query attends to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask(pub Vec<bool>);

impl AttentionMask {
    pub fn all_valid(n: usize) -> Self {
        Self(vec![true; n])
    }
}

/// Handles for one Transformer block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub query: (Var, Var),
    pub key: (Var, Var),
    pub value: (Var, Var),
    pub output: (Var, Var),
    pub norm1: (Var, Var),
    pub ffn_in: (Var, Var),
    pub ffn_out: (Var, Var),
    pub norm2: (Var, Var),
}

impl LayerVars {
    /// `layer` is 1-based.
    pub fn from_params(pv: &ParamVars, layer: usize) -> Result<Self> {
        let pair = |name: &str, a: &str, b: &str| -> Result<(Var, Var)> {
            Ok((
                pv.get(&format!("encoder.layer{layer}.{name}.{a}"))?,
                pv.get(&format!("encoder.layer{layer}.{name}.{b}"))?,
            ))
        };
        let lin = |name: &str| pair(name, "weight", "bias");
        let norm = |name: &str| pair(name, "gain", "shift");
        Ok(Self {
            query: lin("attn.query")?,
            key: lin("attn.key")?,
            value: lin("attn.value")?,
            output: lin("attn.output")?,
            norm1: norm("norm1")?,
            ffn_in: lin("ffn.in")?,
            ffn_out: lin("ffn.out")?,
            norm2: norm("norm2")?,
        })
    }
}

/// `h0_i = r_i + position[i] + segment[s_i]` for every row.
pub fn compose_input<T: Scalar>(
    g: &mut Graph<T>,
    r: Var,
    position: Var,
    segment: Var,
    segments: &[usize],
    layout: SeqLayout,
) -> Result<Var> {
    let max_len = g.shape(position)[0];
    if layout.len > max_len {
        return Err(Error::Length {
            len: layout.len,
            max_len,
        });
    }
    if segments.len() != layout.rows() {
        return Err(Error::shape("compose_input segments", &[layout.rows()], &[segments.len()]));
    }
    if let Some(bad) = segments.iter().find(|&&s| s > 1) {
        return Err(Error::Contract(format!("segment id {bad} not in {{0, 1}}")));
    }
    let pos_index: Vec<usize> = (0..layout.rows()).map(|i| i % layout.len).collect();
    let pos = g.gather_rows(position, &pos_index)?;
    let seg = g.gather_rows(segment, segments)?;
    let h = g.add(r, pos)?;
    g.add(h, seg)
}

/// Multi-head self-attention followed by the output projection.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    p: &LayerVars,
    mask: &AttentionMask,
    layout: SeqLayout,
    heads: usize,
) -> Result<Var> {
    let q = g.linear(h, p.query.0, p.query.1)?;
    let k = g.linear(h, p.key.0, p.key.1)?;
    let v = g.linear(h, p.value.0, p.value.1)?;
    let shape = AttentionShape {
        batch: layout.batch,
        len: layout.len,
        heads,
    };
    let ctx = g.attention(q, k, v, &mask.0, shape)?;
    g.linear(ctx, p.output.0, p.output.1)
}

pub fn feed_forward<T: Scalar>(g: &mut Graph<T>, h: Var, p: &LayerVars) -> Result<Var> {
    let inner = g.linear(h, p.ffn_in.0, p.ffn_in.1)?;
    let inner = g.relu(inner);
    g.linear(inner, p.ffn_out.0, p.ffn_out.1)
}

/// Number of bottom blocks that receive a glyph injection state.
pub const INJECTED_BLOCKS: usize = 2;

/// One post-norm block. `index` is 1-based; only blocks 1 and 2 accept
/// `glyph_inject`.
#[allow(clippy::too_many_arguments)]
pub fn transformer_block<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    p: &LayerVars,
    index: usize,
    glyph_inject: Option<Var>,
    mask: &AttentionMask,
    layout: SeqLayout,
    heads: usize,
) -> Result<Var> {
    if glyph_inject.is_some() && !(1..=INJECTED_BLOCKS).contains(&index) {
        return Err(Error::Contract(format!(
            "glyph injection given to block {index}; only blocks 1..={INJECTED_BLOCKS} take one"
        )));
    }
    let attn = multi_head_attention(g, h, p, mask, layout, heads)?;
    let res = g.add(h, attn)?;
    let mid = g.layer_norm(res, p.norm1.0, p.norm1.1)?;
    let ffn = feed_forward(g, mid, p)?;
    let mut res = g.add(mid, ffn)?;
    if let Some(gl) = glyph_inject {
        res = g.add(res, gl)?;
    }
    g.layer_norm(res, p.norm2.0, p.norm2.1)
}

/// Runs every block over composed inputs; `g1`/`g2` go to blocks 1 and 2.
#[allow(clippy::too_many_arguments)]
pub fn encode_layers<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    h0: Var,
    g1: Var,
    g2: Var,
    blocks: usize,
    heads: usize,
    mask: &AttentionMask,
    layout: SeqLayout,
) -> Result<Var> {
    let mut h = h0;
    for l in 1..=blocks {
        let inject = match l {
            1 => Some(g1),
            2 => Some(g2),
            _ => None,
        };
        let p = LayerVars::from_params(pv, l)?;
        h = transformer_block(g, h, &p, l, inject, mask, layout, heads)?;
    }
    Ok(h)
}

/// Parameter count of one block for width `d` and inner FFN width `d_ff`.
pub fn block_param_count(d: usize, d_ff: usize) -> usize {
    4 * (d * d + d) + (d * d_ff + d_ff) + (d_ff * d + d) + 4 * d
}
