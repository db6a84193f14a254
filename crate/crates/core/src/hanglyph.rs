//! Two-block residual convolutional glyph encoder.
//!
//! Each block runs an entry 3x3 convolution, a three-layer convolution stack
//! whose middle layer has stride 2, a residual sum with the 2x2-pooled entry
//! activations, and a final 2x2 max-pool:
//!
//! ```text
//! z_c = ReLU(conv3x3(x))
//! z_r = ReLU(maxpool(z_c) + F(z_c))
//! out = maxpool(z_r)
//! ```
//!
//! Spatially 48 -> 12 after block 1 and 12 -> 3 after block 2. Both block
//! outputs are flattened and projected to the model width (the injection
//! states `g1`, `g2`); a third projection of block 2 gives the glyph vector `r`.

use crate::error::{Error, Result};
use crate::tensorcore::{Graph, ParamVars, Scalar, Var};

/// Core kernel size of block 1 and block 2.
pub const CORE_KERNELS: [usize; 2] = [9, 3];
pub const ENTRY_KERNEL: usize = 3;

/// Graph handles for one residual block.
#[derive(Clone, Copy, Debug)]
pub struct ResBlockVars {
    pub entry: (Var, Var),
    pub core: [(Var, Var); 3],
    pub core_kernel: usize,
}

impl ResBlockVars {
    /// `block` is 1 or 2.
    pub fn from_params(pv: &ParamVars, block: usize) -> Result<Self> {
        let p = |s: &str| pv.get(&format!("hanglyph.block{block}.{s}"));
        let conv = |name: &str| -> Result<(Var, Var)> { Ok((p(&format!("{name}.weight"))?, p(&format!("{name}.bias"))?)) };
        Ok(Self {
            entry: conv("entry")?,
            core: [conv("core0")?, conv("core1")?, conv("core2")?],
            core_kernel: CORE_KERNELS[block - 1],
        })
    }
}

/// `N x C_in x H x W` -> `N x C x H/4 x W/4`.
pub fn resblock_forward<T: Scalar>(g: &mut Graph<T>, x: Var, p: &ResBlockVars) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || !s[2].is_multiple_of(4) || !s[3].is_multiple_of(4) {
        return Err(Error::shape("resblock", &s, &[4, 4]));
    }
    let pre = g.conv2d(x, p.entry.0, p.entry.1, 1, ENTRY_KERNEL / 2)?;
    let zc = g.relu(pre);

    let pad = p.core_kernel / 2;
    let f0 = g.conv2d(zc, p.core[0].0, p.core[0].1, 1, pad)?;
    let f0 = g.relu(f0);
    let f1 = g.conv2d(f0, p.core[1].0, p.core[1].1, 2, pad)?;
    let f1 = g.relu(f1);
    let f2 = g.conv2d(f1, p.core[2].0, p.core[2].1, 1, pad)?;

    let shortcut = g.maxpool2d(zc)?;
    let sum = g.add(shortcut, f2)?;
    let zr = g.relu(sum);
    g.maxpool2d(zr)
}

/// Flattens `N x C x h x w` features row-major and projects each token to
/// the model width.
pub fn inject_state<T: Scalar>(g: &mut Graph<T>, feat: Var, weight: Var, bias: Var) -> Result<Var> {
    let s = g.shape(feat).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("inject_state", &s, g.shape(weight)));
    }
    let flat_len = s[1] * s[2] * s[3];
    if g.shape(weight).first() != Some(&flat_len) {
        return Err(Error::shape("inject_state", &[s[0], flat_len], g.shape(weight)));
    }
    let flat = g.reshape(feat, &[s[0], flat_len])?;
    g.linear(flat, weight, bias)
}

/// Glyph vector `r` from block-2 features with its own projection.
pub fn glyph_vector<T: Scalar>(g: &mut Graph<T>, feat2: Var, weight: Var, bias: Var) -> Result<Var> {
    inject_state(g, feat2, weight, bias)
}

/// Per-token outputs of the glyph encoder, each `L x D_model`.
#[derive(Clone, Copy, Debug)]
pub struct GlyphStates {
    pub r: Var,
    pub g1: Var,
    pub g2: Var,
}

/// Runs both blocks over `L x 3 x 48 x 48` inputs.
pub fn hanglyph_forward<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars, x: Var) -> Result<GlyphStates> {
    let b1 = ResBlockVars::from_params(pv, 1)?;
    let b2 = ResBlockVars::from_params(pv, 2)?;
    let z1 = resblock_forward(g, x, &b1)?;
    let g1 = inject_state(g, z1, pv.get("hanglyph.inject1.weight")?, pv.get("hanglyph.inject1.bias")?)?;
    let z2 = resblock_forward(g, z1, &b2)?;
    let g2 = inject_state(g, z2, pv.get("hanglyph.inject2.weight")?, pv.get("hanglyph.inject2.bias")?)?;
    let r = glyph_vector(g, z2, pv.get("hanglyph.glyph.weight")?, pv.get("hanglyph.glyph.bias")?)?;
    Ok(GlyphStates { r, g1, g2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::tensorcore::{ParamStore, Tensor};

    fn zero_store(cfg: &ModelConfig) -> ParamStore<f32> {
        let mut p = init_params(cfg, 0);
        for (_, t) in p.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let cfg = ModelConfig::tiny();
        let p = zero_store(&cfg);
        let mut g = Graph::<f32>::inference();
        let pv = p.register(&mut g);
        let x = g.constant(Tensor::full(&[2, 3, 48, 48], 0.7));
        let b1 = ResBlockVars::from_params(&pv, 1).unwrap();
        let y = resblock_forward(&mut g, x, &b1).unwrap();
        assert_eq!(g.shape(y), &[2, cfg.c1, 12, 12]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_chain_default_widths() {
        let cfg = ModelConfig {
            c1: 64,
            c2: 128,
            ..ModelConfig::tiny()
        };
        let p = init_params(&cfg, 3);
        let mut g = Graph::<f32>::inference();
        let pv = p.register(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 3, 48, 48]));
        let z1 = resblock_forward(&mut g, x, &ResBlockVars::from_params(&pv, 1).unwrap()).unwrap();
        assert_eq!(g.shape(z1), &[1, 64, 12, 12]);
        let z2 = resblock_forward(&mut g, z1, &ResBlockVars::from_params(&pv, 2).unwrap()).unwrap();
        assert_eq!(g.shape(z2), &[1, 128, 3, 3]);
    }

    #[test]
    fn rejects_indivisible_extent() {
        let cfg = ModelConfig::tiny();
        let p = init_params(&cfg, 0);
        let mut g = Graph::<f32>::inference();
        let pv = p.register(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 3, 46, 48]));
        assert!(resblock_forward(&mut g, x, &ResBlockVars::from_params(&pv, 1).unwrap()).is_err());
    }

    #[test]
    fn inject_state_single_feature_identity() {
        let mut g = Graph::<f64>::inference();
        let feat = g.constant(Tensor::from_f64(&[1, 1, 1, 1], &[0.625]).unwrap());
        let w = g.constant(Tensor::full(&[1, 1], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = inject_state(&mut g, feat, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.625]);
        let bad_w = g.constant(Tensor::full(&[2, 1], 1.0));
        assert!(inject_state(&mut g, feat, bad_w, b).is_err());
    }

    #[test]
    fn zero_convs_give_projection_bias() {
        let cfg = ModelConfig::tiny();
        let mut p = zero_store(&cfg);
        let bias: Vec<f32> = (0..cfg.hidden).map(|i| i as f32 * 0.01).collect();
        *p.get_mut("hanglyph.glyph.bias").unwrap() = Tensor::new(&[cfg.hidden], bias.clone()).unwrap();
        let mut g = Graph::<f32>::inference();
        let pv = p.register(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 3, 48, 48]));
        let st = hanglyph_forward(&mut g, &pv, x).unwrap();
        assert_eq!(g.value(st.r).data(), bias.as_slice());
        assert!(g.value(st.g1).data().iter().all(|&v| v == 0.0));
    }
}
