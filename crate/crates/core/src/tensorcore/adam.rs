use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};

/// Adam hyperparameters with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moment estimates and the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub first: IndexMap<String, Tensor<T>>,
    pub second: IndexMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            first: IndexMap::new(),
            second: IndexMap::new(),
            step: 0,
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let eq = |a: &IndexMap<String, Tensor<T>>, b: &IndexMap<String, Tensor<T>>| {
            a.len() == b.len()
                && a.iter()
                    .zip(b.iter())
                    .all(|((ka, ta), (kb, tb))| ka == kb && ta.bit_eq(tb))
        };
        self.step == other.step && eq(&self.first, &other.first) && eq(&self.second, &other.second)
    }
}

/// One Adam update with learning rate `lr`.
///
/// Weight decay is applied as `p -= lr * wd * p` before the moment update.
/// Parameters without a gradient are left untouched. If any gradient holds a
/// non-finite value nothing is modified and the offending name is reported.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let md = m.data_mut();
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let vd = v.data_mut();
        for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gv = gv.as_f64();
            let mut x = pv.as_f64();
            x -= lr * cfg.weight_decay * x;
            let mi = cfg.beta1 * md[i].as_f64() + (1.0 - cfg.beta1) * gv;
            let vi = cfg.beta2 * vd[i].as_f64() + (1.0 - cfg.beta2) * gv * gv;
            md[i] = T::from_f64_lossy(mi);
            vd[i] = T::from_f64_lossy(vi);
            x -= lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            *pv = T::from_f64_lossy(x);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(&[vals.len()], vals).unwrap());
        s
    }

    fn grads(vals: &[f64]) -> IndexMap<String, Tensor<f64>> {
        let mut g = IndexMap::new();
        g.insert("w".to_string(), Tensor::from_f64(&[vals.len()], vals).unwrap());
        g
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = store(&[1.0, -2.0]);
        let mut st = AdamState::new();
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        adam_step(&mut p, &grads(&[0.0, 0.0]), &mut st, 1e-3, &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m_hat = g, v_hat = g^2 at t = 1, so the step is lr * g / (|g| + eps).
        let mut p = store(&[0.5, 0.5, 0.5]);
        let mut st = AdamState::new();
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        let lr = 1e-2;
        adam_step(&mut p, &grads(&[3.0, -0.25, 1e-3]), &mut st, lr, &cfg).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - (0.5 - lr)).abs() < 1e-8);
        assert!((w[1] - (0.5 + lr)).abs() < 1e-8);
        assert!((w[2] - (0.5 - lr * 1e-3 / (1e-3 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn decoupled_decay_scales_parameter() {
        let mut p = store(&[2.0]);
        let mut st = AdamState::new();
        let cfg = AdamConfig::default();
        adam_step(&mut p, &grads(&[0.0]), &mut st, 0.1, &cfg).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = store(&[1.0]);
        let mut st = AdamState::new();
        let err = adam_step(&mut p, &grads(&[f64::NAN]), &mut st, 0.1, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(st.step, 0);
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            let mut p = store(&[0.1, 0.2, 0.3]);
            let mut st = AdamState::new();
            for i in 0..5 {
                let g = grads(&[0.1 * i as f64, -0.3, 0.7]);
                adam_step(&mut p, &g, &mut st, 1e-3, &AdamConfig::default()).unwrap();
            }
            (p, st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert!(a.bit_eq(&b));
        assert!(sa.bit_eq(&sb));
    }
}
