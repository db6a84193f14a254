//! Finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Pass iff the largest relative error is below this.
    pub tolerance: f64,
    /// Relative errors are `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many coordinates per input (sampled without
    /// replacement); `None` checks all of them.
    pub max_coords: Option<usize>,
    /// Skip coordinates whose value is exactly zero (ReLU kink policy).
    pub skip_exact_zero: bool,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
            floor: 1e-3,
            max_coords: None,
            skip_exact_zero: false,
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }
}

/// One compared coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordCheck>,
    pub passed: bool,
}

fn evaluate<F>(f: &F, points: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference();
    let vars: Vec<Var> = points.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::shape("grad_check", v.shape(), &[1]));
    }
    Ok(v.data()[0])
}

/// Compares tape gradients of the scalar function `f` at `points` with
/// central finite differences, all in `f64`.
pub fn grad_check<F>(f: F, points: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: None,
        passed: true,
    };
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let n = points[input].numel();
        let zero = Tensor::zeros(points[input].shape());
        let analytic = grads.get(*var).unwrap_or(&zero);
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let x0 = points[input].data()[idx];
            if cfg.skip_exact_zero && x0 == 0.0 {
                report.skipped += 1;
                continue;
            }
            work[input].data_mut()[idx] = x0 + cfg.step;
            let plus = evaluate(&f, &work)?;
            work[input].data_mut()[idx] = x0 - cfg.step;
            let minus = evaluate(&f, &work)?;
            work[input].data_mut()[idx] = x0;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if report.worst.as_ref().is_none_or(|w| rel >= w.rel_error) {
                    report.worst = Some(CoordCheck {
                        input,
                        index: idx,
                        analytic: a,
                        numeric,
                        rel_error: rel,
                    });
                }
            }
        }
    }
    report.passed = report.max_rel_error < cfg.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_f64(&[5], &[0.3, -1.2, 2.5, 0.01, -0.7]).unwrap();
        let cfg = GradCheckConfig::with_tolerance(1e-6);
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            &cfg,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 5);
    }

    #[test]
    fn detects_wrong_gradient() {
        // taped pass computes 3x, finite differences see 2x
        let x = Tensor::from_f64(&[3], &[0.5, 1.5, -2.0]).unwrap();
        let cfg = GradCheckConfig::with_tolerance(1e-6);
        let r = grad_check(
            |g, v| {
                let y = if g.requires_grad(v[0]) { g.scale(v[0], 3.0) } else { g.scale(v[0], 2.0) };
                Ok(g.sum(y))
            },
            &[x],
            &cfg,
        )
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn relu_kink_excluded() {
        let x = Tensor::from_f64(&[4], &[0.0, 0.5, -0.5, 0.0]).unwrap();
        let cfg = GradCheckConfig {
            skip_exact_zero: true,
            ..GradCheckConfig::with_tolerance(1e-6)
        };
        let r = grad_check(
            |g, v| {
                let y = g.relu(v[0]);
                Ok(g.sum(y))
            },
            &[x],
            &cfg,
        )
        .unwrap();
        assert!(r.passed);
        assert_eq!(r.skipped, 2);
        assert_eq!(r.checked, 2);
    }
}
