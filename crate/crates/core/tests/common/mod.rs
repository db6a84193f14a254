#![allow(dead_code)]

use std::fs;
use std::path::PathBuf;

use glyphcrm::glyphsource::{parse_bdf, position_maps, FontAtlas, GLYPH_SIZE};
use glyphcrm::model::{init_params, param_shapes, ModelConfig};
use glyphcrm::tensorcore::{grad_check, AttentionShape, GradCheckConfig, GradCheckReport, Graph, ParamVars, Tensor, Var};
use glyphcrm::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn font() -> FontAtlas {
    parse_bdf(&fs::read(fixture("cjk16.bdf")).unwrap()).unwrap()
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(x * w)` for a fixed random `w`, so every output coordinate matters.
pub fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(g.shape(x), seed ^ 0xABCD));
    let m = g.mul(x, w)?;
    Ok(g.sum(m))
}

type Objective<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Finite-difference checks of every primitive at one seed.
pub fn primitive_checks(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let tight = GradCheckConfig {
        step: 1e-5,
        tolerance: 1e-6,
        seed,
        ..GradCheckConfig::default()
    };
    let loose = GradCheckConfig {
        step: 1e-5,
        tolerance: 1e-3,
        seed,
        ..GradCheckConfig::default()
    };
    let r = |shape: &[usize], k: u64| random(shape, seed * 1000 + k);
    let mut out = Vec::new();
    let mut run = |name: &'static str, cfg: &GradCheckConfig, pts: Vec<Tensor<f64>>, f: &Objective<'_>| {
        out.push((name, grad_check(f, &pts, cfg).unwrap()));
    };
    run("linear", &tight, vec![r(&[3, 4], 1), r(&[4, 5], 2), r(&[5], 3)], &|g, v| {
        let y = g.linear(v[0], v[1], v[2])?;
        probe(g, y, seed)
    });
    run("softmax", &tight, vec![r(&[3, 6], 1)], &|g, v| {
        let y = g.softmax(v[0]);
        probe(g, y, seed)
    });
    run("layer_norm", &tight, vec![r(&[4, 6], 1), r(&[6], 2), r(&[6], 3)], &|g, v| {
        let y = g.layer_norm(v[0], v[1], v[2])?;
        probe(g, y, seed)
    });
    run("add", &loose, vec![r(&[3, 4], 1), r(&[3, 4], 2)], &|g, v| {
        let y = g.add(v[0], v[1])?;
        let y = g.mul(y, y)?;
        probe(g, y, seed)
    });
    run("mul", &loose, vec![r(&[3, 4], 1), r(&[3, 4], 2)], &|g, v| {
        let y = g.mul(v[0], v[1])?;
        probe(g, y, seed)
    });
    run("scale_reshape_sum", &loose, vec![r(&[2, 6], 1)], &|g, v| {
        let y = g.scale(v[0], -1.7);
        let y = g.reshape(y, &[3, 4])?;
        let y = g.mul(y, y)?;
        Ok(g.sum(y))
    });
    run("relu", &GradCheckConfig { skip_exact_zero: true, ..loose.clone() }, vec![r(&[4, 5], 1)], &|g, v| {
        let y = g.relu(v[0]);
        probe(g, y, seed)
    });
    run("matmul", &loose, vec![r(&[3, 4], 1), r(&[4, 2], 2)], &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y, seed)
    });
    for (name, stride, pad, k) in [("conv2d_s1", 1, 1, 3), ("conv2d_s2", 2, 2, 5)] {
        run(name, &loose, vec![r(&[2, 2, 8, 8], 1), r(&[3, 2, k, k], 2), r(&[3], 3)], &move |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
            probe(g, y, seed)
        });
    }
    run("maxpool2d", &loose, vec![r(&[2, 3, 4, 6], 1)], &|g, v| {
        let y = g.maxpool2d(v[0])?;
        probe(g, y, seed)
    });
    run("attention", &loose, vec![r(&[8, 4], 1), r(&[8, 4], 2), r(&[8, 4], 3)], &|g, v| {
        let valid = [true, true, true, false, true, true, true, true];
        let y = g.attention(v[0], v[1], v[2], &valid, AttentionShape { batch: 2, len: 4, heads: 2 })?;
        probe(g, y, seed)
    });
    run("cross_entropy", &loose, vec![r(&[4, 7], 1)], &|g, v| {
        let (l, _, _) = g.cross_entropy(v[0], &[3, 0, 99, 6], 99)?;
        Ok(l)
    });
    run("gather_rows", &loose, vec![r(&[4, 3], 1)], &|g, v| {
        let y = g.gather_rows(v[0], &[2, 0, 2, 3])?;
        probe(g, y, seed)
    });
    out
}

/// Small model used for whole-network gradient checks.
pub fn check_model() -> ModelConfig {
    ModelConfig {
        blocks: 2,
        hidden: 16,
        heads: 2,
        ffn: 32,
        max_len: 8,
        c1: 2,
        c2: 2,
    }
}

/// Gradient check of HanGlyph plus a 2-block encoder over a padded batch,
/// sampling `coords` coordinates per parameter tensor.
pub fn encoder_check(seed: u64, coords: usize) -> GradCheckReport {
    encoder_check_with(seed, coords, 1e-7)
}

pub fn encoder_check_with(seed: u64, coords: usize, step: f64) -> GradCheckReport {
    use glyphcrm::encoder::{AttentionMask, SeqLayout};
    use glyphcrm::model::{encode, BatchInput};

    let cfg = check_model();
    let params = init_params(&cfg, seed).cast::<f64>();
    let names: Vec<String> = param_shapes(&cfg).into_iter().map(|(n, _)| n).collect();
    let mut points: Vec<Tensor<f64>> = names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            // Biases start at zero; give them values so their paths are exercised.
            let t = params.get(n).unwrap().clone();
            if n.ends_with(".bias") || n.ends_with(".shift") {
                random(t.shape(), seed * 7919 + i as u64).map(|v| 0.1 * v)
            } else {
                t
            }
        })
        .collect();
    let maps = position_maps();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::new();
    for _ in 0..3 {
        pixels.extend((0..GLYPH_SIZE * GLYPH_SIZE).map(|_| rng.gen_range(0.0..1.0)));
        pixels.extend(maps.abscissa.iter().map(|&v| f64::from(v)));
        pixels.extend(maps.ordinate.iter().map(|&v| f64::from(v)));
    }
    points.push(Tensor::new(&[3, 3, GLYPH_SIZE, GLYPH_SIZE], pixels).unwrap());
    let batch = BatchInput {
        layout: SeqLayout { batch: 2, len: 3 },
        tokens: Vec::new(),
        segments: vec![0, 0, 1, 0, 1, 0],
        mask: AttentionMask(vec![true, true, true, true, true, false]),
    };
    let index = [0, 1, 2, 2, 0, 1];
    let nparams = names.len();
    let f = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let pv: ParamVars = names.iter().cloned().zip(v[..nparams].iter().copied()).collect();
        let out = encode(g, &pv, &cfg, v[nparams], &index, &batch)?;
        let a = probe(g, out.hidden, seed)?;
        let b = probe(g, out.r, seed + 1)?;
        g.add(a, b)
    };
    let gc = GradCheckConfig {
        step,
        tolerance: 1e-3,
        max_coords: Some(coords),
        seed,
        ..GradCheckConfig::default()
    };
    grad_check(f, &points, &gc).unwrap()
}
