//! Kernel and training-step timings.
//!
//! Each benchmark runs as `pool` (the default rayon pool, or plain loops when
//! built with `--no-default-features`) and, in parallel builds, `one-thread`
//! (a single-thread rayon pool). Save a baseline from one build and compare
//! the other against it to see what the parallel core buys.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use glyphcrm::glyphsource::{encode_char, parse_bdf, FontAtlas, Token, GLYPH_SIZE};
use glyphcrm::hanglyph::hanglyph_forward;
use glyphcrm::model::{init_params, ModelConfig};
use glyphcrm::parallel::is_parallel;
use glyphcrm::pretrain::{Corpus, Pretrainer, TrainConfig};
use glyphcrm::tensorcore::kernels::{conv2d, conv2d_backward, linear};
use glyphcrm::tensorcore::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn font() -> FontAtlas {
    parse_bdf(&fs::read(fixture("cjk16.bdf")).unwrap()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Registers `f` as `name/pool` and, when rayon is compiled in, `name/one-thread`.
fn modes(c: &mut Criterion, name: &str, mut f: impl FnMut() + Send) {
    let mut group = c.benchmark_group(name);
    group.sample_size(20);
    group.bench_function(BenchmarkId::from_parameter("pool"), |b| b.iter(&mut f));
    if is_parallel() {
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        group.bench_function(BenchmarkId::from_parameter("one-thread"), |b| {
            b.iter_custom(|iters| {
                one.install(|| {
                    let start = Instant::now();
                    for _ in 0..iters {
                        f();
                    }
                    start.elapsed()
                })
            })
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    // Block-1 core convolution of the tiny configuration over a batch of 16 glyphs.
    let x = random(&[16, 8, 48, 48], 1);
    let k = random(&[8, 8, 9, 9], 2);
    let b = random(&[8], 3);
    modes(c, "conv2d_9x9_forward", || {
        std::hint::black_box(conv2d(&x, &k, &b, 1, 4).unwrap());
    });
    let go = random(&[16, 8, 48, 48], 4);
    modes(c, "conv2d_9x9_backward", || {
        std::hint::black_box(conv2d_backward(&x, &k, &b, 1, 4, &go, true).unwrap());
    });
    let y = random(&[16, 8, 24, 24], 5);
    let k3 = random(&[16, 8, 3, 3], 6);
    let b3 = random(&[16], 7);
    modes(c, "conv2d_3x3_stride2_forward", || {
        std::hint::black_box(conv2d(&y, &k3, &b3, 2, 1).unwrap());
    });
}

fn dense(c: &mut Criterion) {
    let x = random(&[512, 64], 8);
    let w = random(&[64, 256], 9);
    let b = random(&[256], 10);
    modes(c, "linear_512x64x256", || {
        std::hint::black_box(linear(&x, &w, &b).unwrap());
    });
}

fn glyph_encoder(c: &mut Criterion) {
    let cfg = ModelConfig::tiny();
    let params = init_params(&cfg, 0);
    let atlas = font();
    let chars: Vec<char> = atlas.chars().take(32).collect();
    let data: Vec<f32> = chars
        .iter()
        .flat_map(|&ch| encode_char(Token::Char(ch), &atlas).unwrap().data().to_vec())
        .collect();
    let input = Tensor::new(&[chars.len(), 3, GLYPH_SIZE, GLYPH_SIZE], data).unwrap();
    modes(c, "hanglyph_forward_32", || {
        let mut g = Graph::<f32>::inference();
        let pv = params.register(&mut g);
        let x = g.constant(input.clone());
        std::hint::black_box(hanglyph_forward(&mut g, &pv, x).unwrap());
    });
}

fn train_step(c: &mut Criterion) {
    let corpus = Corpus::read(&fixture("toy_corpus.txt")).unwrap();
    let train = TrainConfig {
        batch: 8,
        steps: 1_000_000,
        ..TrainConfig::default()
    };
    let mut trainer = Pretrainer::new(corpus, font(), ModelConfig::tiny(), train).unwrap();
    let started = Instant::now();
    modes(c, "pretrain_step_tiny_batch8", || {
        std::hint::black_box(trainer.train_step(started).unwrap());
    });
}

criterion_group!(benches, conv, dense, glyph_encoder, train_step);
criterion_main!(benches);
