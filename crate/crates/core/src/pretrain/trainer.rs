use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glyphsource::FontAtlas;
use crate::model::{encode_batch, init_linear_head, init_params_with, BatchInput, GlyphBank, ModelConfig, Sequence};
use crate::parallel;
use crate::tensorcore::{adam_step, AdamConfig, AdamState, Graph, ParamStore, IGNORE_INDEX};

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::corpus::{sample_pair, Corpus};
use super::heads::{mlm_loss, nsp_loss};
use super::masking::{make_example, PretrainExample};
use super::schedule::LrSchedule;
use super::vocab::{build_vocab, Vocabulary};

/// Optimization and bookkeeping settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Sentence pairs per update.
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    /// Total updates; the learning rate reaches zero here.
    pub steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub min_freq: u64,
    /// Checkpoint period in updates (0 disables periodic checkpoints).
    pub checkpoint_every: u64,
    /// Evaluation period in updates (0 disables periodic evaluation).
    pub eval_every: u64,
    pub eval_examples: usize,
    /// Stop once held-out masked-token accuracy reaches this value...
    pub target_mlm_acc: Option<f64>,
    /// ...and next-sentence accuracy reaches this one.
    pub target_nsp_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch: 256,
            lr: 1e-4,
            warmup: 10_000,
            steps: 1_000_000,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            min_freq: 2,
            checkpoint_every: 10_000,
            eval_every: 1_000,
            eval_examples: 256,
            target_mlm_acc: None,
            target_nsp_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            warmup: self.warmup,
            total: self.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

const TRAIN_DOMAIN: u64 = 0x7472_6169_6e00_0001;
const EVAL_DOMAIN: u64 = 0x6576_616c_0000_0002;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one example slot.
pub fn example_rng(seed: u64, domain: u64, step: u64, slot: u64) -> ChaCha8Rng {
    let key = splitmix(seed ^ splitmix(domain ^ splitmix(step ^ splitmix(slot))));
    ChaCha8Rng::seed_from_u64(key)
}

/// Per-update training metrics; one JSON line each in the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub mlm_loss: f64,
    pub nsp_loss: f64,
    pub mlm_acc: Option<f64>,
    pub nsp_acc: f64,
    pub wallclock: f64,
}

/// Metrics over the fixed held-out example set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub step: u64,
    pub mlm_loss: f64,
    pub nsp_loss: f64,
    pub mlm_acc: f64,
    pub nsp_acc: f64,
    pub masked: usize,
    pub examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub final_step: u64,
    pub stopped_early: bool,
    pub last_eval: Option<EvalMetrics>,
    pub wallclock: f64,
}

struct BatchResult {
    mlm_loss: f64,
    nsp_loss: f64,
    mlm_counted: usize,
    mlm_correct: usize,
    nsp_correct: usize,
}

/// Pretraining state: data, parameters, optimizer and step counter.
pub struct Pretrainer {
    model: ModelConfig,
    train: TrainConfig,
    corpus: Corpus,
    pairs: Vec<(usize, usize)>,
    vocab: Vocabulary,
    bank: GlyphBank,
    params: ParamStore,
    adam: AdamState,
    step: u64,
    eval_set: Vec<PretrainExample>,
}

impl Pretrainer {
    /// Fresh run: builds the vocabulary and initializes every parameter from
    /// `train.seed`.
    pub fn new(corpus: Corpus, atlas: FontAtlas, model: ModelConfig, train: TrainConfig) -> Result<Self> {
        let vocab = build_vocab(&corpus.text(), &atlas, train.min_freq);
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let mut params = init_params_with(&model, &mut rng);
        init_linear_head(&mut params, "mlm", model.hidden, vocab.len(), &mut rng);
        init_linear_head(&mut params, "nsp", model.hidden, 2, &mut rng);
        Self::assemble(corpus, atlas, model, train, vocab, params, AdamState::new(), 0)
    }

    /// Continues from `ckpt` with its configuration and vocabulary.
    pub fn resume(corpus: Corpus, atlas: FontAtlas, ckpt: Checkpoint) -> Result<Self> {
        let m = ckpt.meta;
        ckpt.params.get("mlm.weight")?;
        Self::assemble(corpus, atlas, m.model, m.train, m.vocab, ckpt.params, ckpt.adam, m.step)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        corpus: Corpus,
        atlas: FontAtlas,
        model: ModelConfig,
        train: TrainConfig,
        vocab: Vocabulary,
        params: ParamStore,
        adam: AdamState,
        step: u64,
    ) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        crate::model::check_params(&model, &params)?;
        if corpus.documents().len() < 2 {
            return Err(Error::Corpus(
                "pretraining needs at least two documents for next-sentence pairs".into(),
            ));
        }
        let pairs = corpus.adjacent_pairs();
        let mut me = Self {
            model,
            train,
            corpus,
            pairs,
            vocab,
            bank: GlyphBank::new(atlas),
            params,
            adam,
            step,
            eval_set: Vec::new(),
        };
        me.eval_set = (0..me.train.eval_examples as u64)
            .map(|i| me.example(EVAL_DOMAIN, 0, i))
            .collect::<Result<_>>()?;
        Ok(me)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train
    }

    fn example(&self, domain: u64, step: u64, slot: u64) -> Result<PretrainExample> {
        let mut rng = example_rng(self.train.seed, domain, step, slot);
        let at = self.pairs[rng.gen_range(0..self.pairs.len())];
        let pair = sample_pair(&self.corpus, at, &mut rng, self.model.max_len)?;
        Ok(make_example(&pair, &self.vocab, &mut rng))
    }

    /// Training examples of 1-based update `step`.
    pub fn training_batch(&self, step: u64) -> Result<Vec<PretrainExample>> {
        parallel::map_indexed(self.train.batch, |slot| self.example(TRAIN_DOMAIN, step, slot as u64))
            .into_iter()
            .collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                model: self.model.clone(),
                train: self.train.clone(),
                step: self.step,
                vocab: self.vocab.clone(),
                task: None,
            },
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }

    fn run_batch(&mut self, g: &mut Graph<f32>, examples: &[PretrainExample]) -> Result<(crate::tensorcore::Var, BatchResult, crate::tensorcore::ParamVars)> {
        let pv = self.params.register(g);
        let seqs: Vec<Sequence> = examples
            .iter()
            .map(|e| Sequence {
                tokens: e.inputs.clone(),
                segments: e.segments.clone(),
            })
            .collect();
        let batch = BatchInput::pad(&seqs)?;
        let mut labels = Vec::with_capacity(batch.layout.rows());
        for e in examples {
            labels.extend_from_slice(&e.mlm_labels);
            labels.resize(labels.len() + batch.layout.len - e.mlm_labels.len(), IGNORE_INDEX);
        }
        let nsp_labels: Vec<usize> = examples.iter().map(|e| e.nsp_label.class()).collect();

        let out = encode_batch(g, &pv, &self.model, &mut self.bank, &batch)?;
        let mlm = mlm_loss(g, out.hidden, &labels, pv.get("mlm.weight")?, pv.get("mlm.bias")?)?;
        let nsp = nsp_loss(g, out.hidden, batch.layout, &nsp_labels, pv.get("nsp.weight")?, pv.get("nsp.bias")?)?;
        let total = g.add(mlm.loss, nsp.loss)?;
        let result = BatchResult {
            mlm_loss: f64::from(g.value(mlm.loss).data()[0]),
            nsp_loss: f64::from(g.value(nsp.loss).data()[0]),
            mlm_counted: mlm.counted,
            mlm_correct: mlm.correct,
            nsp_correct: nsp.correct,
        };
        Ok((total, result, pv))
    }

    /// One optimizer update. On a non-finite loss nothing changes.
    pub fn train_step(&mut self, started: Instant) -> Result<StepMetrics> {
        let step = self.step + 1;
        let examples = self.training_batch(step)?;
        let mut g = Graph::new();
        let (total, r, pv) = self.run_batch(&mut g, &examples)?;
        let loss = r.mlm_loss + r.nsp_loss;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        let mut grads = g.backward(total)?;
        let grads = pv.collect(&mut grads);
        let lr = self.train.schedule().lr(step);
        adam_step(&mut self.params, &grads, &mut self.adam, lr, &self.train.adam())?;
        self.step = step;
        Ok(StepMetrics {
            step,
            lr,
            loss,
            mlm_loss: r.mlm_loss,
            nsp_loss: r.nsp_loss,
            mlm_acc: (r.mlm_counted > 0).then(|| r.mlm_correct as f64 / r.mlm_counted as f64),
            nsp_acc: r.nsp_correct as f64 / examples.len() as f64,
            wallclock: started.elapsed().as_secs_f64(),
        })
    }

    /// Loss and accuracy on the held-out example set; parameters are untouched.
    pub fn evaluate(&mut self) -> Result<EvalMetrics> {
        let set = std::mem::take(&mut self.eval_set);
        let mut mlm_sum = 0.0;
        let mut nsp_sum = 0.0;
        let mut masked = 0;
        let mut mlm_correct = 0;
        let mut nsp_correct = 0;
        let mut outcome = Ok(());
        for chunk in set.chunks(self.train.batch.max(1)) {
            let mut g = Graph::inference();
            match self.run_batch(&mut g, chunk) {
                Ok((_, r, _)) => {
                    mlm_sum += r.mlm_loss * r.mlm_counted as f64;
                    nsp_sum += r.nsp_loss * chunk.len() as f64;
                    masked += r.mlm_counted;
                    mlm_correct += r.mlm_correct;
                    nsp_correct += r.nsp_correct;
                }
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            }
        }
        self.eval_set = set;
        outcome?;
        let n = self.eval_set.len().max(1) as f64;
        Ok(EvalMetrics {
            step: self.step,
            mlm_loss: mlm_sum / masked.max(1) as f64,
            nsp_loss: nsp_sum / n,
            mlm_acc: mlm_correct as f64 / masked.max(1) as f64,
            nsp_acc: nsp_correct as f64 / n,
            masked,
            examples: self.eval_set.len(),
        })
    }

    fn targets_met(&self, e: &EvalMetrics) -> bool {
        let (m, n) = (self.train.target_mlm_acc, self.train.target_nsp_acc);
        (m.is_some() || n.is_some()) && m.is_none_or(|t| e.mlm_acc >= t) && n.is_none_or(|t| e.nsp_acc >= t)
    }

    /// Trains until `until` updates (capped at the configured total) or until
    /// the accuracy targets are met.
    ///
    /// With `out`, appends a line per update to `metrics.jsonl`, a line per
    /// evaluation to `eval.jsonl`, and writes `step-XXXXXXXX.gcrm`
    /// checkpoints plus `final.gcrm`.
    pub fn run(&mut self, until: u64, out: Option<&Path>) -> Result<RunSummary> {
        let started = Instant::now();
        let until = until.min(self.train.steps);
        let logs = out.map(RunLogs::open).transpose()?;
        let mut last_eval = None;
        let mut stopped_early = false;
        while self.step < until {
            let m = self.train_step(started)?;
            if let Some(l) = &logs {
                l.append(&l.metrics, &m)?;
            }
            log::debug!("step {} loss {:.4} lr {:.2e}", m.step, m.loss, m.lr);
            let step = self.step;
            let every = |n: u64| n > 0 && step.is_multiple_of(n);
            if every(self.train.eval_every) {
                let e = self.evaluate()?;
                log::info!(
                    "step {}: eval mlm_acc {:.3} nsp_acc {:.3} mlm_loss {:.3} nsp_loss {:.3}",
                    e.step,
                    e.mlm_acc,
                    e.nsp_acc,
                    e.mlm_loss,
                    e.nsp_loss
                );
                if let Some(l) = &logs {
                    l.append(&l.eval, &e)?;
                }
                stopped_early = self.targets_met(&e);
                last_eval = Some(e);
            }
            if let Some(l) = &logs {
                if every(self.train.checkpoint_every) {
                    self.checkpoint().save(&l.dir.join(format!("step-{:08}.gcrm", self.step)))?;
                }
            }
            if stopped_early {
                break;
            }
        }
        if let Some(l) = &logs {
            self.checkpoint().save(&l.dir.join("final.gcrm"))?;
        }
        Ok(RunSummary {
            final_step: self.step,
            stopped_early,
            last_eval,
            wallclock: started.elapsed().as_secs_f64(),
        })
    }
}

struct RunLogs {
    dir: PathBuf,
    metrics: PathBuf,
    eval: PathBuf,
}

impl RunLogs {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: dir.join("metrics.jsonl"),
            eval: dir.join("eval.jsonl"),
        })
    }

    fn append<S: Serialize>(&self, path: &Path, record: &S) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Fresh pretraining run to `train.steps` updates.
pub fn pretrain_run(
    corpus: Corpus,
    atlas: FontAtlas,
    model: ModelConfig,
    train: TrainConfig,
    out: Option<&Path>,
) -> Result<(Pretrainer, RunSummary)> {
    let total = train.steps;
    let mut trainer = Pretrainer::new(corpus, atlas, model, train)?;
    let summary = trainer.run(total, out)?;
    Ok((trainer, summary))
}
