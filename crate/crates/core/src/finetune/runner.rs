//! Task heads, evaluation and the fine-tuning loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::SeqLayout;
use crate::error::{Error, Result};
use crate::glyphsource::FontAtlas;
use crate::model::{encode_batch, init_linear_head, BatchInput, GlyphBank, ModelConfig, Sequence};
use crate::pretrain::{cls_rows, Checkpoint, CheckpointMeta, LrSchedule};
use crate::tensorcore::kernels::argmax;
use crate::tensorcore::{adam_step, AdamState, Graph, ParamStore, ParamVars, Scalar, Tensor, Var, IGNORE_INDEX};

use super::metrics::{span_counts, EvalReport, SpanCounts};
use super::task::{Example, Framed, Target, TaskKind, TaskSpec};

/// Softmax over `K` logits of each [CLS] state.
pub fn classify<T: Scalar>(g: &mut Graph<T>, h_cls: Var, weight: Var, bias: Var) -> Result<Var> {
    let logits = g.linear(h_cls, weight, bias)?;
    Ok(g.softmax(logits))
}

/// Argmax of each row; ties go to the lowest label id.
pub fn predictions<T: Scalar>(scores: &Tensor<T>) -> Vec<usize> {
    let k = scores.last_dim();
    scores.data().chunks(k).map(argmax).collect()
}

/// Per-position label ids for every row of `h`.
pub fn tag<T: Scalar>(g: &mut Graph<T>, h: Var, weight: Var, bias: Var) -> Result<Vec<usize>> {
    let logits = g.linear(h, weight, bias)?;
    Ok(predictions(g.value(logits)))
}

/// Backbone plus a linear task head named `head`.
#[derive(Clone, Debug)]
pub struct TaskModel {
    pub model: ModelConfig,
    pub spec: TaskSpec,
    pub params: ParamStore,
    pub meta: CheckpointMeta,
}

struct BatchOut {
    loss: Var,
    /// Predicted label per example (classification) or per row (tagging).
    predicted: Vec<usize>,
    targets: Vec<usize>,
    layout: SeqLayout,
    vars: ParamVars,
}

impl TaskModel {
    /// Pretrained backbone with a freshly initialized head; pretraining heads
    /// are dropped.
    pub fn from_pretrained(ckpt: Checkpoint, spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        if spec.max_len > ckpt.meta.model.max_len {
            return Err(Error::Config(format!(
                "task max_len {} exceeds the model's {}",
                spec.max_len, ckpt.meta.model.max_len
            )));
        }
        ckpt.check_model(&ckpt.meta.model)?;
        let mut params = ckpt.params;
        for name in ["mlm.weight", "mlm.bias", "nsp.weight", "nsp.bias"] {
            params.remove(name);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        init_linear_head(&mut params, "head", ckpt.meta.model.hidden, spec.labels.len(), &mut rng);
        let mut meta = ckpt.meta;
        meta.task = Some(spec.clone());
        meta.step = 0;
        Ok(Self {
            model: meta.model.clone(),
            spec,
            params,
            meta,
        })
    }

    /// A fine-tuned checkpoint.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let spec = ckpt
            .meta
            .task
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no task head; fine-tune it first".into()))?;
        ckpt.check_model(&ckpt.meta.model)?;
        let w = ckpt.params.get("head.weight")?;
        if w.shape() != [ckpt.meta.model.hidden, spec.labels.len()] {
            return Err(Error::Checkpoint(format!(
                "task head has shape {:?}, task expects {:?}",
                w.shape(),
                [ckpt.meta.model.hidden, spec.labels.len()]
            )));
        }
        Ok(Self {
            model: ckpt.meta.model.clone(),
            spec,
            params: ckpt.params,
            meta: ckpt.meta,
        })
    }

    pub fn checkpoint(&self, adam: AdamState) -> Checkpoint {
        Checkpoint {
            meta: self.meta.clone(),
            params: self.params.clone(),
            adam,
        }
    }

    fn run(&self, g: &mut Graph<f32>, bank: &mut GlyphBank, framed: &[Framed]) -> Result<BatchOut> {
        let pv = self.params.register(g);
        let seqs: Vec<Sequence> = framed
            .iter()
            .map(|f| Sequence {
                tokens: f.tokens.clone(),
                segments: f.segments.clone(),
            })
            .collect();
        let batch = BatchInput::pad(&seqs)?;
        let out = encode_batch(g, &pv, &self.model, bank, &batch)?;
        let (w, b) = (pv.get("head.weight")?, pv.get("head.bias")?);
        let mut targets = Vec::new();
        let states = match self.spec.kind {
            TaskKind::Tagging => {
                for f in framed {
                    let Target::Tags(t) = &f.target else {
                        return Err(Error::Contract("tagging task given a class target".into()));
                    };
                    targets.extend_from_slice(t);
                    targets.resize(targets.len() + batch.layout.len - t.len(), IGNORE_INDEX);
                }
                out.hidden
            }
            TaskKind::SingleCls | TaskKind::PairCls => {
                for f in framed {
                    let Target::Class(c) = f.target else {
                        return Err(Error::Contract("classification task given tag targets".into()));
                    };
                    targets.push(c);
                }
                g.gather_rows(out.hidden, &cls_rows(batch.layout))?
            }
        };
        let logits = g.linear(states, w, b)?;
        let (loss, _, _) = g.cross_entropy(logits, &targets, IGNORE_INDEX)?;
        Ok(BatchOut {
            loss,
            predicted: predictions(g.value(logits)),
            targets,
            layout: batch.layout,
            vars: pv,
        })
    }

    /// Predicted label names: one per example for classification, one per
    /// (untruncated) character for tagging.
    pub fn predict(&self, bank: &mut GlyphBank, examples: &[Example]) -> Result<Vec<Vec<String>>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(self.spec.batch) {
            let framed: Vec<Framed> = chunk.iter().map(|e| e.frame(self.spec.max_len)).collect();
            let mut g = Graph::inference();
            let r = self.run(&mut g, bank, &framed)?;
            for (i, f) in framed.iter().enumerate() {
                let names = match self.spec.kind {
                    TaskKind::Tagging => {
                        let row = &r.predicted[i * r.layout.len..][..f.tokens.len()];
                        row[1..row.len() - 1].iter().map(|&p| self.spec.labels[p].clone()).collect()
                    }
                    _ => vec![self.spec.labels[r.predicted[i]].clone()],
                };
                out.push(names);
            }
        }
        Ok(out)
    }

    /// Scores `examples` without modifying anything. Frame, pad and
    /// truncated positions are excluded from tagging accuracy.
    pub fn evaluate(&self, bank: &mut GlyphBank, examples: &[Example]) -> Result<EvalReport> {
        let bio = self.spec.kind == TaskKind::Tagging && self.spec.is_bio();
        let mut correct = 0;
        let mut total = 0;
        let mut spans = SpanCounts::default();
        for chunk in examples.chunks(self.spec.batch) {
            let framed: Vec<Framed> = chunk.iter().map(|e| e.frame(self.spec.max_len)).collect();
            let mut g = Graph::inference();
            let r = self.run(&mut g, bank, &framed)?;
            match self.spec.kind {
                TaskKind::Tagging => {
                    for row in 0..r.layout.batch {
                        let span = row * r.layout.len..(row + 1) * r.layout.len;
                        let (mut pred, mut gold) = (Vec::new(), Vec::new());
                        for (&p, &t) in r.predicted[span.clone()].iter().zip(&r.targets[span]) {
                            if t == IGNORE_INDEX {
                                continue;
                            }
                            total += 1;
                            correct += usize::from(p == t);
                            pred.push(self.spec.labels[p].as_str());
                            gold.push(self.spec.labels[t].as_str());
                        }
                        if bio {
                            spans.add(span_counts(&pred, &gold));
                        }
                    }
                }
                _ => {
                    total += r.targets.len();
                    correct += r.predicted.iter().zip(&r.targets).filter(|(p, t)| p == t).count();
                }
            }
        }
        Ok(EvalReport::new(examples.len(), correct, total, bio.then_some(spans)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: EvalReport,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Parameters from the epoch with the best dev score.
    pub model: TaskModel,
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub dev: EvalReport,
    pub test: Option<EvalReport>,
}

/// Full-model fine-tuning from a pretrained checkpoint.
///
/// Every epoch visits the training set once in a seeded shuffled order with
/// Adam and a linearly decaying rate. After each epoch the dev set is scored
/// and the earliest epoch with the highest dev score (F1 for BIO tagging,
/// accuracy otherwise) is kept and scored on `test`.
pub fn finetune_run(
    pretrained: Checkpoint,
    atlas: FontAtlas,
    spec: TaskSpec,
    train: &[Example],
    dev: &[Example],
    test: Option<&[Example]>,
) -> Result<FinetuneOutcome> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Config("fine-tuning needs non-empty train and dev sets".into()));
    }
    let mut model = TaskModel::from_pretrained(pretrained, spec.clone())?;
    let mut bank = GlyphBank::new(atlas);
    let adam_cfg = model.meta.train.adam();
    let per_epoch = train.len().div_ceil(spec.batch) as u64;
    let schedule = LrSchedule {
        base: spec.lr,
        warmup: 0,
        total: per_epoch * spec.epochs as u64 + 1,
    };
    let mut adam = AdamState::new();
    let mut best: Option<(usize, f64, ParamStore, AdamState, EvalReport)> = None;
    let mut history = Vec::new();
    let framed: Vec<Framed> = train.iter().map(|e| e.frame(spec.max_len)).collect();
    for epoch in 1..=spec.epochs {
        let mut order: Vec<usize> = (0..framed.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let mut loss_sum = 0.0;
        for idx in order.chunks(spec.batch) {
            let batch: Vec<Framed> = idx.iter().map(|&i| framed[i].clone()).collect();
            let mut g = Graph::new();
            let out = model.run(&mut g, &mut bank, &batch)?;
            let loss = f64::from(g.value(out.loss).data()[0]);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(adam.step + 1));
            }
            loss_sum += loss;
            let mut grads = g.backward(out.loss)?;
            let grads = out.vars.collect(&mut grads);
            let lr = schedule.lr(adam.step + 1);
            adam_step(&mut model.params, &grads, &mut adam, lr, &adam_cfg)?;
        }
        model.meta.step = adam.step;
        let report = model.evaluate(&mut bank, dev)?;
        log::info!("epoch {epoch}: train loss {:.4} dev {:.4}", loss_sum / per_epoch as f64, report.primary());
        if best.as_ref().is_none_or(|b| report.primary() > b.1) {
            best = Some((epoch, report.primary(), model.params.clone(), adam.clone(), report.clone()));
        }
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / per_epoch as f64,
            dev: report,
        });
    }
    let (best_epoch, _, params, adam, dev_report) = best.expect("at least one epoch");
    model.params = params;
    model.meta.step = adam.step;
    let test = test.map(|t| model.evaluate(&mut bank, t)).transpose()?;
    Ok(FinetuneOutcome {
        checkpoint: model.checkpoint(adam),
        model,
        best_epoch,
        history,
        dev: dev_report,
        test,
    })
}
