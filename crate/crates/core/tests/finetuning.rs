mod common;

use std::collections::HashSet;

use common::{fixture, font};
use glyphcrm::finetune::{finetune_run, read_task_data, Example, Target, TaskKind, TaskModel, TaskSpec};
use glyphcrm::model::{GlyphBank, ModelConfig};
use glyphcrm::pretrain::{Checkpoint, Corpus, Pretrainer, TrainConfig};
use glyphcrm::tensorcore::Tensor;

fn model() -> ModelConfig {
    ModelConfig {
        blocks: 2,
        hidden: 16,
        heads: 2,
        ffn: 32,
        max_len: 64,
        c1: 2,
        c2: 2,
    }
}

/// Freshly initialized backbone in checkpoint form.
fn backbone(seed: u64) -> Checkpoint {
    let corpus = Corpus::read(&fixture("toy_corpus.txt")).unwrap();
    let train = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    Pretrainer::new(corpus, font(), model(), train).unwrap().checkpoint()
}

fn tagging_spec() -> TaskSpec {
    TaskSpec {
        lr: 3e-3,
        epochs: 6,
        max_len: 32,
        batch: 4,
        ..TaskSpec::new(TaskKind::Tagging, &["O", "B-LOC", "I-LOC", "B-PER", "I-PER"])
    }
}

#[test]
fn toy_classifier_fits_training_set() {
    let spec = TaskSpec {
        lr: 3e-3,
        epochs: 30,
        max_len: 32,
        batch: 4,
        ..TaskSpec::new(TaskKind::SingleCls, &["0", "1"])
    };
    let data = read_task_data(&fixture("toy_cls.tsv"), &spec).unwrap();
    assert_eq!(data.len(), 16);
    let out = finetune_run(backbone(0), font(), spec, &data, &data, None).unwrap();
    assert_eq!(out.dev.accuracy, 1.0, "{:?}", out.history.iter().map(|h| h.dev.accuracy).collect::<Vec<_>>());
    assert!(out.best_epoch <= 30);
}

#[test]
fn best_dev_epoch_is_kept() {
    let spec = tagging_spec();
    let train = read_task_data(&fixture("toy_tagging_train.txt"), &spec).unwrap();
    let dev = read_task_data(&fixture("toy_tagging_test.txt"), &spec).unwrap();
    let out = finetune_run(backbone(1), font(), spec, &train, &dev, Some(&dev)).unwrap();
    assert_eq!(out.history.len(), 6);
    let scores: Vec<f64> = out.history.iter().map(|h| h.dev.primary()).collect();
    let best = scores.iter().cloned().fold(f64::MIN, f64::max);
    let first = scores.iter().position(|&s| s == best).unwrap() + 1;
    assert_eq!(out.best_epoch, first);
    assert_eq!(out.dev, out.history[first - 1].dev);
    // The kept parameters reproduce the recorded dev score.
    let mut bank = GlyphBank::new(font());
    assert_eq!(out.model.evaluate(&mut bank, &dev).unwrap(), out.dev);
    assert_eq!(out.test.as_ref(), Some(&out.dev));
    let reloaded = TaskModel::from_checkpoint(Checkpoint::from_bytes(&out.checkpoint.to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(reloaded.evaluate(&mut bank, &dev).unwrap(), out.dev);
}

#[test]
fn tagger_handles_characters_never_seen_in_training() {
    let spec = tagging_spec();
    let train = read_task_data(&fixture("toy_tagging_train.txt"), &spec).unwrap();
    let out = finetune_run(backbone(2), font(), spec, &train, &train[..2], None).unwrap();
    let seen: HashSet<char> = train.iter().flat_map(|e| e.a.iter().copied()).collect();
    let atlas = font();
    let unseen: Vec<char> = atlas.chars().filter(|c| !seen.contains(c) && *c != '⼀').take(2).collect();
    assert_eq!(unseen.len(), 2);
    // One unseen character with a glyph and one with no glyph at all.
    let text = vec!['我', unseen[0], '去', unseen[1], '鑫'];
    assert!(!atlas.contains('鑫'));
    let example = Example {
        target: Target::Tags(vec![0; text.len()]),
        a: text,
        b: None,
    };
    let mut bank = GlyphBank::new(atlas);
    let pred = out.model.predict(&mut bank, std::slice::from_ref(&example)).unwrap();
    assert_eq!(pred[0].len(), 5);
    let report = out.model.evaluate(&mut bank, &[example]).unwrap();
    assert_eq!(report.total, 5);
}

#[test]
fn padding_does_not_change_scores() {
    let spec = TaskSpec {
        batch: 8,
        ..tagging_spec()
    };
    let test = read_task_data(&fixture("toy_tagging_test.txt"), &spec).unwrap();
    let mut m = TaskModel::from_pretrained(backbone(3), spec).unwrap();
    let mut bank = GlyphBank::new(font());
    let chars: usize = test.iter().map(|e| e.a.len()).sum();

    let together = m.evaluate(&mut bank, &test).unwrap();
    assert_eq!(together.total, chars);
    let mut alone = (0, 0);
    for e in &test {
        let r = m.evaluate(&mut bank, std::slice::from_ref(e)).unwrap();
        alone.0 += r.correct;
        alone.1 += r.total;
    }
    assert_eq!((together.correct, together.total), alone);

    // A long padded neighbour leaves the others' predictions alone.
    let long = Example {
        a: "我们去北京我们去北京我们去北京".chars().collect(),
        b: None,
        target: Target::Tags(vec![0; 15]),
    };
    let mut padded = test.clone();
    padded.push(long);
    let with_pad = m.predict(&mut bank, &padded).unwrap();
    assert_eq!(&with_pad[..test.len()], &m.predict(&mut bank, &test).unwrap()[..]);

    // Force class 1 everywhere: accuracy counts exactly the gold B-LOC characters.
    let h = m.model.hidden;
    m.params.insert("head.weight", Tensor::zeros(&[h, 5]));
    m.params.insert("head.bias", Tensor::new(&[5], vec![0.0, 10.0, 0.0, 0.0, 0.0]).unwrap());
    let r = m.evaluate(&mut bank, &test).unwrap();
    let gold_b_loc = test
        .iter()
        .map(|e| match &e.target {
            Target::Tags(t) => t.iter().filter(|&&t| t == 1).count(),
            Target::Class(_) => 0,
        })
        .sum::<usize>();
    assert_eq!((r.correct, r.total), (gold_b_loc, chars));
}

#[test]
fn evaluation_is_read_only() {
    let spec = tagging_spec();
    let test = read_task_data(&fixture("toy_tagging_test.txt"), &spec).unwrap();
    let m = TaskModel::from_pretrained(backbone(4), spec).unwrap();
    let before = m.params.clone();
    let mut bank = GlyphBank::new(font());
    let a = m.evaluate(&mut bank, &test).unwrap();
    let b = m.evaluate(&mut bank, &test).unwrap();
    assert_eq!(a, b);
    assert!(m.params.bit_eq(&before));
}
