//! Accuracy and entity-level precision, recall and F1.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// A labeled span `[start, end)` of entity type `kind`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Entity {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

/// Maximal `B-X (I-X)*` runs. An `I-X` that does not continue an open `X`
/// entity starts a new one; the second value counts such repairs.
pub fn bio_entities<S: AsRef<str>>(labels: &[S]) -> (Vec<Entity>, usize) {
    let mut out: Vec<Entity> = Vec::new();
    let mut open: Option<Entity> = None;
    let mut repaired = 0;
    for (i, l) in labels.iter().enumerate() {
        let l = l.as_ref();
        let (tag, kind) = match l.split_once('-') {
            Some((t @ ("B" | "I"), k)) => (t, k),
            _ => ("O", ""),
        };
        match tag {
            "I" if open.as_ref().is_some_and(|e| e.kind == kind) => {
                if let Some(e) = open.as_mut() {
                    e.end = i + 1;
                }
            }
            "B" | "I" => {
                if tag == "I" {
                    repaired += 1;
                }
                out.extend(open.take());
                open = Some(Entity {
                    kind: kind.to_string(),
                    start: i,
                    end: i + 1,
                });
            }
            _ => out.extend(open.take()),
        }
    }
    out.extend(open);
    (out, repaired)
}

/// Entity counts behind precision and recall.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanCounts {
    pub predicted: usize,
    pub gold: usize,
    pub matched: usize,
    /// Malformed `I-X` transitions repaired in the predictions.
    pub repaired: usize,
}

impl SpanCounts {
    pub fn add(&mut self, other: SpanCounts) {
        self.predicted += other.predicted;
        self.gold += other.gold;
        self.matched += other.matched;
        self.repaired += other.repaired;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.matched, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.matched, self.gold)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Exact `(type, start, end)` matches between one predicted and one gold sequence.
pub fn span_counts<S: AsRef<str>, G: AsRef<str>>(pred: &[S], gold: &[G]) -> SpanCounts {
    let (p, repaired) = bio_entities(pred);
    let (g, _) = bio_entities(gold);
    let gold_set: HashSet<&Entity> = g.iter().collect();
    SpanCounts {
        predicted: p.len(),
        gold: g.len(),
        matched: p.iter().filter(|e| gold_set.contains(e)).count(),
        repaired,
    }
}

/// Entity-level scores for aligned predicted and gold label sequences.
pub fn span_f1<S: AsRef<str>, G: AsRef<str>>(pred: &[S], gold: &[G]) -> EvalReport {
    let counts = span_counts(pred, gold);
    let correct = pred.iter().zip(gold).filter(|(p, g)| p.as_ref() == g.as_ref()).count();
    EvalReport::new(1, correct, pred.len(), Some(counts))
}

/// Evaluation summary. `accuracy` is over examples for classification and
/// over character positions for tagging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spans: Option<SpanCounts>,
}

impl EvalReport {
    pub fn new(examples: usize, correct: usize, total: usize, spans: Option<SpanCounts>) -> Self {
        Self {
            examples,
            accuracy: ratio(correct, total),
            correct,
            total,
            precision: spans.map(|s| s.precision()),
            recall: spans.map(|s| s.recall()),
            f1: spans.map(|s| s.f1()),
            spans,
        }
    }

    /// F1 when entity scores exist, accuracy otherwise.
    pub fn primary(&self) -> f64 {
        self.f1.unwrap_or(self.accuracy)
    }

    /// Two-column plain-text table.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(&str, String)> = vec![
            ("examples", self.examples.to_string()),
            ("accuracy", format!("{:.4}", self.accuracy)),
            ("correct", format!("{}/{}", self.correct, self.total)),
        ];
        if let (Some(p), Some(r), Some(f), Some(s)) = (self.precision, self.recall, self.f1, self.spans) {
            rows.push(("precision", format!("{p:.4}")));
            rows.push(("recall", format!("{r:.4}")));
            rows.push(("f1", format!("{f:.4}")));
            rows.push(("entities", format!("{} predicted, {} gold, {} matched", s.predicted, s.gold, s.matched)));
            rows.push(("repaired", s.repaired.to_string()));
        }
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<w$}  {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_single_entity() {
        let s = ["O", "B-PER", "I-PER", "O"];
        let r = span_f1(&s, &s);
        assert_eq!((r.precision, r.recall, r.f1), (Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn no_predicted_entities() {
        let r = span_f1(&["O", "O"], &["B-LOC", "O"]);
        assert_eq!((r.precision, r.recall, r.f1), (Some(0.0), Some(0.0), Some(0.0)));
    }

    #[test]
    fn half_recall() {
        let r = span_f1(&["B-LOC", "I-LOC", "O", "O"], &["B-LOC", "I-LOC", "O", "B-PER"]);
        assert_eq!(r.precision, Some(1.0));
        assert_eq!(r.recall, Some(0.5));
        assert!((r.f1.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn repairs_orphan_inside() {
        let (e, n) = bio_entities(&["I-LOC", "I-LOC", "O", "B-PER", "I-LOC"]);
        assert_eq!(n, 2);
        assert_eq!(
            e,
            vec![
                Entity { kind: "LOC".into(), start: 0, end: 2 },
                Entity { kind: "PER".into(), start: 3, end: 4 },
                Entity { kind: "LOC".into(), start: 4, end: 5 },
            ]
        );
    }

    #[test]
    fn adjacent_b_tags_split() {
        let (e, _) = bio_entities(&["B-X", "B-X", "I-X"]);
        assert_eq!(e.len(), 2);
        assert_eq!((e[1].start, e[1].end), (1, 3));
    }

    #[test]
    fn table_is_aligned() {
        let r = span_f1(&["B-LOC"], &["B-LOC"]);
        let t = r.to_table();
        let cols: HashSet<usize> = t.lines().map(|l| l.find("  ").unwrap() + l[l.find("  ").unwrap()..].find(|c: char| c != ' ').unwrap()).collect();
        assert_eq!(cols.len(), 1, "{t}");
    }
}
