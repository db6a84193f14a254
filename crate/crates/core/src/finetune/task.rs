//! Task definitions and labeled data files.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glyphsource::{Special, Token};
use crate::pretrain::{frame_pair, truncate_pair};
use crate::tensorcore::IGNORE_INDEX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleCls,
    PairCls,
    Tagging,
}

/// A downstream task and its optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Label names; the position of a name is its class id.
    pub labels: Vec<String>,
    #[serde(default = "TaskSpec::default_lr")]
    pub lr: f64,
    #[serde(default = "TaskSpec::default_epochs")]
    pub epochs: usize,
    #[serde(default = "TaskSpec::default_max_len")]
    pub max_len: usize,
    #[serde(default = "TaskSpec::default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    fn default_lr() -> f64 {
        2e-5
    }
    fn default_epochs() -> usize {
        3
    }
    fn default_max_len() -> usize {
        128
    }
    fn default_batch() -> usize {
        32
    }

    pub fn new(kind: TaskKind, labels: &[&str]) -> Self {
        Self {
            kind,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            lr: Self::default_lr(),
            epochs: Self::default_epochs(),
            max_len: Self::default_max_len(),
            batch: Self::default_batch(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Config("task needs at least one label".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(Error::Config(format!("duplicate label {dup:?}")));
        }
        if self.kind != TaskKind::Tagging && self.labels.len() < 2 {
            return Err(Error::Config("classification needs at least two labels".into()));
        }
        if self.max_len < 3 || self.batch == 0 {
            return Err(Error::Config("task max_len must be at least 3 and batch positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("task lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn label_id(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }

    /// True when every label is `O`, `B-X` or `I-X` and each `I-X` has a `B-X`.
    pub fn is_bio(&self) -> bool {
        let has = |n: &str| self.labels.iter().any(|l| l == n);
        self.labels.iter().all(|l| match l.split_once('-') {
            _ if l == "O" => true,
            Some(("B", t)) => !t.is_empty(),
            Some(("I", t)) => !t.is_empty() && has(&format!("B-{t}")),
            _ => false,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    Class(usize),
    /// One label per character.
    Tags(Vec<usize>),
}

/// One labeled input: a sentence, an optional second sentence and a target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub a: Vec<char>,
    pub b: Option<Vec<char>>,
    pub target: Target,
}

/// Model-ready form of an [`Example`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Framed {
    pub tokens: Vec<Token>,
    pub segments: Vec<usize>,
    /// Per-position tag ids ([`IGNORE_INDEX`] on frame tokens) or the class id.
    pub target: Target,
}

impl Example {
    /// `[CLS] A [SEP]`, or `[CLS] A [SEP] B [SEP]` for pairs, truncated from
    /// the tail (longer side first) to `max_len`.
    pub fn frame(&self, max_len: usize) -> Framed {
        let mut a = self.a.clone();
        match &self.b {
            Some(b) => {
                let mut b = b.clone();
                truncate_pair(&mut a, &mut b, max_len);
                let (tokens, segments) = frame_pair(&a, &b);
                Framed {
                    tokens,
                    segments,
                    target: self.target.clone(),
                }
            }
            None => {
                a.truncate(max_len.saturating_sub(2));
                let mut tokens = Vec::with_capacity(a.len() + 2);
                tokens.push(Token::Special(Special::Cls));
                tokens.extend(a.iter().map(|&c| Token::Char(c)));
                tokens.push(Token::Special(Special::Sep));
                let target = match &self.target {
                    Target::Class(c) => Target::Class(*c),
                    Target::Tags(t) => {
                        let mut framed = vec![IGNORE_INDEX];
                        framed.extend_from_slice(&t[..a.len()]);
                        framed.push(IGNORE_INDEX);
                        Target::Tags(framed)
                    }
                };
                Framed {
                    segments: vec![0; tokens.len()],
                    tokens,
                    target,
                }
            }
        }
    }
}

fn text_chars(s: &str) -> Vec<char> {
    s.chars().filter(|c| !c.is_whitespace()).collect()
}

/// Parses task data. `source` names the input in error messages.
///
/// Classification lines are `label<TAB>text` (pairs: `label<TAB>a<TAB>b`);
/// tagging files hold `char label` per line with blank lines between
/// sentences.
pub fn parse_task_data(text: &str, source: &str, spec: &TaskSpec) -> Result<Vec<Example>> {
    let err = |line: usize, msg: String| Error::Data {
        path: source.to_string(),
        line,
        msg,
    };
    let label = |line: usize, name: &str| {
        spec.label_id(name)
            .ok_or_else(|| err(line, format!("label {name:?} is not in the task label set")))
    };
    let mut out = Vec::new();
    match spec.kind {
        TaskKind::SingleCls | TaskKind::PairCls => {
            let fields = if spec.kind == TaskKind::PairCls { 3 } else { 2 };
            for (i, raw) in text.lines().enumerate() {
                let line = i + 1;
                if raw.trim().is_empty() {
                    continue;
                }
                let parts: Vec<&str> = raw.split('\t').collect();
                if parts.len() != fields {
                    return Err(err(line, format!("expected {fields} tab-separated fields, found {}", parts.len())));
                }
                let target = Target::Class(label(line, parts[0].trim())?);
                let a = text_chars(parts[1]);
                if a.is_empty() {
                    return Err(err(line, "empty text".into()));
                }
                let b = (fields == 3).then(|| text_chars(parts[2]));
                out.push(Example { a, b, target });
            }
        }
        TaskKind::Tagging => {
            let mut chars = Vec::new();
            let mut tags = Vec::new();
            for (i, raw) in text.lines().enumerate() {
                let line = i + 1;
                let trimmed = raw.trim();
                if trimmed.is_empty() {
                    if !chars.is_empty() {
                        out.push(Example {
                            a: std::mem::take(&mut chars),
                            b: None,
                            target: Target::Tags(std::mem::take(&mut tags)),
                        });
                    }
                    continue;
                }
                let mut parts = trimmed.split_whitespace();
                let (Some(tok), Some(name), None) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(err(line, "expected `character label`".into()));
                };
                let mut cs = tok.chars();
                let (Some(c), None) = (cs.next(), cs.next()) else {
                    return Err(err(line, format!("{tok:?} is not a single character")));
                };
                chars.push(c);
                tags.push(label(line, name)?);
            }
            if !chars.is_empty() {
                out.push(Example {
                    a: chars,
                    b: None,
                    target: Target::Tags(tags),
                });
            }
        }
    }
    Ok(out)
}

pub fn read_task_data(path: &Path, spec: &TaskSpec) -> Result<Vec<Example>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_task_data(&text, &path.display().to_string(), spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_defaults_and_unknown_keys() {
        let s: TaskSpec = serde_json::from_str(r#"{"kind": "pair_cls", "labels": ["0", "1"]}"#).unwrap();
        assert_eq!(s.kind, TaskKind::PairCls);
        assert_eq!(s.lr, 2e-5);
        assert!(serde_json::from_str::<TaskSpec>(r#"{"kind": "tagging", "labels": ["O"], "epoch": 2}"#).is_err());
        assert!(TaskSpec::new(TaskKind::Tagging, &[]).validate().is_err());
        assert!(TaskSpec::new(TaskKind::Tagging, &["O", "O"]).validate().is_err());
    }

    #[test]
    fn bio_scheme_detection() {
        assert!(TaskSpec::new(TaskKind::Tagging, &["O", "B-LOC", "I-LOC"]).is_bio());
        assert!(!TaskSpec::new(TaskKind::Tagging, &["O", "I-LOC"]).is_bio());
        assert!(!TaskSpec::new(TaskKind::Tagging, &["O", "NOUN"]).is_bio());
    }

    #[test]
    fn classification_lines() {
        let spec = TaskSpec::new(TaskKind::PairCls, &["no", "yes"]);
        let ex = parse_task_data("yes\t你好\t好吗\n\nno\t我\t他\n", "t", &spec).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].target, Target::Class(1));
        assert_eq!(ex[1].b, Some(vec!['他']));
    }

    #[test]
    fn unknown_label_reports_line() {
        let spec = TaskSpec::new(TaskKind::SingleCls, &["a", "b"]);
        let err = parse_task_data("a\t一\nc\t二\n", "train.tsv", &spec).unwrap_err().to_string();
        assert!(err.starts_with("train.tsv:2:"), "{err}");
        assert!(err.contains("\"c\""), "{err}");
    }

    #[test]
    fn tagging_blocks() {
        let spec = TaskSpec::new(TaskKind::Tagging, &["O", "B-LOC", "I-LOC"]);
        let ex = parse_task_data("北 B-LOC\n京 I-LOC\n\n\n好 O\n", "t", &spec).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].a, vec!['北', '京']);
        assert_eq!(ex[0].target, Target::Tags(vec![1, 2]));
        let err = parse_task_data("北 B-LOC\n京 X\n", "ner", &spec).unwrap_err().to_string();
        assert!(err.starts_with("ner:2:"), "{err}");
    }

    #[test]
    fn framing_and_truncation() {
        let ex = Example {
            a: "abcdef".chars().collect(),
            b: None,
            target: Target::Tags(vec![1, 2, 3, 4, 5, 6]),
        };
        let f = ex.frame(5);
        assert_eq!(f.tokens.len(), 5);
        assert_eq!(f.target, Target::Tags(vec![IGNORE_INDEX, 1, 2, 3, IGNORE_INDEX]));

        let pair = Example {
            a: "aaaa".chars().collect(),
            b: Some("bb".chars().collect()),
            target: Target::Class(0),
        };
        let f = pair.frame(7);
        assert_eq!(f.tokens.len(), 7);
        assert_eq!(f.segments, vec![0, 0, 0, 0, 1, 1, 1]);
    }
}
