use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Sentence = Vec<char>;

/// Documents of sentences parsed from plain text.
///
/// One sentence per line; a blank line separates documents. Whitespace
/// inside a line is dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<Vec<Sentence>>,
}

impl Corpus {
    pub fn parse(text: &str) -> Self {
        let mut documents = Vec::new();
        let mut current: Vec<Sentence> = Vec::new();
        for line in text.lines() {
            let sentence: Sentence = line.chars().filter(|c| !c.is_whitespace()).collect();
            if sentence.is_empty() {
                if !current.is_empty() {
                    documents.push(std::mem::take(&mut current));
                }
            } else {
                current.push(sentence);
            }
        }
        if !current.is_empty() {
            documents.push(current);
        }
        Self { documents }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn from_documents(documents: Vec<Vec<Sentence>>) -> Self {
        Self {
            documents: documents.into_iter().filter(|d| !d.is_empty()).collect(),
        }
    }

    pub fn documents(&self) -> &[Vec<Sentence>] {
        &self.documents
    }

    pub fn num_sentences(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    /// All text joined, for vocabulary counting.
    pub fn text(&self) -> String {
        let mut s = String::new();
        for doc in &self.documents {
            for sent in doc {
                s.extend(sent.iter());
                s.push('\n');
            }
            s.push('\n');
        }
        s
    }

    /// `(document, sentence)` indices of every sentence with a successor.
    pub fn adjacent_pairs(&self) -> Vec<(usize, usize)> {
        self.documents
            .iter()
            .enumerate()
            .flat_map(|(d, doc)| (0..doc.len().saturating_sub(1)).map(move |s| (d, s)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NspLabel {
    IsNext,
    NotNext,
}

impl NspLabel {
    pub fn class(self) -> usize {
        match self {
            NspLabel::IsNext => 0,
            NspLabel::NotNext => 1,
        }
    }
}

/// A sentence pair for next-sentence prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NspPair {
    pub a: Sentence,
    pub b: Sentence,
    pub label: NspLabel,
}

/// Removes tail characters from the longer side (`a` on ties) until
/// `|a| + |b| + 3 <= max_len`.
pub fn truncate_pair(a: &mut Sentence, b: &mut Sentence, max_len: usize) {
    let budget = max_len.saturating_sub(3);
    while a.len() + b.len() > budget {
        if a.len() >= b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
}

/// Pair for the adjacent sentences `(doc, sent)` and `(doc, sent + 1)`.
///
/// With probability 0.5 the true successor is kept; otherwise `b` is drawn
/// uniformly from the sentences of the other documents.
pub fn sample_pair<R: Rng>(corpus: &Corpus, (doc, sent): (usize, usize), rng: &mut R, max_len: usize) -> Result<NspPair> {
    let docs = corpus.documents();
    if docs.len() < 2 {
        return Err(Error::Corpus(
            "next-sentence pairs need at least two documents".into(),
        ));
    }
    let mut a = docs[doc][sent].clone();
    let (mut b, label) = if rng.gen_bool(0.5) {
        (docs[doc][sent + 1].clone(), NspLabel::IsNext)
    } else {
        let others = corpus.num_sentences() - docs[doc].len();
        let mut k = rng.gen_range(0..others);
        let mut pick = None;
        for (_, other) in docs.iter().enumerate().filter(|&(d, _)| d != doc) {
            if k < other.len() {
                pick = Some(other[k].clone());
                break;
            }
            k -= other.len();
        }
        (pick.expect("index within other documents"), NspLabel::NotNext)
    };
    truncate_pair(&mut a, &mut b, max_len);
    Ok(NspPair { a, b, label })
}

/// One pair per adjacent sentence pair of every document, in corpus order.
pub fn make_nsp_pairs<R: Rng>(corpus: &Corpus, rng: &mut R, max_len: usize) -> Result<Vec<NspPair>> {
    corpus
        .adjacent_pairs()
        .into_iter()
        .map(|at| sample_pair(corpus, at, rng, max_len))
        .collect()
}
