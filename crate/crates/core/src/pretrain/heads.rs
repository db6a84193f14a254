//! Masked-LM and next-sentence prediction heads.

use crate::encoder::SeqLayout;
use crate::error::Result;
use crate::tensorcore::{Graph, Scalar, Tensor, Var, IGNORE_INDEX};

/// A head's mean loss plus the counts behind its accuracy.
#[derive(Clone, Copy, Debug)]
pub struct HeadLoss {
    pub loss: Var,
    pub counted: usize,
    pub correct: usize,
}

/// Cross-entropy of `hidden · W + b` over rows whose label is not
/// [`IGNORE_INDEX`]. Only those rows are projected; with none the loss is a
/// constant zero.
pub fn mlm_loss<T: Scalar>(g: &mut Graph<T>, hidden: Var, labels: &[usize], weight: Var, bias: Var) -> Result<HeadLoss> {
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != IGNORE_INDEX).collect();
    if rows.is_empty() {
        return Ok(HeadLoss {
            loss: g.constant(Tensor::scalar(T::zero())),
            counted: 0,
            correct: 0,
        });
    }
    let targets: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    let picked = g.gather_rows(hidden, &rows)?;
    let logits = g.linear(picked, weight, bias)?;
    let (loss, counted, correct) = g.cross_entropy(logits, &targets, IGNORE_INDEX)?;
    Ok(HeadLoss { loss, counted, correct })
}

/// Row index of each sequence's first position ([CLS]).
pub fn cls_rows(layout: SeqLayout) -> Vec<usize> {
    (0..layout.batch).map(|b| b * layout.len).collect()
}

/// Two-way cross-entropy on the [CLS] states.
pub fn nsp_loss<T: Scalar>(
    g: &mut Graph<T>,
    hidden: Var,
    layout: SeqLayout,
    labels: &[usize],
    weight: Var,
    bias: Var,
) -> Result<HeadLoss> {
    let cls = g.gather_rows(hidden, &cls_rows(layout))?;
    let logits = g.linear(cls, weight, bias)?;
    let (loss, counted, correct) = g.cross_entropy(logits, labels, IGNORE_INDEX)?;
    Ok(HeadLoss { loss, counted, correct })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let mut g = Graph::<f64>::inference();
        let h = g.constant(Tensor::full(&[3, 4], 0.3));
        let w = g.constant(Tensor::zeros(&[4, 11]));
        let b = g.constant(Tensor::zeros(&[11]));
        let out = mlm_loss(&mut g, h, &[IGNORE_INDEX, 3, 7], w, b).unwrap();
        assert_eq!(out.counted, 2);
        assert!((g.value(out.loss).data()[0] - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn no_labels_zero_loss() {
        let mut g = Graph::<f64>::inference();
        let h = g.constant(Tensor::full(&[2, 4], 1.0));
        let w = g.constant(Tensor::full(&[4, 5], 1.0));
        let b = g.constant(Tensor::zeros(&[5]));
        let out = mlm_loss(&mut g, h, &[IGNORE_INDEX; 2], w, b).unwrap();
        assert_eq!(g.value(out.loss).data(), &[0.0]);
        assert_eq!(out.counted, 0);
    }

    #[test]
    fn nsp_reads_cls_rows_only() {
        let mut g = Graph::<f64>::inference();
        // Two sequences of length 2; CLS rows are 0 and 2.
        let h = g.constant(t(&[4, 1], &[10.0, -50.0, -10.0, 80.0]));
        let w = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let b = g.constant(Tensor::zeros(&[2]));
        let layout = SeqLayout { batch: 2, len: 2 };
        let out = nsp_loss(&mut g, h, layout, &[0, 1], w, b).unwrap();
        assert_eq!(out.correct, 2);
        assert!(g.value(out.loss).data()[0] < 1e-8);
    }
}
