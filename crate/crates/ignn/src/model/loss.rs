//! Masked losses and classification metrics.
//!
//! Logits and labels are `c x n` matrices (one column per node); a mask is
//! the list of column indices that contribute. Loss gradients are zero
//! outside the mask, so masked nodes are the only ones that train.

use crate::linalg::DenseMatrix;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LossError {
    #[error("mask is empty")]
    EmptyMask,
    #[error("shape mismatch: predictions {pred:?}, labels {labels:?}")]
    ShapeMismatch {
        pred: (usize, usize),
        labels: (usize, usize),
    },
}

fn check_shapes(yhat: &DenseMatrix, y: &DenseMatrix, mask: &[usize]) -> Result<(), LossError> {
    if yhat.rows() != y.rows() || yhat.cols() != y.cols() {
        return Err(LossError::ShapeMismatch {
            pred: (yhat.rows(), yhat.cols()),
            labels: (y.rows(), y.cols()),
        });
    }
    if mask.is_empty() {
        return Err(LossError::EmptyMask);
    }
    Ok(())
}

/// Mean softmax cross-entropy over the masked columns, with the matching
/// gradient. Stabilized by max-subtraction; labels must be one-hot.
pub fn softmax_xent_masked(
    yhat: &DenseMatrix,
    y: &DenseMatrix,
    mask: &[usize],
) -> Result<(f64, DenseMatrix), LossError> {
    check_shapes(yhat, y, mask)?;
    let c = yhat.rows();
    let mut grad = DenseMatrix::zeros(c, yhat.cols());
    let inv = 1.0 / mask.len() as f64;
    let mut loss = 0.0;
    for &col in mask {
        let mut maxv = f64::NEG_INFINITY;
        for r in 0..c {
            maxv = maxv.max(yhat.get(r, col));
        }
        let mut denom = 0.0;
        for r in 0..c {
            denom += (yhat.get(r, col) - maxv).exp();
        }
        let log_denom = denom.ln();
        for r in 0..c {
            let shifted = yhat.get(r, col) - maxv;
            let p = (shifted - log_denom).exp();
            let label = y.get(r, col);
            loss -= label * (shifted - log_denom);
            grad.set(r, col, (p - label) * inv);
        }
    }
    Ok((loss * inv, grad))
}

/// Mean sigmoid cross-entropy over all masked entries, with the matching
/// gradient. Uses the standard overflow-free formulation.
pub fn bce_multilabel(
    yhat: &DenseMatrix,
    y: &DenseMatrix,
    mask: &[usize],
) -> Result<(f64, DenseMatrix), LossError> {
    check_shapes(yhat, y, mask)?;
    let c = yhat.rows();
    let mut grad = DenseMatrix::zeros(c, yhat.cols());
    let inv = 1.0 / (mask.len() * c) as f64;
    let mut loss = 0.0;
    for &col in mask {
        for r in 0..c {
            let z = yhat.get(r, col);
            let label = y.get(r, col);
            loss += z.max(0.0) - z * label + (-z.abs()).exp().ln_1p();
            let sigma = 1.0 / (1.0 + (-z).exp());
            grad.set(r, col, (sigma - label) * inv);
        }
    }
    Ok((loss * inv, grad))
}

/// Argmax per column, ties to the lowest index.
pub fn binarize_multiclass(yhat: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(yhat.rows(), yhat.cols());
    for col in 0..yhat.cols() {
        let mut best = 0;
        for r in 1..yhat.rows() {
            if yhat.get(r, col) > yhat.get(best, col) {
                best = r;
            }
        }
        out.set(best, col, 1.0);
    }
    out
}

/// Probability threshold 0.5, i.e. logit >= 0.
pub fn binarize_multilabel(yhat: &DenseMatrix) -> DenseMatrix {
    yhat.map(|z| if z >= 0.0 { 1.0 } else { 0.0 })
}

fn confusion(pred: &DenseMatrix, y: &DenseMatrix, mask: &[usize]) -> Vec<(usize, usize, usize)> {
    // per class: (tp, fp, fn)
    let mut counts = vec![(0usize, 0usize, 0usize); pred.rows()];
    for &col in mask {
        for r in 0..pred.rows() {
            let p = pred.get(r, col) != 0.0;
            let t = y.get(r, col) != 0.0;
            match (p, t) {
                (true, true) => counts[r].0 += 1,
                (true, false) => counts[r].1 += 1,
                (false, true) => counts[r].2 += 1,
                (false, false) => {}
            }
        }
    }
    counts
}

/// F1 with globally pooled true/false positive counts.
pub fn micro_f1(pred: &DenseMatrix, y: &DenseMatrix, mask: &[usize]) -> Result<f64, LossError> {
    check_shapes(pred, y, mask)?;
    let counts = confusion(pred, y, mask);
    let (tp, fp, fnn) = counts
        .iter()
        .fold((0, 0, 0), |(a, b, c), (tp, fp, fnn)| (a + tp, b + fp, c + fnn));
    let denom = 2 * tp + fp + fnn;
    Ok(if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

/// Unweighted mean of per-class F1; classes with no support score 0.
pub fn macro_f1(pred: &DenseMatrix, y: &DenseMatrix, mask: &[usize]) -> Result<f64, LossError> {
    check_shapes(pred, y, mask)?;
    let counts = confusion(pred, y, mask);
    let mut total = 0.0;
    for (tp, fp, fnn) in &counts {
        let support = tp + fnn;
        let denom = 2 * tp + fp + fnn;
        if support > 0 && denom > 0 {
            total += 2.0 * *tp as f64 / denom as f64;
        }
    }
    Ok(total / counts.len() as f64)
}

/// Fraction of masked columns whose argmax matches the label argmax.
pub fn accuracy(yhat: &DenseMatrix, y: &DenseMatrix, mask: &[usize]) -> Result<f64, LossError> {
    check_shapes(yhat, y, mask)?;
    let pred = binarize_multiclass(yhat);
    let want = binarize_multiclass(y);
    let mut correct = 0;
    for &col in mask {
        let same = (0..pred.rows()).all(|r| pred.get(r, col) == want.get(r, col));
        if same {
            correct += 1;
        }
    }
    Ok(correct as f64 / mask.len() as f64)
}
