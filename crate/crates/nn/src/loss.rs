//! Softmax utilities and hard-label cross-entropy.

use ndarray::{Array2, ArrayView2};

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Mean cross-entropy against integer labels; returns (loss, dlogits).
pub fn cross_entropy_hard(logits: &ArrayView2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = logits.shape()[0];
    assert_eq!(b, labels.len());
    let logp = log_softmax(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= logp[[i, y]];
    }
    loss /= b as f64;
    let mut dlogits = softmax(logits);
    for (i, &y) in labels.iter().enumerate() {
        dlogits[[i, y]] -= 1.0;
    }
    dlogits.mapv_inplace(|v| v / b as f64);
    (loss, dlogits)
}

/// Top-1 predictions; the lowest index wins ties.
pub fn argmax_rows(logits: &ArrayView2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut bv = f64::NEG_INFINITY;
            for (i, &v) in row.iter().enumerate() {
                if v > bv {
                    bv = v;
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose argmax equals the label, in percent.
pub fn top1_accuracy(logits: &ArrayView2<f64>, labels: &[usize]) -> f64 {
    let preds = argmax_rows(logits);
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    100.0 * correct as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one() {
        let l = array![[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        let p = softmax(&l.view());
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_matches_manual_two_class() {
        // logits (1, 0), label 0: loss = ln(1 + e^{-1})
        let l = array![[1.0, 0.0]];
        let (loss, _) = cross_entropy_hard(&l.view(), &[0]);
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_matches_finite_difference() {
        let mut l = array![[0.3, -0.7, 1.2], [0.0, 0.1, -0.2]];
        let labels = [2usize, 1usize];
        let (_, grad) = cross_entropy_hard(&l.view(), &labels);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let orig = l[[i, j]];
                l[[i, j]] = orig + h;
                let (lp, _) = cross_entropy_hard(&l.view(), &labels);
                l[[i, j]] = orig - h;
                let (lm, _) = cross_entropy_hard(&l.view(), &labels);
                l[[i, j]] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - grad[[i, j]]).abs() < 1e-8, "fd {fd} vs {g}", g = grad[[i, j]]);
            }
        }
    }
}
