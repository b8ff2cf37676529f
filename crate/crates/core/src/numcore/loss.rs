//! Softmax output and categorical cross-entropy.

use super::Tensor;
use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-wise max-subtracted softmax over logits [batch, n].
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    logits.expect_rank(2, "softmax logits")?;
    let n = logits.dim(1);
    if n == 0 {
        return Err(Error::invalid("softmax over zero classes"));
    }
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(n) {
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
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean over the batch of −log ŷ[true class]; `y_true` must be one-hot.
pub fn cross_entropy(y_true: &Tensor, y_pred: &Tensor) -> Result<f64> {
    if y_true.shape() != y_pred.shape() {
        return Err(Error::shape("cross-entropy targets vs predictions", y_true.shape(), y_pred.shape()));
    }
    y_true.expect_rank(2, "cross-entropy targets")?;
    let n = y_true.dim(1);
    let mut labels = Vec::with_capacity(y_true.dim(0));
    for (r, row) in y_true.data().chunks(n).enumerate() {
        let ones: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones.len() != 1 || zeros != n - 1 {
            return Err(Error::invalid(format!("target row {r} is not one-hot")));
        }
        labels.push(ones[0]);
    }
    cross_entropy_labels(&labels, y_pred)
}

pub fn cross_entropy_labels(labels: &[usize], y_pred: &Tensor) -> Result<f64> {
    y_pred.expect_rank(2, "cross-entropy predictions")?;
    let (b, n) = (y_pred.dim(0), y_pred.dim(1));
    if labels.len() != b || b == 0 {
        return Err(Error::shape("cross-entropy labels vs predictions", &[labels.len()], y_pred.shape()));
    }
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        if l >= n {
            return Err(Error::invalid(format!("label {l} out of range for {n} classes")));
        }
        total -= y_pred.data()[r * n + l].max(PROB_FLOOR).ln();
    }
    Ok(total / b as f64)
}

/// Gradient of the batch-mean cross-entropy w.r.t. the softmax logits.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, n) = (probs.dim(0), probs.dim(1));
    if labels.len() != b {
        return Err(Error::shape("softmax gradient labels", &[labels.len()], probs.shape()));
    }
    let mut g = probs.data().to_vec();
    for (r, &l) in labels.iter().enumerate() {
        g[r * n + l] -= 1.0;
    }
    let inv = 1.0 / b as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(vec![b, n], g)
}

pub fn one_hot(labels: &[usize], n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), n]);
    for (r, &l) in labels.iter().enumerate() {
        t.data_mut()[r * n + l] = 1.0;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_closed_forms() {
        let p = softmax(&Tensor::filled(&[1, 100], 3.7)).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.01).abs() < 1e-15));
        let p = softmax(&Tensor::new(vec![1, 2], vec![0.0, 2f64.ln()]).unwrap()).unwrap();
        assert!((p.data()[0] - 1.0 / 3.0).abs() < 1e-15 && (p.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let huge = softmax(&Tensor::new(vec![1, 3], vec![1000.0, 1000.0, -1000.0]).unwrap()).unwrap();
        assert!(huge.all_finite());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let y = one_hot(&[1], 3);
        let perfect = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&y, &perfect).unwrap(), 0.0);
        let e = std::f64::consts::E;
        let p = Tensor::new(vec![1, 3], vec![1.0 - 1.0 / e, 1.0 / e, 0.0]).unwrap();
        assert!((cross_entropy(&y, &p).unwrap() - 1.0).abs() < 1e-15);
        let uni = Tensor::filled(&[2, 100], 0.01);
        let l = cross_entropy(&one_hot(&[3, 70], 100), &uni).unwrap();
        assert!((l - 100f64.ln()).abs() < 1e-12);
        let not_one_hot = Tensor::new(vec![1, 3], vec![0.5, 0.5, 0.0]).unwrap();
        assert!(cross_entropy(&not_one_hot, &perfect).is_err());
    }
}
