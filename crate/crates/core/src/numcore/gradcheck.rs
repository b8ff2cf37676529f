//! Central finite-difference verification of backward passes.
//!
//! A [`GradCheckTarget`] maps a list of tensors (inputs, then parameters) to
//! a scalar and supplies analytic gradients for each of them. The layer cases
//! below reduce a layer's output to a scalar with a fixed random projection
//! so every output entry contributes to the check.

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::layers::{self, NormCache};
use super::loss;
use super::lstm::{self, BiMasks, LstmParams};
use super::{Mode, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const FD_STEP: f64 = 1e-5;

pub trait GradCheckTarget {
    fn loss(&self, tensors: &[Tensor]) -> Result<f64>;
    fn gradients(&self, tensors: &[Tensor]) -> Result<Vec<Tensor>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, flat entry) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub entries: usize,
}

/// Max over all entries of |analytic − numeric| / max(1, |numeric|).
pub fn grad_check(target: &dyn GradCheckTarget, tensors: &[Tensor], step: f64) -> Result<GradCheckReport> {
    let analytic = target.gradients(tensors)?;
    if analytic.len() != tensors.len() {
        return Err(Error::invalid("gradient count differs from tensor count"));
    }
    let mut work = tensors.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, entries: 0 };
    for (ti, grad) in analytic.iter().enumerate() {
        if grad.shape() != tensors[ti].shape() {
            return Err(Error::shape("analytic gradient", grad.shape(), tensors[ti].shape()));
        }
        for e in 0..tensors[ti].len() {
            let orig = tensors[ti].data()[e];
            work[ti].data_mut()[e] = orig + step;
            let up = target.loss(&work)?;
            work[ti].data_mut()[e] = orig - step;
            let down = target.loss(&work)?;
            work[ti].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[e];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("tensor {ti} entry {e} (analytic {a}, numeric {numeric})")));
            }
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((ti, e));
                }
            }
            report.entries += 1;
        }
    }
    Ok(report)
}

fn project(r: &Tensor, y: &Tensor) -> f64 {
    r.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

fn uniform(shape: &[usize], r: &mut Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

/// Dense layer: tensors `[x, w, b]`.
pub struct DenseCase {
    pub proj: Tensor,
}

impl DenseCase {
    pub fn random(seed: u64) -> (Self, Vec<Tensor>) {
        let mut r = rng::stream(seed, &[]);
        let (n, din, dout) = (r.random_range(1..5), r.random_range(1..6), r.random_range(1..6));
        Self::with_shape(n, din, dout, &mut r)
    }

    pub fn with_shape(n: usize, din: usize, dout: usize, r: &mut Rng) -> (Self, Vec<Tensor>) {
        let t = vec![uniform(&[n, din], r), uniform(&[din, dout], r), uniform(&[dout], r)];
        (Self { proj: uniform(&[n, dout], r) }, t)
    }
}

impl GradCheckTarget for DenseCase {
    fn loss(&self, t: &[Tensor]) -> Result<f64> {
        Ok(project(&self.proj, &layers::dense_forward(&t[0], &t[1], &t[2])?))
    }
    fn gradients(&self, t: &[Tensor]) -> Result<Vec<Tensor>> {
        let g = layers::dense_backward(&t[0], &t[1], &self.proj)?;
        Ok(vec![g.dx, g.dw, g.db])
    }
}

/// Convolution: tensors `[x, w, b]`.
pub struct ConvCase {
    pub proj: Tensor,
}

impl ConvCase {
    pub fn random(seed: u64) -> (Self, Vec<Tensor>) {
        let mut r = rng::stream(seed, &[]);
        let (n, c, o) = (r.random_range(1..3), r.random_range(1..3), r.random_range(1..3));
        let (h, w) = (r.random_range(1..6), r.random_range(1..6));
        let t = vec![uniform(&[n, c, h, w], &mut r), uniform(&[o, c, 3, 3], &mut r), uniform(&[o], &mut r)];
        (Self { proj: uniform(&[n, o, h, w], &mut r) }, t)
    }
}

impl GradCheckTarget for ConvCase {
    fn loss(&self, t: &[Tensor]) -> Result<f64> {
        Ok(project(&self.proj, &layers::conv2d_forward(&t[0], &t[1], &t[2])?))
    }
    fn gradients(&self, t: &[Tensor]) -> Result<Vec<Tensor>> {
        let g = layers::conv2d_backward(&t[0], &t[1], &self.proj)?;
        Ok(vec![g.dx, g.dw, g.db])
    }
}

/// Max-pool on inputs whose entries are pairwise separated by far more than
/// the finite-difference step, so no window is tied: tensors `[x]`.
pub struct PoolCase {
    pub proj: Tensor,
}

impl PoolCase {
    pub fn random(seed: u64) -> (Self, Vec<Tensor>) {
        let mut r = rng::stream(seed, &[]);
        let (n, c) = (r.random_range(1..3), r.random_range(1..3));
        let (h, w) = (r.random_range(2..7), r.random_range(2..7));
        let len = n * c * h * w;
        let mut levels: Vec<usize> = (0..len).collect();
        levels.shuffle(&mut r);
        let x = Tensor::from_fn(&[n, c, h, w], |i| levels[i] as f64 * 0.01 - 0.5);
        (Self { proj: uniform(&[n, c, h / 2, w / 2], &mut r) }, vec![x])
    }
}

impl GradCheckTarget for PoolCase {
    fn loss(&self, t: &[Tensor]) -> Result<f64> {
        Ok(project(&self.proj, &layers::maxpool2d_forward(&t[0])?.y))
    }
    fn gradients(&self, t: &[Tensor]) -> Result<Vec<Tensor>> {
        let p = layers::maxpool2d_forward(&t[0])?;
        Ok(vec![layers::maxpool2d_backward(t[0].shape(), &p.argmax, &self.proj)?])
    }
}

/// Train-mode batch norm (batch statistics): tensors `[x, gamma, beta]`.
pub struct NormCase {
    pub proj: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
}

impl NormCase {
    pub fn random(seed: u64) -> (Self, Vec<Tensor>) {
        let mut r = rng::stream(seed, &[]);
        let n = r.random_range(2..5);
        let c = r.random_range(1..4);
        let shape: Vec<usize> = if r.random_bool(0.5) {
            vec![n, c]
        } else {
            vec![n, c, r.random_range(1..4), r.random_range(1..4)]
        };
        let x = Tensor::uniform(&shape, -2.0, 2.0, &mut r);
        let gamma = Tensor::uniform(&[c], 0.5, 1.5, &mut r);
        let beta = uniform(&[c], &mut r);
        let proj = uniform(&shape, &mut r);
        let case = Self { proj, running_mean: Tensor::zeros(&[c]), running_var: Tensor::filled(&[c], 1.0) };
        (case, vec![x, gamma, beta])
    }

    fn forward(&self, t: &[Tensor]) -> Result<(Tensor, NormCache)> {
        let (y, cache) = layers::batchnorm_forward(&t[0], &t[1], &t[2], &self.running_mean, &self.running_var, Mode::Train)?;
        Ok((y, cache.expect("train mode caches")))
    }
}

impl GradCheckTarget for NormCase {
    fn loss(&self, t: &[Tensor]) -> Result<f64> {
        Ok(project(&self.proj, &self.forward(t)?.0))
    }
    fn gradients(&self, t: &[Tensor]) -> Result<Vec<Tensor>> {
        let (_, cache) = self.forward(t)?;
        let g = layers::batchnorm_backward(&cache, &t[1], &self.proj)?;
        Ok(vec![g.dx, g.dgamma, g.dbeta])
    }
}

fn recurrent_mask(shape: &[usize], r: &mut Rng) -> Tensor {
    layers::dropout_mask(shape, 0.3, r).expect("valid rate")
}

/// One LSTM step with a frozen recurrent mask:
/// tensors `[x, h_prev, c_prev, wx, wh, b]`.
pub struct LstmStepCase {
    pub proj_h: Tensor,
    pub proj_c: Tensor,
    pub mask: Option<Tensor>,
}

impl LstmStepCase {
    pub fn random(seed: u64) -> (Self, Vec<Tensor>) {
        let mut r = rng::stream(seed, &[]);
        let (n, din, h) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..5));
        let mask = r.random_bool(0.5).then(|| recurrent_mask(&[n, h], &mut r));
        let t = vec![
            uniform(&[n, din], &mut r),
            uniform(&[n, h], &mut r),
            uniform(&[n, h], &mut r),
            uniform(&[din, 4 * h], &mut r),
            uniform(&[h, 4 * h], &mut r),
            uniform(&[4 * h], &mut r),
        ];
        let case = Self { proj_h: uniform(&[n, h], &mut r), proj_c: uniform(&[n, h], &mut r), mask };
        (case, t)
    }
}

impl GradCheckTarget for LstmStepCase {
    fn loss(&self, t: &[Tensor]) -> Result<f64> {
        let p = LstmParams { wx: &t[3], wh: &t[4], b: &t[5] };
        let (h, c, _) = lstm::lstm_step(&t[0], &t[1], &t[2], p, self.mask.as_ref())?;
        Ok(project(&self.proj_h, &h) + project(&self.proj_c, &c))
    }
    fn gradients(&self, t: &[Tensor]) -> Result<Vec<Tensor>> {
        let p = LstmParams { wx: &t[3], wh: &t[4], b: &t[5] };
        let (_, _, cache) = lstm::lstm_step(&t[0], &t[1], &t[2], p, self.mask.as_ref())?;
        let g = lstm::lstm_step_backward(&cache, &self.proj_h, &self.proj_c, p)?;
        Ok(vec![g.dx, g.dh_prev, g.dc_prev, g.params.dwx, g.params.dwh, g.params.db])
    }
}

/// Bidirectional encoder with frozen masks:
/// tensors `[seq, wx_f, wh_f, b_f, wx_b, wh_b, b_b]`.
pub struct BiLstmCase {
    pub proj: Tensor,
    pub masks: BiMasks,
}

impl BiLstmCase {
    pub fn random(seed: u64) -> (Self, Vec<Tensor>) {
        let mut r = rng::stream(seed, &[]);
        let (n, k, din, h) = (r.random_range(1..3), r.random_range(1..5), r.random_range(1..3), r.random_range(1..4));
        let masks = if r.random_bool(0.5) {
            BiMasks {
                forward: Some(recurrent_mask(&[n, h], &mut r)),
                backward: Some(recurrent_mask(&[n, h], &mut r)),
            }
        } else {
            BiMasks::default()
        };
        let mut t = vec![uniform(&[n, k, din], &mut r)];
        for _ in 0..2 {
            t.push(uniform(&[din, 4 * h], &mut r));
            t.push(uniform(&[h, 4 * h], &mut r));
            t.push(uniform(&[4 * h], &mut r));
        }
        (Self { proj: uniform(&[n, 2 * h], &mut r), masks }, t)
    }
}

impl GradCheckTarget for BiLstmCase {
    fn loss(&self, t: &[Tensor]) -> Result<f64> {
        let f = LstmParams { wx: &t[1], wh: &t[2], b: &t[3] };
        let b = LstmParams { wx: &t[4], wh: &t[5], b: &t[6] };
        Ok(project(&self.proj, &lstm::bilstm_forward(&t[0], f, b, self.masks.clone())?.0))
    }
    fn gradients(&self, t: &[Tensor]) -> Result<Vec<Tensor>> {
        let f = LstmParams { wx: &t[1], wh: &t[2], b: &t[3] };
        let b = LstmParams { wx: &t[4], wh: &t[5], b: &t[6] };
        let (_, cache) = lstm::bilstm_forward(&t[0], f, b, self.masks.clone())?;
        let g = lstm::bilstm_backward(&cache, &self.proj, f, b)?;
        Ok(vec![g.dseq, g.forward.dwx, g.forward.dwh, g.forward.db, g.backward.dwx, g.backward.dwh, g.backward.db])
    }
}

/// Softmax followed by batch-mean cross-entropy: tensors `[logits]`.
pub struct SoftmaxCeCase {
    pub labels: Vec<usize>,
}

impl SoftmaxCeCase {
    pub fn random(seed: u64) -> (Self, Vec<Tensor>) {
        let mut r = rng::stream(seed, &[]);
        let (b, n) = (r.random_range(1..5), r.random_range(1..8));
        let labels = (0..b).map(|_| r.random_range(0..n)).collect();
        (Self { labels }, vec![Tensor::uniform(&[b, n], -3.0, 3.0, &mut r)])
    }
}

impl GradCheckTarget for SoftmaxCeCase {
    fn loss(&self, t: &[Tensor]) -> Result<f64> {
        loss::cross_entropy_labels(&self.labels, &loss::softmax(&t[0])?)
    }
    fn gradients(&self, t: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![loss::softmax_cross_entropy_backward(&loss::softmax(&t[0])?, &self.labels)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero;
    impl GradCheckTarget for Zero {
        fn loss(&self, _: &[Tensor]) -> Result<f64> {
            Ok(0.0)
        }
        fn gradients(&self, t: &[Tensor]) -> Result<Vec<Tensor>> {
            Ok(t.iter().map(|x| Tensor::zeros(x.shape())).collect())
        }
    }

    #[test]
    fn constant_zero_function_has_zero_error() {
        let t = vec![Tensor::filled(&[3, 2], 0.7)];
        let rep = grad_check(&Zero, &t, FD_STEP).unwrap();
        assert_eq!(rep.max_rel_error, 0.0);
        assert_eq!(rep.entries, 6);
    }

    #[test]
    fn dense_four_by_three() {
        let mut r = rng::stream(11, &[]);
        let (case, t) = DenseCase::with_shape(4, 3, 3, &mut r);
        let rep = grad_check(&case, &t, FD_STEP).unwrap();
        assert!(rep.max_rel_error <= 1e-6, "{rep:?}");
    }

    struct Nan;
    impl GradCheckTarget for Nan {
        fn loss(&self, _: &[Tensor]) -> Result<f64> {
            Ok(f64::NAN)
        }
        fn gradients(&self, t: &[Tensor]) -> Result<Vec<Tensor>> {
            Ok(t.iter().map(|x| Tensor::zeros(x.shape())).collect())
        }
    }

    #[test]
    fn non_finite_is_reported() {
        let err = grad_check(&Nan, &[Tensor::zeros(&[2])], FD_STEP).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref s) if s.contains("entry 0")), "{err}");
    }
}
