use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Adam moments and hyperparameters for one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Self { m: zeros(), v: zeros(), step: 0, lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    /// One bias-corrected update of every trainable parameter.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        params.check_same_layout(grads)?;
        if self.m.len() != params.len() {
            return Err(Error::invalid("optimizer state belongs to a different parameter set"));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.epsilon);
        for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            if !p.trainable {
                continue;
            }
            if self.m[i].shape() != p.tensor.shape() {
                return Err(Error::shape("adam moment", self.m[i].shape(), p.tensor.shape()));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gv), mv), vv) in p.tensor.data_mut().iter_mut().zip(g.tensor.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::filled(&[1], v), true).unwrap();
        p
    }

    #[test]
    fn zero_gradient_is_a_fixpoint() {
        let mut p = scalar_set(1.25);
        let before = p.clone();
        let mut s = AdamState::new(&p, 1e-3);
        s.step(&mut p, &scalar_set(0.0)).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_and_second_step_match_recurrence() {
        let g = 0.5;
        let mut p = scalar_set(0.0);
        let mut s = AdamState::new(&p, 1e-3);
        s.step(&mut p, &scalar_set(g)).unwrap();
        let first = 1e-3 * g / (g.abs() + 1e-8);
        assert!((p.get(0).data()[0] + first).abs() < 1e-15);

        s.step(&mut p, &scalar_set(g)).unwrap();
        // hand recurrence
        let (b1, b2) = (0.9f64, 0.999f64);
        let m2 = b1 * ((1.0 - b1) * g) + (1.0 - b1) * g;
        let v2 = b2 * ((1.0 - b2) * g * g) + (1.0 - b2) * g * g;
        let upd2 = 1e-3 * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + 1e-8);
        assert!((p.get(0).data()[0] + first + upd2).abs() < 1e-15);
    }

    #[test]
    fn frozen_and_mismatched() {
        let mut p = ParamSet::new();
        p.push("stat", Tensor::filled(&[2], 3.0), false).unwrap();
        let mut s = AdamState::new(&p, 1.0);
        let mut g = p.zeros_like();
        g.get_mut(0).data_mut()[0] = 10.0;
        s.step(&mut p, &g).unwrap();
        assert_eq!(p.get(0).data(), &[3.0, 3.0]);
        assert!(s.step(&mut p, &scalar_set(1.0)).is_err());
    }
}
