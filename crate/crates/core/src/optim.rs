//! AdamW over named parameter slots.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Moments {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    slots: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            slots: BTreeMap::new(),
        }
    }

    /// One update of the slot `key`. Slots keep their own step counters so that
    /// sparsely touched parameters get correct bias correction.
    pub fn update(&mut self, key: &str, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::DimensionMismatch {
                expected: params.len(),
                actual: grad.len(),
            });
        }
        let slot = self.slots.entry(key.to_string()).or_insert_with(|| Moments {
            step: 0,
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
        });
        if slot.m.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: slot.m.len(),
                actual: params.len(),
            });
        }
        slot.step += 1;
        let c1 = 1.0 - self.beta1.powi(slot.step as i32);
        let c2 = 1.0 - self.beta2.powi(slot.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut slot.m).zip(&mut slot.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let step = (*m / c1) / ((*v / c2).sqrt() + self.eps) + self.weight_decay * *p;
            *p -= self.lr * step;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut opt = AdamW::new(0.1, 0.0);
        let mut p = vec![1.0, -1.0];
        opt.update("w", &mut p, &[2.0, -0.5]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut opt = AdamW::new(0.0, 0.01);
        let mut p = vec![0.3, -7.25];
        let before = p.clone();
        for _ in 0..5 {
            opt.update("w", &mut p, &[1.0, 1.0]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = AdamW::new(0.05, 0.0);
        let mut p = vec![3.0];
        for _ in 0..500 {
            let g = vec![2.0 * (p[0] - 1.0)];
            opt.update("x", &mut p, &g).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn slot_shape_is_fixed() {
        let mut opt = AdamW::new(0.1, 0.0);
        opt.update("w", &mut [0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(opt.update("w", &mut [0.0], &[1.0]).is_err());
    }
}
