//! Adam with coupled (L2) weight decay.

use serde::{Deserialize, Serialize};

use super::tensor::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub first: Vec<Matrix<T>>,
    pub second: Vec<Matrix<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            step: 0,
            first: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            second: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    /// Applies one update. `grads[i]` of `None` is treated as zero.
    pub fn update(
        &mut self,
        config: &AdamConfig,
        params: &mut [&mut Matrix<T>],
        grads: &[Option<&Matrix<T>>],
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Structural(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let b1 = T::lit(config.beta1);
        let b2 = T::lit(config.beta2);
        let lr = T::lit(config.learning_rate);
        let wd = T::lit(config.weight_decay);
        let eps = T::lit(config.eps);
        let t = self.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if p.shape() != self.first[i].shape() {
                return Err(Error::Structural(format!(
                    "parameter {i} has shape {:?}, optimizer expects {:?}",
                    p.shape(),
                    self.first[i].shape()
                )));
            }
            let m = self.first[i].as_mut_slice();
            let v = self.second[i].as_mut_slice();
            let pv = p.as_mut_slice();
            for k in 0..pv.len() {
                let g = grads[i].map_or(T::zero(), |g| g.as_slice()[k]) + wd * pv[k];
                m[k] = b1 * m[k] + (T::one() - b1) * g;
                v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                pv[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut x = Matrix::from_vec(1, 2, vec![3.0f64, -2.0]).unwrap();
        let mut state = AdamState::new(&[(1, 2)]);
        let cfg = AdamConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..2000 {
            let g = x.clone();
            state.update(&cfg, &mut [&mut x], &[Some(&g)]).unwrap();
        }
        assert!(x.as_slice().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(state.step, 2000);
    }

    #[test]
    fn rejects_wrong_arity() {
        let mut x = Matrix::<f64>::zeros(1, 1);
        let mut state = AdamState::<f64>::new(&[(1, 1), (2, 2)]);
        assert!(state.update(&AdamConfig::default(), &mut [&mut x], &[None]).is_err());
    }
}
