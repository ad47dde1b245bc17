//! Low-rank adapters wrapped around frozen projection weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Key, Projection::Value];

    pub fn short(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
        }
    }
}

/// Which projection of which attention block an adapter wraps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LoraTarget {
    pub block: usize,
    pub projection: Projection,
}

/// Update `A B` added to a frozen `d_out x d_in` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    /// `d_out x r`
    pub a: Matrix<T>,
    /// `r x d_in`
    pub b: Matrix<T>,
    pub target: LoraTarget,
}

impl<T: Scalar> LoraAdapter<T> {
    /// `A = 0` and `B ~ N(0, 1/d_in)`, so the adapted weight starts equal to
    /// the frozen one.
    pub fn init(d_out: usize, d_in: usize, rank: usize, target: LoraTarget, seed: u64) -> Result<Self> {
        if rank == 0 || rank > d_out.min(d_in) {
            return Err(Error::InputDomain(format!(
                "rank {rank} must lie in 1..={}",
                d_out.min(d_in)
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (d_in as f64).sqrt();
        let b = super::init::gaussian(&mut rng, rank, d_in, std);
        Ok(Self {
            a: Matrix::zeros(d_out, rank),
            b,
            target,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.b.cols()
    }

    pub fn parameter_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// `(theta + A B) x`, evaluated as `theta x + A (B x)`.
pub fn lora_forward<T: Scalar>(adapter: &LoraAdapter<T>, base: &Matrix<T>, input: &[T]) -> Result<Vec<T>> {
    if base.shape() != (adapter.d_out(), adapter.d_in()) || adapter.b.rows() != adapter.rank() {
        return Err(Error::Structural(format!(
            "adapter {}x{} (rank {}) does not fit base weight {:?}",
            adapter.d_out(),
            adapter.d_in(),
            adapter.rank(),
            base.shape()
        )));
    }
    let mut out = base.mul_vec(input)?;
    let low = adapter.b.mul_vec(input)?;
    let update = adapter.a.mul_vec(&low)?;
    for (o, u) in out.iter_mut().zip(update) {
        *o += u;
    }
    Ok(out)
}
