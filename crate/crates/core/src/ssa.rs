//! Rolling embedding queue and the temperature-scaled soft semantic
//! alignment loss computed over it.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskops::InstanceId;
use crate::scalar::Scalar;

pub const DEFAULT_CAPACITY: usize = 32;
pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub image_id: String,
    pub instance_id: InstanceId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueueEntry<T> {
    pub embedding: Vec<T>,
    /// Pushed during the current iteration; gradients flow only to these.
    pub grad_live: bool,
    pub origin: Origin,
}

fn unit_tolerance<T: Scalar>() -> T {
    T::lit(1e-6).max(T::epsilon() * T::lit(32.0))
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// FIFO of unit-norm instance embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingQueue<T> {
    entries: VecDeque<QueueEntry<T>>,
    capacity: usize,
}

impl<T: Scalar> EmbeddingQueue<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InputDomain("queue capacity must be positive".into()));
        }
        Ok(Self {
            entries: VecDeque::with_capacity(capacity),
            capacity,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &QueueEntry<T>> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Marks every stored entry as history.
    pub fn begin_iteration(&mut self) {
        for e in &mut self.entries {
            e.grad_live = false;
        }
    }

    /// Appends live entries in order, evicting the oldest beyond capacity.
    /// Nothing is appended if any embedding is not unit norm.
    pub fn push(&mut self, embeddings: Vec<(Vec<T>, Origin)>) -> Result<()> {
        let tol = unit_tolerance::<T>();
        let dim = self.entries.front().map(|e| e.embedding.len());
        for (e, origin) in &embeddings {
            let n = norm(e);
            if !((n - T::one()).abs() <= tol) {
                return Err(Error::InputDomain(format!(
                    "embedding for {}/{} has norm {n}",
                    origin.image_id, origin.instance_id
                )));
            }
            if dim.is_some_and(|d| d != e.len()) || embeddings[0].0.len() != e.len() {
                return Err(Error::Structural("embedding dimension mismatch".into()));
            }
        }
        for (embedding, origin) in embeddings {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(QueueEntry {
                embedding,
                grad_live: true,
                origin,
            });
        }
        Ok(())
    }

    pub fn similarity_matrix(&self) -> Result<Vec<Vec<T>>> {
        let refs: Vec<&[T]> = self.entries.iter().map(|e| e.embedding.as_slice()).collect();
        similarity_matrix(&refs)
    }

    /// Mean off-diagonal cosine similarity, absent below two entries.
    pub fn mean_similarity(&self) -> Option<f64> {
        let s = self.similarity_matrix().ok()?;
        let n = s.len();
        let total: f64 = s.iter().flatten().map(|v| v.as_f64()).sum();
        Some(total / (n * (n - 1)) as f64)
    }

    pub fn snapshot(&self) -> QueueSnapshot {
        QueueSnapshot {
            capacity: self.capacity,
            entries: self
                .entries
                .iter()
                .map(|e| SnapshotEntry {
                    embedding: e.embedding.iter().map(|v| v.as_f64()).collect(),
                    grad_live: e.grad_live,
                    origin: e.origin.clone(),
                })
                .collect(),
        }
    }
}

/// Serializable copy of the queue for offline inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueSnapshot {
    pub capacity: usize,
    pub entries: Vec<SnapshotEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub embedding: Vec<f64>,
    pub grad_live: bool,
    pub origin: Origin,
}

impl QueueSnapshot {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("snapshot serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let denom = norm(a) * norm(b);
    if denom <= T::zero() {
        T::zero()
    } else {
        dot / denom
    }
}

/// Pairwise cosine similarities with a zeroed diagonal.
pub fn similarity_matrix<T: Scalar>(embeddings: &[&[T]]) -> Result<Vec<Vec<T>>> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::InputDomain(format!(
            "similarity needs at least two embeddings, got {n}"
        )));
    }
    let mut s = vec![vec![T::zero(); n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = cosine(embeddings[i], embeddings[j]).max(-T::one()).min(T::one());
            s[i][j] = v;
            s[j][i] = v;
        }
    }
    Ok(s)
}

/// Row-wise softmax of `S / tau` over the off-diagonal entries.
pub fn affinity<T: Scalar>(s: &[Vec<T>], tau: T) -> Result<Vec<Vec<T>>> {
    if !(tau > T::zero()) {
        return Err(Error::InputDomain(format!("temperature {tau} must be positive")));
    }
    let n = s.len();
    if n < 2 {
        return Err(Error::InputDomain("affinity needs at least two rows".into()));
    }
    Ok(s.iter()
        .enumerate()
        .map(|(i, row)| {
            let max = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &v)| v / tau)
                .fold(T::neg_infinity(), T::max);
            let mut out: Vec<T> = row
                .iter()
                .enumerate()
                .map(|(j, &v)| if j == i { T::zero() } else { (v / tau - max).exp() })
                .collect();
            let z: T = out.iter().copied().sum();
            for v in &mut out {
                *v /= z;
            }
            out
        })
        .collect())
}

/// Loss value and, per queue entry, its gradient (`None` for history).
#[derive(Clone, Debug, PartialEq)]
pub struct SsaOutcome<T> {
    pub loss: T,
    pub grads: Vec<Option<Vec<T>>>,
    /// True when the queue was too short for the loss to be defined.
    pub skipped: bool,
}

/// `(1/N) sum_i sum_{j != i} (1 - S_ij) p_ij` over the queue.
pub fn ssa_loss<T: Scalar>(queue: &EmbeddingQueue<T>, tau: T) -> Result<SsaOutcome<T>> {
    let embeddings: Vec<&[T]> = queue.entries.iter().map(|e| e.embedding.as_slice()).collect();
    let live: Vec<bool> = queue.entries.iter().map(|e| e.grad_live).collect();
    ssa_loss_raw(&embeddings, &live, tau)
}

/// As [`ssa_loss`] over explicit embeddings and live flags.
pub fn ssa_loss_raw<T: Scalar>(embeddings: &[&[T]], live: &[bool], tau: T) -> Result<SsaOutcome<T>> {
    let n = embeddings.len();
    if live.len() != n {
        return Err(Error::Structural("one live flag per embedding required".into()));
    }
    if n < 2 {
        log::debug!("alignment loss skipped: queue holds {n} embedding(s)");
        let dim = embeddings.first().map_or(0, |e| e.len());
        return Ok(SsaOutcome {
            loss: T::zero(),
            grads: live.iter().map(|&l| l.then(|| vec![T::zero(); dim])).collect(),
            skipped: true,
        });
    }
    let s = similarity_matrix(embeddings)?;
    let p = affinity(&s, tau)?;
    let nt = T::from_usize(n).unwrap();

    let mut loss = T::zero();
    // dL/dS_ij
    let mut gs = vec![vec![T::zero(); n]; n];
    for i in 0..n {
        let row_loss: T = (0..n).filter(|&j| j != i).map(|j| (T::one() - s[i][j]) * p[i][j]).sum();
        loss += row_loss;
        for j in (0..n).filter(|&j| j != i) {
            gs[i][j] = (-p[i][j] + p[i][j] / tau * ((T::one() - s[i][j]) - row_loss)) / nt;
        }
    }
    loss /= nt;

    let grads = (0..n)
        .map(|a| {
            if !live[a] {
                return None;
            }
            let fa = embeddings[a];
            let na = norm(fa);
            let mut g = vec![T::zero(); fa.len()];
            for b in (0..n).filter(|&b| b != a) {
                let fb = embeddings[b];
                let nb = norm(fb);
                let raw = if na * nb > T::zero() {
                    fa.iter().zip(fb).map(|(&x, &y)| x * y).sum::<T>() / (na * nb)
                } else {
                    T::zero()
                };
                // Clamped similarities carry no gradient.
                if raw.abs() > T::one() || na * nb <= T::zero() {
                    continue;
                }
                let coeff = gs[a][b] + gs[b][a];
                for (k, gk) in g.iter_mut().enumerate() {
                    let ds = fb[k] / (na * nb) - raw * fa[k] / (na * na);
                    *gk += coeff * ds;
                }
            }
            Some(g)
        })
        .collect();
    Ok(SsaOutcome {
        loss,
        grads,
        skipped: false,
    })
}
