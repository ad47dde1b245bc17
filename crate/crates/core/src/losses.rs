//! Pixel-wise mask losses and the composite training objective.
//!
//! Each mask loss comes in two forms: a value-only function and a
//! `*_with_grad` variant returning the gradient with respect to the
//! predicted probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::scalar::Scalar;

const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the focal term.
    pub alpha: f64,
    /// Weight of the semantic alignment term.
    pub beta: f64,
    pub focal_gamma: f64,
    pub focal_alpha_balance: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 20.0,
            beta: 0.1,
            focal_gamma: 2.0,
            focal_alpha_balance: 0.25,
            dice_smooth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, problems: &mut Vec<String>) {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("focal_gamma", self.focal_gamma),
            ("focal_alpha_balance", self.focal_alpha_balance),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("loss.{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.dice_smooth > 0.0 && self.dice_smooth.is_finite()) {
            problems.push(format!("loss.dice_smooth must be > 0, got {}", self.dice_smooth));
        }
    }
}

fn check_shapes<T>(pred: &Grid<T>, target: &Mask) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Structural(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Structural("empty prediction grid".into()));
    }
    Ok(())
}

/// Mean of `-a (1 - p_t)^gamma log(p_t)` over pixels.
pub fn focal_loss<T: Scalar>(pred: &Grid<T>, target: &Mask, gamma: T, balance: T) -> Result<T> {
    focal_loss_with_grad(pred, target, gamma, balance).map(|(l, _)| l)
}

pub fn focal_loss_with_grad<T: Scalar>(pred: &Grid<T>, target: &Mask, gamma: T, balance: T) -> Result<(T, Grid<T>)> {
    check_shapes(pred, target)?;
    let n = T::from_usize(pred.len()).unwrap();
    let floor = T::lit(LOG_FLOOR);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.as_slice().iter().zip(target.as_slice()) {
        let pt = if t { p } else { T::one() - p };
        let q = T::one() - pt;
        let clamped = pt < floor;
        let log_pt = pt.max(floor).ln();
        let mod_factor = if gamma == T::zero() { T::one() } else { q.powf(gamma) };
        total += -balance * mod_factor * log_pt;
        // d/dp_t
        let d_mod = if gamma == T::zero() || q <= T::zero() {
            T::zero()
        } else {
            -gamma * q.powf(gamma - T::one())
        };
        let d_log = if clamped { T::zero() } else { T::one() / pt };
        let d_pt = -balance * (d_mod * log_pt + mod_factor * d_log);
        let d_p = if t { d_pt } else { -d_pt };
        grad.push(d_p / n);
    }
    let grad = Grid::from_vec(pred.height(), pred.width(), grad)?;
    Ok((total / n, grad))
}

/// `1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)`.
pub fn dice_loss<T: Scalar>(pred: &Grid<T>, target: &Mask, smooth: T) -> Result<T> {
    dice_loss_with_grad(pred, target, smooth).map(|(l, _)| l)
}

fn sums<T: Scalar>(pred: &Grid<T>, target: &Mask) -> (T, T, T) {
    let (mut sp, mut st, mut spt) = (T::zero(), T::zero(), T::zero());
    for (&p, &t) in pred.as_slice().iter().zip(target.as_slice()) {
        sp += p;
        if t {
            st += T::one();
            spt += p;
        }
    }
    (sp, st, spt)
}

pub fn dice_loss_with_grad<T: Scalar>(pred: &Grid<T>, target: &Mask, smooth: T) -> Result<(T, Grid<T>)> {
    check_shapes(pred, target)?;
    let (sp, st, spt) = sums(pred, target);
    let num = T::lit(2.0) * spt + smooth;
    let den = sp + st + smooth;
    let loss = T::one() - num / den;
    let den2 = den * den;
    let grad = target.map(|&t| {
        let ti = if t { T::one() } else { T::zero() };
        -(T::lit(2.0) * ti * den - num) / den2
    });
    Ok((loss, grad))
}

/// Soft Jaccard: `1 - (sum(p t) + s) / (sum(p) + sum(t) - sum(p t) + s)`.
pub fn iou_loss<T: Scalar>(pred: &Grid<T>, target: &Mask, smooth: T) -> Result<T> {
    iou_loss_with_grad(pred, target, smooth).map(|(l, _)| l)
}

pub fn iou_loss_with_grad<T: Scalar>(pred: &Grid<T>, target: &Mask, smooth: T) -> Result<(T, Grid<T>)> {
    check_shapes(pred, target)?;
    let (sp, st, spt) = sums(pred, target);
    let num = spt + smooth;
    let den = sp + st - spt + smooth;
    let loss = T::one() - num / den;
    let den2 = den * den;
    let grad = target.map(|&t| {
        let ti = if t { T::one() } else { T::zero() };
        -(ti * den - num * (T::one() - ti)) / den2
    });
    Ok((loss, grad))
}

/// The three mask terms for one instance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskTerms<T> {
    pub focal: T,
    pub dice: T,
    pub iou: T,
}

/// Mask terms and their summed, weighted gradient for one instance.
pub struct InstanceLoss<T> {
    pub terms: MaskTerms<T>,
    /// Gradient of `alpha focal + dice + iou` with respect to probabilities.
    pub grad: Grid<T>,
}

pub fn instance_loss<T: Scalar>(pred: &Grid<T>, target: &Mask, weights: &LossWeights) -> Result<InstanceLoss<T>> {
    let (focal, gf) = focal_loss_with_grad(
        pred,
        target,
        T::lit(weights.focal_gamma),
        T::lit(weights.focal_alpha_balance),
    )?;
    let smooth = T::lit(weights.dice_smooth);
    let (dice, gd) = dice_loss_with_grad(pred, target, smooth)?;
    let (iou, gi) = iou_loss_with_grad(pred, target, smooth)?;
    let alpha = T::lit(weights.alpha);
    let data = gf
        .as_slice()
        .iter()
        .zip(gd.as_slice())
        .zip(gi.as_slice())
        .map(|((&f, &d), &i)| alpha * f + d + i)
        .collect();
    Ok(InstanceLoss {
        terms: MaskTerms { focal, dice, iou },
        grad: Grid::from_vec(pred.height(), pred.width(), data)?,
    })
}

/// Mean of the per-instance terms.
pub fn mean_terms<T: Scalar>(terms: &[MaskTerms<T>]) -> Option<MaskTerms<T>> {
    if terms.is_empty() {
        return None;
    }
    let k = T::from_usize(terms.len()).unwrap();
    let mut acc = MaskTerms::<T>::default();
    for t in terms {
        acc.focal += t.focal;
        acc.dice += t.dice;
        acc.iou += t.iou;
    }
    Some(MaskTerms {
        focal: acc.focal / k,
        dice: acc.dice / k,
        iou: acc.iou / k,
    })
}

/// `alpha focal + dice + iou + beta ssa`, mask terms averaged over
/// instances. `None` signals that the step has nothing to supervise.
pub fn total_loss<T: Scalar>(terms: &[MaskTerms<T>], ssa_term: T, weights: &LossWeights) -> Option<T> {
    let m = mean_terms(terms)?;
    Some(T::lit(weights.alpha) * m.focal + m.dice + m.iou + T::lit(weights.beta) * ssa_term)
}
