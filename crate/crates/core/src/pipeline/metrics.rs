//! Per-instance mask agreement.

use serde::{Deserialize, Serialize};

use crate::grid::Mask;

/// `|a ∩ b| / |a ∪ b|`, 1 when both are empty.
pub fn iou(a: &Mask, b: &Mask) -> f64 {
    let union = a.union_count(b);
    if union == 0 {
        return 1.0;
    }
    a.intersection_count(b) as f64 / union as f64
}

/// `2 |a ∩ b| / (|a| + |b|)`, 1 when both are empty.
pub fn f1(a: &Mask, b: &Mask) -> f64 {
    let total = a.count() + b.count();
    if total == 0 {
        return 1.0;
    }
    2.0 * a.intersection_count(b) as f64 / total as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean IoU over evaluated instances, in `[0, 1]`.
    pub miou: f64,
    /// Mean F1 over evaluated instances, in `[0, 1]`.
    pub f1: f64,
    pub instances: usize,
    /// Instances skipped because their ground truth is empty.
    pub excluded: usize,
}

impl EvalReport {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a Mask, &'a Mask)>) -> Self {
        let mut r = EvalReport::default();
        let (mut si, mut sf) = (0.0, 0.0);
        for (pred, gt) in pairs {
            if !gt.any() {
                r.excluded += 1;
                continue;
            }
            si += iou(pred, gt);
            sf += f1(pred, gt);
            r.instances += 1;
        }
        if r.instances > 0 {
            r.miou = si / r.instances as f64;
            r.f1 = sf / r.instances as f64;
        }
        r
    }

    /// `mIoU / F1` as percentages with two decimals.
    pub fn summary(&self) -> String {
        format!("mIoU {:.2}  F1 {:.2}", 100.0 * self.miou, 100.0 * self.f1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn half_overlap_on_two_by_four() {
        // pred = left half (cols 0..2), gt = cols 1..3.
        let pred = Grid::from_fn(2, 4, |_, x| x < 2);
        let gt = Grid::from_fn(2, 4, |_, x| (1..3).contains(&x));
        assert!((iou(&pred, &gt) - 1.0 / 3.0).abs() < 1e-12);
        assert!((f1(&pred, &gt) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty() {
        let gt = Grid::from_fn(4, 4, |y, _| y < 2);
        let r = EvalReport::from_pairs([(&gt, &gt)]);
        assert_eq!((r.miou, r.f1), (1.0, 1.0));
        let empty = Mask::empty(4, 4);
        let r = EvalReport::from_pairs([(&empty, &gt), (&gt, &empty)]);
        assert_eq!((r.miou, r.f1, r.instances, r.excluded), (0.0, 0.0, 1, 1));
    }
}
