//! Refine-stage array operations: entropy maps, the confidence gate,
//! overlap suppression, box extraction and leakage measurement.
//!
//! Every function here is pure. Coordinates are `(row = y, col = x)` with the
//! origin at the top-left; boxes are inclusive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::scalar::Scalar;

pub type InstanceId = u32;

/// K per-instance probability grids over one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMaskStack<T> {
    image_id: String,
    instance_ids: Vec<InstanceId>,
    layers: Vec<Grid<T>>,
}

impl<T: Scalar> ProbMaskStack<T> {
    pub fn new(image_id: impl Into<String>, instance_ids: Vec<InstanceId>, layers: Vec<Grid<T>>) -> Result<Self> {
        check_layers(&instance_ids, &layers)?;
        for (k, layer) in layers.iter().enumerate() {
            if let Some(bad) = layer
                .as_slice()
                .iter()
                .find(|p| !p.is_finite() || **p < T::zero() || **p > T::one())
            {
                return Err(Error::InputDomain(format!(
                    "probability {bad} in instance {} lies outside [0, 1]",
                    instance_ids[k]
                )));
            }
        }
        Ok(Self {
            image_id: image_id.into(),
            instance_ids,
            layers,
        })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn instance_ids(&self) -> &[InstanceId] {
        &self.instance_ids
    }

    pub fn layers(&self) -> &[Grid<T>] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.layers[0].shape()
    }
}

fn check_layers<U>(ids: &[InstanceId], layers: &[Grid<U>]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Structural("mask stack needs at least one instance".into()));
    }
    if ids.len() != layers.len() {
        return Err(Error::Structural(format!(
            "{} instance ids for {} layers",
            ids.len(),
            layers.len()
        )));
    }
    let shape = layers[0].shape();
    if let Some(bad) = layers.iter().find(|l| l.shape() != shape) {
        return Err(Error::Structural(format!(
            "layer shape {:?} differs from {:?}",
            bad.shape(),
            shape
        )));
    }
    Ok(())
}

/// Normalized binary entropy per pixel, one layer per instance.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyStack<T> {
    layers: Vec<Grid<T>>,
}

impl<T> EntropyStack<T> {
    pub fn layers(&self) -> &[Grid<T>] {
        &self.layers
    }
}

/// K binary masks of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMaskSet {
    instance_ids: Vec<InstanceId>,
    masks: Vec<Mask>,
}

impl BinaryMaskSet {
    pub fn new(instance_ids: Vec<InstanceId>, masks: Vec<Mask>) -> Result<Self> {
        check_layers(&instance_ids, &masks)?;
        Ok(Self { instance_ids, masks })
    }

    pub fn instance_ids(&self) -> &[InstanceId] {
        &self.instance_ids
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.masks[0].shape()
    }

    /// Per-pixel count of instances claiming the pixel.
    pub fn claim_counts(&self) -> Grid<u32> {
        let (h, w) = self.shape();
        let mut counts = Grid::filled(h, w, 0u32);
        for mask in &self.masks {
            for (c, &m) in counts.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *c += m as u32;
            }
        }
        counts
    }
}

/// Pixels claimed by two or more instances.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapMap(pub Mask);

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self> {
        if x_min > x_max || y_min > y_max {
            return Err(Error::InputDomain(format!(
                "box x:[{x_min},{x_max}] y:[{y_min},{y_max}] is inverted"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min + 1
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.x_min as usize..=self.x_max as usize).contains(&x)
            && (self.y_min as usize..=self.y_max as usize).contains(&y)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        (self.x_max as usize) < width && (self.y_max as usize) < height
    }

    /// Grows each side by `fraction` of the box extent (at least one pixel),
    /// clipped to the image.
    pub fn dilate(&self, fraction: f64, height: usize, width: usize) -> BoundingBox {
        let dx = ((self.width() as f64 * fraction).round() as u32).max(1);
        let dy = ((self.height() as f64 * fraction).round() as u32).max(1);
        BoundingBox {
            x_min: self.x_min.saturating_sub(dx),
            y_min: self.y_min.saturating_sub(dy),
            x_max: (self.x_max + dx).min(width as u32 - 1),
            y_max: (self.y_max + dy).min(height as u32 - 1),
        }
    }
}

/// Disjoint instance masks with their enclosing boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedMaskSet {
    instance_ids: Vec<InstanceId>,
    masks: Vec<Mask>,
    boxes: Vec<Option<BoundingBox>>,
}

impl RefinedMaskSet {
    pub fn instance_ids(&self) -> &[InstanceId] {
        &self.instance_ids
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn boxes(&self) -> &[Option<BoundingBox>] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Instances that survived with a nonempty mask, in input order.
    pub fn surviving(&self) -> impl Iterator<Item = (InstanceId, &Mask, BoundingBox)> {
        self.instance_ids
            .iter()
            .zip(&self.masks)
            .zip(&self.boxes)
            .filter_map(|((&id, m), b)| b.map(|b| (id, m, b)))
    }

    pub fn to_mask_set(&self) -> BinaryMaskSet {
        BinaryMaskSet {
            instance_ids: self.instance_ids.clone(),
            masks: self.masks.clone(),
        }
    }
}

/// `-(p log2 p + (1-p) log2 (1-p))`, with `0 log 0 = 0`.
pub fn binary_entropy<T: Scalar>(p: T) -> Result<T> {
    if !p.is_finite() || p < T::zero() || p > T::one() {
        return Err(Error::InputDomain(format!("probability {p} outside [0, 1]")));
    }
    let plogp = |q: T| if q <= T::zero() { T::zero() } else { q * q.log2() };
    let h = -(plogp(p) + plogp(T::one() - p));
    Ok(h.max(T::zero()).min(T::one()))
}

pub fn entropy_map<T: Scalar>(stack: &ProbMaskStack<T>) -> Result<EntropyStack<T>> {
    let layers = stack
        .layers
        .iter()
        .map(|layer| {
            let values = layer
                .as_slice()
                .iter()
                .map(|&p| binary_entropy(p))
                .collect::<Result<Vec<_>>>()?;
            Grid::from_vec(layer.height(), layer.width(), values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EntropyStack { layers })
}

/// Keeps a pixel iff `p (1 - H) > epsilon`.
pub fn confidence_filter<T: Scalar>(
    stack: &ProbMaskStack<T>,
    entropy: &EntropyStack<T>,
    epsilon: T,
) -> Result<BinaryMaskSet> {
    if !(epsilon >= T::zero() && epsilon < T::one()) {
        return Err(Error::InputDomain(format!("epsilon {epsilon} outside [0, 1)")));
    }
    if stack.layers.len() != entropy.layers.len()
        || stack.layers.iter().zip(&entropy.layers).any(|(p, h)| !p.same_shape(h))
    {
        return Err(Error::Structural(
            "probability and entropy stacks differ in shape".into(),
        ));
    }
    let masks = stack
        .layers
        .iter()
        .zip(&entropy.layers)
        .map(|(p, h)| {
            let data = p
                .as_slice()
                .iter()
                .zip(h.as_slice())
                .map(|(&p, &h)| p * (T::one() - h) > epsilon)
                .collect();
            Grid::from_vec(p.height(), p.width(), data).expect("shape checked")
        })
        .collect();
    Ok(BinaryMaskSet {
        instance_ids: stack.instance_ids.clone(),
        masks,
    })
}

pub fn overlap_map(masks: &BinaryMaskSet) -> OverlapMap {
    OverlapMap(masks.claim_counts().map(|&c| c > 1))
}

/// Removes every pixel in the overlap map from every instance.
pub fn refine(masks: &BinaryMaskSet, overlap: &OverlapMap) -> Result<RefinedMaskSet> {
    if masks.shape() != overlap.0.shape() {
        return Err(Error::Structural(format!(
            "overlap map {:?} does not match masks {:?}",
            overlap.0.shape(),
            masks.shape()
        )));
    }
    let refined: Vec<Mask> = masks
        .masks
        .iter()
        .map(|m| {
            let data = m
                .as_slice()
                .iter()
                .zip(overlap.0.as_slice())
                .map(|(&c, &o)| c && !o)
                .collect();
            Grid::from_vec(m.height(), m.width(), data).expect("shape checked")
        })
        .collect();
    let boxes = refined.iter().map(enclosing_box).collect();
    Ok(RefinedMaskSet {
        instance_ids: masks.instance_ids.clone(),
        masks: refined,
        boxes,
    })
}

/// Entropy gate followed by overlap suppression.
pub fn refine_stack<T: Scalar>(stack: &ProbMaskStack<T>, epsilon: T) -> Result<RefinedMaskSet> {
    let entropy = entropy_map(stack)?;
    let confident = confidence_filter(stack, &entropy, epsilon)?;
    refine(&confident, &overlap_map(&confident))
}

pub fn enclosing_box(mask: &Mask) -> Option<BoundingBox> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if *mask.get(y, x) {
                let b = bounds.get_or_insert((x, y, x, y));
                b.0 = b.0.min(x);
                b.1 = b.1.min(y);
                b.2 = b.2.max(x);
                b.3 = b.3.max(y);
            }
        }
    }
    bounds.map(|(x0, y0, x1, y1)| BoundingBox {
        x_min: x0 as u32,
        y_min: y0 as u32,
        x_max: x1 as u32,
        y_max: y1 as u32,
    })
}

/// Fraction of foreground pixels claimed by more than one instance.
pub fn leakage_rate(masks: &BinaryMaskSet) -> f64 {
    let counts = masks.claim_counts();
    let (mut leaked, mut union) = (0usize, 0usize);
    for &c in counts.as_slice() {
        union += (c >= 1) as usize;
        leaked += (c > 1) as usize;
    }
    if union == 0 {
        0.0
    } else {
        leaked as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(h: usize, w: usize, px: &[(usize, usize)]) -> Mask {
        let mut m = Mask::empty(h, w);
        for &(y, x) in px {
            m.set(y, x, true);
        }
        m
    }

    fn ab_pair() -> BinaryMaskSet {
        BinaryMaskSet::new(
            vec![1, 2],
            vec![mask_from(2, 2, &[(0, 0), (0, 1)]), mask_from(2, 2, &[(0, 1), (1, 1)])],
        )
        .unwrap()
    }

    #[test]
    fn entropy_endpoints() {
        assert_eq!(binary_entropy(0.5f64).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0f64).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0f64).unwrap(), 0.0);
        assert!(binary_entropy(f64::NAN).is_err());
        assert!(matches!(binary_entropy(1.5f32), Err(Error::InputDomain(_))));
    }

    #[test]
    fn stack_rejects_out_of_range() {
        let g = Grid::from_vec(1, 2, vec![0.2f64, 1.2]).unwrap();
        assert!(matches!(
            ProbMaskStack::new("img", vec![0], vec![g]),
            Err(Error::InputDomain(_))
        ));
        let a = Grid::filled(2, 2, 0.5f64);
        let b = Grid::filled(2, 3, 0.5f64);
        assert!(matches!(
            ProbMaskStack::new("img", vec![0, 1], vec![a, b]),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn gate_is_strict() {
        // p (1 - H) == epsilon exactly is rejected.
        let stack = ProbMaskStack::new("i", vec![0], vec![Grid::filled(1, 1, 1.0f64)]).unwrap();
        let ent = entropy_map(&stack).unwrap();
        let kept = confidence_filter(&stack, &ent, 0.5).unwrap();
        assert!(*kept.masks()[0].get(0, 0));
        let half = ProbMaskStack::new("i", vec![0], vec![Grid::filled(1, 1, 0.5f64)]).unwrap();
        let ent = entropy_map(&half).unwrap();
        // 0.5 * (1 - 1) = 0, equal to epsilon 0 -> rejected
        assert!(!*confidence_filter(&half, &ent, 0.0).unwrap().masks()[0].get(0, 0));
        assert!(confidence_filter(&half, &ent, 1.0).is_err());
    }

    #[test]
    fn gate_shape_mismatch() {
        let s1 = ProbMaskStack::new("i", vec![0], vec![Grid::filled(2, 2, 0.9f64)]).unwrap();
        let s2 = ProbMaskStack::new("i", vec![0], vec![Grid::filled(3, 2, 0.9f64)]).unwrap();
        let e2 = entropy_map(&s2).unwrap();
        assert!(matches!(confidence_filter(&s1, &e2, 0.5), Err(Error::Structural(_))));
    }

    #[test]
    fn overlap_cases() {
        let single = BinaryMaskSet::new(vec![0], vec![Mask::filled(3, 3, true)]).unwrap();
        assert!(!overlap_map(&single).0.any());

        let o = overlap_map(&ab_pair());
        assert_eq!(o.0.pixels(), vec![(0, 1)]);

        let same = BinaryMaskSet::new(vec![0, 1], vec![Mask::filled(2, 2, true), Mask::filled(2, 2, true)]).unwrap();
        assert_eq!(overlap_map(&same).0.count(), 4);
    }

    #[test]
    fn refine_cases() {
        let ab = ab_pair();
        let r = refine(&ab, &overlap_map(&ab)).unwrap();
        assert_eq!(r.masks()[0].pixels(), vec![(0, 0)]);
        assert_eq!(r.masks()[1].pixels(), vec![(1, 1)]);
        assert_eq!(r.boxes()[0], Some(BoundingBox::new(0, 0, 0, 0).unwrap()));

        let disjoint =
            BinaryMaskSet::new(vec![0, 1], vec![mask_from(2, 2, &[(0, 0)]), mask_from(2, 2, &[(1, 1)])]).unwrap();
        let r = refine(&disjoint, &overlap_map(&disjoint)).unwrap();
        assert_eq!(r.masks(), disjoint.masks());

        let same = BinaryMaskSet::new(vec![0, 1], vec![Mask::filled(2, 2, true), Mask::filled(2, 2, true)]).unwrap();
        let r = refine(&same, &overlap_map(&same)).unwrap();
        assert!(r.masks().iter().all(|m| !m.any()));
        assert_eq!(r.boxes(), &[None, None]);
        assert_eq!(r.surviving().count(), 0);
    }

    #[test]
    fn refine_shape_mismatch() {
        let ab = ab_pair();
        let bad = OverlapMap(Mask::empty(3, 3));
        assert!(matches!(refine(&ab, &bad), Err(Error::Structural(_))));
    }

    #[test]
    fn boxes() {
        let m = mask_from(8, 10, &[(2, 3), (5, 7)]);
        assert_eq!(enclosing_box(&m), Some(BoundingBox::new(3, 2, 7, 5).unwrap()));
        let m = mask_from(8, 10, &[(4, 7)]);
        assert_eq!(enclosing_box(&m), Some(BoundingBox::new(7, 4, 7, 4).unwrap()));
        assert_eq!(enclosing_box(&Mask::empty(4, 4)), None);
    }

    #[test]
    fn leakage_cases() {
        assert!((leakage_rate(&ab_pair()) - 1.0 / 3.0).abs() < 1e-12);
        let disjoint =
            BinaryMaskSet::new(vec![0, 1], vec![mask_from(2, 2, &[(0, 0)]), mask_from(2, 2, &[(1, 1)])]).unwrap();
        assert_eq!(leakage_rate(&disjoint), 0.0);
        let empty = BinaryMaskSet::new(vec![0], vec![Mask::empty(2, 2)]).unwrap();
        assert_eq!(leakage_rate(&empty), 0.0);
    }

    #[test]
    fn dilate_clips() {
        let b = BoundingBox::new(0, 10, 3, 13).unwrap();
        let d = b.dilate(0.25, 16, 16);
        assert_eq!(d, BoundingBox::new(0, 9, 4, 14).unwrap());
        assert!(BoundingBox::new(3, 0, 2, 0).is_err());
    }
}
