//! Point prompts sampled from ground truth, weak/strong view construction
//! and the transfer of prompts and masks into view coordinates.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::image::RgbImage;
use crate::maskops::{enclosing_box, BoundingBox, InstanceId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: u32,
    pub y: u32,
    pub polarity: Polarity,
    pub instance_id: InstanceId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub bbox: BoundingBox,
    pub instance_id: InstanceId,
}

/// All prompts addressed to one instance.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptGroup {
    pub instance_id: InstanceId,
    pub points: Vec<PointPrompt>,
    pub boxes: Vec<BoxPrompt>,
}

impl PromptGroup {
    pub fn from_points(instance_id: InstanceId, points: Vec<PointPrompt>) -> Self {
        Self {
            instance_id,
            points,
            boxes: Vec::new(),
        }
    }

    pub fn from_box(instance_id: InstanceId, bbox: BoundingBox) -> Self {
        Self {
            instance_id,
            points: Vec::new(),
            boxes: vec![BoxPrompt { bbox, instance_id }],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.boxes.is_empty()
    }
}

/// Where negative points are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NegativeRegion {
    /// Outside the mask, inside its box grown by `fraction` per side.
    DilatedBox { fraction: f64 },
    /// Anywhere outside the mask.
    Background,
}

impl Default for NegativeRegion {
    fn default() -> Self {
        NegativeRegion::DilatedBox { fraction: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum SamplingWarning {
    PositivesWithReplacement {
        available: usize,
        requested: usize,
    },
    NegativesWithReplacement {
        available: usize,
        requested: usize,
    },
    /// The negative band was empty; fell back to the full background.
    NegativeBandEmpty,
    /// The mask covers the whole image; no negatives were emitted.
    NoBackground,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointSample {
    pub points: Vec<PointPrompt>,
    pub warnings: Vec<SamplingWarning>,
}

impl PointSample {
    pub fn positives(&self) -> impl Iterator<Item = &PointPrompt> {
        self.points.iter().filter(|p| p.polarity == Polarity::Positive)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &PointPrompt> {
        self.points.iter().filter(|p| p.polarity == Polarity::Negative)
    }

    pub fn into_group(self, instance_id: InstanceId) -> PromptGroup {
        PromptGroup::from_points(instance_id, self.points)
    }
}

fn draw(rng: &mut ChaCha8Rng, pool: &[(usize, usize)], n: usize) -> (Vec<(usize, usize)>, bool) {
    if pool.len() >= n {
        let picks = index::sample(rng, pool.len(), n);
        (picks.iter().map(|i| pool[i]).collect(), false)
    } else {
        let picks = (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
        (picks, true)
    }
}

/// Samples `n_points` positive and `n_points` negative points for one instance.
pub fn sample_points(
    gt_mask: &Mask,
    instance_id: InstanceId,
    n_points: usize,
    rng_seed: u64,
    negatives: NegativeRegion,
) -> Result<PointSample> {
    if !(1..=3).contains(&n_points) {
        return Err(Error::InputDomain(format!(
            "n_points must be 1, 2 or 3, got {n_points}"
        )));
    }
    let inside = gt_mask.pixels();
    if inside.is_empty() {
        return Err(Error::InputDomain(format!("instance {instance_id} has an empty mask")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut warnings = Vec::new();

    let (pos, replaced) = draw(&mut rng, &inside, n_points);
    if replaced {
        warnings.push(SamplingWarning::PositivesWithReplacement {
            available: inside.len(),
            requested: n_points,
        });
    }

    let (h, w) = gt_mask.shape();
    let background = |y: usize, x: usize| !*gt_mask.get(y, x);
    let mut band: Vec<(usize, usize)> = match negatives {
        NegativeRegion::DilatedBox { fraction } => {
            let bbox = enclosing_box(gt_mask).expect("nonempty mask").dilate(fraction, h, w);
            (bbox.y_min as usize..=bbox.y_max as usize)
                .flat_map(|y| (bbox.x_min as usize..=bbox.x_max as usize).map(move |x| (y, x)))
                .filter(|&(y, x)| background(y, x))
                .collect()
        }
        NegativeRegion::Background => Vec::new(),
    };
    if band.is_empty() {
        if matches!(negatives, NegativeRegion::DilatedBox { .. }) {
            warnings.push(SamplingWarning::NegativeBandEmpty);
        }
        band = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| background(y, x))
            .collect();
    }
    let neg = if band.is_empty() {
        warnings.push(SamplingWarning::NoBackground);
        Vec::new()
    } else {
        let (neg, replaced) = draw(&mut rng, &band, n_points);
        if replaced {
            warnings.push(SamplingWarning::NegativesWithReplacement {
                available: band.len(),
                requested: n_points,
            });
        }
        neg
    };
    for w in &warnings {
        log::warn!("point sampling for instance {instance_id}: {w:?}");
    }

    let to_prompt = |(y, x): (usize, usize), polarity| PointPrompt {
        x: x as u32,
        y: y as u32,
        polarity,
        instance_id,
    };
    let points = pos
        .into_iter()
        .map(|p| to_prompt(p, Polarity::Positive))
        .chain(neg.into_iter().map(|p| to_prompt(p, Polarity::Negative)))
        .collect();
    Ok(PointSample { points, warnings })
}

/// Ranges for the dual-view augmentation. Factors are drawn uniformly from
/// the closed ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
    pub saturation: [f64; 2],
    pub shadow_probability: f64,
    pub shadow_factor: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            brightness: [0.6, 1.4],
            contrast: [0.6, 1.4],
            saturation: [0.6, 1.4],
            shadow_probability: 1.0,
            shadow_factor: [0.4, 0.8],
        }
    }
}

impl AugmentConfig {
    /// No flip and an identity photometric draw.
    pub fn identity() -> Self {
        Self {
            flip_probability: 0.0,
            brightness: [1.0, 1.0],
            contrast: [1.0, 1.0],
            saturation: [1.0, 1.0],
            shadow_probability: 0.0,
            shadow_factor: [1.0, 1.0],
        }
    }

    pub fn validate(&self, problems: &mut Vec<String>) {
        let prob = |name: &str, p: f64, problems: &mut Vec<String>| {
            if !(0.0..=1.0).contains(&p) {
                problems.push(format!("augment.{name} must lie in [0, 1], got {p}"));
            }
        };
        prob("flip_probability", self.flip_probability, problems);
        prob("shadow_probability", self.shadow_probability, problems);
        for (name, r) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("shadow_factor", self.shadow_factor),
        ] {
            if !(r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                problems.push(format!(
                    "augment.{name} must be an ordered nonnegative range, got {r:?}"
                ));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shadow {
    /// Convex quadrilateral as `(x, y)` vertices in pixel units.
    pub polygon: [(f64, f64); 4],
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub shadow: Option<Shadow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub weak_image: RgbImage,
    pub strong_image: RgbImage,
    pub flip_applied: bool,
    pub photometric_params: PhotometricParams,
    pub rng_seed: u64,
}

impl ViewPair {
    pub fn geometry(&self) -> ViewGeometry {
        ViewGeometry {
            height: self.weak_image.height(),
            width: self.weak_image.width(),
            flip: self.flip_applied,
        }
    }
}

/// The geometric part of a view: image size and whether it is mirrored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewGeometry {
    pub height: usize,
    pub width: usize,
    pub flip: bool,
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}

fn inside_convex(poly: &[(f64, f64); 4], px: f64, py: f64) -> bool {
    let mut sign = 0.0f64;
    for i in 0..4 {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % 4];
        let cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
        if cross != 0.0 {
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

/// Builds the weak view (optional mirror) and a photometrically jittered
/// strong view sharing the weak view's geometry.
pub fn make_views(image: &RgbImage, rng_seed: u64, config: &AugmentConfig) -> ViewPair {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let flip_applied = rng.gen_bool(config.flip_probability.clamp(0.0, 1.0));
    let weak = if flip_applied {
        image.flip_horizontal()
    } else {
        image.clone()
    };

    let brightness = uniform(&mut rng, config.brightness);
    let contrast = uniform(&mut rng, config.contrast);
    let saturation = uniform(&mut rng, config.saturation);
    let (h, w) = (weak.height() as f64, weak.width() as f64);
    let shadow = if rng.gen_bool(config.shadow_probability.clamp(0.0, 1.0)) {
        let cx = rng.gen_range(0.0..w);
        let cy = rng.gen_range(0.0..h);
        let radius = rng.gen_range(0.15..0.5) * w.max(h);
        let mut angles: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let polygon = [0, 1, 2, 3].map(|i| (cx + radius * angles[i].cos(), cy + radius * angles[i].sin()));
        Some(Shadow {
            polygon,
            factor: uniform(&mut rng, config.shadow_factor),
        })
    } else {
        None
    };
    let params = PhotometricParams {
        brightness,
        contrast,
        saturation,
        shadow,
    };
    let strong = apply_photometric(&weak, &params);
    ViewPair {
        weak_image: weak,
        strong_image: strong,
        flip_applied,
        photometric_params: params,
        rng_seed,
    }
}

pub fn apply_photometric(image: &RgbImage, params: &PhotometricParams) -> RgbImage {
    let (h, w) = (image.height(), image.width());
    let luma = |p: [f64; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    let mut values: Vec<[f64; 3]> = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = image.pixel(y, x);
            values.push([p[0] as f64, p[1] as f64, p[2] as f64].map(|c| c * params.brightness));
        }
    }
    let mean = values.iter().map(|&p| luma(p)).sum::<f64>() / values.len().max(1) as f64;
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let mut p = values[y * w + x].map(|c| mean + (c - mean) * params.contrast);
            let gray = luma(p);
            p = p.map(|c| gray + (c - gray) * params.saturation);
            if let Some(shadow) = &params.shadow {
                if inside_convex(&shadow.polygon, x as f64 + 0.5, y as f64 + 0.5) {
                    p = p.map(|c| c * shadow.factor);
                }
            }
            out.set_pixel(y, x, p.map(|c| c.round().clamp(0.0, 255.0) as u8));
        }
    }
    out
}

impl ViewGeometry {
    fn map_x(&self, x: u32) -> Result<u32> {
        if x as usize >= self.width {
            return Err(Error::Structural(format!(
                "x = {x} outside image of width {}",
                self.width
            )));
        }
        Ok(if self.flip { self.width as u32 - 1 - x } else { x })
    }

    fn check_y(&self, y: u32) -> Result<u32> {
        if y as usize >= self.height {
            return Err(Error::Structural(format!(
                "y = {y} outside image of height {}",
                self.height
            )));
        }
        Ok(y)
    }

    pub fn point(&self, p: &PointPrompt) -> Result<PointPrompt> {
        Ok(PointPrompt {
            x: self.map_x(p.x)?,
            y: self.check_y(p.y)?,
            ..*p
        })
    }

    pub fn bbox(&self, b: &BoundingBox) -> Result<BoundingBox> {
        let (x0, x1) = (self.map_x(b.x_min)?, self.map_x(b.x_max)?);
        BoundingBox::new(x0.min(x1), self.check_y(b.y_min)?, x0.max(x1), self.check_y(b.y_max)?)
    }

    pub fn mask(&self, m: &Mask) -> Result<Mask> {
        if m.shape() != (self.height, self.width) {
            return Err(Error::Structural(format!(
                "mask {:?} does not match view {}x{}",
                m.shape(),
                self.height,
                self.width
            )));
        }
        Ok(if self.flip { m.flip_horizontal() } else { m.clone() })
    }

    pub fn group(&self, g: &PromptGroup) -> Result<PromptGroup> {
        Ok(PromptGroup {
            instance_id: g.instance_id,
            points: g.points.iter().map(|p| self.point(p)).collect::<Result<_>>()?,
            boxes: g
                .boxes
                .iter()
                .map(|b| {
                    Ok(BoxPrompt {
                        bbox: self.bbox(&b.bbox)?,
                        instance_id: b.instance_id,
                    })
                })
                .collect::<Result<_>>()?,
        })
    }
}

/// Maps prompts given in original-image coordinates into the view.
pub fn transfer_prompts(prompts: &[PromptGroup], view: &ViewPair) -> Result<Vec<PromptGroup>> {
    let geom = view.geometry();
    prompts.iter().map(|g| geom.group(g)).collect()
}

/// Deterministic per-sample seed independent of iteration scheduling.
pub fn derive_seed(run_seed: u64, epoch: u64, sample_index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(run_seed) ^ epoch) ^ sample_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn blob(h: usize, w: usize, y0: usize, x0: usize, size: usize) -> Mask {
        Grid::from_fn(h, w, |y, x| {
            (y0..y0 + size).contains(&y) && (x0..x0 + size).contains(&x)
        })
    }

    #[test]
    fn single_pixel_mask() {
        let mut m = Mask::empty(8, 8);
        m.set(3, 5, true);
        let s = sample_points(&m, 7, 1, 11, NegativeRegion::default()).unwrap();
        let pos: Vec<_> = s.positives().collect();
        assert_eq!(pos.len(), 1);
        assert_eq!((pos[0].x, pos[0].y, pos[0].instance_id), (5, 3, 7));
        assert_eq!(s.negatives().count(), 1);
    }

    #[test]
    fn replacement_warning() {
        let mut m = Mask::empty(8, 8);
        m.set(3, 5, true);
        let s = sample_points(&m, 0, 3, 1, NegativeRegion::default()).unwrap();
        assert_eq!(s.positives().count(), 3);
        assert!(s.warnings.contains(&SamplingWarning::PositivesWithReplacement {
            available: 1,
            requested: 3
        }));
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = blob(32, 32, 4, 6, 9);
        let a = sample_points(&m, 1, 3, 99, NegativeRegion::default()).unwrap();
        let b = sample_points(&m, 1, 3, 99, NegativeRegion::default()).unwrap();
        assert_eq!(a, b);
        let c = sample_points(&m, 1, 3, 100, NegativeRegion::default()).unwrap();
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn bad_inputs() {
        let m = blob(8, 8, 1, 1, 2);
        assert!(sample_points(&m, 0, 0, 1, NegativeRegion::default()).is_err());
        assert!(sample_points(&m, 0, 4, 1, NegativeRegion::default()).is_err());
        assert!(sample_points(&Mask::empty(4, 4), 0, 1, 1, NegativeRegion::default()).is_err());
    }

    #[test]
    fn full_mask_has_no_negatives() {
        let m = Mask::filled(4, 4, true);
        let s = sample_points(&m, 0, 2, 3, NegativeRegion::default()).unwrap();
        assert_eq!(s.negatives().count(), 0);
        assert!(s.warnings.contains(&SamplingWarning::NoBackground));
    }

    #[test]
    fn negatives_stay_near_object() {
        let m = blob(64, 64, 20, 20, 8);
        let band = enclosing_box(&m).unwrap().dilate(0.25, 64, 64);
        for seed in 0..50 {
            let s = sample_points(&m, 0, 3, seed, NegativeRegion::default()).unwrap();
            for p in s.negatives() {
                assert!(band.contains(p.y as usize, p.x as usize));
                assert!(!*m.get(p.y as usize, p.x as usize));
            }
        }
    }

    #[test]
    fn identity_views() {
        let mut img = RgbImage::filled(8, 8, [10, 200, 30]);
        img.set_pixel(2, 1, [255, 0, 7]);
        let v = make_views(&img, 5, &AugmentConfig::identity());
        assert!(!v.flip_applied);
        assert_eq!(v.weak_image, img);
        assert_eq!(v.strong_image, img);
    }

    #[test]
    fn transfer_mirror() {
        let geom = ViewGeometry {
            height: 64,
            width: 64,
            flip: true,
        };
        let p = PointPrompt {
            x: 0,
            y: 9,
            polarity: Polarity::Positive,
            instance_id: 1,
        };
        assert_eq!(geom.point(&p).unwrap().x, 63);
        let b = BoundingBox::new(3, 1, 7, 4).unwrap();
        assert_eq!(geom.bbox(&b).unwrap(), BoundingBox::new(56, 1, 60, 4).unwrap());
        let plain = ViewGeometry { flip: false, ..geom };
        assert_eq!(plain.point(&p).unwrap(), p);
        let oob = PointPrompt { x: 64, ..p };
        assert!(matches!(geom.point(&oob), Err(Error::Structural(_))));
    }

    #[test]
    fn seeds_differ() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 1), derive_seed(1, 1, 0));
        assert_eq!(derive_seed(4, 2, 9), derive_seed(4, 2, 9));
    }
}
