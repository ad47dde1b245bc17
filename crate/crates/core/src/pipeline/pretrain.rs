//! Fully supervised training of the base segmenter on source-style scenes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::{generate_scene, SceneSpec, Split};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::losses::{instance_loss, LossWeights};
use crate::maskops::{enclosing_box, BoundingBox};
use crate::prompts::{derive_seed, make_views, sample_points, AugmentConfig, NegativeRegion, PromptGroup};
use crate::scalar::Scalar;
use crate::segmenter::optim::AdamConfig;
use crate::segmenter::tensor::Matrix;
use crate::segmenter::{sigmoid, ToyConfig, ToySegmenter, TrainMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Number of distinct scenes cycled through.
    pub scenes: usize,
    pub learning_rate: f64,
    /// Probability of prompting an instance with its box instead of points.
    pub box_fraction: f64,
    /// Probability of a photometric jitter on a training image.
    pub photometric_fraction: f64,
    /// Weight of the cross-entropy term next to dice and IoU.
    pub bce_weight: f64,
    /// Factor applied to the mask logits once training ends.
    pub output_gain: f64,
    pub seed: u64,
    pub spec: SceneSpec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            scenes: 400,
            learning_rate: 2e-3,
            box_fraction: 0.5,
            photometric_fraction: 0.5,
            bce_weight: 5.0,
            output_gain: 3.0,
            seed: 0,
            spec: SceneSpec::source(1000),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, problems: &mut Vec<String>) {
        if self.scenes == 0 {
            problems.push("model.pretrain.scenes must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            problems.push(format!(
                "model.pretrain.learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..=1.0).contains(&self.photometric_fraction) {
            problems.push(format!(
                "model.pretrain.photometric_fraction must lie in [0, 1], got {}",
                self.photometric_fraction
            ));
        }
        if !(self.bce_weight.is_finite() && self.bce_weight >= 0.0) {
            problems.push(format!(
                "model.pretrain.bce_weight must be non-negative, got {}",
                self.bce_weight
            ));
        }
        if !(self.output_gain.is_finite() && self.output_gain > 0.0) {
            problems.push(format!(
                "model.pretrain.output_gain must be positive, got {}",
                self.output_gain
            ));
        }
        if !(0.0..=1.0).contains(&self.box_fraction) {
            problems.push(format!(
                "model.pretrain.box_fraction must lie in [0, 1], got {}",
                self.box_fraction
            ));
        }
        if let Err(Error::Validation(p)) = self.spec.validate() {
            problems.extend(p.into_iter().map(|s| format!("model.pretrain.spec: {s}")));
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

impl PretrainReport {
    /// Mean loss over the last tenth of training.
    pub fn final_loss(&self) -> f64 {
        let n = (self.losses.len() / 10).max(1).min(self.losses.len());
        if n == 0 {
            return 0.0;
        }
        self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64
    }
}

/// Moves each side inward by up to 30% of the extent or outward by up to
/// 15%, so box prompts teach the decoder to recover the object from loose
/// or tight boxes.
fn jitter_box(rng: &mut ChaCha8Rng, b: BoundingBox, h: usize, w: usize) -> BoundingBox {
    let mut offset = |extent: u32| {
        let e = extent as f64;
        (rng.gen_range(-0.3 * e..=0.15 * e)).round() as i64
    };
    let (dx0, dx1, dy0, dy1) = (
        offset(b.width()),
        offset(b.width()),
        offset(b.height()),
        offset(b.height()),
    );
    let clamp = |v: i64, max: usize| v.clamp(0, max as i64 - 1) as u32;
    let x0 = clamp(b.x_min as i64 - dx0, w);
    let x1 = clamp(b.x_max as i64 + dx1, w);
    let y0 = clamp(b.y_min as i64 - dy0, h);
    let y1 = clamp(b.y_max as i64 + dy1, h);
    BoundingBox {
        x_min: x0.min(x1),
        y_min: y0.min(y1),
        x_max: x0.max(x1),
        y_max: y0.max(y1),
    }
}

/// Trains every base weight from scratch with ground-truth supervision.
pub fn pretrain<T: Scalar>(
    model_config: ToyConfig,
    config: &PretrainConfig,
) -> Result<(ToySegmenter<T>, PretrainReport)> {
    let mut problems = Vec::new();
    config.validate(&mut problems);
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let mut model = ToySegmenter::<T>::new(model_config)?;
    let scenes = (0..config.scenes)
        .map(|i| generate_scene(&config.spec, Split::Train, i))
        .collect::<Result<Vec<_>>>()?;
    // Plain cross-entropy keeps the base model's probabilities sharp.
    let weights = LossWeights {
        alpha: config.bce_weight,
        focal_gamma: 0.0,
        focal_alpha_balance: 1.0,
        ..LossWeights::default()
    };
    let mut state = model.optimizer_state(TrainMode::Full);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0, u64::MAX));
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let jitter = AugmentConfig {
        flip_probability: 0.0,
        shadow_probability: 0.5,
        ..AugmentConfig::default()
    };
    let mut report = PretrainReport::default();
    for step in 0..config.steps {
        let pos = step % order.len();
        if pos == 0 {
            order.shuffle(&mut rng);
        }
        let scene = &scenes[order[pos]];
        let flip = rng.gen_bool(0.5);
        let mut image = if flip {
            scene.image.flip_horizontal()
        } else {
            scene.image.clone()
        };
        if rng.gen_bool(config.photometric_fraction) {
            image = make_views(&image, rng.gen(), &jitter).strong_image;
        }
        let (h, w) = (image.height(), image.width());
        let mut groups = Vec::new();
        let mut targets = Vec::new();
        for inst in &scene.instances {
            let mask = if flip {
                inst.mask.flip_horizontal()
            } else {
                inst.mask.clone()
            };
            let group = if rng.gen_bool(config.box_fraction) {
                let b = enclosing_box(&mask).expect("generated instances are non-empty");
                PromptGroup::from_box(inst.instance_id, jitter_box(&mut rng, b, h, w))
            } else {
                let n = rng.gen_range(1..=3);
                sample_points(&mask, inst.instance_id, n, rng.gen(), NegativeRegion::default())?
                    .into_group(inst.instance_id)
            };
            groups.push(group);
            targets.push(mask);
        }
        let pass = model.forward(&image, &groups, &[], TrainMode::Full)?;
        let k = T::from_usize(groups.len()).unwrap();
        let mut seeds = Vec::new();
        let mut total = 0.0;
        for (&node, target) in pass.logits.iter().zip(&targets) {
            let z = pass.graph.value(node);
            let prob = Grid::from_vec(h, w, z.as_slice().iter().map(|&v| sigmoid(v)).collect())?;
            let loss = instance_loss(&prob, target, &weights)?;
            total += (T::lit(weights.alpha) * loss.terms.focal + loss.terms.dice + loss.terms.iou).as_f64();
            let g = loss
                .grad
                .as_slice()
                .iter()
                .zip(prob.as_slice())
                .map(|(&g, &p)| g * p * (T::one() - p) / k)
                .collect();
            seeds.push((node, Matrix::from_vec(h * w, 1, g)?));
        }
        report.losses.push(total / groups.len() as f64);
        let grads = pass.graph.backward(&seeds);
        let progress = step as f64 / config.steps.max(1) as f64;
        let lr = config.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let adam = AdamConfig {
            learning_rate: lr,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        model.apply_gradients(TrainMode::Full, &grads, &mut state, &adam)?;
    }
    let gain = T::lit(config.output_gain);
    for name in [
        "head.pixel.weight",
        "head.pixel.bias",
        "head.geometry.weight",
        "head.geometry.bias",
    ] {
        let m = model.base_weight_mut(name).expect("head weights exist");
        m.as_mut_slice().iter_mut().for_each(|v| *v *= gain);
    }
    Ok((model, report))
}
