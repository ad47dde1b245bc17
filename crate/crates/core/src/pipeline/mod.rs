//! Adaptation loop, evaluation and experiment runners.

mod adapt;
mod metrics;
mod pretrain;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::prompts::{derive_seed, AugmentConfig};
use crate::segmenter::optim::AdamConfig;

pub use adapt::{adapt_gradients, adapt_step, pseudo_labels, PseudoLabels, StepReport};
pub use metrics::{f1, iou, EvalReport};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport};
pub use train::{
    direct_test, evaluate, evaluate_with, format_ablation_table, predict_points, requery_study, run_ablation, train,
    AblationRow, EpochReport, RequeryStudy, TrainOutcome, EPOCH_REPORT_SCHEMA_VERSION,
};

/// Training recipe variants for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Alignment weight forced to zero and the queue disabled.
    NoSsa,
    /// Train on refined point-prompted masks with the point prompts.
    NoRequery,
    /// Skip the entropy gate and overlap removal; boxes come from raw masks.
    NoRefine,
    /// No training at all.
    Direct,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoSsa,
        Variant::NoRequery,
        Variant::NoRefine,
        Variant::Direct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSsa => "no_ssa",
            Variant::NoRequery => "no_requery",
            Variant::NoRefine => "no_refine",
            Variant::Direct => "direct",
        }
    }

    pub fn uses_queue(self) -> bool {
        !matches!(self, Variant::NoSsa | Variant::Direct)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_points: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub lora_rank: usize,
    pub queue_capacity: usize,
    pub tau: f64,
    pub epsilon: f64,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub variant: Variant,
    /// Clear the queue at the start of every epoch.
    pub reset_queue_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_points: 1,
            epochs: 5,
            optimizer: AdamConfig::default(),
            batch_size: 1,
            lora_rank: crate::segmenter::lora::DEFAULT_RANK,
            queue_capacity: crate::ssa::DEFAULT_CAPACITY,
            tau: crate::ssa::DEFAULT_TAU,
            epsilon: 0.5,
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            variant: Variant::Full,
            reset_queue_each_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if !(1..=3).contains(&self.n_points) {
            p.push(format!("run.n_points must be 1, 2 or 3, got {}", self.n_points));
        }
        if self.batch_size == 0 {
            p.push("run.batch_size must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.learning_rate.is_finite() && o.learning_rate >= 0.0) {
            p.push(format!(
                "run.learning_rate must be finite and non-negative, got {}",
                o.learning_rate
            ));
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            p.push(format!(
                "run.weight_decay must be finite and non-negative, got {}",
                o.weight_decay
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            p.push("run adam betas must lie in [0, 1) and eps be positive".into());
        }
        if self.queue_capacity < 2 {
            p.push(format!("ssa.capacity must be at least 2, got {}", self.queue_capacity));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            p.push(format!("ssa.tau must be positive, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            p.push(format!("refine.epsilon must lie in [0, 1), got {}", self.epsilon));
        }
        self.loss.validate(&mut p);
        self.augment.validate(&mut p);
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }

    /// Loss weights after applying the variant.
    pub fn effective_weights(&self) -> LossWeights {
        match self.variant {
            Variant::NoSsa => LossWeights {
                beta: 0.0,
                ..self.loss.clone()
            },
            _ => self.loss.clone(),
        }
    }
}

/// Stable 64-bit key for an image id.
pub(crate) fn id_key(image_id: &str) -> u64 {
    let d = Sha256::digest(image_id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest length"))
}

/// Seed for instance `k` of an image under a named stream.
pub(crate) fn instance_seed(seed: u64, stream: u64, image_id: &str, k: usize) -> u64 {
    derive_seed(derive_seed(seed, stream, id_key(image_id)), 0, k as u64)
}
