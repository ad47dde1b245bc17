//! Sectioned TOML run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pointadapt::losses::LossWeights;
use pointadapt::pipeline::{PretrainConfig, TrainConfig, Variant};
use pointadapt::prompts::AugmentConfig;
use pointadapt::segmenter::optim::AdamConfig;
use pointadapt::segmenter::ToyConfig;
use pointadapt::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub run: RunSection,
    pub model: ModelSection,
    pub loss: LossWeights,
    pub ssa: SsaSection,
    pub refine: RefineSection,
    pub augment: AugmentConfig,
    pub data: DataSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub epochs: usize,
    pub n_points: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub variant: Variant,
    pub reset_queue_each_epoch: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            epochs: t.epochs,
            n_points: t.n_points,
            batch_size: t.batch_size,
            learning_rate: t.optimizer.learning_rate,
            weight_decay: t.optimizer.weight_decay,
            variant: t.variant,
            reset_queue_each_epoch: t.reset_queue_each_epoch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub rank: usize,
    pub stride: usize,
    pub dim: usize,
    pub pixel_dim: usize,
    pub mlp_ratio: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub init_seed: u64,
    /// Used when no base checkpoint is given.
    pub pretrain: PretrainConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ToyConfig::default();
        Self {
            rank: m.lora_rank,
            stride: m.stride,
            dim: m.dim,
            pixel_dim: m.pixel_dim,
            mlp_ratio: m.mlp_ratio,
            encoder_blocks: m.encoder_blocks,
            decoder_blocks: m.decoder_blocks,
            init_seed: m.init_seed,
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsaSection {
    pub capacity: usize,
    pub tau: f64,
}

impl Default for SsaSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            capacity: t.queue_capacity,
            tau: t.tau,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub epsilon: f64,
}

impl Default for RefineSection {
    fn default() -> Self {
        Self {
            epsilon: TrainConfig::default().epsilon,
        }
    }
}

/// Paths; an empty string means unset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dataset: String,
    /// Base checkpoint. When empty the base is pretrained in process.
    pub base: String,
    pub out: String,
}

fn path_of(s: &str) -> Option<PathBuf> {
    (!s.is_empty()).then(|| PathBuf::from(s))
}

impl DataSection {
    pub fn dataset(&self) -> Option<PathBuf> {
        path_of(&self.dataset)
    }

    pub fn base(&self) -> Option<PathBuf> {
        path_of(&self.base)
    }

    pub fn out(&self) -> Option<PathBuf> {
        path_of(&self.out)
    }
}

impl RunConfigFile {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.message())))
    }

    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text, p)
            }
        }
    }

    /// The fully resolved configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn toy_config(&self) -> ToyConfig {
        let m = &self.model;
        ToyConfig {
            stride: m.stride,
            dim: m.dim,
            pixel_dim: m.pixel_dim,
            mlp_ratio: m.mlp_ratio,
            encoder_blocks: m.encoder_blocks,
            decoder_blocks: m.decoder_blocks,
            lora_rank: m.rank,
            init_seed: m.init_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let r = &self.run;
        TrainConfig {
            n_points: r.n_points,
            epochs: r.epochs,
            optimizer: AdamConfig {
                learning_rate: r.learning_rate,
                weight_decay: r.weight_decay,
                ..AdamConfig::default()
            },
            batch_size: r.batch_size,
            lora_rank: self.model.rank,
            queue_capacity: self.ssa.capacity,
            tau: self.ssa.tau,
            epsilon: self.refine.epsilon,
            loss: self.loss.clone(),
            augment: self.augment.clone(),
            seed: r.seed,
            variant: r.variant,
            reset_queue_each_epoch: r.reset_queue_each_epoch,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        self.model.pretrain.clone()
    }

    /// Every problem in the file at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(Error::Validation(p)) = self.train_config().validate() {
            problems.extend(p);
        }
        self.toy_config().validate(&mut problems);
        self.model.pretrain.validate(&mut problems);
        if let Err(Error::Validation(p)) = self.model.pretrain.spec.validate() {
            problems.extend(p.into_iter().map(|s| format!("model.pretrain.spec: {s}")));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Fails naming `data.<key>` when the path is unset.
    pub fn require(&self, key: &str) -> Result<PathBuf> {
        let value = match key {
            "dataset" => self.data.dataset(),
            "base" => self.data.base(),
            "out" => self.data.out(),
            _ => None,
        };
        value.ok_or_else(|| Error::Validation(vec![format!("data.{key} is required")]))
    }
}
