//! Synthetic data, dataset I/O and checkpoint persistence.

pub mod checkpoint;
pub mod coco;
pub mod dataset;
pub mod rle;
pub mod synth;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use dataset::{
    generate_synthetic, load_dataset, read_annotations, synthesize, write_annotations, AnnotationRecord, Dataset,
    DatasetFiles, GtInstance, InstanceAnnotation, Manifest, Sample, WriteOutcome,
};
pub use rle::Rle;
pub use synth::{generate_scene, Palette, Scene, SceneSpec, ShapeFamily, Texture};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}
