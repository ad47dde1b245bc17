//! Promptable segmentation: the backend contract, a desk-scale transformer
//! implementing it, and low-rank adaptation of its attention projections.

mod init;
pub mod lora;
pub mod optim;
pub mod tape;
pub mod tensor;
mod toy;

pub use lora::{lora_forward, LoraAdapter, LoraTarget, Projection};
pub use optim::{AdamConfig, AdamState};
pub use tape::{Graph, NodeId, ParamKey};
pub use tensor::Matrix;
pub use toy::{ForwardPass, ParamInfo, ToyConfig, ToySegmenter, TrainMode, GEOMETRY_CHANNELS};

use crate::error::Result;
use crate::grid::{Grid, Mask};
use crate::image::RgbImage;
use crate::maskops::InstanceId;
use crate::prompts::PromptGroup;
use crate::scalar::Scalar;

/// Encoder output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding<T> {
    /// `(H' W') x C`, one row per feature cell in row-major order.
    pub features: Matrix<T>,
    /// `(H W) x C_pix` full-resolution features used by the mask head.
    pub pixel_features: Matrix<T>,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

impl<T: Scalar> ImageEmbedding<T> {
    pub fn grid_height(&self) -> usize {
        self.height / self.stride
    }

    pub fn grid_width(&self) -> usize {
        self.width / self.stride
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    /// Feature `c` at cell `(y, x)`.
    pub fn feature(&self, c: usize, y: usize, x: usize) -> T {
        self.features.get(y * self.grid_width() + x, c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    PointPositive,
    PointNegative,
    BoxTopLeft,
    BoxBottomRight,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding<T> {
    /// One row per token.
    pub tokens: Matrix<T>,
    pub kinds: Vec<TokenKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstancePrediction<T> {
    pub instance_id: InstanceId,
    pub mask_logits: Grid<T>,
    pub mask_prob: Grid<T>,
    /// Pooled over the thresholded mask; absent when nothing is predicted.
    pub embedding: Option<Vec<T>>,
}

impl<T: Scalar> InstancePrediction<T> {
    pub fn binary(&self, threshold: T) -> Mask {
        self.mask_prob.map(|&p| p > threshold)
    }
}

/// The pluggable boundary a segmentation backend implements.
pub trait PromptableSegmenter<T: Scalar> {
    fn encode_image(&self, image: &RgbImage) -> Result<ImageEmbedding<T>>;

    fn encode_prompts(&self, group: &PromptGroup, height: usize, width: usize) -> Result<PromptEmbedding<T>>;

    /// One prediction per group, each decoded independently.
    fn decode_masks(&self, image: &ImageEmbedding<T>, groups: &[PromptGroup]) -> Result<Vec<InstancePrediction<T>>>;

    /// Unit-norm masked average of encoder features.
    fn instance_embedding(&self, image: &ImageEmbedding<T>, mask: &Mask) -> Option<Vec<T>>;
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
