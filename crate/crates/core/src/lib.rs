//! Point-supervised self-prompting adaptation for promptable segmenters.
//!
//! The adaptation loop refines noisy point-prompted masks into clean boxes,
//! re-queries the segmenter with those boxes under a weak/strong view pair,
//! and trains low-rank adapters against the refined pseudo-labels with an
//! extra embedding-affinity term.

pub mod datakit;
pub mod error;
pub mod grid;
pub mod image;
pub mod losses;
pub mod maskops;
pub mod pipeline;
pub mod prompts;
pub mod scalar;
pub mod segmenter;
pub mod ssa;

pub use error::{Error, Result};
pub use grid::{Grid, Mask};
pub use image::RgbImage;
pub use scalar::Scalar;

/// Default single-precision segmenter.
pub type Segmenter = segmenter::ToySegmenter<f32>;
/// Double-precision segmenter, used for gradient checks.
pub type Segmenter64 = segmenter::ToySegmenter<f64>;
pub type ProbMaskStack = maskops::ProbMaskStack<f32>;
pub type EmbeddingQueue = ssa::EmbeddingQueue<f32>;
pub type Matrix = segmenter::tensor::Matrix<f32>;
