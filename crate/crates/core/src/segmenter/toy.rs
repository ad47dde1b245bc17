//! Desk-scale promptable segmenter.
//!
//! Encoder: linear patch embedding plus two pre-norm self-attention blocks
//! whose query/key/value projections carry LoRA adapters. A full-resolution
//! pixel branch mixes upsampled encoder features with raw colour.
//! Decoder: prompt tokens (with a learned mask token) run through blocks of
//! token self-attention, cross-attention into the image and an MLP. The mask
//! token then yields a per-pixel dot-product head over the pixel features
//! and a few fixed geometric prompt channels.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::init::{gaussian, uniform};
use super::lora::{LoraAdapter, LoraTarget, Projection};
use super::optim::{AdamConfig, AdamState};
use super::tape::{Graph, NodeId, ParamKey};
use super::tensor::{Matrix, SparseMix};
use super::{sigmoid, ImageEmbedding, InstancePrediction, PromptEmbedding, PromptableSegmenter, TokenKind};
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::image::RgbImage;
use crate::maskops::{enclosing_box, BoundingBox};
use crate::prompts::{Polarity, PromptGroup};
use crate::scalar::Scalar;

const POINT_DISTANCE_SCALE: f64 = 16.0;

/// Box indicator, signed box distance, distance to the nearest positive
/// point and a constant channel.
pub const GEOMETRY_CHANNELS: usize = 4;

const BOX_DISTANCE_SCALE: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub stride: usize,
    pub dim: usize,
    pub pixel_dim: usize,
    pub mlp_ratio: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub lora_rank: usize,
    pub init_seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            stride: 8,
            dim: 32,
            pixel_dim: 16,
            mlp_ratio: 2,
            encoder_blocks: 2,
            decoder_blocks: 2,
            lora_rank: super::lora::DEFAULT_RANK,
            init_seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self, problems: &mut Vec<String>) {
        if self.stride == 0 {
            problems.push("model.stride must be positive".into());
        }
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            problems.push(format!("model.dim must be a positive multiple of 4, got {}", self.dim));
        }
        if self.pixel_dim == 0 {
            problems.push("model.pixel_dim must be positive".into());
        }
        if self.mlp_ratio == 0 {
            problems.push("model.mlp_ratio must be positive".into());
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            problems.push("model needs at least one encoder and one decoder block".into());
        }
        if self.lora_rank == 0 || self.lora_rank > self.dim {
            problems.push(format!(
                "model.rank must lie in 1..={}, got {}",
                self.dim, self.lora_rank
            ));
        }
    }
}

#[derive(Clone, Debug)]
struct Attn {
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    o: (usize, usize),
}

#[derive(Clone, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Mlp {
    up: (usize, usize),
    down: (usize, usize),
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    norm1: Norm,
    attn: Attn,
    norm2: Norm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    norm1: Norm,
    self_attn: Attn,
    norm2: Norm,
    cross_attn: Attn,
    norm3: Norm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
struct Layout {
    patch: (usize, usize),
    encoder: Vec<EncoderBlock>,
    encoder_norm: Norm,
    pixel_up: (usize, usize),
    pixel_rgb: (usize, usize),
    pixel_out: (usize, usize),
    polarity_pos: usize,
    polarity_neg: usize,
    corner_tl: usize,
    corner_br: usize,
    mask_token: usize,
    prompt_feature: (usize, usize),
    prompt_region: (usize, usize),
    decoder: Vec<DecoderBlock>,
    decoder_norm: Norm,
    head_hidden: (usize, usize),
    head_pixel: (usize, usize),
    head_geometry: (usize, usize),
}

struct Builder<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn add(&mut self, name: String, value: Matrix<T>) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    fn linear(&mut self, name: &str, d_out: usize, d_in: usize) -> (usize, usize) {
        let bound = (1.0 / d_in as f64).sqrt();
        let w = uniform(&mut self.rng, d_out, d_in, bound);
        let w = self.add(format!("{name}.weight"), w);
        let b = self.add(format!("{name}.bias"), Matrix::zeros(1, d_out));
        (w, b)
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        let ones = Matrix::from_fn(1, dim, |_, _| T::one());
        Norm {
            gain: self.add(format!("{name}.gain"), ones),
            bias: self.add(format!("{name}.bias"), Matrix::zeros(1, dim)),
        }
    }

    fn attn(&mut self, name: &str, dim: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), dim, dim),
            k: self.linear(&format!("{name}.k"), dim, dim),
            v: self.linear(&format!("{name}.v"), dim, dim),
            o: self.linear(&format!("{name}.o"), dim, dim),
        }
    }

    fn mlp(&mut self, name: &str, dim: usize, hidden: usize) -> Mlp {
        Mlp {
            up: self.linear(&format!("{name}.up"), hidden, dim),
            down: self.linear(&format!("{name}.down"), dim, hidden),
        }
    }

    fn token(&mut self, name: &str, dim: usize) -> usize {
        let v = gaussian(&mut self.rng, 1, dim, 0.5);
        self.add(name.to_string(), v)
    }
}

/// Which leaves receive gradients in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Inference,
    /// Only adapter factors train; the base is frozen.
    Adapters,
    /// Every base weight trains; adapters are held fixed.
    Full,
}

/// Name, shape and trainability of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub key: ParamKey,
    pub name: String,
    pub shape: (usize, usize),
    pub trainable: bool,
}

/// Graph state for one image: encoder, pixel branch and any decoded groups.
pub struct ForwardPass<T> {
    pub graph: Graph<T>,
    pub features: NodeId,
    pub pixel_features: NodeId,
    /// `(H W) x 1` logits per prompt group.
    pub logits: Vec<NodeId>,
    /// `1 x C` unit embeddings per pooled mask.
    pub embeddings: Vec<Option<NodeId>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySegmenter<T> {
    config: ToyConfig,
    names: Vec<String>,
    base: Vec<Matrix<T>>,
    layout: Arc<LayoutHandle>,
    adapters: Vec<LoraAdapter<T>>,
}

// Layout indices are derived from the config; equality follows from it.
#[derive(Debug)]
struct LayoutHandle(Layout);

impl PartialEq for LayoutHandle {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl<T: Scalar> ToySegmenter<T> {
    /// Randomly initialized base with zero-effect adapters on every encoder
    /// query/key/value projection.
    pub fn new(config: ToyConfig) -> Result<Self> {
        let mut problems = Vec::new();
        config.validate(&mut problems);
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        let d = config.dim;
        let hidden = d * config.mlp_ratio;
        let patch_in = config.stride * config.stride * 3;
        let mut b = Builder {
            names: Vec::new(),
            values: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let patch = b.linear("encoder.patch", d, patch_in);
        let encoder = (0..config.encoder_blocks)
            .map(|i| EncoderBlock {
                norm1: b.norm(&format!("encoder.{i}.norm1"), d),
                attn: b.attn(&format!("encoder.{i}.attn"), d),
                norm2: b.norm(&format!("encoder.{i}.norm2"), d),
                mlp: b.mlp(&format!("encoder.{i}.mlp"), d, hidden),
            })
            .collect();
        let encoder_norm = b.norm("encoder.norm", d);
        let pixel_up = b.linear("pixel.up", config.pixel_dim, d);
        let pixel_rgb = b.linear("pixel.rgb", config.pixel_dim, 3);
        let pixel_out = b.linear("pixel.out", config.pixel_dim, config.pixel_dim);
        let polarity_pos = b.token("prompt.positive", d);
        let polarity_neg = b.token("prompt.negative", d);
        let corner_tl = b.token("prompt.corner_tl", d);
        let corner_br = b.token("prompt.corner_br", d);
        let mask_token = b.token("decoder.mask_token", d);
        let prompt_feature = b.linear("prompt.feature", d, d);
        let prompt_region = b.linear("prompt.region", d, d);
        let decoder = (0..config.decoder_blocks)
            .map(|i| DecoderBlock {
                norm1: b.norm(&format!("decoder.{i}.norm1"), d),
                self_attn: b.attn(&format!("decoder.{i}.self_attn"), d),
                norm2: b.norm(&format!("decoder.{i}.norm2"), d),
                cross_attn: b.attn(&format!("decoder.{i}.cross_attn"), d),
                norm3: b.norm(&format!("decoder.{i}.norm3"), d),
                mlp: b.mlp(&format!("decoder.{i}.mlp"), d, hidden),
            })
            .collect();
        let decoder_norm = b.norm("decoder.norm", d);
        let head_hidden = b.linear("head.hidden", d, d);
        let head_pixel = b.linear("head.pixel", config.pixel_dim, d);
        let head_geometry = b.linear("head.geometry", GEOMETRY_CHANNELS, d);
        let layout = Layout {
            patch,
            encoder,
            encoder_norm,
            pixel_up,
            pixel_rgb,
            pixel_out,
            polarity_pos,
            polarity_neg,
            corner_tl,
            corner_br,
            mask_token,
            prompt_feature,
            prompt_region,
            decoder,
            decoder_norm,
            head_hidden,
            head_pixel,
            head_geometry,
        };
        let mut model = Self {
            names: b.names,
            base: b.values,
            layout: Arc::new(LayoutHandle(layout)),
            adapters: Vec::new(),
            config,
        };
        model.reset_adapters(model.config.init_seed.wrapping_add(1))?;
        Ok(model)
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    fn layout(&self) -> &Layout {
        &self.layout.0
    }

    /// Re-initializes every adapter to `A = 0`, `B ~ N(0, 1/d_in)`.
    pub fn reset_adapters(&mut self, seed: u64) -> Result<()> {
        let d = self.config.dim;
        let mut adapters = Vec::new();
        for block in 0..self.config.encoder_blocks {
            for (j, projection) in Projection::ALL.into_iter().enumerate() {
                let target = LoraTarget { block, projection };
                let s = seed.wrapping_mul(31).wrapping_add((block * 3 + j) as u64);
                adapters.push(LoraAdapter::init(d, d, self.config.lora_rank, target, s)?);
            }
        }
        self.adapters = adapters;
        Ok(())
    }

    pub fn adapters(&self) -> &[LoraAdapter<T>] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter<T>] {
        &mut self.adapters
    }

    pub fn base_weights(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.base)
    }

    pub fn base_weight_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.base[i])
    }

    /// Replaces all base weights, checking names and shapes.
    pub fn set_base_weights(&mut self, weights: Vec<(String, Matrix<T>)>) -> Result<()> {
        if weights.len() != self.base.len() {
            return Err(Error::Compatibility(format!(
                "expected {} base tensors, got {}",
                self.base.len(),
                weights.len()
            )));
        }
        for (i, (name, m)) in weights.iter().enumerate() {
            if *name != self.names[i] || m.shape() != self.base[i].shape() {
                return Err(Error::Compatibility(format!(
                    "base tensor {i}: expected {} {:?}, got {name} {:?}",
                    self.names[i],
                    self.base[i].shape(),
                    m.shape()
                )));
            }
        }
        self.base = weights.into_iter().map(|(_, m)| m).collect();
        Ok(())
    }

    pub fn adapter_name(&self, index: usize, factor: char) -> String {
        let t = self.adapters[index].target;
        format!("encoder.{}.attn.{}.lora_{}", t.block, t.projection.short(), factor)
    }

    pub fn parameters(&self) -> Vec<ParamInfo> {
        let mut out: Vec<ParamInfo> = self
            .names
            .iter()
            .zip(&self.base)
            .enumerate()
            .map(|(i, (n, m))| ParamInfo {
                key: ParamKey::Base(i),
                name: n.clone(),
                shape: m.shape(),
                trainable: false,
            })
            .collect();
        for (i, ad) in self.adapters.iter().enumerate() {
            out.push(ParamInfo {
                key: ParamKey::LoraA(i),
                name: self.adapter_name(i, 'a'),
                shape: ad.a.shape(),
                trainable: true,
            });
            out.push(ParamInfo {
                key: ParamKey::LoraB(i),
                name: self.adapter_name(i, 'b'),
                shape: ad.b.shape(),
                trainable: true,
            });
        }
        out
    }

    /// Exactly the adapter factors, in adapter order (`A` then `B`).
    pub fn trainable_parameters(&self) -> Vec<ParamInfo> {
        self.parameters().into_iter().filter(|p| p.trainable).collect()
    }

    /// Digest of the architecture: config (minus init seed) and every
    /// tensor name and shape.
    pub fn architecture_hash(&self) -> String {
        let mut h = Sha256::new();
        let c = &self.config;
        h.update(
            format!(
                "toy-segmenter/v1 stride={} dim={} pixel_dim={} mlp_ratio={} enc={} dec={} rank={} scalar={}",
                c.stride,
                c.dim,
                c.pixel_dim,
                c.mlp_ratio,
                c.encoder_blocks,
                c.decoder_blocks,
                c.lora_rank,
                T::TAG
            )
            .as_bytes(),
        );
        for p in self.parameters() {
            h.update(format!("|{}:{}x{}", p.name, p.shape.0, p.shape.1).as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Digest of the base weight values.
    pub fn base_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for m in &self.base {
            buf.clear();
            for &v in m.as_slice() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    fn check_image(&self, image: &RgbImage) -> Result<()> {
        let s = self.config.stride;
        if image.height() == 0
            || image.width() == 0
            || !image.height().is_multiple_of(s)
            || !image.width().is_multiple_of(s)
        {
            return Err(Error::Structural(format!(
                "image {}x{} is not a positive multiple of stride {s}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Sinusoidal encoding of a position given in pixel units.
    fn positional(&self, x: f64, y: f64, height: usize, width: usize) -> Vec<T> {
        let d = self.config.dim;
        let bands = d / 4;
        let xn = x / width as f64;
        let yn = y / height as f64;
        let mut out = Vec::with_capacity(d);
        for k in 0..bands {
            let freq = std::f64::consts::PI * 2f64.powf(k as f64 * 4.0 / bands as f64);
            out.push(T::lit((freq * xn).sin()));
            out.push(T::lit((freq * xn).cos()));
            out.push(T::lit((freq * yn).sin()));
            out.push(T::lit((freq * yn).cos()));
        }
        out
    }

    fn cell_positions(&self, height: usize, width: usize) -> Matrix<T> {
        let s = self.config.stride;
        let (gh, gw) = (height / s, width / s);
        let mut data = Vec::with_capacity(gh * gw * self.config.dim);
        for cy in 0..gh {
            for cx in 0..gw {
                let y = (cy as f64 + 0.5) * s as f64;
                let x = (cx as f64 + 0.5) * s as f64;
                data.extend(self.positional(x, y, height, width));
            }
        }
        Matrix::from_vec(gh * gw, self.config.dim, data).expect("positions shape")
    }

    fn patches(&self, image: &RgbImage) -> Matrix<T> {
        let s = self.config.stride;
        let (gh, gw) = (image.height() / s, image.width() / s);
        let mut data = Vec::with_capacity(gh * gw * s * s * 3);
        for cy in 0..gh {
            for cx in 0..gw {
                for dy in 0..s {
                    for dx in 0..s {
                        for c in image.pixel(cy * s + dy, cx * s + dx) {
                            data.push(normalize_channel(c));
                        }
                    }
                }
            }
        }
        Matrix::from_vec(gh * gw, s * s * 3, data).expect("patch shape")
    }

    fn rgb(&self, image: &RgbImage) -> Matrix<T> {
        let data = image.as_bytes().iter().map(|&c| normalize_channel(c)).collect();
        Matrix::from_vec(image.height() * image.width(), 3, data).expect("rgb shape")
    }

    /// Bilinear weights of the cells around pixel `(y, x)`.
    fn bilinear_row(&self, y: usize, x: usize, height: usize, width: usize) -> Vec<(usize, T)> {
        let s = self.config.stride as f64;
        let (gh, gw) = (height / self.config.stride, width / self.config.stride);
        let axis = |p: usize, cells: usize| {
            let c = ((p as f64 + 0.5) / s - 0.5).clamp(0.0, (cells - 1) as f64);
            let lo = c.floor() as usize;
            let hi = (lo + 1).min(cells - 1);
            (lo, hi, c - lo as f64)
        };
        let (y0, y1, fy) = axis(y, gh);
        let (x0, x1, fx) = axis(x, gw);
        let mut terms: Vec<(usize, T)> = Vec::with_capacity(4);
        for (cy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            for (cx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                let w = wy * wx;
                if w > 0.0 {
                    let i = cy * gw + cx;
                    match terms.iter_mut().find(|(j, _)| *j == i) {
                        Some((_, acc)) => *acc += T::lit(w),
                        None => terms.push((i, T::lit(w))),
                    }
                }
            }
        }
        terms
    }

    /// Bilinear upsampling from cell centres to pixel centres.
    fn upsampler(&self, height: usize, width: usize) -> SparseMix<T> {
        let s = self.config.stride;
        SparseMix {
            input_rows: (height / s) * (width / s),
            rows: (0..height * width)
                .map(|i| self.bilinear_row(i / width, i % width, height, width))
                .collect(),
        }
    }

    /// Bilinear read of the feature grid at pixel `(x, y)`.
    fn point_sampler(&self, x: u32, y: u32, height: usize, width: usize) -> SparseMix<T> {
        let s = self.config.stride;
        SparseMix {
            input_rows: (height / s) * (width / s),
            rows: vec![self.bilinear_row(y as usize, x as usize, height, width)],
        }
    }

    /// Uniform pooling weights over the cells a mask covers (at least half
    /// a cell), falling back to cells touching its box.
    fn pool_weights(&self, mask: &Mask) -> Option<SparseMix<T>> {
        let s = self.config.stride;
        let (h, w) = mask.shape();
        let (gh, gw) = (h / s, w / s);
        let mut counts = vec![0usize; gh * gw];
        for (y, x) in mask.pixels() {
            counts[(y / s) * gw + x / s] += 1;
        }
        let mut cells: Vec<usize> = (0..gh * gw).filter(|&i| counts[i] * 2 >= s * s).collect();
        if cells.is_empty() {
            let b = enclosing_box(mask)?;
            cells = (b.y_min as usize / s..=b.y_max as usize / s)
                .flat_map(|cy| (b.x_min as usize / s..=b.x_max as usize / s).map(move |cx| cy * gw + cx))
                .collect();
        }
        let wgt = T::one() / T::from_usize(cells.len()).unwrap();
        Some(SparseMix {
            input_rows: gh * gw,
            rows: vec![cells.into_iter().map(|c| (c, wgt)).collect()],
        })
    }

    fn geometry(&self, group: &PromptGroup, height: usize, width: usize) -> Matrix<T> {
        let boxes: Vec<BoundingBox> = group.boxes.iter().map(|b| b.bbox).collect();
        let positives: Vec<(f64, f64)> = group
            .points
            .iter()
            .filter(|p| p.polarity == Polarity::Positive)
            .map(|p| (p.x as f64, p.y as f64))
            .collect();
        let mut data = Vec::with_capacity(height * width * GEOMETRY_CHANNELS);
        for y in 0..height {
            for x in 0..width {
                let (fx, fy) = (x as f64, y as f64);
                let mut inside = 0.0f64;
                let mut signed = if boxes.is_empty() { 0.0 } else { -1.0f64 };
                for b in &boxes {
                    let (x0, y0, x1, y1) = (b.x_min as f64, b.y_min as f64, b.x_max as f64, b.y_max as f64);
                    let d = if b.contains(y, x) {
                        inside = 1.0;
                        (fx - x0 + 1.0).min(x1 - fx + 1.0).min(fy - y0 + 1.0).min(y1 - fy + 1.0)
                    } else {
                        let dx = (x0 - fx).max(fx - x1).max(0.0);
                        let dy = (y0 - fy).max(fy - y1).max(0.0);
                        -(dx * dx + dy * dy).sqrt()
                    };
                    signed = signed.max((d / BOX_DISTANCE_SCALE).clamp(-1.0, 1.0));
                }
                data.push(T::lit(inside));
                data.push(T::lit(signed));
                let near = positives
                    .iter()
                    .map(|&(px, py)| ((px - fx).powi(2) + (py - fy).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                data.push(T::lit(if near.is_finite() {
                    (near / POINT_DISTANCE_SCALE).min(2.0)
                } else {
                    0.0
                }));
                data.push(T::one());
            }
        }
        Matrix::from_vec(height * width, GEOMETRY_CHANNELS, data).expect("geometry shape")
    }

    fn check_group(&self, group: &PromptGroup, height: usize, width: usize) -> Result<()> {
        if group.is_empty() {
            return Err(Error::InputDomain(format!(
                "prompt group for instance {} is empty",
                group.instance_id
            )));
        }
        let oob = group
            .points
            .iter()
            .any(|p| p.x as usize >= width || p.y as usize >= height)
            || group.boxes.iter().any(|b| !b.bbox.fits(height, width));
        if oob {
            return Err(Error::InputDomain(format!(
                "prompt for instance {} lies outside the {height}x{width} image",
                group.instance_id
            )));
        }
        Ok(())
    }

    /// Raw prompt tokens with their kinds (before the mask token).
    fn prompt_tokens(&self, group: &PromptGroup, height: usize, width: usize) -> Vec<(Vec<T>, TokenKind)> {
        let mut out = Vec::new();
        for p in &group.points {
            let kind = match p.polarity {
                Polarity::Positive => TokenKind::PointPositive,
                Polarity::Negative => TokenKind::PointNegative,
            };
            out.push((self.positional(p.x as f64 + 0.5, p.y as f64 + 0.5, height, width), kind));
        }
        for b in &group.boxes {
            let bb = b.bbox;
            out.push((
                self.positional(bb.x_min as f64 + 0.5, bb.y_min as f64 + 0.5, height, width),
                TokenKind::BoxTopLeft,
            ));
            out.push((
                self.positional(bb.x_max as f64 + 0.5, bb.y_max as f64 + 0.5, height, width),
                TokenKind::BoxBottomRight,
            ));
        }
        out
    }

    fn kind_param(&self, kind: TokenKind) -> usize {
        let l = self.layout();
        match kind {
            TokenKind::PointPositive => l.polarity_pos,
            TokenKind::PointNegative => l.polarity_neg,
            TokenKind::BoxTopLeft => l.corner_tl,
            TokenKind::BoxBottomRight => l.corner_br,
        }
    }

    /// Runs the encoder and pixel branch, then decodes every group and pools
    /// every mask, all on one graph.
    pub fn forward(
        &self,
        image: &RgbImage,
        groups: &[PromptGroup],
        pool_masks: &[Mask],
        mode: TrainMode,
    ) -> Result<ForwardPass<T>> {
        self.check_image(image)?;
        let (h, w) = (image.height(), image.width());
        for g in groups {
            self.check_group(g, h, w)?;
        }
        let mut ctx = Ctx::new(self, mode);
        let features = ctx.encode(image);
        let pixel_features = ctx.pixel_branch(features, image);
        let keys = {
            let pe = ctx.g.constant(self.cell_positions(h, w));
            ctx.g.add(features, pe)
        };
        let logits = groups
            .iter()
            .map(|g| ctx.decode(features, keys, pixel_features, g, h, w))
            .collect();
        let embeddings = pool_masks
            .iter()
            .map(|m| {
                let mix = self.pool_weights(m)?;
                let pooled = ctx.g.mix(features, Arc::new(mix));
                Some(ctx.g.l2_normalize_rows(pooled))
            })
            .collect();
        Ok(ForwardPass {
            graph: ctx.g,
            features,
            pixel_features,
            logits,
            embeddings,
        })
    }

    /// Adam step on the leaves `mode` trains, using gradients from
    /// [`Graph::backward`].
    pub fn apply_gradients(
        &mut self,
        mode: TrainMode,
        grads: &std::collections::HashMap<ParamKey, Matrix<T>>,
        state: &mut AdamState<T>,
        config: &AdamConfig,
    ) -> Result<()> {
        match mode {
            TrainMode::Inference => Ok(()),
            TrainMode::Adapters => {
                let keys: Vec<ParamKey> = (0..self.adapters.len())
                    .flat_map(|i| [ParamKey::LoraA(i), ParamKey::LoraB(i)])
                    .collect();
                let g: Vec<Option<&Matrix<T>>> = keys.iter().map(|k| grads.get(k)).collect();
                let mut params: Vec<&mut Matrix<T>> =
                    self.adapters.iter_mut().flat_map(|a| [&mut a.a, &mut a.b]).collect();
                state.update(config, &mut params, &g)
            }
            TrainMode::Full => {
                let g: Vec<Option<&Matrix<T>>> = (0..self.base.len()).map(|i| grads.get(&ParamKey::Base(i))).collect();
                let mut params: Vec<&mut Matrix<T>> = self.base.iter_mut().collect();
                state.update(config, &mut params, &g)
            }
        }
    }

    /// Optimizer state shaped for the leaves `mode` trains.
    pub fn optimizer_state(&self, mode: TrainMode) -> AdamState<T> {
        let shapes: Vec<(usize, usize)> = match mode {
            TrainMode::Inference => Vec::new(),
            TrainMode::Adapters => self.adapters.iter().flat_map(|a| [a.a.shape(), a.b.shape()]).collect(),
            TrainMode::Full => self.base.iter().map(Matrix::shape).collect(),
        };
        AdamState::new(&shapes)
    }

    fn predictions(
        &self,
        pass: &ForwardPass<T>,
        groups: &[PromptGroup],
        height: usize,
        width: usize,
        embed: bool,
    ) -> Result<Vec<InstancePrediction<T>>> {
        let mut out = Vec::with_capacity(groups.len());
        for (g, &node) in groups.iter().zip(&pass.logits) {
            let logits = pass.graph.value(node).as_slice().to_vec();
            let prob: Vec<T> = logits.iter().map(|&z| sigmoid(z)).collect();
            let mask_logits = Grid::from_vec(height, width, logits)?;
            let mask_prob = Grid::from_vec(height, width, prob)?;
            let embedding = if embed {
                let m = mask_prob.map(|&p| p > T::lit(0.5));
                self.pool_weights(&m).map(|mix| {
                    let pooled = mix.apply(pass.graph.value(pass.features));
                    normalize(pooled.into_vec())
                })
            } else {
                None
            };
            out.push(InstancePrediction {
                instance_id: g.instance_id,
                mask_logits,
                mask_prob,
                embedding,
            });
        }
        Ok(out)
    }

    /// Encodes `image` and decodes `groups` in one inference pass.
    pub fn predict(&self, image: &RgbImage, groups: &[PromptGroup]) -> Result<Vec<InstancePrediction<T>>> {
        let pass = self.forward(image, groups, &[], TrainMode::Inference)?;
        self.predictions(&pass, groups, image.height(), image.width(), true)
    }
}

fn normalize<T: Scalar>(mut v: Vec<T>) -> Vec<T> {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::lit(1e-12));
    for x in &mut v {
        *x /= n;
    }
    v
}

fn normalize_channel<T: Scalar>(c: u8) -> T {
    T::lit((c as f64 / 255.0 - 0.5) * 4.0)
}

struct Ctx<'a, T: Scalar> {
    model: &'a ToySegmenter<T>,
    g: Graph<T>,
    mode: TrainMode,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    fn new(model: &'a ToySegmenter<T>, mode: TrainMode) -> Self {
        Self {
            model,
            g: Graph::new(),
            mode,
        }
    }

    fn base(&mut self, i: usize) -> NodeId {
        let trainable = self.mode == TrainMode::Full;
        self.g.param(ParamKey::Base(i), &self.model.base[i], trainable)
    }

    fn linear(&mut self, x: NodeId, (w, b): (usize, usize), adapter: Option<usize>) -> NodeId {
        let wn = self.base(w);
        let bn = self.base(b);
        let y = self.g.matmul_bt(x, wn);
        let mut y = self.g.add_row(y, bn);
        if let Some(i) = adapter {
            let trainable = self.mode == TrainMode::Adapters;
            let ad = &self.model.adapters[i];
            let an = self.g.param(ParamKey::LoraA(i), &ad.a, trainable);
            let bn = self.g.param(ParamKey::LoraB(i), &ad.b, trainable);
            let low = self.g.matmul_bt(x, bn);
            let upd = self.g.matmul_bt(low, an);
            y = self.g.add(y, upd);
        }
        y
    }

    fn norm(&mut self, x: NodeId, n: &Norm) -> NodeId {
        let z = self.g.layer_norm(x);
        let gain = self.base(n.gain);
        let bias = self.base(n.bias);
        let z = self.g.mul_row(z, gain);
        self.g.add_row(z, bias)
    }

    fn attention(&mut self, xq: NodeId, xkv: NodeId, a: &Attn, lora_block: Option<usize>) -> NodeId {
        let adapter = |p: usize| lora_block.map(|b| b * 3 + p);
        let q = self.linear(xq, a.q, adapter(0));
        let k = self.linear(xkv, a.k, adapter(1));
        let v = self.linear(xkv, a.v, adapter(2));
        let scores = self.g.matmul_bt(q, k);
        let scale = T::one() / T::from_usize(self.model.config.dim).unwrap().sqrt();
        let scores = self.g.scale(scores, scale);
        let attn = self.g.softmax_rows(scores);
        let mixed = self.g.matmul(attn, v);
        self.linear(mixed, a.o, None)
    }

    fn mlp(&mut self, x: NodeId, m: &Mlp) -> NodeId {
        let h = self.linear(x, m.up, None);
        let h = self.g.relu(h);
        self.linear(h, m.down, None)
    }

    fn encode(&mut self, image: &RgbImage) -> NodeId {
        let layout = self.model.layout.clone();
        let l = &layout.0;
        let patches = self.g.constant(self.model.patches(image));
        let x = self.linear(patches, l.patch, None);
        let pe = self
            .g
            .constant(self.model.cell_positions(image.height(), image.width()));
        let mut x = self.g.add(x, pe);
        for (i, blk) in l.encoder.iter().enumerate() {
            let n = self.norm(x, &blk.norm1);
            let a = self.attention(n, n, &blk.attn, Some(i));
            x = self.g.add(x, a);
            let n = self.norm(x, &blk.norm2);
            let m = self.mlp(n, &blk.mlp);
            x = self.g.add(x, m);
        }
        self.norm(x, &l.encoder_norm)
    }

    fn pixel_branch(&mut self, features: NodeId, image: &RgbImage) -> NodeId {
        let layout = self.model.layout.clone();
        let l = &layout.0;
        let low = self.linear(features, l.pixel_up, None);
        let up = Arc::new(self.model.upsampler(image.height(), image.width()));
        let up = self.g.mix(low, up);
        let rgb = self.g.constant(self.model.rgb(image));
        let colour = self.linear(rgb, l.pixel_rgb, None);
        let h = self.g.add(up, colour);
        let h = self.g.relu(h);
        self.linear(h, l.pixel_out, None)
    }

    fn decode(
        &mut self,
        features: NodeId,
        keys: NodeId,
        pixel_features: NodeId,
        group: &PromptGroup,
        height: usize,
        width: usize,
    ) -> NodeId {
        let layout = self.model.layout.clone();
        let l = &layout.0;
        let mut rows = vec![self.base(l.mask_token)];
        for (pe, kind) in self.model.prompt_tokens(group, height, width) {
            let pe = self.g.constant(Matrix::row_vector(pe));
            let offset = self.base(self.model.kind_param(kind));
            rows.push(self.g.add(pe, offset));
        }
        for (i, p) in group.points.iter().enumerate() {
            let sampler = Arc::new(self.model.point_sampler(p.x, p.y, height, width));
            let f = self.g.mix(features, sampler);
            let f = self.linear(f, l.prompt_feature, None);
            rows[i + 1] = self.g.add(rows[i + 1], f);
        }
        // Both corners of a box also see the features pooled inside it.
        for (j, b) in group.boxes.iter().enumerate() {
            let inside = Mask::from_fn(height, width, |y, x| b.bbox.contains(y, x));
            let pool = Arc::new(self.model.pool_weights(&inside).expect("boxes are non-empty"));
            let f = self.g.mix(features, pool);
            let f = self.linear(f, l.prompt_region, None);
            let at = 1 + group.points.len() + 2 * j;
            rows[at] = self.g.add(rows[at], f);
            rows[at + 1] = self.g.add(rows[at + 1], f);
        }
        let mut x = self.g.concat_rows(&rows);
        for blk in &l.decoder {
            let n = self.norm(x, &blk.norm1);
            let a = self.attention(n, n, &blk.self_attn, None);
            x = self.g.add(x, a);
            let n = self.norm(x, &blk.norm2);
            let a = self.cross(n, keys, features, &blk.cross_attn);
            x = self.g.add(x, a);
            let n = self.norm(x, &blk.norm3);
            let m = self.mlp(n, &blk.mlp);
            x = self.g.add(x, m);
        }
        let x = self.norm(x, &l.decoder_norm);
        let token = self.g.slice_rows(x, 0, 1);
        let hidden = self.linear(token, l.head_hidden, None);
        let hidden = self.g.relu(hidden);
        let pixel_weights = self.linear(hidden, l.head_pixel, None);
        let geometry_weights = self.linear(hidden, l.head_geometry, None);
        let geometry = self.g.constant(self.model.geometry(group, height, width));
        let a = self.g.matmul_bt(pixel_features, pixel_weights);
        let b = self.g.matmul_bt(geometry, geometry_weights);
        self.g.add(a, b)
    }

    /// Cross-attention with separate key (features + positions) and value
    /// (features) inputs.
    fn cross(&mut self, xq: NodeId, keys: NodeId, values: NodeId, a: &Attn) -> NodeId {
        let q = self.linear(xq, a.q, None);
        let k = self.linear(keys, a.k, None);
        let v = self.linear(values, a.v, None);
        let scores = self.g.matmul_bt(q, k);
        let scale = T::one() / T::from_usize(self.model.config.dim).unwrap().sqrt();
        let scores = self.g.scale(scores, scale);
        let attn = self.g.softmax_rows(scores);
        let mixed = self.g.matmul(attn, v);
        self.linear(mixed, a.o, None)
    }
}

impl<T: Scalar> PromptableSegmenter<T> for ToySegmenter<T> {
    fn encode_image(&self, image: &RgbImage) -> Result<ImageEmbedding<T>> {
        let pass = self.forward(image, &[], &[], TrainMode::Inference)?;
        Ok(ImageEmbedding {
            features: pass.graph.value(pass.features).clone(),
            pixel_features: pass.graph.value(pass.pixel_features).clone(),
            stride: self.config.stride,
            height: image.height(),
            width: image.width(),
        })
    }

    fn encode_prompts(&self, group: &PromptGroup, height: usize, width: usize) -> Result<PromptEmbedding<T>> {
        self.check_group(group, height, width)?;
        let mut data = Vec::new();
        let mut kinds = Vec::new();
        for (pe, kind) in self.prompt_tokens(group, height, width) {
            let offset = &self.base[self.kind_param(kind)];
            data.extend(pe.iter().zip(offset.as_slice()).map(|(&a, &b)| a + b));
            kinds.push(kind);
        }
        Ok(PromptEmbedding {
            tokens: Matrix::from_vec(kinds.len(), self.config.dim, data)?,
            kinds,
        })
    }

    fn decode_masks(&self, image: &ImageEmbedding<T>, groups: &[PromptGroup]) -> Result<Vec<InstancePrediction<T>>> {
        let (h, w) = (image.height, image.width);
        for g in groups {
            self.check_group(g, h, w)?;
        }
        let mut ctx = Ctx::new(self, TrainMode::Inference);
        let features = ctx.g.constant(image.features.clone());
        let pixel_features = ctx.g.constant(image.pixel_features.clone());
        let pe = ctx.g.constant(self.cell_positions(h, w));
        let keys = ctx.g.add(features, pe);
        let logits = groups
            .iter()
            .map(|g| ctx.decode(features, keys, pixel_features, g, h, w))
            .collect();
        let pass = ForwardPass {
            graph: ctx.g,
            features,
            pixel_features,
            logits,
            embeddings: Vec::new(),
        };
        self.predictions(&pass, groups, h, w, true)
    }

    fn instance_embedding(&self, image: &ImageEmbedding<T>, mask: &Mask) -> Option<Vec<T>> {
        let mix = self.pool_weights(mask)?;
        Some(normalize(mix.apply(&image.features).into_vec()))
    }
}
