//! Procedural scenes of flat-coloured shapes on a background.
//!
//! Instances are drawn in order, so later shapes occlude earlier ones; the
//! stored masks are the visible regions and therefore always disjoint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Split;
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::image::RgbImage;
use crate::maskops::InstanceId;
use crate::prompts::derive_seed;

/// Minimum visible area of any generated instance.
pub const MIN_INSTANCE_PIXELS: usize = 16;

const PLACEMENT_ATTEMPTS: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipse,
    Rectangle,
    LShape,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 3] = [ShapeFamily::Ellipse, ShapeFamily::Rectangle, ShapeFamily::LShape];

    pub fn tag(self) -> &'static str {
        match self {
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Rectangle => "rectangle",
            ShapeFamily::LShape => "l_shape",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Palette {
    /// Saturated object colours on a pale background.
    Vivid,
    /// Object colours blended towards the background.
    Muted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Texture {
    /// Amplitude of smooth value noise over the background, in 8-bit units.
    pub noise_amplitude: f64,
    /// Side of the coarse value-noise lattice, in pixels.
    pub noise_cell: usize,
    /// Per-pixel grain amplitude, applied everywhere.
    pub grain: f64,
    /// Amplitude of a linear lighting ramp across the image.
    pub shading: f64,
    /// Fraction of background noise that also shows through objects.
    pub object_noise: f64,
}

impl Default for Texture {
    fn default() -> Self {
        Self {
            noise_amplitude: 30.0,
            noise_cell: 8,
            grain: 6.0,
            shading: 30.0,
            object_noise: 0.3,
        }
    }
}

impl Texture {
    /// Faint noise and lighting, no texture on objects.
    pub fn light() -> Self {
        Self {
            noise_amplitude: 10.0,
            noise_cell: 16,
            grain: 3.0,
            shading: 10.0,
            object_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of instances per image.
    pub instances: [usize; 2],
    pub shapes: Vec<ShapeFamily>,
    /// Inclusive range of shape half-extents, in pixels.
    pub size: [f64; 2],
    pub texture: Texture,
    pub palette: Palette,
    /// Probability that an instance is placed against an earlier one.
    pub overlap_fraction: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            instances: [2, 4],
            shapes: ShapeFamily::ALL.to_vec(),
            size: [5.0, 12.0],
            texture: Texture::default(),
            palette: Palette::Muted,
            overlap_fraction: 0.35,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// Clean-looking scenes used to pretrain the base segmenter.
    pub fn source(seed: u64) -> Self {
        Self {
            texture: Texture::light(),
            palette: Palette::Vivid,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.height < 8 || self.width < 8 {
            p.push(format!("image size {}x{} is below 8x8", self.height, self.width));
        }
        if self.instances[0] == 0 || self.instances[0] > self.instances[1] {
            p.push(format!(
                "instances range {:?} must satisfy 1 <= min <= max",
                self.instances
            ));
        }
        if self.shapes.is_empty() {
            p.push("at least one shape family is required".into());
        }
        let min_side = (MIN_INSTANCE_PIXELS as f64).sqrt() / 2.0;
        if !(self.size[0] >= min_side && self.size[0] <= self.size[1] && self.size[1].is_finite()) {
            p.push(format!(
                "size range {:?} must satisfy {min_side} <= min <= max",
                self.size
            ));
        }
        if 2.0 * self.size[1] + 1.0 > self.height.min(self.width) as f64 {
            p.push(format!("size range {:?} does not fit the image", self.size));
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            p.push(format!("overlap_fraction {} is outside [0, 1]", self.overlap_fraction));
        }
        let t = &self.texture;
        let amplitudes = [t.noise_amplitude, t.grain, t.shading, t.object_noise];
        if amplitudes.iter().any(|v| !v.is_finite() || *v < 0.0) || t.noise_cell == 0 {
            p.push("texture amplitudes must be finite and non-negative, noise_cell positive".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneInstance {
    pub instance_id: InstanceId,
    pub shape: ShapeFamily,
    /// Visible region after occlusion.
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub instances: Vec<SceneInstance>,
}

fn split_code(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Test => 1,
    }
}

/// Scene `index` of `split`; a pure function of its arguments.
pub fn generate_scene(spec: &SceneSpec, split: Split, index: usize) -> Result<Scene> {
    spec.validate()?;
    let seed = derive_seed(spec.seed, split_code(split), index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);

    let wanted = rng.gen_range(spec.instances[0]..=spec.instances[1]);
    let mut shapes: Vec<(ShapeFamily, Mask)> = Vec::new();
    let mut placed = 0usize;
    while placed < wanted {
        let family = spec.shapes[rng.gen_range(0..spec.shapes.len())];
        let ry = rng.gen_range(spec.size[0]..=spec.size[1]);
        let rx = rng.gen_range(spec.size[0]..=spec.size[1]);
        let adjacent = !shapes.is_empty() && rng.gen_bool(spec.overlap_fraction);
        let corner = rng.gen_range(0..4u8);
        let mut accepted = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let (cy, cx) = if adjacent {
                let anchor = &shapes[rng.gen_range(0..shapes.len())].1;
                let (ay, ax) = centroid(anchor);
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let reach = rng.gen_range(0.6..1.0) * (ry.max(rx) + spec.size[1]);
                (ay + reach * angle.sin(), ax + reach * angle.cos())
            } else {
                (
                    rng.gen_range(ry..(h as f64 - 1.0 - ry).max(ry + 1e-9)),
                    rng.gen_range(rx..(w as f64 - 1.0 - rx).max(rx + 1e-9)),
                )
            };
            let mask = rasterize(family, cy, cx, ry, rx, corner, h, w);
            if mask.count() < MIN_INSTANCE_PIXELS {
                continue;
            }
            let collides = shapes.iter().any(|(_, m)| m.intersection_count(&mask) > 0);
            if !adjacent && collides {
                continue;
            }
            let keeps_visibility = visible_masks(&shapes, Some(&mask))
                .iter()
                .all(|m| m.count() >= MIN_INSTANCE_PIXELS);
            if keeps_visibility {
                accepted = Some(mask);
                break;
            }
        }
        match accepted {
            Some(mask) => shapes.push((family, mask)),
            None if shapes.is_empty() => continue,
            None => {}
        }
        placed += 1;
    }

    let visible = visible_masks(&shapes, None);
    let image = render(spec, &mut rng, &shapes, &visible);
    let instances = shapes
        .iter()
        .zip(visible)
        .enumerate()
        .map(|(i, ((shape, _), mask))| SceneInstance {
            instance_id: i as InstanceId + 1,
            shape: *shape,
            mask,
        })
        .collect();
    Ok(Scene { image, instances })
}

fn centroid(mask: &Mask) -> (f64, f64) {
    let px = mask.pixels();
    let n = px.len().max(1) as f64;
    let (sy, sx) = px
        .iter()
        .fold((0.0, 0.0), |(a, b), &(y, x)| (a + y as f64, b + x as f64));
    (sy / n, sx / n)
}

#[allow(clippy::too_many_arguments)]
fn rasterize(family: ShapeFamily, cy: f64, cx: f64, ry: f64, rx: f64, corner: u8, h: usize, w: usize) -> Mask {
    Grid::from_fn(h, w, |y, x| {
        let dy = (y as f64 - cy) / ry;
        let dx = (x as f64 - cx) / rx;
        match family {
            ShapeFamily::Ellipse => dy * dy + dx * dx <= 1.0,
            ShapeFamily::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            ShapeFamily::LShape => {
                let inside = dy.abs() <= 1.0 && dx.abs() <= 1.0;
                let (sy, sx) = match corner {
                    0 => (-1.0, -1.0),
                    1 => (-1.0, 1.0),
                    2 => (1.0, -1.0),
                    _ => (1.0, 1.0),
                };
                let notch = dy * sy > 0.0 && dx * sx > 0.0;
                inside && !notch
            }
        }
    })
}

/// Visible part of each shape, optionally with one more shape on top.
fn visible_masks(shapes: &[(ShapeFamily, Mask)], top: Option<&Mask>) -> Vec<Mask> {
    let mut covered = top.cloned();
    let mut out = vec![Mask::empty(0, 0); shapes.len()];
    for (i, (_, m)) in shapes.iter().enumerate().rev() {
        let vis = match &covered {
            Some(c) => Grid::from_fn(m.height(), m.width(), |y, x| *m.get(y, x) && !*c.get(y, x)),
            None => m.clone(),
        };
        covered = Some(match covered {
            Some(c) => Grid::from_fn(m.height(), m.width(), |y, x| *c.get(y, x) || *m.get(y, x)),
            None => m.clone(),
        });
        out[i] = vis;
    }
    out
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(1.0)) * 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Grid<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Grid::from_fn(h, w, |y, x| {
        let fy = y as f64 / cell as f64;
        let fx = x as f64 / cell as f64;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let (ty, tx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
        let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
        let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
        let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

fn render(spec: &SceneSpec, rng: &mut ChaCha8Rng, shapes: &[(ShapeFamily, Mask)], visible: &[Mask]) -> RgbImage {
    let (h, w) = (spec.height, spec.width);
    let t = &spec.texture;
    let background = match spec.palette {
        Palette::Vivid => hsv(
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..0.3),
            rng.gen_range(0.55..0.9),
        ),
        Palette::Muted => hsv(
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.1..0.35),
            rng.gen_range(0.4..0.65),
        ),
    };
    let colours: Vec<[f64; 3]> = shapes
        .iter()
        .map(|_| match spec.palette {
            Palette::Vivid => hsv(
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.8..1.0),
                rng.gen_range(0.55..0.9),
            ),
            Palette::Muted => {
                let tint = hsv(
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.5..0.9),
                    rng.gen_range(0.3..0.95),
                );
                let mix = rng.gen_range(0.6..0.9);
                [0, 1, 2].map(|c| background[c] * (1.0 - mix) + tint[c] * mix)
            }
        })
        .collect();
    let noise: Vec<Grid<f64>> = (0..3).map(|_| value_noise(rng, h, w, t.noise_cell)).collect();
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (sa, ca) = angle.sin_cos();
    let mut owner = vec![usize::MAX; h * w];
    for (i, m) in visible.iter().enumerate() {
        for (y, x) in m.pixels() {
            owner[y * w + x] = i;
        }
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let u = ((y as f64 / h as f64 - 0.5) * sa + (x as f64 / w as f64 - 0.5) * ca) * 2.0;
            let light = t.shading * u;
            let o = owner[y * w + x];
            let (base, noise_gain) = if o == usize::MAX {
                (background, 1.0)
            } else {
                (colours[o], t.object_noise)
            };
            for c in 0..3 {
                let n =
                    t.noise_amplitude * noise_gain * (0.7 * *noise[c].get(y, x) + 0.3 * *noise[(c + 1) % 3].get(y, x));
                let grain = t.grain * rng.gen_range(-1.0..1.0);
                let v = base[c] + light + n + grain;
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage::new(h, w, data).expect("render shape")
}
