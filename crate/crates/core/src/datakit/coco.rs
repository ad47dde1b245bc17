//! Converter from COCO-style instance annotations.
//!
//! Supports polygon segmentations and uncompressed (column-major) RLE.
//! Source images must be 8-bit RGB PNG files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::dataset::{
    decode_png, encode_png, AnnotationRecord, DatasetFiles, InstanceAnnotation, Manifest, WriteOutcome,
};
use super::Split;
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::maskops::InstanceId;

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    height: usize,
    width: usize,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    #[serde(default)]
    category_id: Option<u64>,
    segmentation: Segmentation,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { size: [usize; 2], counts: Counts },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Counts {
    Raw(Vec<u32>),
    Compressed(String),
}

/// Rasterizes polygons by the even-odd rule at pixel centres.
fn rasterize_polygons(polygons: &[Vec<f64>], height: usize, width: usize) -> Mask {
    Grid::from_fn(height, width, |y, x| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        polygons.iter().any(|poly| {
            let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|c| (c[0], c[1])).collect();
            let mut inside = false;
            for i in 0..pts.len() {
                let (x1, y1) = pts[i];
                let (x2, y2) = pts[(i + 1) % pts.len()];
                if (y1 > py) != (y2 > py) && px < x1 + (py - y1) * (x2 - x1) / (y2 - y1) {
                    inside = !inside;
                }
            }
            inside
        })
    })
}

/// Decodes column-major counts into a row-major mask.
fn decode_column_major(counts: &[u32], height: usize, width: usize) -> Option<Mask> {
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    if total != (height * width) as u64 {
        return None;
    }
    let mut mask = Mask::empty(height, width);
    let mut idx = 0usize;
    let mut value = false;
    for &c in counts {
        for _ in 0..c {
            if value {
                mask.set(idx % height, idx / height, true);
            }
            idx += 1;
        }
        value = !value;
    }
    Some(mask)
}

/// Converts `annotations` (a COCO JSON file) with images under `image_dir`
/// into the native layout at `out_dir`, assigning every image to `split`.
pub fn convert_coco(
    annotations: &Path,
    image_dir: &Path,
    split: Split,
    out_dir: &Path,
) -> Result<(Manifest, WriteOutcome)> {
    let text = fs::read_to_string(annotations).map_err(|e| Error::io(annotations, e))?;
    let coco: CocoFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: annotations.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    let categories: BTreeMap<u64, String> = coco.categories.into_iter().map(|c| (c.id, c.name)).collect();
    let mut per_image: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
    for a in &coco.annotations {
        per_image.entry(a.image_id).or_default().push(a);
    }
    let mut records = Vec::new();
    let mut images = BTreeMap::new();
    for img in &coco.images {
        let src = image_dir.join(&img.file_name);
        let bytes = fs::read(&src).map_err(|e| Error::io(&src, e))?;
        let image = decode_png(&bytes, &src)?;
        if image.height() != img.height || image.width() != img.width {
            return Err(Error::Structural(format!(
                "{}: file is {}x{}, annotations say {}x{}",
                src.display(),
                image.height(),
                image.width(),
                img.height,
                img.width
            )));
        }
        let image_id = format!("{}_{:08}", split.tag(), img.id);
        let mut instances = Vec::new();
        for (k, ann) in per_image.get(&img.id).into_iter().flatten().enumerate() {
            let mask = match &ann.segmentation {
                Segmentation::Polygons(p) => rasterize_polygons(p, img.height, img.width),
                Segmentation::Rle {
                    size,
                    counts: Counts::Raw(c),
                } => {
                    if *size != [img.height, img.width] {
                        return Err(Error::Structural(format!(
                            "image {}: RLE size {size:?} disagrees",
                            img.id
                        )));
                    }
                    decode_column_major(c, img.height, img.width)
                        .ok_or_else(|| Error::Structural(format!("image {}: RLE does not cover the image", img.id)))?
                }
                Segmentation::Rle {
                    counts: Counts::Compressed(s),
                    ..
                } => {
                    return Err(Error::Structural(format!(
                        "image {}: compressed RLE string ({} bytes) is not supported; export uncompressed counts",
                        img.id,
                        s.len()
                    )))
                }
            };
            if !mask.any() {
                continue;
            }
            let category = ann.category_id.and_then(|c| categories.get(&c).cloned());
            instances.push(InstanceAnnotation::from_mask(k as InstanceId + 1, category, &mask));
        }
        let file = format!("images/{image_id}.png");
        images.insert(file.clone(), encode_png(&image)?);
        records.push(AnnotationRecord {
            image_id,
            split: Some(split),
            file: Some(file),
            height: img.height,
            width: img.width,
            instances,
        });
    }
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let files = DatasetFiles::from_records("coco", None, &records, images);
    let outcome = files.write(out_dir)?;
    Ok((files.manifest, outcome))
}
