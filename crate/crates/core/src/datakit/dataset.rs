//! On-disk dataset layout: `images/<id>.png`, `annotations.jsonl` and a
//! checksummed `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::rle::{self, Rle};
use super::synth::{generate_scene, SceneSpec};
use super::Split;
use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::image::RgbImage;
use crate::maskops::{BoundingBox, InstanceId};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const COORDINATES: &str =
    "row=y, col=x, origin top-left; masks row-major RLE starting with zeros; boxes inclusive [x_min, y_min, x_max, y_max]";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

/// One instance in an annotation or prediction record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceAnnotation {
    pub instance_id: InstanceId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rle: Option<Rle>,
    /// Row-major per-pixel foreground probabilities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
}

impl InstanceAnnotation {
    pub fn from_mask(instance_id: InstanceId, category: Option<String>, mask: &Mask) -> Self {
        Self {
            instance_id,
            category,
            rle: Some(rle::encode(mask)),
            probability: None,
            bbox: None,
        }
    }

    pub fn mask(&self, height: usize, width: usize) -> Result<Option<Mask>> {
        self.rle
            .as_ref()
            .map(|r| {
                if r.size != [height, width] {
                    return Err(Error::Structural(format!(
                        "instance {} mask is {:?}, record is {height}x{width}",
                        self.instance_id, r.size
                    )));
                }
                rle::decode(r)
            })
            .transpose()
    }
}

/// One line of an annotations file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    pub height: usize,
    pub width: usize,
    pub instances: Vec<InstanceAnnotation>,
}

impl AnnotationRecord {
    fn check(&self) -> std::result::Result<(), String> {
        let n = self.height * self.width;
        for inst in &self.instances {
            if let Some(r) = &inst.rle {
                let total: u64 = r.counts.iter().map(|&c| c as u64).sum();
                if r.size != [self.height, self.width] || total != n as u64 {
                    return Err(format!(
                        "instance {} RLE does not cover {}x{}",
                        inst.instance_id, self.height, self.width
                    ));
                }
            }
            if let Some(p) = &inst.probability {
                if p.len() != n {
                    return Err(format!(
                        "instance {} has {} probabilities, expected {n}",
                        inst.instance_id,
                        p.len()
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Reads a line-delimited annotation file, reporting the first bad line.
pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text, path)
}

pub fn annotations_to_string(records: &[AnnotationRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    fs::write(path, annotations_to_string(records)).map_err(|e| Error::io(path, e))
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Structural(format!("png header: {e}")))?;
        writer
            .write_image_data(image.as_bytes())
            .map_err(|e| Error::Structural(format!("png data: {e}")))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let corrupt = |reason: String| Error::corrupt(path, reason);
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| corrupt(e.to_string()))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| corrupt("image too large".into()))?
    ];
    let info = reader.next_frame(&mut buf).map_err(|e| corrupt(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Structural(format!(
            "{}: expected 8-bit RGB, found {:?} {:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    RgbImage::new(info.height as usize, info.width as usize, buf)
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    /// `synthetic` or the name of the converter that produced the data.
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SceneSpec>,
    pub counts: SplitCounts,
    pub coordinates: String,
    /// SHA-256 of every file, keyed by path relative to the dataset root.
    pub checksums: BTreeMap<String, String>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A full dataset held in memory, ready to be written.
#[derive(Clone, Debug)]
pub struct DatasetFiles {
    pub manifest: Manifest,
    pub files: BTreeMap<String, Vec<u8>>,
}

impl DatasetFiles {
    pub fn from_records(
        source: &str,
        spec: Option<SceneSpec>,
        records: &[AnnotationRecord],
        images: BTreeMap<String, Vec<u8>>,
    ) -> Self {
        let mut files = images;
        files.insert(
            ANNOTATIONS_FILE.to_string(),
            annotations_to_string(records).into_bytes(),
        );
        let count = |s| records.iter().filter(|r| r.split == Some(s)).count();
        let manifest = Manifest {
            schema_version: DATASET_SCHEMA_VERSION,
            source: source.to_string(),
            spec,
            counts: SplitCounts {
                train: count(Split::Train),
                test: count(Split::Test),
            },
            coordinates: COORDINATES.to_string(),
            checksums: files.iter().map(|(k, v)| (k.clone(), sha256_hex(v))).collect(),
        };
        Self { manifest, files }
    }

    /// Writes every file. An existing identical dataset is left alone; an
    /// existing different one is an error.
    pub fn write(&self, root: &Path) -> Result<WriteOutcome> {
        let manifest_path = root.join(MANIFEST_FILE);
        let json = self.manifest.to_json();
        if manifest_path.exists() {
            let existing = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
            if existing == json {
                verify_checksums(root, &self.manifest)?;
                return Ok(WriteOutcome::Unchanged);
            }
            return Err(Error::Compatibility(format!(
                "{} already holds a different dataset",
                root.display()
            )));
        }
        for (rel, bytes) in &self.files {
            let path = root.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(WriteOutcome::Written)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WriteOutcome {
    Written,
    Unchanged,
}

fn image_name(split: Split, index: usize) -> String {
    format!("{}_{index:04}", split.tag())
}

/// Builds a synthetic dataset in memory.
pub fn synthesize(spec: &SceneSpec, n_train: usize, n_test: usize) -> Result<DatasetFiles> {
    spec.validate()?;
    let mut records = Vec::new();
    let mut images = BTreeMap::new();
    for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
        for i in 0..n {
            let scene = generate_scene(spec, split, i)?;
            let id = image_name(split, i);
            let file = format!("images/{id}.png");
            images.insert(file.clone(), encode_png(&scene.image)?);
            records.push(AnnotationRecord {
                image_id: id,
                split: Some(split),
                file: Some(file),
                height: spec.height,
                width: spec.width,
                instances: scene
                    .instances
                    .iter()
                    .map(|s| InstanceAnnotation::from_mask(s.instance_id, Some(s.shape.tag().into()), &s.mask))
                    .collect(),
            });
        }
    }
    Ok(DatasetFiles::from_records(
        "synthetic",
        Some(spec.clone()),
        &records,
        images,
    ))
}

/// Generates a synthetic dataset under `out_dir`.
pub fn generate_synthetic(
    spec: &SceneSpec,
    n_train: usize,
    n_test: usize,
    out_dir: &Path,
) -> Result<(Manifest, WriteOutcome)> {
    let files = synthesize(spec, n_train, n_test)?;
    let outcome = files.write(out_dir)?;
    Ok((files.manifest, outcome))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtInstance {
    pub instance_id: InstanceId,
    pub category: Option<String>,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub split: Split,
    pub image: RgbImage,
    pub instances: Vec<GtInstance>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    /// Sorted by image id.
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Builds an in-memory dataset without touching disk.
    pub fn from_files(files: &DatasetFiles) -> Result<Self> {
        let root = PathBuf::from("<memory>");
        let ann = files
            .files
            .get(ANNOTATIONS_FILE)
            .ok_or_else(|| Error::Structural("annotations missing".into()))?;
        let records = parse_records(
            std::str::from_utf8(ann).map_err(|e| Error::corrupt(&root, e.to_string()))?,
            &root,
        )?;
        let samples = build_samples(records, &root, |rel| {
            files
                .files
                .get(rel)
                .cloned()
                .ok_or_else(|| Error::Structural(format!("missing file {rel}")))
        })?;
        Ok(Self {
            root,
            manifest: files.manifest.clone(),
            samples,
        })
    }
}

fn parse_records(text: &str, path: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        rec.check().map_err(parse_err)?;
        out.push(rec);
    }
    Ok(out)
}

fn build_samples(
    records: Vec<AnnotationRecord>,
    root: &Path,
    mut read: impl FnMut(&str) -> Result<Vec<u8>>,
) -> Result<Vec<Sample>> {
    let mut samples = Vec::with_capacity(records.len());
    for rec in records {
        let file = rec
            .file
            .clone()
            .unwrap_or_else(|| format!("images/{}.png", rec.image_id));
        let image = decode_png(&read(&file)?, &root.join(&file))?;
        if image.height() != rec.height || image.width() != rec.width {
            return Err(Error::Structural(format!(
                "{}: image is {}x{}, annotation says {}x{}",
                rec.image_id,
                image.height(),
                image.width(),
                rec.height,
                rec.width
            )));
        }
        let mut instances = Vec::with_capacity(rec.instances.len());
        for inst in &rec.instances {
            let mask = inst.mask(rec.height, rec.width)?.ok_or_else(|| {
                Error::Structural(format!("{}: instance {} has no mask", rec.image_id, inst.instance_id))
            })?;
            instances.push(GtInstance {
                instance_id: inst.instance_id,
                category: inst.category.clone(),
                mask,
            });
        }
        samples.push(Sample {
            image_id: rec.image_id,
            split: rec.split.unwrap_or(Split::Train),
            image,
            instances,
        });
    }
    samples.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(samples)
}

fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Structural(format!("no {MANIFEST_FILE} in {}", root.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e.to_string()))?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::Compatibility(format!(
            "dataset schema {} is not supported (expected {DATASET_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    Ok(manifest)
}

/// Checks every file listed in the manifest.
pub fn verify_checksums(root: &Path, manifest: &Manifest) -> Result<()> {
    for (rel, want) in &manifest.checksums {
        let path = root.join(rel);
        if !path.exists() {
            return Err(Error::Structural(format!("missing file {}", path.display())));
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let got = sha256_hex(&bytes);
        if &got != want {
            return Err(Error::corrupt(
                &path,
                format!("checksum {got} does not match manifest {want}"),
            ));
        }
    }
    Ok(())
}

/// Loads a dataset after verifying every checksum.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    verify_checksums(root, &manifest)?;
    let ann_path = root.join(ANNOTATIONS_FILE);
    if !manifest.checksums.contains_key(ANNOTATIONS_FILE) {
        return Err(Error::corrupt(&ann_path, "annotations are not covered by the manifest"));
    }
    let records = read_annotations(&ann_path)?;
    let samples = build_samples(records, root, |rel| {
        if !manifest.checksums.contains_key(rel) {
            return Err(Error::corrupt(root.join(rel), "file is not covered by the manifest"));
        }
        let p = root.join(rel);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    })?;
    let dataset = Dataset {
        root: root.to_path_buf(),
        manifest,
        samples,
    };
    let counts = SplitCounts {
        train: dataset.split(Split::Train).len(),
        test: dataset.split(Split::Test).len(),
    };
    if counts != dataset.manifest.counts {
        return Err(Error::corrupt(
            root.join(MANIFEST_FILE),
            format!(
                "manifest counts {:?} disagree with annotations {:?}",
                dataset.manifest.counts, counts
            ),
        ));
    }
    Ok(dataset)
}
