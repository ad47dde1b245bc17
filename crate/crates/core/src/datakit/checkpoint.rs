//! Binary checkpoint container.
//!
//! Layout (little endian): magic, schema version, scalar width, kind,
//! architecture hash, base fingerprint, rank, metadata JSON, named matrix
//! blobs, then a SHA-256 of everything before it. Strings are `u32` length
//! prefixed.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::segmenter::optim::AdamState;
use crate::segmenter::tensor::Matrix;
use crate::segmenter::ToySegmenter;

pub const MAGIC: &[u8; 8] = b"PTADAPT\0";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Adapter factors plus optional optimizer state.
    Adapters,
    /// Frozen base weights.
    Base,
}

impl CheckpointKind {
    fn code(self) -> u8 {
        match self {
            CheckpointKind::Adapters => 1,
            CheckpointKind::Base => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(CheckpointKind::Adapters),
            2 => Some(CheckpointKind::Base),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub kind: CheckpointKind,
    pub architecture_hash: String,
    pub base_fingerprint: String,
    pub rank: u32,
    pub metadata: serde_json::Value,
    pub blobs: Vec<(String, Matrix<T>)>,
}

const ADAM_FIRST: &str = "adam.first.";
const ADAM_SECOND: &str = "adam.second.";

impl<T: Scalar> Checkpoint<T> {
    /// Adapter factors and, if given, the optimizer moments.
    pub fn adapters(
        model: &ToySegmenter<T>,
        optimizer: Option<&AdamState<T>>,
        mut metadata: serde_json::Value,
    ) -> Self {
        let mut blobs = Vec::new();
        for (i, ad) in model.adapters().iter().enumerate() {
            blobs.push((model.adapter_name(i, 'a'), ad.a.clone()));
            blobs.push((model.adapter_name(i, 'b'), ad.b.clone()));
        }
        if let Some(state) = optimizer {
            for (i, m) in state.first.iter().enumerate() {
                blobs.push((format!("{ADAM_FIRST}{i}"), m.clone()));
            }
            for (i, m) in state.second.iter().enumerate() {
                blobs.push((format!("{ADAM_SECOND}{i}"), m.clone()));
            }
            if let serde_json::Value::Object(map) = &mut metadata {
                map.insert("adam_step".into(), state.step.into());
            }
        }
        Self {
            kind: CheckpointKind::Adapters,
            architecture_hash: model.architecture_hash(),
            base_fingerprint: model.base_fingerprint(),
            rank: model.config().lora_rank as u32,
            metadata,
            blobs,
        }
    }

    pub fn base(model: &ToySegmenter<T>, metadata: serde_json::Value) -> Self {
        Self {
            kind: CheckpointKind::Base,
            architecture_hash: model.architecture_hash(),
            base_fingerprint: model.base_fingerprint(),
            rank: model.config().lora_rank as u32,
            metadata,
            blobs: model.base_weights().map(|(n, m)| (n.to_string(), m.clone())).collect(),
        }
    }

    fn check_kind(&self, want: CheckpointKind) -> Result<()> {
        if self.kind != want {
            return Err(Error::Compatibility(format!(
                "expected a {want:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    fn check_architecture(&self, model: &ToySegmenter<T>) -> Result<()> {
        let rank = model.config().lora_rank as u32;
        if self.rank != rank {
            return Err(Error::Compatibility(format!(
                "checkpoint rank {} does not match model rank {rank} (checkpoint architecture {}, model architecture {})",
                self.rank,
                self.architecture_hash,
                model.architecture_hash()
            )));
        }
        let arch = model.architecture_hash();
        if self.architecture_hash != arch {
            return Err(Error::Compatibility(format!(
                "architecture hash mismatch: checkpoint {} vs model {arch}",
                self.architecture_hash
            )));
        }
        Ok(())
    }

    /// Installs adapters (and returns optimizer state) after checking the
    /// architecture and base. Nothing is modified on failure.
    pub fn apply_adapters(&self, model: &mut ToySegmenter<T>) -> Result<Option<AdamState<T>>> {
        self.check_kind(CheckpointKind::Adapters)?;
        self.check_architecture(model)?;
        let fp = model.base_fingerprint();
        if self.base_fingerprint != fp {
            return Err(Error::Compatibility(format!(
                "base weights differ: checkpoint base {} vs model base {fp}",
                self.base_fingerprint
            )));
        }
        let n = model.adapters().len();
        let mut factors = Vec::with_capacity(2 * n);
        for i in 0..n {
            for (factor, shape) in [
                ('a', model.adapters()[i].a.shape()),
                ('b', model.adapters()[i].b.shape()),
            ] {
                let name = model.adapter_name(i, factor);
                let m = self.blob(&name)?;
                if m.shape() != shape {
                    return Err(Error::Compatibility(format!(
                        "{name}: shape {:?}, expected {shape:?}",
                        m.shape()
                    )));
                }
                factors.push(m.clone());
            }
        }
        let first: Vec<Matrix<T>> = (0..2 * n)
            .filter_map(|i| self.find(&format!("{ADAM_FIRST}{i}")).cloned())
            .collect();
        let second: Vec<Matrix<T>> = (0..2 * n)
            .filter_map(|i| self.find(&format!("{ADAM_SECOND}{i}")).cloned())
            .collect();
        let state = match (first.len(), second.len()) {
            (0, 0) => None,
            (a, b) if a == 2 * n && b == 2 * n => {
                let step = self
                    .metadata
                    .get("adam_step")
                    .and_then(|v| v.as_u64())
                    .ok_or_else(|| Error::Compatibility("optimizer state without adam_step".into()))?;
                if first
                    .iter()
                    .chain(&second)
                    .zip(factors.iter().chain(&factors))
                    .any(|(m, f)| m.shape() != f.shape())
                {
                    return Err(Error::Compatibility(
                        "optimizer moments do not match adapter shapes".into(),
                    ));
                }
                Some(AdamState { step, first, second })
            }
            _ => return Err(Error::Compatibility("incomplete optimizer state".into())),
        };
        let mut it = factors.into_iter();
        for ad in model.adapters_mut() {
            ad.a = it.next().expect("factor count");
            ad.b = it.next().expect("factor count");
        }
        Ok(state)
    }

    /// Replaces the model's base weights.
    pub fn apply_base(&self, model: &mut ToySegmenter<T>) -> Result<()> {
        self.check_kind(CheckpointKind::Base)?;
        self.check_architecture(model)?;
        model.set_base_weights(self.blobs.clone())?;
        if model.base_fingerprint() != self.base_fingerprint {
            return Err(Error::Compatibility(
                "base fingerprint does not match stored weights".into(),
            ));
        }
        Ok(())
    }

    fn find(&self, name: &str) -> Option<&Matrix<T>> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    fn blob(&self, name: &str) -> Result<&Matrix<T>> {
        self.find(name)
            .ok_or_else(|| Error::Compatibility(format!("checkpoint has no tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_SCHEMA_VERSION.to_le_bytes());
        out.push(T::WIDTH as u8);
        out.push(self.kind.code());
        put_str(&mut out, &self.architecture_hash);
        put_str(&mut out, &self.base_fingerprint);
        out.extend_from_slice(&self.rank.to_le_bytes());
        put_str(
            &mut out,
            &serde_json::to_string(&self.metadata).expect("metadata serializes"),
        );
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, m) in &self.blobs {
            put_str(&mut out, name);
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for &v in m.as_slice() {
                v.write_le(&mut out);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::corrupt(path, reason.to_string());
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic or too short)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let mut r = Reader {
            data: body,
            pos: MAGIC.len(),
        };
        let bad = || corrupt("malformed checkpoint body");
        let version = r.u32().ok_or_else(bad)?;
        if version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Compatibility(format!(
                "checkpoint schema {version} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})"
            )));
        }
        let width = r.u8().ok_or_else(bad)? as usize;
        if width != T::WIDTH {
            return Err(Error::Compatibility(format!(
                "checkpoint stores {}-byte scalars, model uses {}-byte {}",
                width,
                T::WIDTH,
                T::TAG
            )));
        }
        let kind = r.u8().and_then(CheckpointKind::from_code).ok_or_else(bad)?;
        let architecture_hash = r.string().ok_or_else(bad)?;
        let base_fingerprint = r.string().ok_or_else(bad)?;
        let rank = r.u32().ok_or_else(bad)?;
        let metadata = serde_json::from_str(&r.string().ok_or_else(bad)?).map_err(|e| corrupt(&e.to_string()))?;
        let n = r.u32().ok_or_else(bad)? as usize;
        let mut blobs = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.string().ok_or_else(bad)?;
            let rows = r.u32().ok_or_else(bad)? as usize;
            let cols = r.u32().ok_or_else(bad)? as usize;
            let len = rows.checked_mul(cols).ok_or_else(bad)?;
            let raw = r.take(len.checked_mul(width).ok_or_else(bad)?).ok_or_else(bad)?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            blobs.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after blobs"));
        }
        Ok(Self {
            kind,
            architecture_hash,
            base_fingerprint,
            rank,
            metadata,
            blobs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.data.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}
