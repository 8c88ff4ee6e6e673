//! Named parameter store and its on-disk format.
//!
//! File layout:
//!
//! ```text
//! SCHANGER-CKPT\n
//! <manifest byte length>\n
//! <JSON manifest>
//! <little-endian f32 payload>
//! ```
//!
//! The manifest lists each tensor's name, dtype, shape, kind, byte offset and
//! length into the payload, and a CRC-32 of its bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &str = "SCHANGER-CKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    Bias,
    NormAffine,
    /// Batch-norm running statistics: stored and averaged, never optimised.
    RunningStat,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::RunningStat
    }

    /// Only conv weights receive weight decay.
    pub fn decays(self) -> bool {
        self == ParamKind::ConvWeight
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub kind: ParamKind,
    pub value: Tensor<f32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    pub variant: String,
    pub mode: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Metadata,
    pub tensors: BTreeMap<String, Param>,
}

impl Checkpoint {
    pub fn new(meta: Metadata) -> Self {
        Checkpoint {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn get(&self, path: &str) -> Result<&Param> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::MissingPaths(vec![path.to_string()]))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Param> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| Error::MissingPaths(vec![path.to_string()]))
    }

    pub fn insert(&mut self, path: impl Into<String>, kind: ParamKind, value: Tensor<f32>) {
        self.tensors.insert(path.into(), Param { kind, value });
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn trainable_paths(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(_, p)| p.kind.trainable())
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Scalar elements across trainable tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors
            .values()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.numel())
            .sum()
    }

    /// Errors with every path of `required` that is absent here.
    pub fn require<'a>(&self, required: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let missing: Vec<String> = required
            .into_iter()
            .filter(|p| !self.contains(p))
            .map(str::to_string)
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingPaths(missing))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|p| p.value.all_finite())
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    metadata: Metadata,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: [usize; 4],
    kind: ParamKind,
    offset: usize,
    len: usize,
    crc32: u32,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(ckpt.tensors.len());
    for (name, p) in &ckpt.tensors {
        let offset = payload.len();
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let bytes = &payload[offset..];
        tensors.push(Entry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: p.value.shape().dims(),
            kind: p.kind,
            offset,
            len: bytes.len(),
            crc32: crc32fast::hash(bytes),
        });
    }
    let manifest = serde_json::to_vec(&Manifest {
        format_version: FORMAT_VERSION,
        metadata: ckpt.meta.clone(),
        tensors,
    })?;
    let mut out = format!("{MAGIC}\n{}\n", manifest.len()).into_bytes();
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn take_line<'a>(bytes: &'a [u8], what: &str) -> Result<(&'a str, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint(format!("missing {what}")))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Checkpoint(format!("unreadable {what}")))?;
    Ok((line, &bytes[nl + 1..]))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (magic, rest) = take_line(bytes, "header")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (len, rest) = take_line(rest, "manifest length")?;
    let len: usize = len
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad manifest length `{len}`")))?;
    if rest.len() < len {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let (manifest, payload) = rest.split_at(len);
    let manifest: Manifest =
        serde_json::from_slice(manifest).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let mut ckpt = Checkpoint::new(manifest.metadata);
    let mut expected_end = 0;
    for e in manifest.tensors {
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let shape = Shape::from_dims(&e.shape)?;
        if e.len != shape.numel() * 4 || e.offset != expected_end {
            return Err(Error::Checkpoint(format!("{}: inconsistent extent", e.name)));
        }
        let end = e.offset + e.len;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("truncated payload at `{}`", e.name)));
        }
        let bytes = &payload[e.offset..end];
        if crc32fast::hash(bytes) != e.crc32 {
            return Err(Error::Checksum(e.name));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if ckpt.contains(&e.name) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{}`", e.name)));
        }
        ckpt.insert(e.name, e.kind, Tensor::from_vec(shape, data)?);
        expected_end = end;
    }
    if expected_end != payload.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(ckpt)
}

/// Writes via a temporary sibling file and an atomic rename.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
