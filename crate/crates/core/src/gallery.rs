//! Embedding galleries: the image database a session ranks against.
//!
//! Two on-disk formats are supported. The binary format (little-endian) is
//!
//! ```text
//! magic  "CIRV"           4 bytes
//! version u32 = 1
//! d       u32
//! N       u64
//! N x { u16 byte length, UTF-8 image id }
//! N x d f32, row-major in id order
//! optional: u8 flag (0/1), then if 1, N x { u16 byte length, UTF-8 uri }
//! ```
//!
//! and the JSONL format holds one `{"image_id", "vector", "uri"?, "caption"?}`
//! object per line. Vectors are normalized to unit length on load.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CIRV";
pub const VERSION: u32 = 1;

/// Tolerance on `|‖v‖₂ − 1|` for a vector to count as unit-normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

/// Vectors already this close to unit length are left untouched on load so
/// that reloading a written gallery is bit-exact.
const RENORMALIZE_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 1,
                actual: 0,
            });
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("<vector>".into()));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt()
    }

    /// Dot product accumulated in f64.
    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOLERANCE
    }

    pub fn scaled(&self, factor: f32) -> EmbeddingVector {
        EmbeddingVector(self.0.iter().map(|x| x * factor).collect())
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Scales `v` to unit L2 norm. The norm is computed in f64.
pub fn normalize(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    normalize_f64(&v.0.iter().map(|&x| f64::from(x)).collect::<Vec<_>>())
}

pub(crate) fn normalize_f64(values: &[f64]) -> Result<EmbeddingVector> {
    let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(EmbeddingVector(
        values.iter().map(|x| (x / norm) as f32).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub image_id: String,
    pub vector: EmbeddingVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uri: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

impl GalleryEntry {
    pub fn new(image_id: impl Into<String>, vector: EmbeddingVector) -> Self {
        Self {
            image_id: image_id.into(),
            vector,
            uri: None,
            caption: None,
        }
    }

    pub fn with_uri(mut self, uri: impl Into<String>) -> Self {
        self.uri = Some(uri.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GalleryFormat {
    Binary,
    Jsonl,
}

impl GalleryFormat {
    /// `.jsonl`/`.json` select JSONL, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => GalleryFormat::Jsonl,
            _ => GalleryFormat::Binary,
        }
    }
}

/// An immutable, validated image database with unit-norm vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGallery {
    gallery_id: String,
    dim: usize,
    entries: Vec<GalleryEntry>,
    subset_tag: Option<String>,
    index: HashMap<String, usize>,
}

impl EmbeddingGallery {
    /// Validates and normalizes `entries`.
    pub fn new(gallery_id: impl Into<String>, entries: Vec<GalleryEntry>) -> Result<Self> {
        let first = entries.first().ok_or(Error::EmptyGallery)?;
        let dim = first.vector.dim();
        let mut index = HashMap::with_capacity(entries.len());
        let mut normalized = Vec::with_capacity(entries.len());
        for (i, mut entry) in entries.into_iter().enumerate() {
            if entry.image_id.is_empty() {
                return Err(Error::Format(format!("entry {i} has an empty image id")));
            }
            if entry.vector.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: entry.vector.dim(),
                });
            }
            if entry.vector.0.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(entry.image_id));
            }
            if (entry.vector.norm() - 1.0).abs() > RENORMALIZE_THRESHOLD {
                entry.vector = normalize(&entry.vector)?;
            }
            if index.insert(entry.image_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(entry.image_id));
            }
            normalized.push(entry);
        }
        Ok(Self {
            gallery_id: gallery_id.into(),
            dim,
            entries: normalized,
            subset_tag: None,
            index,
        })
    }

    pub fn with_id(mut self, gallery_id: impl Into<String>) -> Self {
        self.gallery_id = gallery_id.into();
        self
    }

    pub fn with_subset_tag(mut self, tag: impl Into<String>) -> Self {
        self.subset_tag = Some(tag.into());
        self
    }

    pub fn gallery_id(&self) -> &str {
        &self.gallery_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn subset_tag(&self) -> Option<&str> {
        self.subset_tag.as_deref()
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn get(&self, image_id: &str) -> Option<&GalleryEntry> {
        self.index.get(image_id).map(|&i| &self.entries[i])
    }

    pub fn entry(&self, image_id: &str) -> Result<&GalleryEntry> {
        self.get(image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.index.contains_key(image_id)
    }
}

/// Loads a gallery; the gallery id is the file stem.
pub fn load_gallery(path: &Path, format: GalleryFormat) -> Result<EmbeddingGallery> {
    let gallery_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("gallery")
        .to_string();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let entries = match format {
        GalleryFormat::Binary => read_binary(&mut reader).map_err(|e| match e {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::UnexpectedEof => {
                Error::Format("unexpected end of file".into())
            }
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })?,
        GalleryFormat::Jsonl => read_jsonl(reader, path)?,
    };
    EmbeddingGallery::new(gallery_id, entries)
}

pub fn write_gallery(gallery: &EmbeddingGallery, path: &Path, format: GalleryFormat) -> Result<()> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    match format {
        GalleryFormat::Binary => {
            let bytes = encode_binary(gallery)?;
            w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        }
        GalleryFormat::Jsonl => {
            for entry in gallery.entries() {
                serde_json::to_writer(&mut w, entry)?;
                w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Serializes a gallery in the binary format.
///
/// The URI table is written with flag 1 when any entry carries a URI; entries
/// without one get an empty string, which reads back as `None`.
pub fn encode_binary(gallery: &EmbeddingGallery) -> Result<Vec<u8>> {
    let n = gallery.len();
    let d = gallery.dim();
    let mut out = Vec::with_capacity(20 + n * (4 * d + 16));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(d).map_err(|_| Error::Format("d exceeds u32".into()))?.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for entry in gallery.entries() {
        put_str(&mut out, &entry.image_id)?;
    }
    for entry in gallery.entries() {
        for x in entry.vector.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let has_uris = gallery.entries().iter().any(|e| e.uri.is_some());
    out.push(u8::from(has_uris));
    if has_uris {
        for entry in gallery.entries() {
            put_str(&mut out, entry.uri.as_deref().unwrap_or(""))?;
        }
    }
    Ok(out)
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::Format(format!("string of {} bytes exceeds u16 length prefix", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io("<gallery>", e))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u16(r)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid UTF-8 in string record".into()))
}

fn read_binary<R: Read>(r: &mut R) -> Result<Vec<GalleryEntry>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let d = read_u32(r)? as usize;
    let mut nb = [0u8; 8];
    read_exact(r, &mut nb)?;
    let n = usize::try_from(u64::from_le_bytes(nb))
        .map_err(|_| Error::Format("N exceeds address space".into()))?;
    if d == 0 {
        return Err(Error::Format("d must be positive".into()));
    }
    if n == 0 {
        return Err(Error::EmptyGallery);
    }
    let mut ids = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        ids.push(read_str(r)?);
    }
    let mut row = vec![0u8; 4 * d];
    let mut entries = Vec::with_capacity(ids.len());
    for id in ids {
        read_exact(r, &mut row)?;
        let values: Vec<f32> = row
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(id));
        }
        entries.push(GalleryEntry::new(id, EmbeddingVector(values)));
    }
    let mut flag = [0u8; 1];
    match r.read(&mut flag).map_err(|e| Error::io("<gallery>", e))? {
        0 => {}
        _ => match flag[0] {
            0 => {}
            1 => {
                for entry in &mut entries {
                    let uri = read_str(r)?;
                    entry.uri = (!uri.is_empty()).then_some(uri);
                }
            }
            other => return Err(Error::Format(format!("bad URI table flag {other}"))),
        },
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io("<gallery>", e))? != 0 {
        return Err(Error::Format("trailing bytes after gallery".into()));
    }
    Ok(entries)
}

fn read_jsonl<R: BufRead>(reader: R, path: &Path) -> Result<Vec<GalleryEntry>> {
    let mut entries = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: GalleryEntry = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        entries.push(entry);
    }
    Ok(entries)
}
