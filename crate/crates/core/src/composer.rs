//! Composed-query providers.
//!
//! The CIR model is treated as a vector-valued oracle: given the current
//! reference image and a relative caption it returns a unit query vector of
//! the gallery's dimension. Three providers exist:
//!
//! * `remote` POSTs to an HTTP model wrapper (`/compose`),
//! * `replay` looks vectors up in a precomputed `(triplet_id, round)` table,
//! * `toy` mixes the image vector with a seeded pseudo-text direction and
//!   understands the oracle simulator's steering captions.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use base64::Engine as _;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gallery::{normalize, normalize_f64, EmbeddingGallery, EmbeddingVector};
use crate::http::{join_url, JsonClient, RetryPolicy};
use crate::simulator::OracleToken;

pub const MAX_CAPTION_CHARS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Caption(String);

impl Caption {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidCaption("caption is empty".into()));
        }
        let chars = text.chars().count();
        if chars > MAX_CAPTION_CHARS {
            return Err(Error::InvalidCaption(format!(
                "caption has {chars} characters, limit is {MAX_CAPTION_CHARS}"
            )));
        }
        Ok(Self(text))
    }

    /// Trims and truncates free-form model output into a caption.
    pub fn from_model_output(text: &str) -> Result<Self> {
        let trimmed: String = text.trim().chars().take(MAX_CAPTION_CHARS).collect();
        Self::new(trimmed.trim_end().to_string())
    }

    pub fn text(&self) -> &str {
        &self.0
    }

    pub fn language(&self) -> &'static str {
        "en"
    }
}

impl TryFrom<String> for Caption {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        Caption::new(value)
    }
}

impl From<Caption> for String {
    fn from(c: Caption) -> String {
        c.0
    }
}

impl std::fmt::Display for Caption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Remote,
    Replay,
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryVector {
    pub values: EmbeddingVector,
    pub provenance: Provenance,
}

fn default_in_flight() -> usize {
    8
}

fn default_beta() -> f64 {
    0.5
}

/// Configuration of a composer provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ComposerBinding {
    Remote {
        endpoint: String,
        #[serde(default)]
        retry: RetryPolicy,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
        /// Send local image files as `image_b64` instead of `image_uri`.
        #[serde(default)]
        inline_images: bool,
    },
    Replay {
        table: PathBuf,
    },
    Toy {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_beta")]
        beta: f64,
    },
}

/// Identifies the call site of a compose request.
#[derive(Debug, Clone, Copy)]
pub struct ComposeContext<'a> {
    pub gallery: &'a EmbeddingGallery,
    pub triplet_id: &'a str,
    pub round: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReplayRow {
    triplet_id: String,
    round: usize,
    vector: Vec<f32>,
}

/// Precomputed composed queries keyed by `(triplet_id, round)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayTable {
    rows: HashMap<(String, usize), EmbeddingVector>,
}

impl ReplayTable {
    pub fn insert(&mut self, triplet_id: impl Into<String>, round: usize, vector: EmbeddingVector) -> Result<()> {
        let v = if vector.is_unit() { vector } else { normalize(&vector)? };
        self.rows.insert((triplet_id.into(), round), v);
        Ok(())
    }

    pub fn get(&self, triplet_id: &str, round: usize) -> Option<&EmbeddingVector> {
        self.rows.get(&(triplet_id.to_string(), round))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Reads a JSONL table of `{"triplet_id", "round", "vector"}` rows.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = ReplayTable::default();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: ReplayRow = serde_json::from_str(&line)?;
            table.insert(row.triplet_id, row.round, EmbeddingVector::new(row.vector)?)?;
        }
        Ok(table)
    }
}

#[derive(Debug)]
pub struct RemoteComposer {
    endpoint: String,
    client: JsonClient,
    inline_images: bool,
}

#[derive(Serialize)]
struct ComposeRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    image_uri: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_b64: Option<String>,
    caption: &'a str,
}

#[derive(Deserialize)]
struct ComposeResponse {
    vector: Vec<f32>,
}

impl RemoteComposer {
    pub fn new(endpoint: impl Into<String>, retry: RetryPolicy, max_in_flight: usize, inline_images: bool) -> Self {
        Self {
            endpoint: endpoint.into(),
            client: JsonClient::new(retry, max_in_flight),
            inline_images,
        }
    }

    fn compose(&self, ctx: &ComposeContext<'_>, image_id: &str, caption: &Caption) -> Result<EmbeddingVector> {
        let entry = ctx.gallery.entry(image_id)?;
        let uri = entry.uri.as_deref().unwrap_or(&entry.image_id);
        let request = match local_path(uri).filter(|_| self.inline_images) {
            Some(path) => {
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                ComposeRequest {
                    image_uri: None,
                    image_b64: Some(base64::engine::general_purpose::STANDARD.encode(bytes)),
                    caption: caption.text(),
                }
            }
            None => ComposeRequest {
                image_uri: Some(uri),
                image_b64: None,
                caption: caption.text(),
            },
        };
        let url = join_url(&self.endpoint, "compose");
        let resp: ComposeResponse = self.client.post_json(&url, &request)?;
        if resp.vector.len() != ctx.gallery.dim() {
            return Err(Error::Config(format!(
                "composer at {} returned dimension {}, gallery has {}",
                self.endpoint,
                resp.vector.len(),
                ctx.gallery.dim()
            )));
        }
        normalize(&EmbeddingVector::new(resp.vector)?)
    }
}

/// `file://` URIs and bare paths that exist on disk.
pub(crate) fn local_path(uri: &str) -> Option<PathBuf> {
    let p = PathBuf::from(uri.strip_prefix("file://").unwrap_or(uri));
    p.is_file().then_some(p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyComposer {
    pub seed: u64,
    pub beta: f64,
}

impl ToyComposer {
    pub fn new(seed: u64, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config(format!("toy beta {beta} outside [0, 1]")));
        }
        Ok(Self { seed, beta })
    }

    fn compose(&self, ctx: &ComposeContext<'_>, image_id: &str, caption: &Caption) -> Result<EmbeddingVector> {
        let image = &ctx.gallery.entry(image_id)?.vector;
        if let Some(token) = OracleToken::parse(caption.text()) {
            let target = &ctx.gallery.entry(&token.target_id)?.vector;
            return steer(image, target, token.alpha);
        }
        toy_compose(image, caption, self.beta, self.seed)
    }
}

/// `normalize((1 − alpha)·from + alpha·to)`, falling back to `from` when the
/// mix cancels out.
pub(crate) fn steer(from: &EmbeddingVector, to: &EmbeddingVector, alpha: f64) -> Result<EmbeddingVector> {
    if alpha == 1.0 {
        return normalize(to);
    }
    if alpha == 0.0 {
        return normalize(from);
    }
    let mixed: Vec<f64> = from
        .as_slice()
        .iter()
        .zip(to.as_slice())
        .map(|(&a, &b)| (1.0 - alpha) * f64::from(a) + alpha * f64::from(b))
        .collect();
    normalize_f64(&mixed).or_else(|_| normalize(from))
}

/// Stable 64-bit hash of `(seed, text)`.
pub fn hash64(seed: u64, text: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(text.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has at least 8 bytes"))
}

/// Deterministic unit vector standing in for a text encoder.
pub fn toy_text_direction(caption: &Caption, seed: u64, d: usize) -> EmbeddingVector {
    assert!(d >= 1, "dimension must be positive");
    let mut rng = ChaCha20Rng::seed_from_u64(hash64(seed, caption.text()));
    loop {
        let sample: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        if let Ok(v) = normalize_f64(&sample) {
            return v;
        }
    }
}

/// Additive fusion stand-in: `normalize((1 − beta)·image + beta·text_direction)`.
pub fn toy_compose(image_vec: &EmbeddingVector, caption: &Caption, beta: f64, seed: u64) -> Result<EmbeddingVector> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("toy beta {beta} outside [0, 1]")));
    }
    if beta == 0.0 {
        return normalize(image_vec);
    }
    let text = toy_text_direction(caption, seed, image_vec.dim());
    if beta == 1.0 {
        return Ok(text);
    }
    steer(image_vec, &text, beta)
}

#[derive(Debug)]
pub enum Composer {
    Remote(RemoteComposer),
    Replay(ReplayTable),
    Toy(ToyComposer),
}

impl Composer {
    pub fn from_binding(binding: &ComposerBinding) -> Result<Self> {
        Ok(match binding {
            ComposerBinding::Remote {
                endpoint,
                retry,
                max_in_flight,
                inline_images,
            } => Composer::Remote(RemoteComposer::new(
                endpoint.clone(),
                retry.clone(),
                *max_in_flight,
                *inline_images,
            )),
            ComposerBinding::Replay { table } => Composer::Replay(ReplayTable::load(table)?),
            ComposerBinding::Toy { seed, beta } => Composer::Toy(ToyComposer::new(*seed, *beta)?),
        })
    }

    pub fn provenance(&self) -> Provenance {
        match self {
            Composer::Remote(_) => Provenance::Remote,
            Composer::Replay(_) => Provenance::Replay,
            Composer::Toy(_) => Provenance::Toy,
        }
    }

    /// Builds the composed query for `image_id` and `caption`. The output is
    /// checked to be unit-norm and of the gallery's dimension.
    pub fn compose(&self, ctx: &ComposeContext<'_>, image_id: &str, caption: &Caption) -> Result<QueryVector> {
        let values = match self {
            Composer::Remote(r) => r.compose(ctx, image_id, caption)?,
            Composer::Replay(table) => table
                .get(ctx.triplet_id, ctx.round)
                .cloned()
                .ok_or_else(|| Error::ReplayMissing {
                    triplet_id: ctx.triplet_id.to_string(),
                    round: ctx.round,
                })?,
            Composer::Toy(t) => t.compose(ctx, image_id, caption)?,
        };
        if values.dim() != ctx.gallery.dim() {
            return Err(Error::DimensionMismatch {
                expected: ctx.gallery.dim(),
                actual: values.dim(),
            });
        }
        debug_assert!(values.is_unit(), "composer produced a non-unit query");
        if !values.is_unit() {
            return Err(Error::Config("composer produced a non-unit query".into()));
        }
        Ok(QueryVector {
            values,
            provenance: self.provenance(),
        })
    }
}
