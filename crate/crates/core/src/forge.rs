//! Benchmark construction: caption-generation prompts, cardinality captions,
//! complex-source filtering, seed-locked image generation manifests and
//! benchmark validation.
//!
//! Nothing here runs a model. Jobs and manifests are written as JSONL for
//! external LLM and diffusion runners.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::composer::hash64;
use crate::engine::{read_jsonl, write_jsonl, GallerySet, QueryTriplet};
use crate::error::{Error, Result};
use crate::templates::{self, cardinality_relative_templates, TemplateSet};

pub const TRIPLETS_PER_CATEGORY: usize = 200;
pub const IMAGES_PER_SUBSET: usize = 600;
pub const COMPLEX_MIN_WORDS: usize = 25;
pub const MAX_CARDINALITY: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Cardinality,
    Addition,
    Negation,
    Change,
    Background,
    Complex,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Cardinality,
        Category::Addition,
        Category::Negation,
        Category::Change,
        Category::Background,
        Category::Complex,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Cardinality => "cardinality",
            Category::Addition => "addition",
            Category::Negation => "negation",
            Category::Change => "change",
            Category::Background => "background",
            Category::Complex => "complex",
        }
    }

    /// Categories whose captions come from the LLM prompt path.
    pub fn uses_llm_prompt(&self) -> bool {
        matches!(
            self,
            Category::Addition | Category::Negation | Category::Change | Category::Background
        )
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown category `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionJob {
    pub category: Category,
    pub reference_caption: String,
    pub rendered_prompt: String,
    pub source_dataset: String,
}

/// Renders the caption-generation prompt for one reference caption.
pub fn render_caption_prompt(
    templates: &TemplateSet,
    category: Category,
    reference_caption: &str,
    source_dataset: &str,
) -> Result<CaptionJob> {
    if !category.uses_llm_prompt() {
        return Err(Error::Config(format!(
            "category `{category}` is not generated through the caption prompt"
        )));
    }
    let caption = reference_caption.trim();
    if caption.is_empty() {
        return Err(Error::InvalidCaption("reference caption is empty".into()));
    }
    let rendered_prompt = templates
        .get(templates::FORGE_CAPTION)?
        .render(&[("aspect", category.as_str()), ("reference_caption", caption)])?;
    Ok(CaptionJob {
        category,
        reference_caption: caption.to_string(),
        rendered_prompt,
        source_dataset: source_dataset.to_string(),
    })
}

/// Splits a caption runner's answer into (relative caption, target caption).
pub fn parse_caption_output(text: &str) -> Result<(String, String)> {
    let mut relative = None;
    let mut target = None;
    for line in text.lines() {
        let line = line.trim();
        if let Some(rest) = strip_label(line, "relative caption:") {
            relative = Some(rest);
        } else if let Some(rest) = strip_label(line, "target caption:") {
            target = Some(rest);
        }
    }
    match (relative, target) {
        (Some(r), Some(t)) if !r.is_empty() && !t.is_empty() => Ok((r, t)),
        _ => Err(Error::EmptyResponse(
            "caption output lacks a relative or target caption line".into(),
        )),
    }
}

fn strip_label(line: &str, label: &str) -> Option<String> {
    let head = line.get(..label.len())?;
    head.eq_ignore_ascii_case(label)
        .then(|| line[label.len()..].trim().to_string())
}

pub fn render_cardinality_caption(templates: &TemplateSet, num: u32, noun: &str) -> Result<String> {
    if !(1..=MAX_CARDINALITY).contains(&num) {
        return Err(Error::Config(format!("cardinality {num} outside 1..={MAX_CARDINALITY}")));
    }
    let noun = noun.trim();
    if noun.is_empty() {
        return Err(Error::Config("cardinality noun is empty".into()));
    }
    templates
        .get(templates::FORGE_CARDINALITY_CAPTION)?
        .render(&[("num", &num.to_string()), ("noun", noun)])
}

pub fn render_cardinality_relative(template_id: &str, from_num: u32, to_num: u32) -> Result<String> {
    let registry = cardinality_relative_templates();
    let template = registry
        .get(template_id)
        .ok_or_else(|| Error::Template(format!("no cardinality template `{template_id}`")))?;
    template.render(&[("from", &from_num.to_string()), ("to", &to_num.to_string())])
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Keeps records whose `caption` field has strictly more than `min_words`
/// whitespace-separated words. Records without a string caption are dropped.
pub fn filter_complex_sources(records: &[serde_json::Value], min_words: usize) -> Vec<serde_json::Value> {
    records
        .iter()
        .filter(|r| {
            r.get("caption")
                .and_then(|c| c.as_str())
                .is_some_and(|c| word_count(c) > min_words)
        })
        .cloned()
        .collect()
}

/// Captions for one benchmark triplet, produced upstream by the caption runner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionTriplet {
    pub triplet_id: String,
    pub category: Category,
    pub reference_caption: String,
    pub relative_caption: String,
    pub target_caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_negative_caption: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    #[default]
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRole {
    Reference,
    Target,
    HardNegative,
}

/// One image for the diffusion runner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationJob {
    pub triplet_id: String,
    pub role: ImageRole,
    pub prompt: String,
    pub seed: u64,
    pub model_id: String,
    #[serde(default)]
    pub status: JobStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub jobs: Vec<GenerationJob>,
}

impl GenerationManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self { jobs: read_jsonl(path)? })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.jobs)
    }

    pub fn jobs_for<'a>(&'a self, triplet_id: &'a str) -> impl Iterator<Item = &'a GenerationJob> + 'a {
        self.jobs.iter().filter(move |j| j.triplet_id == triplet_id)
    }
}

/// Reference, target and hard-negative jobs of a triplet share one seed
/// drawn from `(run_seed, triplet_id)`; a seed already taken by another
/// triplet is rehashed with a salt until unique.
pub fn make_generation_manifest(
    triplets: &[CaptionTriplet],
    run_seed: u64,
    model_id: &str,
) -> Result<GenerationManifest> {
    let mut seen_ids = HashSet::new();
    let mut seen_seeds = HashSet::new();
    let mut jobs = Vec::with_capacity(triplets.len() * 3);
    for t in triplets {
        if !seen_ids.insert(t.triplet_id.as_str()) {
            return Err(Error::DuplicateId(t.triplet_id.clone()));
        }
        if t.reference_caption.trim().is_empty() || t.target_caption.trim().is_empty() {
            return Err(Error::InvalidCaption(format!(
                "triplet `{}` lacks a reference or target prompt",
                t.triplet_id
            )));
        }
        let mut seed = hash64(run_seed, &t.triplet_id);
        let mut salt = 0u32;
        while !seen_seeds.insert(seed) {
            salt += 1;
            seed = hash64(run_seed, &format!("{}\u{1f}{salt}", t.triplet_id));
        }
        let prompts = [
            (ImageRole::Reference, Some(&t.reference_caption)),
            (ImageRole::Target, Some(&t.target_caption)),
            (ImageRole::HardNegative, t.hard_negative_caption.as_ref()),
        ];
        for (role, prompt) in prompts {
            let Some(prompt) = prompt.filter(|p| !p.trim().is_empty()) else {
                continue;
            };
            jobs.push(GenerationJob {
                triplet_id: t.triplet_id.clone(),
                role,
                prompt: prompt.trim().to_string(),
                seed,
                model_id: model_id.to_string(),
                status: JobStatus::Pending,
            });
        }
    }
    Ok(GenerationManifest { jobs })
}

/// The benchmark's query triplets, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchmarkManifest {
    pub triplets: Vec<QueryTriplet>,
}

impl BenchmarkManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self { triplets: read_jsonl(path)? })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.triplets)
    }

    pub fn category_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for t in &self.triplets {
            *counts
                .entry(t.category.clone().unwrap_or_else(|| "uncategorized".into()))
                .or_insert(0) += 1;
        }
        counts
    }

    pub fn image_ids(&self) -> BTreeSet<&str> {
        self.triplets
            .iter()
            .flat_map(|t| {
                std::iter::once(t.reference_id.as_str())
                    .chain(t.target_ids.iter().map(String::as_str))
                    .chain(t.hard_negative_ids.iter().map(String::as_str))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    CategoryCount,
    UnknownCategory,
    MissingCategory,
    GalleryMissing,
    GallerySize,
    Unresolvable,
    RoleCollision,
    EmptyCaption,
    ComplexTooShort,
    DuplicateTriplet,
    SeedMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triplet_id: Option<String>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub triplet_count: usize,
    pub image_count: usize,
    pub category_counts: BTreeMap<String, usize>,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchmarkShape {
    pub per_category: usize,
    pub images_per_subset: usize,
    pub complex_min_words: usize,
}

impl Default for BenchmarkShape {
    fn default() -> Self {
        Self {
            per_category: TRIPLETS_PER_CATEGORY,
            images_per_subset: IMAGES_PER_SUBSET,
            complex_min_words: COMPLEX_MIN_WORDS,
        }
    }
}

/// Checks the manifest against the benchmark's shape and, if given, the
/// generation manifest it was produced from. Violations are report content.
pub fn validate_benchmark(
    manifest: &BenchmarkManifest,
    galleries: &GallerySet,
    generation: Option<&GenerationManifest>,
    shape: BenchmarkShape,
) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |kind, category: Option<&str>, triplet_id: Option<&str>, detail: String| {
        violations.push(Violation {
            kind,
            category: category.map(str::to_string),
            triplet_id: triplet_id.map(str::to_string),
            detail,
        })
    };

    let counts = manifest.category_counts();
    for (name, &n) in &counts {
        if name.parse::<Category>().is_err() {
            push(ViolationKind::UnknownCategory, Some(name), None, format!("{n} triplets in unknown category `{name}`"));
        }
    }
    for c in Category::ALL {
        let n = counts.get(c.as_str()).copied().unwrap_or(0);
        if n == 0 {
            push(ViolationKind::MissingCategory, Some(c.as_str()), None, format!("category `{c}` has no triplets"));
        } else if n != shape.per_category {
            push(
                ViolationKind::CategoryCount,
                Some(c.as_str()),
                None,
                format!("category `{c}` has {n} triplets, expected {}", shape.per_category),
            );
        }
    }

    let mut seen = HashSet::new();
    let mut subset_ids: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    for t in &manifest.triplets {
        let tid = Some(t.triplet_id.as_str());
        let cat = t.category.as_deref();
        if !seen.insert(t.triplet_id.as_str()) {
            push(ViolationKind::DuplicateTriplet, cat, tid, "triplet id appears more than once".into());
        }
        let caption = t.relative_caption.text();
        if caption.trim().is_empty() {
            push(ViolationKind::EmptyCaption, cat, tid, "relative caption is empty".into());
        }
        if cat == Some(Category::Complex.as_str()) && word_count(caption) <= shape.complex_min_words {
            push(
                ViolationKind::ComplexTooShort,
                cat,
                tid,
                format!("complex caption has {} words, needs more than {}", word_count(caption), shape.complex_min_words),
            );
        }

        let mut roles: BTreeMap<&str, &str> = BTreeMap::new();
        let all_roles = std::iter::once(("reference", t.reference_id.as_str()))
            .chain(t.target_ids.iter().map(|id| ("target", id.as_str())))
            .chain(t.hard_negative_ids.iter().map(|id| ("hard_negative", id.as_str())));
        for (role, id) in all_roles {
            if let Some(prev) = roles.insert(id, role) {
                push(ViolationKind::RoleCollision, cat, tid, format!("image `{id}` is both {prev} and {role}"));
            }
            subset_ids.entry(cat.unwrap_or("uncategorized").to_string()).or_default().insert(id);
        }

        match galleries.for_triplet(t) {
            Ok(g) => {
                for id in roles.keys() {
                    if !g.contains(id) {
                        push(
                            ViolationKind::Unresolvable,
                            cat,
                            tid,
                            format!("image `{id}` not in gallery `{}`", g.gallery_id()),
                        );
                    }
                }
            }
            Err(e) => push(ViolationKind::GalleryMissing, cat, tid, e.to_string()),
        }

        if let Some(generation) = generation {
            let jobs: Vec<&GenerationJob> = generation.jobs_for(&t.triplet_id).collect();
            let has = |role| jobs.iter().any(|j| j.role == role);
            if !has(ImageRole::Reference) || !has(ImageRole::Target) {
                push(ViolationKind::SeedMismatch, cat, tid, "reference or target generation job missing".into());
            }
            let seeds: BTreeSet<u64> = jobs.iter().map(|j| j.seed).collect();
            if seeds.len() > 1 {
                push(
                    ViolationKind::SeedMismatch,
                    cat,
                    tid,
                    format!("generation jobs use {} different seeds", seeds.len()),
                );
            }
        }
    }

    for (cat, ids) in &subset_ids {
        if cat.parse::<Category>().is_err() {
            continue;
        }
        let probe = manifest
            .triplets
            .iter()
            .find(|t| t.category.as_deref() == Some(cat.as_str()));
        let gallery_len = probe.and_then(|t| galleries.for_triplet(t).ok()).map(|g| g.len());
        if ids.len() != shape.images_per_subset {
            push(
                ViolationKind::GallerySize,
                Some(cat),
                None,
                format!("subset `{cat}` references {} images, expected {}", ids.len(), shape.images_per_subset),
            );
        }
        if let Some(n) = gallery_len {
            if n != shape.images_per_subset {
                push(
                    ViolationKind::GallerySize,
                    Some(cat),
                    None,
                    format!("gallery for `{cat}` holds {n} images, expected {}", shape.images_per_subset),
                );
            }
        }
    }

    ValidationReport {
        passed: violations.is_empty(),
        triplet_count: manifest.triplets.len(),
        image_count: manifest.image_ids().len(),
        category_counts: counts,
        violations,
    }
}

pub fn read_caption_triplets(path: &Path) -> Result<Vec<CaptionTriplet>> {
    read_jsonl(path)
}

pub fn write_caption_jobs(path: &Path, jobs: &[CaptionJob]) -> Result<()> {
    write_jsonl(path, jobs)
}
