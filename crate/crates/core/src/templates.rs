//! Prompt templates with `{name}` placeholders.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MLLM_CAPTION_DEFAULT: &str = "mllm.caption.default";
pub const MLLM_CAPTION_FASHIONIQ: &str = "mllm.caption.fashioniq";
pub const LLM_SYSTEM: &str = "llm.system";
pub const LLM_DIFF_CIRR: &str = "llm.diff.cirr";
pub const LLM_DIFF_FASHIONIQ: &str = "llm.diff.fashioniq";
pub const LLM_DIFF_FISD: &str = "llm.diff.fisd";
pub const LLM_DIFF_FISD_COMPLEX: &str = "llm.diff.fisd_complex";
pub const MM_DIRECT_DIFF: &str = "mm.direct_diff";
pub const FORGE_CAPTION: &str = "forge.caption";
pub const FORGE_CARDINALITY_CAPTION: &str = "forge.cardinality.caption";

const BUNDLED: &[(&str, &str)] = &[
    (MLLM_CAPTION_DEFAULT, include_str!("../templates/mllm_caption_default.txt")),
    (MLLM_CAPTION_FASHIONIQ, include_str!("../templates/mllm_caption_fashioniq.txt")),
    (LLM_SYSTEM, include_str!("../templates/llm_system.txt")),
    (LLM_DIFF_CIRR, include_str!("../templates/llm_diff_cirr.txt")),
    (LLM_DIFF_FASHIONIQ, include_str!("../templates/llm_diff_fashioniq.txt")),
    (LLM_DIFF_FISD, include_str!("../templates/llm_diff_fisd.txt")),
    (LLM_DIFF_FISD_COMPLEX, include_str!("../templates/llm_diff_fisd_complex.txt")),
    (MM_DIRECT_DIFF, include_str!("../templates/mm_direct_diff.txt")),
    (FORGE_CAPTION, include_str!("../templates/forge_caption.txt")),
    (FORGE_CARDINALITY_CAPTION, include_str!("../templates/forge_cardinality_caption.txt")),
];

const CARDINALITY_RELATIVE: &str = include_str!("../templates/cardinality_relative.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub body: String,
    pub placeholders: Vec<String>,
}

/// Placeholder names appearing in `body`, in first-occurrence order.
pub fn scan_placeholders(body: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (_, name) in markers(body) {
        if seen.insert(name) {
            out.push(name.to_string());
        }
    }
    out
}

/// `(byte offset, name)` for every `{identifier}` marker.
fn markers(body: &str) -> Vec<(usize, &str)> {
    let bytes = body.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let start = i + 1;
            let mut j = start;
            while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                j += 1;
            }
            if j > start && j < bytes.len() && bytes[j] == b'}' {
                out.push((i, &body[start..j]));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

impl PromptTemplate {
    pub fn new(template_id: impl Into<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        let placeholders = scan_placeholders(&body);
        Self {
            template_id: template_id.into(),
            body,
            placeholders,
        }
    }

    /// Checks that the declared placeholder list covers the body.
    pub fn validate(&self) -> Result<()> {
        for name in scan_placeholders(&self.body) {
            if !self.placeholders.contains(&name) {
                return Err(Error::Template(format!(
                    "template `{}` uses undeclared placeholder `{name}`",
                    self.template_id
                )));
            }
        }
        Ok(())
    }

    /// Substitutes every marker in one pass; bound values are inserted
    /// literally and never rescanned.
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String> {
        self.validate()?;
        let lookup: BTreeMap<&str, &str> = bindings.iter().copied().collect();
        let mut out = String::with_capacity(self.body.len() + 64);
        let mut cursor = 0;
        for (offset, name) in markers(&self.body) {
            let value = lookup.get(name).ok_or_else(|| {
                Error::Template(format!(
                    "template `{}` has unbound placeholder `{name}`",
                    self.template_id
                ))
            })?;
            out.push_str(&self.body[cursor..offset]);
            out.push_str(value);
            cursor = offset + name.len() + 2;
        }
        out.push_str(&self.body[cursor..]);
        Ok(out)
    }
}

/// A lookup of templates by id, preloaded with the bundled set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::bundled()
    }
}

impl TemplateSet {
    pub fn bundled() -> Self {
        let mut templates = BTreeMap::new();
        for (id, body) in BUNDLED {
            templates.insert(id.to_string(), PromptTemplate::new(*id, body.trim_end()));
        }
        Self { templates }
    }

    pub fn empty() -> Self {
        Self {
            templates: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, template: PromptTemplate) {
        self.templates.insert(template.template_id.clone(), template);
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate> {
        self.templates
            .get(id)
            .ok_or_else(|| Error::Template(format!("no template registered as `{id}`")))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    /// Replaces templates with `*.txt` files from `dir`, keyed by file stem
    /// with `_` mapped to `.` for the first segment (e.g. `llm_diff_cirr.txt`
    /// overrides `llm.diff.cirr`); other stems are added verbatim.
    pub fn load_overrides(&mut self, dir: &std::path::Path) -> Result<()> {
        let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in rd {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let id = BUNDLED
                .iter()
                .map(|(id, _)| *id)
                .find(|id| id.replace('.', "_") == stem)
                .map(str::to_string)
                .unwrap_or_else(|| stem.to_string());
            self.insert(PromptTemplate::new(id, body.trim_end()));
        }
        Ok(())
    }
}

/// Bundled cardinality relative-caption templates, keyed by id.
pub fn cardinality_relative_templates() -> BTreeMap<String, PromptTemplate> {
    CARDINALITY_RELATIVE
        .lines()
        .filter_map(|line| line.split_once('\t'))
        .map(|(id, body)| (id.to_string(), PromptTemplate::new(id, body)))
        .collect()
}
