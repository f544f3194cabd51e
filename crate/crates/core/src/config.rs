//! The TOML run configuration shared by `eval` and `serve`.
//!
//! Relative paths resolve against the directory holding the config file.
//! Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::composer::{Composer, ComposerBinding};
use crate::engine::{self, EvalConfig, EvalRun, ExclusionMode, FeedbackMode, GallerySet, HistoryMode};
use crate::error::{Error, Result};
use crate::gallery::{load_gallery, GalleryFormat};
use crate::metrics::{self, EvalReport, DEFAULT_KS};
use crate::ranker::NextRefPolicy;
use crate::simulator::{Simulator, SimulatorBinding};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GallerySpec {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<GalleryFormatName>,
    /// Defaults to the file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    /// Triplet categories routed to this gallery.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    /// Used by triplets without a mapped category.
    #[serde(default)]
    pub default: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GalleryFormatName {
    Binary,
    Jsonl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionMode {
    #[default]
    Study,
    Blind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Session store file; defaults to `sessions.redb` under `out`.
    pub store: Option<PathBuf>,
    pub ttl_hours: f64,
    pub mode: SessionMode,
    pub cors_origin: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: Option<String>,
    pub threads: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            store: None,
            ttl_hours: 24.0,
            mode: SessionMode::Study,
            cors_origin: "*".into(),
            token_env: None,
            threads: 4,
        }
    }
}

fn default_ks() -> Vec<usize> {
    DEFAULT_KS.to_vec()
}

fn default_workers() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub galleries: Vec<GallerySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triplets: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    /// Defaults to every round up to `eval.r_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<Vec<usize>>,
    #[serde(default)]
    pub eval: EvalConfig,
    pub composer: ComposerBinding,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulator: Option<SimulatorBinding>,
    #[serde(default)]
    pub service: ServiceConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub r_max: Option<usize>,
    pub m: Option<usize>,
    pub stop_k: Option<usize>,
    pub history_mode: Option<HistoryMode>,
    pub feedback_mode: Option<FeedbackMode>,
    pub next_ref_policy: Option<NextRefPolicy>,
    pub pool_narrowing: Option<usize>,
    pub exclusion_mode: Option<ExclusionMode>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for g in &mut self.galleries {
            fix(&mut g.path);
        }
        if let Some(t) = &mut self.triplets {
            fix(t);
        }
        fix(&mut self.out);
        if let Some(s) = &mut self.service.store {
            fix(s);
        }
        if let ComposerBinding::Replay { table } = &mut self.composer {
            fix(table);
        }
        match &mut self.simulator {
            Some(SimulatorBinding::CaptionPipeline { templates_dir: Some(d), .. })
            | Some(SimulatorBinding::DirectDiff { templates_dir: Some(d), .. }) => fix(d),
            _ => {}
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        let e = &mut self.eval;
        if let Some(v) = o.r_max {
            e.r_max = v;
        }
        if let Some(v) = o.m {
            e.m = v;
        }
        if o.stop_k.is_some() {
            e.stop_k = o.stop_k;
        }
        if let Some(v) = o.history_mode {
            e.history_mode = v;
        }
        if let Some(v) = o.feedback_mode {
            e.feedback_mode = v;
        }
        if let Some(v) = o.next_ref_policy {
            e.next_ref_policy = v;
        }
        if o.pool_narrowing.is_some() {
            e.pool_narrowing = o.pool_narrowing;
        }
        if let Some(v) = o.exclusion_mode {
            e.exclusion_mode = v;
        }
        if let Some(v) = o.seed {
            e.seed = v;
        }
        if let Some(v) = o.workers {
            self.workers = v;
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.eval.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be a non-empty list of positive integers".into()));
        }
        if let Some(rounds) = &self.rounds {
            if rounds.is_empty() || rounds.iter().any(|&r| r == 0 || r > self.eval.r_max) {
                return Err(Error::Config(format!(
                    "rounds must be a non-empty subset of 1..={}",
                    self.eval.r_max
                )));
            }
        }
        if self.galleries.iter().filter(|g| g.default).count() > 1 {
            return Err(Error::Config("at most one gallery may be the default".into()));
        }
        if self.service.ttl_hours.is_nan() || self.service.ttl_hours <= 0.0 {
            return Err(Error::Config("service.ttl_hours must be positive".into()));
        }
        Ok(())
    }

    pub fn report_rounds(&self) -> Vec<usize> {
        self.rounds
            .clone()
            .unwrap_or_else(|| (1..=self.eval.r_max).collect())
    }

    pub fn triplets_path(&self) -> Result<&Path> {
        self.triplets
            .as_deref()
            .ok_or_else(|| Error::Config("no triplets file configured".into()))
    }

    pub fn load_galleries(&self) -> Result<GallerySet> {
        if self.galleries.is_empty() {
            return Err(Error::Config("no galleries configured".into()));
        }
        let mut set = GallerySet::default();
        let mut default = None;
        for spec in &self.galleries {
            let format = match spec.format {
                Some(GalleryFormatName::Binary) => GalleryFormat::Binary,
                Some(GalleryFormatName::Jsonl) => GalleryFormat::Jsonl,
                None => GalleryFormat::from_path(&spec.path),
            };
            let mut gallery = load_gallery(&spec.path, format)?;
            if let Some(id) = &spec.id {
                gallery = gallery.with_id(id.clone());
            }
            let id = gallery.gallery_id().to_string();
            if set.get(&id).is_some() {
                return Err(Error::DuplicateId(id));
            }
            for c in &spec.categories {
                set.map_category(c.clone(), id.clone());
            }
            if spec.default {
                default = Some(id.clone());
            }
            set.insert(gallery);
        }
        if default.is_some() {
            set.set_default(default);
        }
        Ok(set)
    }

    /// Loads galleries and triplets, builds the providers and runs the batch.
    pub fn evaluate(&self) -> Result<(EvalRun, EvalReport)> {
        let galleries = self.load_galleries()?;
        let triplets = engine::read_triplets(self.triplets_path()?)?;
        let composer = Composer::from_binding(&self.composer)?;
        let simulator = self.simulator.as_ref().map(Simulator::from_binding).transpose()?;
        let run = engine::run_batch(
            &triplets,
            &galleries,
            &self.eval,
            &composer,
            simulator.as_ref(),
            self.workers,
        )?;
        let report = metrics::make_report(&run, &self.ks, &self.report_rounds())?;
        Ok((run, report))
    }

    pub fn token(&self) -> Option<String> {
        let var = self.service.token_env.as_deref()?;
        std::env::var(var).ok().filter(|t| !t.is_empty())
    }
}
