//! The multi-round session state machine and batch runner.
//!
//! One round: compose the query from the current reference and caption,
//! append it to the history, rank the eligible pool by the fused history,
//! record the target's rank, decide whether the session is finished, and pick
//! the next reference. Between rounds a simulator (or a human, through the
//! session service) writes the next caption against the picked candidate.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::composer::{Caption, ComposeContext, Composer, QueryVector};
use crate::error::{Error, Result};
use crate::gallery::{EmbeddingGallery, EmbeddingVector};
use crate::ranker::{self, NextRefPolicy, Ranking, Scored};
use crate::simulator::{frozen_feedback, DatasetProfile, Feedback, FeedbackRequest, ProfileKind, Simulator};

pub const TRACE_SCHEMA: &str = "cirloop.trace/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryTriplet {
    pub triplet_id: String,
    pub reference_id: String,
    pub target_ids: Vec<String>,
    pub relative_caption: Caption,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default)]
    pub hard_negative_ids: Vec<String>,
}

impl QueryTriplet {
    pub fn validate(&self, gallery: &EmbeddingGallery) -> Result<()> {
        if self.target_ids.is_empty() {
            return Err(Error::Config(format!("triplet `{}` has no target", self.triplet_id)));
        }
        if self.target_ids.contains(&self.reference_id) {
            return Err(Error::Config(format!(
                "triplet `{}` lists its reference as a target",
                self.triplet_id
            )));
        }
        for id in std::iter::once(&self.reference_id)
            .chain(&self.target_ids)
            .chain(&self.hard_negative_ids)
        {
            gallery.entry(id)?;
        }
        Ok(())
    }

    /// The target the simulator describes: the lexicographically smallest id.
    pub fn simulator_target(&self) -> &str {
        self.target_ids
            .iter()
            .min()
            .map(String::as_str)
            .expect("validated triplet has a target")
    }
}

pub fn read_triplets(path: &Path) -> Result<Vec<QueryTriplet>> {
    read_jsonl(path)
}

pub fn write_triplets(path: &Path, triplets: &[QueryTriplet]) -> Result<()> {
    write_jsonl(path, triplets)
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    #[default]
    Mean,
    #[serde(alias = "last")]
    LastOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    #[default]
    Fresh,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionMode {
    #[default]
    None,
    #[serde(alias = "current")]
    CurrentRef,
    #[serde(alias = "all")]
    AllPriorRefs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub r_max: usize,
    /// Candidates recorded per round.
    pub m: usize,
    pub stop_k: Option<usize>,
    pub history_mode: HistoryMode,
    pub feedback_mode: FeedbackMode,
    pub next_ref_policy: NextRefPolicy,
    pub pool_narrowing: Option<usize>,
    pub exclusion_mode: ExclusionMode,
    pub seed: u64,
    pub profile: ProfileKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            r_max: 5,
            m: 50,
            stop_k: None,
            history_mode: HistoryMode::Mean,
            feedback_mode: FeedbackMode::Fresh,
            next_ref_policy: NextRefPolicy::Top1,
            pool_narrowing: None,
            exclusion_mode: ExclusionMode::None,
            seed: 0,
            profile: ProfileKind::CirrLike,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_max == 0 {
            return Err(Error::Config("r_max must be at least 1".into()));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if let Some(k) = self.stop_k {
            if k == 0 || k > self.m {
                return Err(Error::Config(format!("stop_k {k} must be in 1..=m ({})", self.m)));
            }
        }
        if self.pool_narrowing == Some(0) {
            return Err(Error::Config("pool_narrowing must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub reference_id: String,
    pub caption: Caption,
    pub query: QueryVector,
    pub fused: EmbeddingVector,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fused_fallback: bool,
    pub eligible: usize,
    pub top_m: Vec<Scored>,
    pub target_rank: usize,
    /// The target was not in the eligible pool; `target_rank` is a sentinel.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub target_absent: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_next: Option<Feedback>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Hit { round: usize, rank: usize },
    Exhausted,
}

impl SessionStatus {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, SessionStatus::Active)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub schema: String,
    pub triplet_id: String,
    pub gallery_id: String,
    pub triplet: QueryTriplet,
    pub simulator_target: String,
    pub rounds: Vec<RoundRecord>,
    pub status: SessionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_reference: Option<String>,
    /// Round-1 top-P ids when pool narrowing is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub config: EvalConfig,
}

impl SessionTrace {
    pub fn start(triplet: QueryTriplet, gallery: &EmbeddingGallery, config: EvalConfig) -> Result<Self> {
        config.validate()?;
        triplet.validate(gallery)?;
        if let Some(p) = config.pool_narrowing {
            if p > gallery.len() {
                return Err(Error::Config(format!(
                    "pool_narrowing {p} exceeds gallery size {}",
                    gallery.len()
                )));
            }
        }
        Ok(Self {
            schema: TRACE_SCHEMA.to_string(),
            triplet_id: triplet.triplet_id.clone(),
            gallery_id: gallery.gallery_id().to_string(),
            simulator_target: triplet.simulator_target().to_string(),
            triplet,
            rounds: Vec::new(),
            status: SessionStatus::Active,
            next_reference: None,
            pool: None,
            notes: Vec::new(),
            config,
        })
    }

    pub fn target_ranks(&self) -> Vec<usize> {
        self.rounds.iter().map(|r| r.target_rank).collect()
    }

    /// Queries fused for the latest round.
    pub fn history(&self) -> Vec<&EmbeddingVector> {
        match self.config.history_mode {
            HistoryMode::Mean => self.rounds.iter().map(|r| &r.query.values).collect(),
            HistoryMode::LastOnly => self.rounds.last().map(|r| &r.query.values).into_iter().collect(),
        }
    }

    fn excluded(&self, reference: &str) -> HashSet<String> {
        match self.config.exclusion_mode {
            ExclusionMode::None => HashSet::new(),
            ExclusionMode::CurrentRef => std::iter::once(reference.to_string()).collect(),
            ExclusionMode::AllPriorRefs => self
                .rounds
                .iter()
                .map(|r| r.reference_id.clone())
                .chain(std::iter::once(reference.to_string()))
                .collect(),
        }
    }
}

/// The first `p` ids of the round-1 ranking.
pub fn apply_pool_narrowing(round1: &Ranking, p: usize) -> Result<Vec<String>> {
    if p == 0 || p > round1.len() {
        return Err(Error::Config(format!(
            "pool size {p} outside 1..={}",
            round1.len()
        )));
    }
    Ok(round1.ids().take(p).map(str::to_string).collect())
}

/// Executes one round with `caption`.
pub fn step<'t>(
    trace: &'t mut SessionTrace,
    gallery: &EmbeddingGallery,
    composer: &Composer,
    caption: Caption,
) -> Result<&'t RoundRecord> {
    if trace.status.is_terminal() || trace.rounds.len() >= trace.config.r_max {
        return Err(Error::SessionTerminal);
    }
    let round = trace.rounds.len() + 1;
    step_inner(trace, gallery, composer, caption, round).map_err(|e| e.in_round(round))?;
    Ok(trace.rounds.last().expect("round just pushed"))
}

fn step_inner(
    trace: &mut SessionTrace,
    gallery: &EmbeddingGallery,
    composer: &Composer,
    caption: Caption,
    round: usize,
) -> Result<()> {
    let reference = if round == 1 {
        trace.triplet.reference_id.clone()
    } else {
        trace
            .next_reference
            .clone()
            .ok_or_else(|| Error::Config("no reference selected for this round".into()))?
    };
    let ctx = ComposeContext {
        gallery,
        triplet_id: &trace.triplet_id,
        round,
    };
    let query = composer.compose(&ctx, &reference, &caption)?;

    let mut history: Vec<EmbeddingVector> = match trace.config.history_mode {
        HistoryMode::Mean => trace.rounds.iter().map(|r| r.query.values.clone()).collect(),
        HistoryMode::LastOnly => Vec::new(),
    };
    history.push(query.values.clone());
    let fused = ranker::fuse_history(&history)?;
    if fused.fell_back {
        trace
            .notes
            .push(format!("round {round}: history mean vanished, using latest query"));
    }

    let excluded = trace.excluded(&reference);
    let pool: Option<HashSet<&str>> = trace
        .pool
        .as_ref()
        .map(|p| p.iter().map(String::as_str).collect());
    let mut ranking = ranker::rank_where(&fused.vector, gallery, |e| {
        !excluded.contains(&e.image_id) && pool.as_ref().is_none_or(|p| p.contains(e.image_id.as_str()))
    })?;
    ranking.round = round;

    if round == 1 {
        if let Some(p) = trace.config.pool_narrowing {
            trace.pool = Some(apply_pool_narrowing(&ranking, p)?);
        }
    }

    let (target_rank, target_absent) = match ranker::target_rank(&ranking, &trace.triplet.target_ids) {
        Ok(rank) => (rank, false),
        Err(Error::TargetMissing) => {
            let sentinel = match (&trace.pool, round) {
                (Some(p), r) if r >= 2 => p.len() + 1,
                _ => ranking.len() + 1,
            };
            trace
                .notes
                .push(format!("round {round}: target outside the eligible pool, rank recorded as {sentinel}"));
            (sentinel, true)
        }
        Err(e) => return Err(e),
    };

    let config = &trace.config;
    let status = match config.stop_k {
        Some(k) if !target_absent && target_rank <= k => SessionStatus::Hit {
            round,
            rank: target_rank,
        },
        _ if round >= config.r_max => SessionStatus::Exhausted,
        _ => SessionStatus::Active,
    };
    let next_reference = if status.is_terminal() {
        None
    } else {
        Some(
            ranker::select_next_reference(&ranking, config.next_ref_policy, config.seed, &trace.triplet_id, round)?
                .to_string(),
        )
    };

    let eligible = ranking.len();
    let top_m = ranking.top(config.m).to_vec();
    trace.rounds.push(RoundRecord {
        round,
        reference_id: reference,
        caption,
        query,
        fused: fused.vector,
        fused_fallback: fused.fell_back,
        eligible,
        top_m,
        target_rank,
        target_absent,
        feedback_next: None,
    });
    trace.status = status;
    trace.next_reference = next_reference;
    Ok(())
}

/// Feedback for the round after the latest one.
///
/// Simulator responses that are empty, or requests the simulator refuses
/// (candidate equals target), reuse the latest caption and are marked failed.
/// Transport failures propagate.
pub fn next_feedback(
    trace: &SessionTrace,
    gallery: &EmbeddingGallery,
    simulator: Option<&Simulator>,
) -> Result<Feedback> {
    let last = trace
        .rounds
        .last()
        .ok_or_else(|| Error::Config("session has no rounds yet".into()))?;
    let round = last.round + 1;
    if trace.config.feedback_mode == FeedbackMode::Frozen {
        return Ok(frozen_feedback(&trace.rounds[0].caption));
    }
    let simulator = simulator.ok_or_else(|| Error::Config("no simulator bound to this session".into()))?;
    let candidate_id = trace
        .next_reference
        .as_deref()
        .ok_or(Error::SessionTerminal)?;
    let request = FeedbackRequest {
        candidate: gallery.entry(candidate_id)?,
        target: gallery.entry(&trace.simulator_target)?,
        profile: DatasetProfile::resolve(trace.config.profile, trace.triplet.category.as_deref())?,
        round,
    };
    match simulator.feedback(&request) {
        Ok(f) => Ok(f),
        Err(e @ (Error::EmptyResponse(_) | Error::InvalidRequest(_))) => {
            log::warn!("{}: round {round} feedback failed, reusing caption: {e}", trace.triplet_id);
            let mut f = Feedback::new(last.caption.clone(), simulator.kind());
            f.failed = Some(e.to_string());
            Ok(f)
        }
        Err(e) => Err(e.in_round(round)),
    }
}

/// Records `feedback` on the latest round and runs the next one with it.
pub fn advance(
    trace: &mut SessionTrace,
    gallery: &EmbeddingGallery,
    composer: &Composer,
    feedback: Feedback,
) -> Result<()> {
    if trace.status.is_terminal() {
        return Err(Error::SessionTerminal);
    }
    let caption = feedback.caption.clone();
    let previous = trace
        .rounds
        .last_mut()
        .ok_or_else(|| Error::Config("session has no rounds yet".into()))?;
    let saved = previous.feedback_next.replace(feedback);
    if let Err(e) = step(trace, gallery, composer, caption) {
        if let Some(last) = trace.rounds.last_mut() {
            last.feedback_next = saved;
        }
        return Err(e);
    }
    Ok(())
}

/// Runs a full session: the triplet's caption in round 1, simulator (or
/// frozen) feedback afterwards, until a hit or `r_max`.
pub fn run_session(
    triplet: &QueryTriplet,
    gallery: &EmbeddingGallery,
    config: &EvalConfig,
    composer: &Composer,
    simulator: Option<&Simulator>,
) -> Result<SessionTrace> {
    let mut trace = SessionTrace::start(triplet.clone(), gallery, config.clone())?;
    step(&mut trace, gallery, composer, triplet.relative_caption.clone())?;
    while !trace.status.is_terminal() {
        let feedback = next_feedback(&trace, gallery, simulator)?;
        advance(&mut trace, gallery, composer, feedback)?;
    }
    Ok(trace)
}

/// Galleries by id, with a category → gallery mapping for per-subset runs.
#[derive(Debug, Clone, Default)]
pub struct GallerySet {
    galleries: BTreeMap<String, Arc<EmbeddingGallery>>,
    by_category: BTreeMap<String, String>,
    default: Option<String>,
}

impl GallerySet {
    pub fn single(gallery: EmbeddingGallery) -> Self {
        let mut set = Self::default();
        let id = gallery.gallery_id().to_string();
        set.insert(gallery);
        set.default = Some(id);
        set
    }

    pub fn insert(&mut self, gallery: EmbeddingGallery) {
        let id = gallery.gallery_id().to_string();
        if self.default.is_none() && self.galleries.is_empty() {
            self.default = Some(id.clone());
        }
        self.galleries.insert(id, Arc::new(gallery));
    }

    pub fn map_category(&mut self, category: impl Into<String>, gallery_id: impl Into<String>) {
        self.by_category.insert(category.into(), gallery_id.into());
    }

    pub fn set_default(&mut self, gallery_id: Option<String>) {
        self.default = gallery_id;
    }

    pub fn get(&self, gallery_id: &str) -> Option<&Arc<EmbeddingGallery>> {
        self.galleries.get(gallery_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.galleries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<EmbeddingGallery>> {
        self.galleries.values()
    }

    /// The category's gallery when mapped, otherwise the default gallery.
    pub fn for_triplet(&self, triplet: &QueryTriplet) -> Result<&Arc<EmbeddingGallery>> {
        let id = triplet
            .category
            .as_ref()
            .and_then(|c| self.by_category.get(c))
            .or(self.default.as_ref())
            .ok_or_else(|| {
                Error::Config(format!(
                    "no gallery bound for triplet `{}` (category {:?})",
                    triplet.triplet_id, triplet.category
                ))
            })?;
        self.galleries
            .get(id)
            .ok_or_else(|| Error::Config(format!("gallery `{id}` is not loaded")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFailure {
    pub index: usize,
    pub triplet_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub triplet_count: usize,
    pub trace_count: usize,
    pub failure_count: usize,
    pub workers: usize,
    pub wall_time_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub config: EvalConfig,
    pub traces: Vec<SessionTrace>,
    pub failures: Vec<SessionFailure>,
    pub meta: RunMeta,
}

/// Runs every triplet; results are in triplet order whatever the worker
/// count, and failed sessions are collected instead of aborting the batch.
pub fn run_batch(
    triplets: &[QueryTriplet],
    galleries: &GallerySet,
    config: &EvalConfig,
    composer: &Composer,
    simulator: Option<&Simulator>,
    workers: usize,
) -> Result<EvalRun> {
    config.validate()?;
    let started = Instant::now();
    let workers = workers.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<SessionTrace>> = pool.install(|| {
        triplets
            .par_iter()
            .map(|t| {
                let gallery = galleries.for_triplet(t)?;
                run_session(t, gallery, config, composer, simulator)
            })
            .collect()
    });
    let mut traces = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (index, (result, triplet)) in results.into_iter().zip(triplets).enumerate() {
        match result {
            Ok(trace) => traces.push(trace),
            Err(e) => {
                log::error!("session {} failed: {e}", triplet.triplet_id);
                failures.push(SessionFailure {
                    index,
                    triplet_id: triplet.triplet_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    let meta = RunMeta {
        config_hash: config.config_hash(),
        triplet_count: triplets.len(),
        trace_count: traces.len(),
        failure_count: failures.len(),
        workers,
        wall_time_ms: started.elapsed().as_millis(),
    };
    Ok(EvalRun {
        config: config.clone(),
        traces,
        failures,
        meta,
    })
}

pub fn write_traces(path: &Path, traces: &[SessionTrace]) -> Result<()> {
    write_jsonl(path, traces)
}

pub fn read_traces(path: &Path) -> Result<Vec<SessionTrace>> {
    let traces: Vec<SessionTrace> = read_jsonl(path)?;
    if let Some(t) = traces.iter().find(|t| t.schema != TRACE_SCHEMA) {
        return Err(Error::Config(format!("unsupported trace schema `{}`", t.schema)));
    }
    Ok(traces)
}

/// Canonical JSONL bytes of a trace list.
pub fn traces_jsonl(traces: &[SessionTrace]) -> Vec<u8> {
    let mut out = Vec::new();
    for t in traces {
        serde_json::to_writer(&mut out, t).expect("trace serializes");
        out.push(b'\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::ToyComposer;
    use crate::gallery::GalleryEntry;

    fn gallery() -> EmbeddingGallery {
        let rows: [(&str, [f32; 3]); 5] = [
            ("a", [1.0, 0.0, 0.0]),
            ("b", [0.9, 0.1, 0.0]),
            ("c", [0.0, 1.0, 0.0]),
            ("d", [0.0, 0.9, 0.3]),
            ("t", [0.0, 0.0, 1.0]),
        ];
        EmbeddingGallery::new(
            "g",
            rows.iter()
                .map(|(id, v)| GalleryEntry::new(*id, EmbeddingVector::new(v.to_vec()).unwrap()))
                .collect(),
        )
        .unwrap()
    }

    fn triplet() -> QueryTriplet {
        QueryTriplet {
            triplet_id: "t1".into(),
            reference_id: "a".into(),
            target_ids: vec!["t".into()],
            relative_caption: Caption::new("make it blue").unwrap(),
            category: None,
            hard_negative_ids: vec![],
        }
    }

    fn toy() -> Composer {
        Composer::Toy(ToyComposer::new(1, 0.0).unwrap())
    }

    #[test]
    fn config_validation() {
        assert!(EvalConfig::default().validate().is_ok());
        let c = EvalConfig { stop_k: Some(60), ..EvalConfig::default() };
        assert!(c.validate().is_err());
        let c = EvalConfig { r_max: 0, ..EvalConfig::default() };
        assert!(c.validate().is_err());
        let parsed: EvalConfig = toml::from_str("r_max = 3\nhistory_mode = \"last_only\"\nnext_ref_policy = \"random10\"").unwrap();
        assert_eq!(parsed.r_max, 3);
        assert_eq!(parsed.next_ref_policy, NextRefPolicy::RandomTop(10));
        assert!(toml::from_str::<EvalConfig>("rmax = 3").is_err());
    }

    #[test]
    fn triplet_validation() {
        let g = gallery();
        let mut t = triplet();
        assert!(t.validate(&g).is_ok());
        t.target_ids = vec!["a".into()];
        assert!(t.validate(&g).is_err());
        t.target_ids = vec!["nope".into()];
        assert!(matches!(t.validate(&g), Err(Error::UnknownImage(_))));
        let mut multi = triplet();
        multi.target_ids = vec!["t".into(), "d".into()];
        assert_eq!(multi.simulator_target(), "d");
    }

    #[test]
    fn round_one_mean_equals_last_only() {
        let g = gallery();
        let run = |mode| {
            let cfg = EvalConfig { history_mode: mode, r_max: 1, ..EvalConfig::default() };
            run_session(&triplet(), &g, &cfg, &toy(), None).unwrap()
        };
        let (a, b) = (run(HistoryMode::Mean), run(HistoryMode::LastOnly));
        assert_eq!(a.rounds, b.rounds);
    }

    #[test]
    fn stop_k_hit_and_exhaustion() {
        let g = gallery();
        let sim = Simulator::Oracle { alpha: 1.0 };
        let cfg = EvalConfig { stop_k: Some(1), m: 5, history_mode: HistoryMode::LastOnly, ..EvalConfig::default() };
        let trace = run_session(&triplet(), &g, &cfg, &toy(), Some(&sim)).unwrap();
        // round 1 query is "a" itself, so the target ranks last; the oracle
        // steers round 2 onto the target.
        assert_eq!(trace.rounds[0].target_rank, 5);
        assert_eq!(trace.status, SessionStatus::Hit { round: 2, rank: 1 });
        assert_eq!(trace.rounds.len(), 2);

        let sim = Simulator::Oracle { alpha: 0.0 };
        let cfg = EvalConfig { stop_k: Some(1), m: 5, ..EvalConfig::default() };
        let trace = run_session(&triplet(), &g, &cfg, &toy(), Some(&sim)).unwrap();
        assert_eq!(trace.rounds.len(), 5);
        assert_eq!(trace.status, SessionStatus::Exhausted);
        assert!(trace.next_reference.is_none());
    }

    #[test]
    fn stop_k_absent_runs_all_rounds() {
        let g = gallery();
        let sim = Simulator::Oracle { alpha: 1.0 };
        let trace = run_session(&triplet(), &g, &EvalConfig::default(), &toy(), Some(&sim)).unwrap();
        assert_eq!(trace.rounds.len(), 5);
        assert_eq!(trace.status, SessionStatus::Exhausted);
        assert!(trace.rounds[4].feedback_next.is_none());
        assert!(trace.rounds[..4].iter().all(|r| r.feedback_next.is_some()));
    }

    #[test]
    fn history_length_matches_mode() {
        let g = gallery();
        let sim = Simulator::Oracle { alpha: 0.5 };
        for (mode, expected) in [(HistoryMode::Mean, 5), (HistoryMode::LastOnly, 1)] {
            let cfg = EvalConfig { history_mode: mode, ..EvalConfig::default() };
            let trace = run_session(&triplet(), &g, &cfg, &toy(), Some(&sim)).unwrap();
            assert_eq!(trace.history().len(), expected);
        }
    }

    #[test]
    fn exclusion_modes() {
        let g = gallery();
        let sim = Simulator::Oracle { alpha: 0.0 };
        let cfg = EvalConfig { exclusion_mode: ExclusionMode::CurrentRef, r_max: 2, ..EvalConfig::default() };
        let trace = run_session(&triplet(), &g, &cfg, &toy(), Some(&sim)).unwrap();
        assert!(trace.rounds[0].top_m.iter().all(|s| s.image_id != "a"));
        assert_eq!(trace.rounds[0].eligible, 4);
        let cfg = EvalConfig { exclusion_mode: ExclusionMode::AllPriorRefs, r_max: 3, ..EvalConfig::default() };
        let trace = run_session(&triplet(), &g, &cfg, &toy(), Some(&sim)).unwrap();
        assert_eq!(trace.rounds[2].eligible, 5 - 3);
    }

    #[test]
    fn pool_narrowing_sentinel() {
        let g = gallery();
        let sim = Simulator::Oracle { alpha: 1.0 };
        let cfg = EvalConfig { pool_narrowing: Some(2), stop_k: Some(1), m: 5, ..EvalConfig::default() };
        let trace = run_session(&triplet(), &g, &cfg, &toy(), Some(&sim)).unwrap();
        assert_eq!(trace.pool.as_deref(), Some(&["a".to_string(), "b".to_string()][..]));
        assert!(trace.rounds[1..].iter().all(|r| r.target_absent && r.target_rank == 3));
        assert_eq!(trace.status, SessionStatus::Exhausted);
        let too_big = EvalConfig { pool_narrowing: Some(6), ..EvalConfig::default() };
        assert!(SessionTrace::start(triplet(), &g, too_big).is_err());
    }

    #[test]
    fn frozen_mode_needs_no_simulator() {
        let g = gallery();
        let cfg = EvalConfig { feedback_mode: FeedbackMode::Frozen, ..EvalConfig::default() };
        let trace = run_session(&triplet(), &g, &cfg, &toy(), None).unwrap();
        assert!(trace.rounds.iter().all(|r| r.caption.text() == "make it blue"));
        assert!(run_session(&triplet(), &g, &EvalConfig::default(), &toy(), None).is_err());
    }

    #[test]
    fn step_on_terminal_session_fails() {
        let g = gallery();
        let cfg = EvalConfig { r_max: 1, ..EvalConfig::default() };
        let mut trace = run_session(&triplet(), &g, &cfg, &toy(), None).unwrap();
        assert!(matches!(
            step(&mut trace, &g, &toy(), Caption::new("x").unwrap()),
            Err(Error::SessionTerminal)
        ));
    }

    #[test]
    fn pool_narrowing_bounds() {
        let r = Ranking {
            round: 1,
            items: ["x", "y", "z"]
                .iter()
                .map(|id| Scored { image_id: id.to_string(), score: 0.0 })
                .collect(),
        };
        assert_eq!(apply_pool_narrowing(&r, 3).unwrap().len(), 3);
        assert_eq!(apply_pool_narrowing(&r, 1).unwrap(), ["x"]);
        assert!(apply_pool_narrowing(&r, 4).is_err());
        assert!(apply_pool_narrowing(&r, 0).is_err());
    }

    #[test]
    fn empty_batch() {
        let g = GallerySet::single(gallery());
        let run = run_batch(&[], &g, &EvalConfig::default(), &toy(), None, 2).unwrap();
        assert!(run.traces.is_empty());
        assert_eq!(run.meta.failure_count, 0);
    }

    #[test]
    fn gallery_set_routes_by_category() {
        let mut set = GallerySet::default();
        set.insert(gallery());
        let other = EmbeddingGallery::new(
            "other",
            vec![GalleryEntry::new("z", EmbeddingVector::new(vec![1.0, 0.0, 0.0]).unwrap())],
        )
        .unwrap();
        set.insert(other);
        set.map_category("negation", "other");
        let mut t = triplet();
        assert_eq!(set.for_triplet(&t).unwrap().gallery_id(), "g");
        t.category = Some("negation".into());
        assert_eq!(set.for_triplet(&t).unwrap().gallery_id(), "other");
    }
}
