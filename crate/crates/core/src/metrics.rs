//! Retrieval measures over session traces, and the report built from them.
//!
//! Hits@K is cumulative: a session counts from the first round whose target
//! rank is within K. Recall@K looks at one round only. Sessions that stopped
//! early carry their last observed round forward, so a stopped hit stays a
//! hit. A target outside a narrowed pool never counts as retrieved.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{traces_jsonl, EvalConfig, EvalRun, SessionTrace};
use crate::error::{Error, Result};

/// Metric, K and round identifying one report cell.
type CellKey = (Metric, Option<usize>, Option<usize>);

pub const REPORT_SCHEMA: &str = "cirloop.report/1";
pub const MAP_FORMULA: &str =
    "AP@K = sum of precision@i over target positions i <= K, divided by min(K, |targets|); MAP@K is the mean over sessions x 100";
pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 50];

/// One session's target rank at one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankPoint {
    pub rank: usize,
    /// The target was outside the eligible pool; `rank` is a sentinel.
    pub absent: bool,
}

impl RankPoint {
    fn within(&self, k: usize) -> bool {
        !self.absent && self.rank <= k
    }
}

fn check_args(k: usize, round: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if round == 0 {
        return Err(Error::Config("rounds are numbered from 1".into()));
    }
    Ok(())
}

/// The point observed at `round`, carrying the last round forward.
fn at_round(series: &[RankPoint], round: usize) -> Option<RankPoint> {
    if series.is_empty() {
        return None;
    }
    Some(series[round.min(series.len()) - 1])
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

pub fn hits_at_k_points(series: &[Vec<RankPoint>], k: usize, round: usize) -> Result<f64> {
    check_args(k, round)?;
    let hits = series
        .iter()
        .filter(|s| {
            let upto = round.min(s.len());
            s[..upto].iter().any(|p| p.within(k))
        })
        .count();
    Ok(percent(hits, series.len()))
}

pub fn recall_at_k_points(series: &[Vec<RankPoint>], k: usize, round: usize) -> Result<f64> {
    check_args(k, round)?;
    let hits = series
        .iter()
        .filter(|s| at_round(s, round).is_some_and(|p| p.within(k)))
        .count();
    Ok(percent(hits, series.len()))
}

fn plain(ranks: &[Vec<usize>]) -> Vec<Vec<RankPoint>> {
    ranks
        .iter()
        .map(|s| s.iter().map(|&rank| RankPoint { rank, absent: false }).collect())
        .collect()
}

/// Hits@K over raw per-round rank lists.
pub fn hits_at_k_ranks(ranks: &[Vec<usize>], k: usize, round: usize) -> Result<f64> {
    hits_at_k_points(&plain(ranks), k, round)
}

/// Recall@K over raw per-round rank lists.
pub fn recall_at_k_ranks(ranks: &[Vec<usize>], k: usize, round: usize) -> Result<f64> {
    recall_at_k_points(&plain(ranks), k, round)
}

pub fn trace_points(trace: &SessionTrace) -> Vec<RankPoint> {
    trace
        .rounds
        .iter()
        .map(|r| RankPoint {
            rank: r.target_rank,
            absent: r.target_absent,
        })
        .collect()
}

pub fn hits_at_k(traces: &[SessionTrace], k: usize, round: usize) -> Result<f64> {
    hits_at_k_points(&traces.iter().map(trace_points).collect::<Vec<_>>(), k, round)
}

pub fn recall_at_k(traces: &[SessionTrace], k: usize, round: usize) -> Result<f64> {
    recall_at_k_points(&traces.iter().map(trace_points).collect::<Vec<_>>(), k, round)
}

/// AP@K of one ranked id list, as a fraction in [0, 1].
pub fn average_precision<S: AsRef<str>>(ranked: &[S], targets: &HashSet<&str>, k: usize) -> f64 {
    if targets.is_empty() || k == 0 {
        return 0.0;
    }
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranked.iter().take(k).enumerate() {
        if targets.contains(id.as_ref()) {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    sum / k.min(targets.len()) as f64
}

pub fn map_at_k(traces: &[SessionTrace], k: usize, round: usize) -> Result<f64> {
    check_args(k, round)?;
    if traces.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for t in traces {
        let r = &t.rounds[round.min(t.rounds.len()) - 1];
        if r.top_m.len() < k && r.top_m.len() < r.eligible {
            return Err(Error::Config(format!(
                "trace `{}` round {} keeps {} candidates; MAP@{k} needs M >= {k}",
                t.triplet_id,
                r.round,
                r.top_m.len()
            )));
        }
        let targets: HashSet<&str> = t.triplet.target_ids.iter().map(String::as_str).collect();
        let ids: Vec<&str> = r.top_m.iter().map(|s| s.image_id.as_str()).collect();
        total += average_precision(&ids, &targets, k);
    }
    Ok(100.0 * total / traces.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankStats {
    pub mean: f64,
    pub median: f64,
    /// Sessions whose rank at this round is a narrowed-pool sentinel.
    pub sentinel_count: usize,
}

pub fn rank_stats_points(series: &[Vec<RankPoint>], round: usize) -> Result<RankStats> {
    check_args(1, round)?;
    let points: Vec<RankPoint> = series.iter().filter_map(|s| at_round(s, round)).collect();
    if points.is_empty() {
        return Ok(RankStats {
            mean: 0.0,
            median: 0.0,
            sentinel_count: 0,
        });
    }
    let mut ranks: Vec<usize> = points.iter().map(|p| p.rank).collect();
    ranks.sort_unstable();
    let n = ranks.len();
    let mean = ranks.iter().map(|&r| r as f64).sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        ranks[n / 2] as f64
    } else {
        (ranks[n / 2 - 1] + ranks[n / 2]) as f64 / 2.0
    };
    Ok(RankStats {
        mean,
        median,
        sentinel_count: points.iter().filter(|p| p.absent).count(),
    })
}

pub fn rank_stats(traces: &[SessionTrace], round: usize) -> Result<RankStats> {
    rank_stats_points(&traces.iter().map(trace_points).collect::<Vec<_>>(), round)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Hits,
    Recall,
    Map,
    /// Highest MAP@K over the reported rounds.
    MapBest,
    RankMean,
    RankMedian,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Hits => "hits",
            Metric::Recall => "recall",
            Metric::Map => "map",
            Metric::MapBest => "map_best",
            Metric::RankMean => "rank_mean",
            Metric::RankMedian => "rank_median",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        [
            Metric::Hits,
            Metric::Recall,
            Metric::Map,
            Metric::MapBest,
            Metric::RankMean,
            Metric::RankMedian,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| Error::Format(format!("unknown metric `{s}`")))
    }
}

/// One report value. `dataset` is `all`, a category name, or `average`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub dataset: String,
    pub metric: Metric,
    pub k: Option<usize>,
    pub round: Option<usize>,
    pub value: f64,
}

impl Cell {
    pub fn key(&self) -> (String, Metric, Option<usize>, Option<usize>) {
        (self.dataset.clone(), self.metric, self.k, self.round)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub ks: Vec<usize>,
    pub rounds: Vec<usize>,
    pub trace_count: usize,
    pub failure_count: usize,
    pub categories: Vec<String>,
    pub cells: Vec<Cell>,
    pub warnings: Vec<String>,
    pub map_formula: String,
    pub trace_digest: String,
    pub config: Option<EvalConfig>,
}

impl EvalReport {
    pub fn get(&self, dataset: &str, metric: Metric, k: Option<usize>, round: Option<usize>) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.dataset == dataset && c.metric == metric && c.k == k && c.round == round)
            .map(|c| c.value)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: EvalReport =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if report.schema != REPORT_SCHEMA {
            return Err(Error::Format(format!("unsupported report schema `{}`", report.schema)));
        }
        Ok(report)
    }

    /// One row per (dataset, metric, K, round), values at full precision.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["dataset", "metric", "k", "round", "value"])?;
        for c in &self.cells {
            w.write_record([
                c.dataset.clone(),
                c.metric.as_str().to_string(),
                c.k.map(|k| k.to_string()).unwrap_or_default(),
                c.round.map(|r| r.to_string()).unwrap_or_default(),
                c.value.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    /// A two-decimal table of Hits, Recall and MAP by round, then rank stats.
    pub fn format_table(&self) -> String {
        let mut out = String::new();
        let datasets: Vec<String> = std::iter::once("all".to_string())
            .chain(self.categories.iter().cloned())
            .chain((!self.categories.is_empty()).then(|| "average".to_string()))
            .collect();
        for dataset in datasets {
            let _ = writeln!(out, "[{dataset}]");
            let mut header = format!("{:<14}", "metric");
            for r in &self.rounds {
                let _ = write!(header, "{:>10}", format!("R{r}"));
            }
            let _ = writeln!(out, "{header}");
            for metric in [Metric::Hits, Metric::Recall, Metric::Map] {
                for &k in &self.ks {
                    if self.get(&dataset, metric, Some(k), Some(self.rounds[0])).is_none() {
                        continue;
                    }
                    let mut line = format!("{:<14}", format!("{}@{k}", metric.as_str()));
                    for &r in &self.rounds {
                        let v = self.get(&dataset, metric, Some(k), Some(r)).unwrap_or(f64::NAN);
                        let _ = write!(line, "{v:>10.2}");
                    }
                    let _ = writeln!(out, "{line}");
                }
            }
            for metric in [Metric::RankMean, Metric::RankMedian] {
                let mut line = format!("{:<14}", metric.as_str());
                for &r in &self.rounds {
                    let v = self.get(&dataset, metric, None, Some(r)).unwrap_or(f64::NAN);
                    let _ = write!(line, "{v:>10.2}");
                }
                let _ = writeln!(out, "{line}");
            }
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

pub fn parse_csv(text: &str) -> Result<Vec<Cell>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    if headers != vec!["dataset", "metric", "k", "round", "value"] {
        return Err(Error::Format(format!("unexpected report csv header {headers:?}")));
    }
    let opt = |s: &str| -> Result<Option<usize>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Format(format!("bad integer `{s}`")))
        }
    };
    let mut cells = Vec::new();
    for row in r.records() {
        let row = row?;
        cells.push(Cell {
            dataset: row[0].to_string(),
            metric: Metric::parse(&row[1])?,
            k: opt(&row[2])?,
            round: opt(&row[3])?,
            value: row[4]
                .parse()
                .map_err(|_| Error::Format(format!("bad value `{}`", &row[4])))?,
        });
    }
    Ok(cells)
}

pub fn trace_digest(traces: &[SessionTrace]) -> String {
    hex::encode(Sha256::digest(traces_jsonl(traces)))
}

fn group_cells(dataset: &str, traces: &[SessionTrace], ks: &[usize], rounds: &[usize]) -> Result<Vec<Cell>> {
    let series: Vec<Vec<RankPoint>> = traces.iter().map(trace_points).collect();
    let mut cells = Vec::new();
    let mut cell = |metric, k, round, value| {
        cells.push(Cell {
            dataset: dataset.to_string(),
            metric,
            k,
            round,
            value,
        })
    };
    let map_ok = traces
        .iter()
        .all(|t| t.rounds.iter().all(|r| r.top_m.len() >= ks.iter().copied().max().unwrap_or(0).min(r.eligible)));
    for &k in ks {
        let mut best: Option<f64> = None;
        for &r in rounds {
            cell(Metric::Hits, Some(k), Some(r), hits_at_k_points(&series, k, r)?);
            cell(Metric::Recall, Some(k), Some(r), recall_at_k_points(&series, k, r)?);
            if map_ok {
                let v = map_at_k(traces, k, r)?;
                best = Some(best.map_or(v, |b: f64| b.max(v)));
                cell(Metric::Map, Some(k), Some(r), v);
            }
        }
        if let Some(b) = best {
            cell(Metric::MapBest, Some(k), None, b);
        }
    }
    for &r in rounds {
        let s = rank_stats_points(&series, r)?;
        cell(Metric::RankMean, None, Some(r), s.mean);
        cell(Metric::RankMedian, None, Some(r), s.median);
    }
    Ok(cells)
}

fn check_invariants(cells: &[Cell], ks: &[usize], rounds: &[usize]) -> Result<()> {
    let lookup: BTreeMap<_, f64> = cells.iter().map(|c| (c.key(), c.value)).collect();
    let get = |d: &str, m, k, r| lookup.get(&(d.to_string(), m, Some(k), Some(r))).copied();
    let datasets: HashSet<&str> = cells.iter().map(|c| c.dataset.as_str()).collect();
    let fail = |msg: String| Err(Error::InvariantViolation(msg));
    for c in cells {
        if matches!(c.metric, Metric::Hits | Metric::Recall | Metric::Map | Metric::MapBest)
            && !(0.0..=100.0).contains(&c.value)
        {
            return fail(format!("{:?} out of [0, 100]", c));
        }
    }
    for d in datasets {
        for &k in ks {
            if let (Some(h), Some(rc)) = (get(d, Metric::Hits, k, 1), get(d, Metric::Recall, k, 1)) {
                if h != rc {
                    return fail(format!("{d}: round-1 Hits@{k} {h} differs from Recall@{k} {rc}"));
                }
            }
            for w in rounds.windows(2) {
                let (a, b) = (get(d, Metric::Hits, k, w[0]), get(d, Metric::Hits, k, w[1]));
                if let (Some(a), Some(b)) = (a, b) {
                    if a > b {
                        return fail(format!("{d}: Hits@{k} decreases from round {} to {}", w[0], w[1]));
                    }
                }
            }
        }
        for &r in rounds {
            for w in ks.windows(2) {
                let (a, b) = (get(d, Metric::Hits, w[0], r), get(d, Metric::Hits, w[1], r));
                if let (Some(a), Some(b)) = (a, b) {
                    if a > b {
                        return fail(format!("{d}: Hits@{} exceeds Hits@{} at round {r}", w[0], w[1]));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Builds and checks the report. `categories` group traces by their
/// triplet's category, with an `average` row across categories.
pub fn make_report_from_traces(
    traces: &[SessionTrace],
    config: Option<&EvalConfig>,
    failure_count: usize,
    ks: &[usize],
    rounds: &[usize],
) -> Result<EvalReport> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut rounds = rounds.to_vec();
    rounds.sort_unstable();
    rounds.dedup();
    if ks.is_empty() || rounds.is_empty() {
        return Err(Error::Config("report needs at least one K and one round".into()));
    }
    if let Some(&r) = rounds.first() {
        check_args(ks[0], r)?;
    }
    if let Some(c) = config {
        if let Some(&r) = rounds.iter().find(|&&r| r > c.r_max) {
            return Err(Error::Config(format!("round {r} exceeds r_max {}", c.r_max)));
        }
    }

    let mut warnings = Vec::new();
    if traces.is_empty() {
        warnings.push("no traces; every value is 0".to_string());
    }
    if failure_count > 0 {
        warnings.push(format!("{failure_count} sessions failed and are not counted"));
    }
    let sentinels = traces
        .iter()
        .filter(|t| t.rounds.iter().any(|r| r.target_absent))
        .count();
    if sentinels > 0 {
        warnings.push(format!(
            "{sentinels} sessions lost the target to pool narrowing; their ranks include the sentinel value"
        ));
    }

    let mut cells = group_cells("all", traces, &ks, &rounds)?;
    if !cells.iter().any(|c| c.metric == Metric::Map) && !traces.is_empty() {
        warnings.push("traces keep fewer than K candidates; MAP omitted".to_string());
    }

    let mut by_category: BTreeMap<String, Vec<SessionTrace>> = BTreeMap::new();
    for t in traces {
        if let Some(c) = &t.triplet.category {
            by_category.entry(c.clone()).or_default().push(t.clone());
        }
    }
    let categories: Vec<String> = by_category.keys().cloned().collect();
    if !by_category.is_empty() {
        let mut per_category = Vec::new();
        for (c, group) in &by_category {
            per_category.extend(group_cells(c, group, &ks, &rounds)?);
        }
        let mut sums: BTreeMap<CellKey, (f64, usize)> = BTreeMap::new();
        for c in &per_category {
            let e = sums.entry((c.metric, c.k, c.round)).or_insert((0.0, 0));
            e.0 += c.value;
            e.1 += 1;
        }
        // Keep the per-group cell order for the average rows.
        let order: Vec<_> = group_cells(&categories[0], &by_category[&categories[0]], &ks, &rounds)?
            .into_iter()
            .map(|c| (c.metric, c.k, c.round))
            .collect();
        cells.extend(per_category);
        for key in order {
            if let Some(&(sum, n)) = sums.get(&key) {
                if n == categories.len() {
                    cells.push(Cell {
                        dataset: "average".into(),
                        metric: key.0,
                        k: key.1,
                        round: key.2,
                        value: sum / n as f64,
                    });
                }
            }
        }
    }

    check_invariants(&cells, &ks, &rounds)?;
    Ok(EvalReport {
        schema: REPORT_SCHEMA.to_string(),
        ks,
        rounds,
        trace_count: traces.len(),
        failure_count,
        categories,
        cells,
        warnings,
        map_formula: MAP_FORMULA.to_string(),
        trace_digest: trace_digest(traces),
        config: config.cloned(),
    })
}

pub fn make_report(run: &EvalRun, ks: &[usize], rounds: &[usize]) -> Result<EvalReport> {
    make_report_from_traces(&run.traces, Some(&run.config), run.meta.failure_count, ks, rounds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDiff {
    pub dataset: String,
    pub metric: Metric,
    pub k: Option<usize>,
    pub round: Option<usize>,
    pub left: Option<f64>,
    pub right: Option<f64>,
}

/// Cell-wise comparison. Cells present on one side only are differences.
pub fn diff_reports(left: &EvalReport, right: &EvalReport, tolerance: f64) -> Result<Vec<CellDiff>> {
    if left.schema != right.schema {
        return Err(Error::Format(format!(
            "report schemas differ: `{}` vs `{}`",
            left.schema, right.schema
        )));
    }
    let l: BTreeMap<_, f64> = left.cells.iter().map(|c| (c.key(), c.value)).collect();
    let r: BTreeMap<_, f64> = right.cells.iter().map(|c| (c.key(), c.value)).collect();
    let mut keys: Vec<_> = l.keys().chain(r.keys()).cloned().collect();
    keys.sort();
    keys.dedup();
    let mut out = Vec::new();
    for key in keys {
        let (a, b) = (l.get(&key).copied(), r.get(&key).copied());
        let same = match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() <= tolerance,
            _ => false,
        };
        if !same {
            out.push(CellDiff {
                dataset: key.0,
                metric: key.1,
                k: key.2,
                round: key.3,
                left: a,
                right: b,
            });
        }
    }
    Ok(out)
}

/// Plot-ready CSV: one row per round, one column per (dataset, K) series.
pub fn plot_csv(report: &EvalReport, metric: Metric) -> Result<String> {
    let mut series: Vec<(String, Option<usize>)> = Vec::new();
    for c in &report.cells {
        if c.metric == metric && !series.contains(&(c.dataset.clone(), c.k)) {
            series.push((c.dataset.clone(), c.k));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["round".to_string()];
    header.extend(series.iter().map(|(d, k)| match k {
        Some(k) => format!("{d}:{}@{k}", metric.as_str()),
        None => format!("{d}:{}", metric.as_str()),
    }));
    w.write_record(&header)?;
    for &r in &report.rounds {
        let mut row = vec![r.to_string()];
        for (d, k) in &series {
            row.push(
                report
                    .get(d, metric, *k, Some(r))
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
            );
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
