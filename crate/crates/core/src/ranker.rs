//! History fusion and exact cosine ranking.
//!
//! The ranker averages the session's composed queries and scores every
//! eligible gallery entry by cosine similarity to that mean. Gallery vectors
//! are unit-norm, so the score is a plain dot product; picking the highest
//! similarity is the same as picking the smallest cosine distance `1 − cos`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composer::hash64;
use crate::error::{Error, Result};
use crate::gallery::{dot, normalize_f64, EmbeddingGallery, EmbeddingVector, GalleryEntry};

/// Galleries at least this large are scored in parallel.
const PARALLEL_THRESHOLD: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct FusedHistory {
    pub vector: EmbeddingVector,
    /// The mean cancelled to zero and the latest query was used instead.
    pub fell_back: bool,
}

/// Mean of the history `[q_1, …, q_r]`, renormalized to unit length.
pub fn fuse_history(history: &[EmbeddingVector]) -> Result<FusedHistory> {
    let last = history
        .last()
        .ok_or_else(|| Error::Config("history is empty".into()))?;
    let d = last.dim();
    if let Some(bad) = history.iter().find(|q| q.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.dim(),
        });
    }
    if history.len() == 1 {
        return Ok(FusedHistory {
            vector: last.clone(),
            fell_back: false,
        });
    }
    let r = history.len() as f64;
    let mut mean = vec![0.0f64; d];
    for q in history {
        for (m, &x) in mean.iter_mut().zip(q.as_slice()) {
            *m += f64::from(x);
        }
    }
    for m in &mut mean {
        *m /= r;
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    // Cancellation below this is numerical noise from opposite queries.
    if norm <= 1e-9 {
        return Ok(FusedHistory {
            vector: last.clone(),
            fell_back: true,
        });
    }
    let vector = if (norm - 1.0).abs() <= 1e-6 {
        EmbeddingVector::new(mean.iter().map(|&x| x as f32).collect())?
    } else {
        normalize_f64(&mean)?
    };
    Ok(FusedHistory {
        vector,
        fell_back: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub image_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub round: usize,
    pub items: Vec<Scored>,
}

impl Ranking {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|s| s.image_id.as_str())
    }

    pub fn top(&self, m: usize) -> &[Scored] {
        &self.items[..m.min(self.items.len())]
    }
}

/// Descending score, ties by ascending image id.
fn by_score_then_id(a: &Scored, b: &Scored) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
}

/// Ranks the entries accepted by `eligible`.
pub fn rank_where<F>(fused: &EmbeddingVector, gallery: &EmbeddingGallery, eligible: F) -> Result<Ranking>
where
    F: Fn(&GalleryEntry) -> bool + Sync,
{
    if fused.dim() != gallery.dim() {
        return Err(Error::DimensionMismatch {
            expected: gallery.dim(),
            actual: fused.dim(),
        });
    }
    let q = fused.as_slice();
    let score = |e: &GalleryEntry| Scored {
        image_id: e.image_id.clone(),
        score: dot(q, e.vector.as_slice()),
    };
    let entries = gallery.entries();
    let mut items: Vec<Scored> = if entries.len() >= PARALLEL_THRESHOLD {
        entries.par_iter().filter(|e| eligible(e)).map(score).collect()
    } else {
        entries.iter().filter(|e| eligible(e)).map(score).collect()
    };
    if items.is_empty() {
        return Err(Error::AllExcluded);
    }
    if items.len() >= PARALLEL_THRESHOLD {
        items.par_sort_unstable_by(by_score_then_id);
    } else {
        items.sort_unstable_by(by_score_then_id);
    }
    Ok(Ranking { round: 0, items })
}

/// Ranks every gallery entry not in `excluded`.
pub fn rank_gallery(
    fused: &EmbeddingVector,
    gallery: &EmbeddingGallery,
    excluded: &HashSet<String>,
) -> Result<Ranking> {
    rank_where(fused, gallery, |e| !excluded.contains(&e.image_id))
}

/// 1-based position of the best-ranked target.
pub fn target_rank<S: AsRef<str>>(ranking: &Ranking, target_ids: &[S]) -> Result<usize> {
    ranking
        .items
        .iter()
        .position(|s| target_ids.iter().any(|t| t.as_ref() == s.image_id))
        .map(|p| p + 1)
        .ok_or(Error::TargetMissing)
}

/// How the next round's reference image is picked from a ranking.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum NextRefPolicy {
    #[default]
    Top1,
    /// Uniform over the first `n` candidates.
    RandomTop(usize),
    /// The candidate at this 1-based rank.
    Fixed(usize),
}


impl fmt::Display for NextRefPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NextRefPolicy::Top1 => f.write_str("top1"),
            NextRefPolicy::RandomTop(n) => write!(f, "random{n}"),
            NextRefPolicy::Fixed(i) => write!(f, "fixed:{i}"),
        }
    }
}

impl FromStr for NextRefPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown next-reference policy `{s}`"));
        let positive = |n: &str| -> Result<usize> {
            match n.parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v),
                _ => Err(bad()),
            }
        };
        if s == "top1" {
            Ok(NextRefPolicy::Top1)
        } else if let Some(n) = s.strip_prefix("fixed:") {
            Ok(NextRefPolicy::Fixed(positive(n)?))
        } else if let Some(n) = s.strip_prefix("random_top:").or_else(|| s.strip_prefix("random")) {
            Ok(NextRefPolicy::RandomTop(positive(n)?))
        } else {
            Err(bad())
        }
    }
}

impl Serialize for NextRefPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NextRefPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Picks the next reference image. The random policy draws from a PRNG keyed
/// by `(rng_seed, session_key, round)` so reruns are reproducible.
pub fn select_next_reference<'r>(
    ranking: &'r Ranking,
    policy: NextRefPolicy,
    rng_seed: u64,
    session_key: &str,
    round: usize,
) -> Result<&'r str> {
    if ranking.is_empty() {
        return Err(Error::AllExcluded);
    }
    let index = match policy {
        NextRefPolicy::Top1 => 0,
        NextRefPolicy::Fixed(i) => {
            if i == 0 || i > ranking.len() {
                return Err(Error::Config(format!(
                    "fixed({i}) exceeds ranking of length {}",
                    ranking.len()
                )));
            }
            i - 1
        }
        NextRefPolicy::RandomTop(n) => {
            let n = n.min(ranking.len()).max(1);
            let mut rng = ChaCha20Rng::seed_from_u64(hash64(rng_seed, &format!("{session_key}\u{1f}{round}")));
            rng.random_range(0..n)
        }
    };
    Ok(&ranking.items[index].image_id)
}
