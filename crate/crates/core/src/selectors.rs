//! Demonstration selection: random, RICES, text-only, text-then-image, and
//! MMICES (image prefilter, text rerank).
//!
//! Every selector is a pure function of (query, support, config). Support
//! positions, not matrix rows, are the tie-breaking index, so ties always go
//! to the record that appears first in the support file.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{BoundSet, Modality, Record, TaskKind};
use crate::par;
use crate::rng::query_rng;
use crate::similarity::{score_all, top_k, ScoredIndex, SimilarityError};

/// Prefilter size used when none is configured.
pub const DEFAULT_PREFILTER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Random,
    Rices,
    TextOnly,
    TextImage,
    Mmices,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Random,
        Method::Rices,
        Method::TextOnly,
        Method::TextImage,
        Method::Mmices,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Rices => "rices",
            Method::TextOnly => "text_only",
            Method::TextImage => "text_image",
            Method::Mmices => "mmices",
        }
    }

    /// Whether the method has a prefilter stage.
    pub fn is_two_stage(self) -> bool {
        matches!(self, Method::TextImage | Method::Mmices)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown selection method {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub method: Method,
    pub shots: usize,
    #[serde(default)]
    pub prefilter: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_exclude_self")]
    pub exclude_self: bool,
}

fn default_exclude_self() -> bool {
    true
}

impl SelectionConfig {
    /// Config for `method` with the default prefilter for two-stage methods
    /// and `seed` attached only to random selection.
    pub fn for_method(method: Method, shots: usize, prefilter: Option<usize>, seed: u64) -> Self {
        Self {
            method,
            shots,
            prefilter: method
                .is_two_stage()
                .then(|| prefilter.unwrap_or(DEFAULT_PREFILTER)),
            seed: (method == Method::Random).then_some(seed),
            exclude_self: true,
        }
    }

    pub fn validate(&self) -> Result<(), SelectError> {
        let bad = |msg: String| Err(SelectError::InvalidConfig(msg));
        if self.shots == 0 {
            return bad("shots must be at least 1".into());
        }
        match (self.method.is_two_stage(), self.prefilter) {
            (true, None) => return bad(format!("{} requires a prefilter size", self.method)),
            (true, Some(k)) if k < self.shots => {
                return bad(format!("prefilter {k} is smaller than shots {}", self.shots))
            }
            (false, Some(_)) => return bad(format!("{} takes no prefilter", self.method)),
            _ => {}
        }
        match (self.method == Method::Random, self.seed) {
            (true, None) => bad("random selection requires a seed".into()),
            (false, Some(_)) => bad(format!("{} takes no seed", self.method)),
            _ => Ok(()),
        }
    }
}

/// Demonstrations chosen for one query.
///
/// `demo_ids` are in rank order (best first for similarity methods, draw
/// order for random). Score lists, when present, align with `demo_ids`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub query_id: String,
    pub method: Method,
    pub shots: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefilter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub demo_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1_scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_scores: Option<Vec<f64>>,
}

impl SelectionResult {
    /// Score of the stage that produced the final ranking.
    pub fn final_scores(&self) -> Option<&[f64]> {
        self.stage2_scores
            .as_deref()
            .or(self.stage1_scores.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SelectError {
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
    #[error("query {query_id:?}: need {needed} eligible support records, have {eligible}")]
    SupportTooSmall {
        query_id: String,
        needed: usize,
        eligible: usize,
    },
    #[error("captioning query {query_id:?} has no proxy_text for text similarity")]
    MissingProxyText { query_id: String },
    #[error("query {query_id:?}: {source}")]
    Similarity {
        query_id: String,
        #[source]
        source: SimilarityError,
    },
    #[error("query set is {query} but support set is {support}")]
    TaskMismatch { query: TaskKind, support: TaskKind },
}

/// Batch failure listing every query that could not be served.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{} of {total} queries failed; first: {}", .failures.len(), .failures[0].1)]
pub struct BatchError {
    pub total: usize,
    pub failures: Vec<(String, SelectError)>,
}

/// A query record with its two embedding vectors.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub record: &'a Record,
    pub task: TaskKind,
    pub visual: &'a [f32],
    pub textual: &'a [f32],
}

impl<'a> Query<'a> {
    pub fn from_set(set: &'a BoundSet, i: usize) -> Self {
        Self {
            record: set.record(i),
            task: set.task(),
            visual: set.vector(Modality::Visual, i),
            textual: set.vector(Modality::Textual, i),
        }
    }

    fn id(&self) -> &str {
        &self.record.id
    }

    fn vector(&self, modality: Modality) -> Result<&'a [f32], SelectError> {
        match modality {
            Modality::Visual => Ok(self.visual),
            Modality::Textual => {
                // The textual row of a captioning query embeds its proxy caption.
                if self.task == TaskKind::Captioning && self.record.proxy_text.is_none() {
                    return Err(SelectError::MissingProxyText {
                        query_id: self.id().to_owned(),
                    });
                }
                Ok(self.textual)
            }
        }
    }
}

fn eligible(q: &Query<'_>, support: &BoundSet, cfg: &SelectionConfig) -> Vec<usize> {
    (0..support.len())
        .filter(|&i| !(cfg.exclude_self && support.record(i).id == q.record.id))
        .collect()
}

fn require(q: &Query<'_>, needed: usize, eligible: usize) -> Result<(), SelectError> {
    if eligible < needed {
        return Err(SelectError::SupportTooSmall {
            query_id: q.id().to_owned(),
            needed,
            eligible,
        });
    }
    Ok(())
}

/// Top `k` of `positions` by similarity to the query in `modality`.
/// Returned indices are support positions.
fn rank_stage(
    q: &Query<'_>,
    support: &BoundSet,
    modality: Modality,
    positions: &[usize],
    k: usize,
) -> Result<Vec<ScoredIndex>, SelectError> {
    let wrap = |source| SelectError::Similarity {
        query_id: q.id().to_owned(),
        source,
    };
    let qv = q.vector(modality)?;
    let rows: Vec<usize> = positions.iter().map(|&p| support.row_of(modality, p)).collect();
    let mut scored = score_all(qv, support.matrix(modality), Some(&rows)).map_err(wrap)?;
    for (s, &p) in scored.iter_mut().zip(positions) {
        s.index = p;
    }
    top_k(&scored, k).map_err(wrap)
}

fn result(
    q: &Query<'_>,
    support: &BoundSet,
    cfg: &SelectionConfig,
    picks: &[usize],
    stage1: Option<Vec<f64>>,
    stage2: Option<Vec<f64>>,
) -> SelectionResult {
    SelectionResult {
        query_id: q.id().to_owned(),
        method: cfg.method,
        shots: cfg.shots,
        prefilter: cfg.prefilter,
        seed: cfg.seed,
        demo_ids: picks.iter().map(|&p| support.record(p).id.clone()).collect(),
        stage1_scores: stage1,
        stage2_scores: stage2,
    }
}

fn positions(v: &[ScoredIndex]) -> Vec<usize> {
    v.iter().map(|s| s.index).collect()
}

fn scores(v: &[ScoredIndex]) -> Vec<f64> {
    v.iter().map(|s| s.score).collect()
}

pub fn select_random(q: &Query<'_>, support: &BoundSet, cfg: &SelectionConfig) -> Result<SelectionResult, SelectError> {
    cfg.validate()?;
    let seed = cfg.seed.expect("validated");
    let pool = eligible(q, support, cfg);
    require(q, cfg.shots, pool.len())?;
    let mut rng = query_rng(seed, q.id());
    let picks: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), cfg.shots)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    Ok(result(q, support, cfg, &picks, None, None))
}

fn select_one_stage(
    q: &Query<'_>,
    support: &BoundSet,
    cfg: &SelectionConfig,
    modality: Modality,
) -> Result<SelectionResult, SelectError> {
    cfg.validate()?;
    let pool = eligible(q, support, cfg);
    require(q, cfg.shots, pool.len())?;
    let ranked = rank_stage(q, support, modality, &pool, cfg.shots)?;
    Ok(result(q, support, cfg, &positions(&ranked), Some(scores(&ranked)), None))
}

/// Prefilter on `first`, rerank the survivors on `second`.
///
/// A prefilter larger than the eligible pool keeps the whole pool.
fn select_two_stage(
    q: &Query<'_>,
    support: &BoundSet,
    cfg: &SelectionConfig,
    first: Modality,
    second: Modality,
) -> Result<SelectionResult, SelectError> {
    cfg.validate()?;
    let pool = eligible(q, support, cfg);
    require(q, cfg.shots, pool.len())?;
    let k = cfg.prefilter.expect("validated").min(pool.len());
    let candidates = rank_stage(q, support, first, &pool, k)?;
    let ranked = rank_stage(q, support, second, &positions(&candidates), cfg.shots)?;
    let stage1 = ranked
        .iter()
        .map(|r| {
            candidates
                .iter()
                .find(|c| c.index == r.index)
                .map(|c| c.score)
                .expect("reranked item comes from the candidate set")
        })
        .collect();
    Ok(result(q, support, cfg, &positions(&ranked), Some(stage1), Some(scores(&ranked))))
}

pub fn select_rices(q: &Query<'_>, support: &BoundSet, cfg: &SelectionConfig) -> Result<SelectionResult, SelectError> {
    select_one_stage(q, support, cfg, Modality::Visual)
}

pub fn select_text_only(q: &Query<'_>, support: &BoundSet, cfg: &SelectionConfig) -> Result<SelectionResult, SelectError> {
    select_one_stage(q, support, cfg, Modality::Textual)
}

pub fn select_mmices(q: &Query<'_>, support: &BoundSet, cfg: &SelectionConfig) -> Result<SelectionResult, SelectError> {
    select_two_stage(q, support, cfg, Modality::Visual, Modality::Textual)
}

pub fn select_text_image(q: &Query<'_>, support: &BoundSet, cfg: &SelectionConfig) -> Result<SelectionResult, SelectError> {
    select_two_stage(q, support, cfg, Modality::Textual, Modality::Visual)
}

/// Dispatches on `cfg.method`.
pub fn select(q: &Query<'_>, support: &BoundSet, cfg: &SelectionConfig) -> Result<SelectionResult, SelectError> {
    match cfg.method {
        Method::Random => select_random(q, support, cfg),
        Method::Rices => select_rices(q, support, cfg),
        Method::TextOnly => select_text_only(q, support, cfg),
        Method::TextImage => select_text_image(q, support, cfg),
        Method::Mmices => select_mmices(q, support, cfg),
    }
}

/// Selects for every query, in query order. Work fans out across the
/// current worker pool; the output does not depend on the thread count.
pub fn select_batch(
    queries: &BoundSet,
    support: &BoundSet,
    cfg: &SelectionConfig,
) -> Result<Vec<SelectionResult>, BatchError> {
    let fail = |e: SelectError| BatchError {
        total: queries.len(),
        failures: vec![(String::new(), e)],
    };
    cfg.validate().map_err(fail)?;
    if queries.task() != support.task() {
        return Err(fail(SelectError::TaskMismatch {
            query: queries.task(),
            support: support.task(),
        }));
    }
    let results = par::map_range(queries.len(), |i| select(&Query::from_set(queries, i), support, cfg));
    let mut out = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(sel) => out.push(sel),
            Err(e) => failures.push((queries.record(i).id.clone(), e)),
        }
    }
    if failures.is_empty() {
        Ok(out)
    } else {
        Err(BatchError {
            total: queries.len(),
            failures,
        })
    }
}
