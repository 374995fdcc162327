//! Exact cosine similarity and deterministic top-K selection.
//!
//! All accumulation is `f64`, left to right, so scores are reproducible
//! across platforms and thread counts.

use std::cmp::Ordering;

use crate::embedding_store::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimilarityError {
    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("candidate index {index} out of range for {n_rows} rows")]
    IndexOutOfRange { index: usize, n_rows: usize },
    #[error("requested top {k} of only {available} scores")]
    NotEnough { k: usize, available: usize },
    #[error("score at index {index} is not finite")]
    NonFinite { index: usize },
}

/// A similarity score attached to a row (or support) index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredIndex {
    pub index: usize,
    pub score: f64,
}

impl ScoredIndex {
    pub fn new(index: usize, score: f64) -> Self {
        Self { index, score }
    }
}

/// Ranking order: higher score first, lower index on ties.
pub fn rank_order(a: &ScoredIndex, b: &ScoredIndex) -> Ordering {
    b.score.total_cmp(&a.score).then(a.index.cmp(&b.index))
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}

fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine_with_norm(a: &[f32], norm_a: f64, b: &[f32]) -> Result<f64, SimilarityError> {
    let norm_b = norm(b);
    if norm_b == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    Ok((dot(a, b) / (norm_a * norm_b)).clamp(-1.0, 1.0))
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let norm_a = norm(a);
    if norm_a == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    cosine_with_norm(a, norm_a, b)
}

/// Cosine of `query` against every row of `m`, or only the rows in
/// `candidates` (in that order). `ScoredIndex::index` is the matrix row.
pub fn score_all(
    query: &[f32],
    m: &EmbeddingMatrix,
    candidates: Option<&[usize]>,
) -> Result<Vec<ScoredIndex>, SimilarityError> {
    if query.len() != m.dim() {
        return Err(SimilarityError::LengthMismatch {
            left: query.len(),
            right: m.dim(),
        });
    }
    let norm_q = norm(query);
    if norm_q == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    let score = |row: usize| -> Result<ScoredIndex, SimilarityError> {
        if row >= m.n_rows() {
            return Err(SimilarityError::IndexOutOfRange {
                index: row,
                n_rows: m.n_rows(),
            });
        }
        Ok(ScoredIndex::new(row, cosine_with_norm(query, norm_q, m.row(row))?))
    };
    match candidates {
        Some(rows) => rows.iter().map(|&r| score(r)).collect(),
        None => (0..m.n_rows()).map(score).collect(),
    }
}

/// The `k` best scores, sorted by [`rank_order`].
///
/// Uses partial selection, then sorts only the selected prefix.
pub fn top_k(scores: &[ScoredIndex], k: usize) -> Result<Vec<ScoredIndex>, SimilarityError> {
    if k > scores.len() {
        return Err(SimilarityError::NotEnough {
            k,
            available: scores.len(),
        });
    }
    if let Some(bad) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(SimilarityError::NonFinite { index: bad.index });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut buf = scores.to_vec();
    if k < buf.len() {
        buf.select_nth_unstable_by(k - 1, rank_order);
        buf.truncate(k);
    }
    buf.sort_unstable_by(rank_order);
    Ok(buf)
}
