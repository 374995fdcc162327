//! A toy interleaved image-text decoder block used to study information flow.
//!
//! Each block is masked cross-attention (text queries over image
//! keys/values, where a text token sees only the image of its own segment)
//! followed by causal self-attention over text tokens, both with residual
//! connections. Because of the per-image mask, the query's text can only
//! reach demonstration images indirectly, through self-attention over the
//! demonstration text. [`run_probe`] measures how much the last text
//! position changes when demonstration images or the query image are zeroed.
//!
//! Single head, no biases, no gating. Weights and embeddings are standard
//! normal draws scaled by `1/sqrt(d)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::par;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProbeError {
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("{what}: expected {expected_rows}×{expected_cols}, got {rows}×{cols}")]
    Shape {
        what: &'static str,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("probe needs at least one seed")]
    NoSeeds,
    #[error("dimension and depth must be positive")]
    ZeroSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentShape {
    pub image_tokens: usize,
    pub text_tokens: usize,
}

/// Token counts of each interleaved segment; the last segment is the query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterleaveLayout {
    segments: Vec<SegmentShape>,
}

impl InterleaveLayout {
    pub fn new(segments: Vec<SegmentShape>) -> Result<Self, ProbeError> {
        if segments.is_empty() {
            return Err(ProbeError::Layout("no segments".into()));
        }
        if let Some(i) = segments.iter().position(|s| s.text_tokens == 0) {
            return Err(ProbeError::Layout(format!("segment {i} has no text tokens")));
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[SegmentShape] {
        &self.segments
    }

    pub fn total_image_tokens(&self) -> usize {
        self.segments.iter().map(|s| s.image_tokens).sum()
    }

    pub fn total_text_tokens(&self) -> usize {
        self.segments.iter().map(|s| s.text_tokens).sum()
    }

    pub fn query_segment(&self) -> usize {
        self.segments.len() - 1
    }

    /// Image token range of segment `seg`.
    pub fn image_range(&self, seg: usize) -> std::ops::Range<usize> {
        let start: usize = self.segments[..seg].iter().map(|s| s.image_tokens).sum();
        start..start + self.segments[seg].image_tokens
    }

    /// Text token range of segment `seg`.
    pub fn text_range(&self, seg: usize) -> std::ops::Range<usize> {
        let start: usize = self.segments[..seg].iter().map(|s| s.text_tokens).sum();
        start..start + self.segments[seg].text_tokens
    }

    /// Segment owning text token `t`.
    pub fn segment_of_text(&self, t: usize) -> usize {
        let mut end = 0;
        for (i, s) in self.segments.iter().enumerate() {
            end += s.text_tokens;
            if t < end {
                return i;
            }
        }
        panic!("text token {t} out of range");
    }
}

impl FromStr for InterleaveLayout {
    type Err = ProbeError;

    /// `"1x2,1x2,1x1"`: image tokens `x` text tokens per segment.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let segments = s
            .split(',')
            .map(|part| {
                let (img, txt) = part
                    .trim()
                    .split_once('x')
                    .ok_or_else(|| ProbeError::Layout(format!("segment {part:?} is not IMGxTXT")))?;
                let parse = |v: &str| {
                    v.parse::<usize>()
                        .map_err(|_| ProbeError::Layout(format!("bad count {v:?} in {part:?}")))
                };
                Ok(SegmentShape {
                    image_tokens: parse(img)?,
                    text_tokens: parse(txt)?,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(segments)
    }
}

impl fmt::Display for InterleaveLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .segments
            .iter()
            .map(|s| format!("{}x{}", s.image_tokens, s.text_tokens))
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Boolean `text_tokens × image_tokens` cross-attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossMask {
    pub rows: usize,
    pub cols: usize,
    data: Vec<bool>,
}

impl CrossMask {
    pub fn get(&self, t: usize, v: usize) -> bool {
        self.data[t * self.cols + v]
    }

    pub fn row(&self, t: usize) -> &[bool] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }
}

/// Entry `(t, v)` is true iff image token `v` belongs to the image of text
/// token `t`'s own segment.
pub fn build_cross_mask(layout: &InterleaveLayout) -> CrossMask {
    let rows = layout.total_text_tokens();
    let cols = layout.total_image_tokens();
    let mut data = vec![false; rows * cols];
    for seg in 0..layout.segments().len() {
        for t in layout.text_range(seg) {
            for v in layout.image_range(seg) {
                data[t * cols + v] = true;
            }
        }
    }
    CrossMask { rows, cols, data }
}

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    fn random(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self · rhs`, accumulated left to right.
    fn matmul(&self, rhs: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for j in 0..rhs.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.data[i * self.cols + k] * rhs.data[k * rhs.cols + j];
                }
                out.data[i * rhs.cols + j] = acc;
            }
        }
        out
    }

    fn check(&self, what: &'static str, rows: usize, cols: usize) -> Result<(), ProbeError> {
        if self.rows != rows || self.cols != cols {
            return Err(ProbeError::Shape {
                what,
                expected_rows: rows,
                expected_cols: cols,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }
}

/// Projections for one cross-attention + self-attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub cross_q: Matrix,
    pub cross_k: Matrix,
    pub cross_v: Matrix,
    pub self_q: Matrix,
    pub self_k: Matrix,
    pub self_v: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeWeights {
    pub dim: usize,
    pub seed: u64,
    pub blocks: Vec<BlockWeights>,
}

impl ProbeWeights {
    pub fn random(dim: usize, depth: usize, seed: u64) -> Self {
        Self::draw(dim, depth, seed, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn draw(dim: usize, depth: usize, seed: u64, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let blocks = (0..depth)
            .map(|_| BlockWeights {
                cross_q: Matrix::random(dim, dim, scale, rng),
                cross_k: Matrix::random(dim, dim, scale, rng),
                cross_v: Matrix::random(dim, dim, scale, rng),
                self_q: Matrix::random(dim, dim, scale, rng),
                self_k: Matrix::random(dim, dim, scale, rng),
                self_v: Matrix::random(dim, dim, scale, rng),
            })
            .collect();
        Self { dim, seed, blocks }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualMask {
    None,
    MaskDemoVisual,
    MaskQueryVisual,
}

/// Per-block intermediates of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    /// Cross-attention weights, `text × image`; all-masked rows are zero.
    pub cross_attn: Matrix,
    /// Cross-attention contribution added to the residual stream.
    pub cross_out: Matrix,
    /// Causal self-attention weights, `text × text`.
    pub self_attn: Matrix,
    /// Hidden states after the block.
    pub hidden: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub blocks: Vec<BlockOutput>,
}

impl ForwardOutput {
    pub fn hidden(&self) -> &Matrix {
        &self.blocks.last().expect("at least one block").hidden
    }

    pub fn self_attn(&self) -> &Matrix {
        &self.blocks.last().expect("at least one block").self_attn
    }
}

/// Softmax of `scores` in place; max-subtracted, `f64`.
fn softmax(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Image embeddings with the rows hidden by `mask` set to zero.
pub fn apply_visual_mask(layout: &InterleaveLayout, images: &Matrix, mask: VisualMask) -> Matrix {
    let mut out = images.clone();
    let query = layout.query_segment();
    for seg in 0..layout.segments().len() {
        let hide = match mask {
            VisualMask::None => false,
            VisualMask::MaskDemoVisual => seg != query,
            VisualMask::MaskQueryVisual => seg == query,
        };
        if hide {
            for v in layout.image_range(seg) {
                out.row_mut(v).fill(0.0);
            }
        }
    }
    out
}

fn cross_attention(
    layout: &InterleaveLayout,
    mask: &CrossMask,
    w: &BlockWeights,
    images: &Matrix,
    text: &Matrix,
) -> (Matrix, Matrix) {
    let d = text.cols;
    let scale = 1.0 / (d as f64).sqrt();
    let q = text.matmul(&w.cross_q);
    let k = images.matmul(&w.cross_k);
    let v = images.matmul(&w.cross_v);
    let mut attn = Matrix::zeros(text.rows, images.rows);
    let mut out = Matrix::zeros(text.rows, d);
    for t in 0..text.rows {
        let allowed = layout.image_range(layout.segment_of_text(t));
        debug_assert!(allowed.clone().all(|c| mask.get(t, c)));
        if allowed.is_empty() {
            // No image in this segment: the residual passes through.
            continue;
        }
        let mut scores: Vec<f64> = allowed.clone().map(|c| dot(q.row(t), k.row(c)) * scale).collect();
        softmax(&mut scores);
        for (c, a) in allowed.zip(&scores) {
            attn.data[t * attn.cols + c] = *a;
            for (o, x) in out.row_mut(t).iter_mut().zip(v.row(c)) {
                *o += a * x;
            }
        }
    }
    (attn, out)
}

fn self_attention(w: &BlockWeights, h: &Matrix) -> (Matrix, Matrix) {
    let d = h.cols;
    let scale = 1.0 / (d as f64).sqrt();
    let q = h.matmul(&w.self_q);
    let k = h.matmul(&w.self_k);
    let v = h.matmul(&w.self_v);
    let mut attn = Matrix::zeros(h.rows, h.rows);
    let mut out = Matrix::zeros(h.rows, d);
    for t in 0..h.rows {
        let mut scores: Vec<f64> = (0..=t).map(|s| dot(q.row(t), k.row(s)) * scale).collect();
        softmax(&mut scores);
        for (s, a) in scores.iter().enumerate() {
            attn.data[t * attn.cols + s] = *a;
            for (o, x) in out.row_mut(t).iter_mut().zip(v.row(s)) {
                *o += a * x;
            }
        }
    }
    (attn, out)
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

pub fn forward(
    layout: &InterleaveLayout,
    weights: &ProbeWeights,
    images: &Matrix,
    text: &Matrix,
    visual_mask: VisualMask,
) -> Result<ForwardOutput, ProbeError> {
    let d = weights.dim;
    images.check("image embeddings", layout.total_image_tokens(), d)?;
    text.check("text embeddings", layout.total_text_tokens(), d)?;
    let mask = build_cross_mask(layout);
    let images = apply_visual_mask(layout, images, visual_mask);
    let mut hidden = text.clone();
    let mut blocks = Vec::with_capacity(weights.blocks.len());
    for w in &weights.blocks {
        let (cross_attn, cross_out) = cross_attention(layout, &mask, w, &images, &hidden);
        let after_cross = add(&hidden, &cross_out);
        let (self_attn, self_out) = self_attention(w, &after_cross);
        hidden = add(&after_cross, &self_out);
        blocks.push(BlockOutput {
            cross_attn,
            cross_out,
            self_attn,
            hidden: hidden.clone(),
        });
    }
    Ok(ForwardOutput { blocks })
}

/// Cosine of two rows; identical rows (including two zero rows) give
/// exactly 1.
fn row_cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Last-row similarities of one instance against its standard pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedCosines {
    pub hidden_mask_demo: f64,
    pub hidden_mask_query: f64,
    pub attn_mask_demo: f64,
    pub attn_mask_query: f64,
}

pub fn probe_instance(
    layout: &InterleaveLayout,
    weights: &ProbeWeights,
    images: &Matrix,
    text: &Matrix,
) -> Result<SeedCosines, ProbeError> {
    let standard = forward(layout, weights, images, text, VisualMask::None)?;
    let no_demo = forward(layout, weights, images, text, VisualMask::MaskDemoVisual)?;
    let no_query = forward(layout, weights, images, text, VisualMask::MaskQueryVisual)?;
    let last = layout.total_text_tokens() - 1;
    let hidden = |o: &ForwardOutput| o.hidden().row(last).to_vec();
    let attn = |o: &ForwardOutput| o.self_attn().row(last).to_vec();
    Ok(SeedCosines {
        hidden_mask_demo: row_cosine(&hidden(&standard), &hidden(&no_demo)),
        hidden_mask_query: row_cosine(&hidden(&standard), &hidden(&no_query)),
        attn_mask_demo: row_cosine(&attn(&standard), &attn(&no_demo)),
        attn_mask_query: row_cosine(&attn(&standard), &attn(&no_query)),
    })
}

/// Weights and embeddings for one seed.
pub fn draw_instance(layout: &InterleaveLayout, dim: usize, depth: usize, seed: u64) -> (ProbeWeights, Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = ProbeWeights::draw(dim, depth, seed, &mut rng);
    let scale = 1.0 / (dim as f64).sqrt();
    let images = Matrix::random(layout.total_image_tokens(), dim, scale, &mut rng);
    let text = Matrix::random(layout.total_text_tokens(), dim, scale, &mut rng);
    (weights, images, text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub cos_hidden_mask_demo: f64,
    pub cos_hidden_mask_query: f64,
    pub cos_attn_mask_demo: f64,
    pub cos_attn_mask_query: f64,
    pub seeds_used: Vec<u64>,
}

/// Averages [`probe_instance`] over `seeds`, summing in seed order.
pub fn run_probe(layout: &InterleaveLayout, seeds: &[u64], dim: usize, depth: usize) -> Result<ProbeReport, ProbeError> {
    if seeds.is_empty() {
        return Err(ProbeError::NoSeeds);
    }
    if dim == 0 || depth == 0 {
        return Err(ProbeError::ZeroSize);
    }
    let per_seed = par::map(seeds, |&seed| {
        let (w, images, text) = draw_instance(layout, dim, depth, seed);
        probe_instance(layout, &w, &images, &text)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let n = per_seed.len() as f64;
    let avg = |f: fn(&SeedCosines) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
    Ok(ProbeReport {
        cos_hidden_mask_demo: avg(|c| c.hidden_mask_demo),
        cos_hidden_mask_query: avg(|c| c.hidden_mask_query),
        cos_attn_mask_demo: avg(|c| c.attn_mask_demo),
        cos_attn_mask_query: avg(|c| c.attn_mask_query),
        seeds_used: seeds.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(s: &str) -> InterleaveLayout {
        s.parse().unwrap()
    }

    #[test]
    fn parse_layouts() {
        let l = layout("1x2,1x2,1x1");
        assert_eq!(l.total_image_tokens(), 3);
        assert_eq!(l.total_text_tokens(), 5);
        assert_eq!(l.to_string(), "1x2,1x2,1x1");
        assert!("1x0".parse::<InterleaveLayout>().is_err());
        assert!("".parse::<InterleaveLayout>().is_err());
        assert!("2-1".parse::<InterleaveLayout>().is_err());
    }

    #[test]
    fn mask_for_two_demos_and_query() {
        let m = build_cross_mask(&layout("1x2,1x2,1x1"));
        assert_eq!(m.row(4), &[false, false, true]);
        assert_eq!(m.row(0), &[true, false, false]);
        assert_eq!(m.row(1), &[true, false, false]);
        assert_eq!(m.row(2), &[false, true, false]);
    }

    #[test]
    fn single_segment_mask_is_full() {
        let m = build_cross_mask(&layout("3x2"));
        assert!((0..2).all(|t| m.row(t).iter().all(|&b| b)));
    }

    #[test]
    fn imageless_segment_rows_are_empty() {
        let m = build_cross_mask(&layout("0x2,1x1"));
        assert_eq!(m.row(0), &[false]);
        assert_eq!(m.row(2), &[true]);
    }

    #[test]
    fn cross_attention_rows_sum_to_one() {
        let l = layout("2x3,0x1,3x2");
        let (w, img, txt) = draw_instance(&l, 8, 1, 5);
        let out = forward(&l, &w, &img, &txt, VisualMask::None).unwrap();
        let a = &out.blocks[0].cross_attn;
        for t in 0..a.rows {
            let s: f64 = a.row(t).iter().sum();
            if l.segment_of_text(t) == 1 {
                assert_eq!(s, 0.0);
                assert!(out.blocks[0].cross_out.row(t).iter().all(|&x| x == 0.0));
            } else {
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let s = &out.blocks[0].self_attn;
        for t in 0..s.rows {
            assert!((s.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(s.row(t)[t + 1..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn demo_mask_leaves_query_cross_output_untouched() {
        let l = layout("1x2,1x2,1x1");
        let (w, img, txt) = draw_instance(&l, 16, 1, 9);
        let std = forward(&l, &w, &img, &txt, VisualMask::None).unwrap();
        let masked = forward(&l, &w, &img, &txt, VisualMask::MaskDemoVisual).unwrap();
        assert_eq!(std.blocks[0].cross_out.row(4), masked.blocks[0].cross_out.row(4));
        assert_ne!(std.blocks[0].cross_out.row(0), masked.blocks[0].cross_out.row(0));
    }

    #[test]
    fn zero_images_make_settings_coincide() {
        let l = layout("1x2,1x2,1x1");
        let (w, _, txt) = draw_instance(&l, 8, 1, 1);
        let img = Matrix::zeros(3, 8);
        let a = forward(&l, &w, &img, &txt, VisualMask::None).unwrap();
        for m in [VisualMask::MaskDemoVisual, VisualMask::MaskQueryVisual] {
            assert_eq!(a.hidden(), forward(&l, &w, &img, &txt, m).unwrap().hidden());
        }
        let c = probe_instance(&l, &w, &img, &txt).unwrap();
        assert_eq!(c.hidden_mask_demo, 1.0);
        assert_eq!(c.hidden_mask_query, 1.0);
    }

    #[test]
    fn shape_errors() {
        let l = layout("1x2");
        let w = ProbeWeights::random(4, 1, 0);
        assert!(forward(&l, &w, &Matrix::zeros(1, 3), &Matrix::zeros(2, 4), VisualMask::None).is_err());
        assert!(forward(&l, &w, &Matrix::zeros(1, 4), &Matrix::zeros(3, 4), VisualMask::None).is_err());
        assert_eq!(run_probe(&l, &[], 4, 1), Err(ProbeError::NoSeeds));
    }

    #[test]
    fn report_is_mean_of_single_seed_runs() {
        let l = layout("1x2,1x2,1x1");
        let seeds: Vec<u64> = (0..6).collect();
        let all = run_probe(&l, &seeds, 8, 1).unwrap();
        let singles: Vec<ProbeReport> = seeds.iter().map(|&s| run_probe(&l, &[s], 8, 1).unwrap()).collect();
        let mean = singles.iter().map(|r| r.cos_hidden_mask_demo).sum::<f64>() / 6.0;
        assert!((all.cos_hidden_mask_demo - mean).abs() < 1e-12);
        let mean = singles.iter().map(|r| r.cos_attn_mask_query).sum::<f64>() / 6.0;
        assert!((all.cos_attn_mask_query - mean).abs() < 1e-12);
    }
}
