//! Sparse token-level alignment.
//!
//! Each report token scores every image patch by inner product. The scores
//! are min-max rescaled per token, patches below a threshold are dropped, and
//! the survivors are renormalized into convex weights. The weighted patch sum
//! is the token's cross-modal embedding, trained against the token with an
//! importance-weighted contrastive loss over the instance's own tokens.
//!
//! Selection is a piecewise-constant gate: gradients reach the retained
//! weights through the min-max rescaling but never through the choice of
//! which patches survive.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{argmin_argmax, dot, log_softmax_in_place, Matrix, NodeId, Tape};
use crate::error::{Error, Result};
use crate::features::{check_importance, cosine_on_tape, cosine_sim, InstancePair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaConfig {
    pub sparsity_threshold: f64,
    pub temperature: f64,
    pub degenerate_epsilon: f64,
    /// Replace supplied token importance with the similarity-based fallback.
    pub similarity_importance: bool,
}

impl Default for StaConfig {
    fn default() -> Self {
        Self {
            sparsity_threshold: 0.3,
            temperature: 0.2,
            degenerate_epsilon: 1e-9,
            similarity_importance: false,
        }
    }
}

impl StaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity_threshold) {
            return Err(Error::config(format!(
                "sta.sparsity_threshold must lie in [0, 1), got {}",
                self.sparsity_threshold
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!(
                "sta.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.degenerate_epsilon >= 0.0) {
            return Err(Error::config("sta.degenerate_epsilon must be nonnegative"));
        }
        Ok(())
    }
}

/// Inner products of one token against every patch row.
pub fn token_patch_similarities(token: &[f64], patches: &Matrix) -> Result<Vec<f64>> {
    if token.len() != patches.cols() {
        return Err(Error::shape(format!(
            "token of dim {} against patches of dim {}",
            token.len(),
            patches.cols()
        )));
    }
    Ok(patches.iter_rows().map(|p| dot(token, p)).collect())
}

/// Min-max rescaling into `[0, 1]`; a range below `eps` maps everything to 1.
pub fn minmax_normalize(s: &[f64], eps: f64) -> Vec<f64> {
    if s.is_empty() {
        return Vec::new();
    }
    let (lo, hi) = argmin_argmax(s);
    let (min, range) = (s[lo], s[hi] - s[lo]);
    if range < eps {
        return vec![1.0; s.len()];
    }
    s.iter().map(|v| (v - min) / range).collect()
}

/// Indices whose normalized similarity is at least `threshold`.
pub fn sparse_select(normalized: &[f64], threshold: f64) -> Vec<usize> {
    normalized
        .iter()
        .enumerate()
        .filter(|(_, v)| **v >= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Retained similarities divided by their sum; uniform when they sum to 0.
pub fn alignment_weights(normalized: &[f64], retained: &[usize]) -> Result<Vec<f64>> {
    if retained.is_empty() {
        return Err(Error::Contract("no retained patches".into()));
    }
    let mut w = Vec::with_capacity(retained.len());
    for &k in retained {
        let v = *normalized
            .get(k)
            .ok_or_else(|| Error::shape(format!("retained index {k} out of range")))?;
        w.push(v);
    }
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|v| *v /= total);
    } else {
        let u = 1.0 / w.len() as f64;
        w.iter_mut().for_each(|v| *v = u);
    }
    Ok(w)
}

/// `sum_r weights[r] * patches[retained[r]]`.
pub fn cross_modal_embedding(weights: &[f64], retained: &[usize], patches: &Matrix) -> Result<Vec<f64>> {
    if weights.len() != retained.len() {
        return Err(Error::shape("weights and retained indices differ in length"));
    }
    let mut out = vec![0.0; patches.cols()];
    for (&w, &k) in weights.iter().zip(retained) {
        if k >= patches.rows() {
            return Err(Error::shape(format!("patch {k} out of {}", patches.rows())));
        }
        for (o, p) in out.iter_mut().zip(patches.row(k)) {
            *o += w * p;
        }
    }
    Ok(out)
}

/// Alignment of one token against the patches of its image.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenAlignment {
    pub raw_similarities: Vec<f64>,
    pub normalized: Vec<f64>,
    /// `(patch index, weight)` for every retained patch, ascending by index.
    pub retained: Vec<(usize, f64)>,
}

impl TokenAlignment {
    /// Retained patch with the largest weight; lowest index on ties.
    pub fn top_patch(&self) -> usize {
        let mut best = self.retained[0];
        for &(k, w) in &self.retained[1..] {
            if w > best.1 {
                best = (k, w);
            }
        }
        best.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMap {
    pub num_patches: usize,
    pub tokens: Vec<TokenAlignment>,
}

impl AlignmentMap {
    /// Dense `L x M` weight matrix, zero outside the retained set.
    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.tokens.len(), self.num_patches);
        for (l, t) in self.tokens.iter().enumerate() {
            for &(k, w) in &t.retained {
                m.set(l, k, w);
            }
        }
        m
    }

    pub fn mean_retained(&self) -> f64 {
        if self.tokens.is_empty() {
            return 0.0;
        }
        self.tokens.iter().map(|t| t.retained.len()).sum::<usize>() as f64 / self.tokens.len() as f64
    }
}

pub fn alignment_map(tokens: &Matrix, patches: &Matrix, cfg: &StaConfig) -> Result<AlignmentMap> {
    if patches.rows() == 0 || tokens.rows() == 0 {
        return Err(Error::shape("alignment needs at least one token and one patch"));
    }
    let mut out = Vec::with_capacity(tokens.rows());
    for token in tokens.iter_rows() {
        let raw = token_patch_similarities(token, patches)?;
        let normalized = minmax_normalize(&raw, cfg.degenerate_epsilon);
        let retained = sparse_select(&normalized, cfg.sparsity_threshold);
        let weights = alignment_weights(&normalized, &retained)?;
        out.push(TokenAlignment {
            raw_similarities: raw,
            normalized,
            retained: retained.into_iter().zip(weights).collect(),
        });
    }
    Ok(AlignmentMap {
        num_patches: patches.rows(),
        tokens: out,
    })
}

/// `L M` header, then one space-separated row of weights per token.
pub fn format_heatmap(weights: &Matrix) -> String {
    let mut s = format!("{} {}\n", weights.rows(), weights.cols());
    for row in weights.iter_rows() {
        let mut first = true;
        for v in row {
            if !first {
                s.push(' ');
            }
            first = false;
            write!(s, "{v}").expect("write to string");
        }
        s.push('\n');
    }
    s
}

pub fn parse_heatmap(text: &str) -> Result<Matrix> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "missing `L M` header"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(1, format!("bad dimension `{t}`"))))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(Error::parse(1, "header must be `L M`"));
    };
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| Error::parse(data.len() / cols.max(1) + 2, "missing row"))?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::parse(idx + 1, format!("bad number `{t}`"))))
            .collect::<Result<_>>()?;
        if row.len() != cols {
            return Err(Error::parse(idx + 1, format!("expected {cols} values, got {}", row.len())));
        }
        data.extend(row);
    }
    if let Some((idx, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::parse(idx + 1, format!("trailing content `{extra}`")));
    }
    Matrix::new(rows, cols, data)
}

pub fn write_heatmap(weights: &Matrix, path: &Path) -> Result<()> {
    std::fs::write(path, format_heatmap(weights))?;
    Ok(())
}

pub fn read_heatmap(path: &Path) -> Result<Matrix> {
    parse_heatmap(&std::fs::read_to_string(path)?)
}

/// Importance from token-report agreement: softmax over tokens of
/// `cos(w_l, t)`, rescaled to sum to the token count.
pub fn similarity_importance(tokens: &Matrix, report_global: &[f64]) -> Result<Vec<f64>> {
    let mut scores = tokens
        .iter_rows()
        .map(|w| cosine_sim(w, report_global))
        .collect::<Result<Vec<_>>>()?;
    log_softmax_in_place(&mut scores, 1.0);
    let n = scores.len() as f64;
    Ok(scores.into_iter().map(|l| l.exp() * n).collect())
}

/// Tape handles for one instance's local features.
#[derive(Debug, Clone)]
pub struct StaInstance {
    pub tokens: NodeId,
    pub patches: NodeId,
    pub importance: Vec<f64>,
}

fn instance_term(tape: &mut Tape, inst: &StaInstance, cfg: &StaConfig) -> Result<NodeId> {
    let (l, d) = tape.value(inst.tokens).shape();
    let (m, pd) = tape.value(inst.patches).shape();
    if l == 0 || m == 0 || d != pd {
        return Err(Error::shape(format!(
            "{l}x{d} tokens against {m}x{pd} patches"
        )));
    }
    check_importance(&inst.importance, l)?;

    let pt = tape.transpose(inst.patches)?;
    let sims = tape.matmul(inst.tokens, pt)?;
    let normalized = tape.minmax_rows(sims, cfg.degenerate_epsilon)?;
    let gate = tape
        .value(normalized)
        .map(|v| if v >= cfg.sparsity_threshold { 1.0 } else { 0.0 });
    let gate = tape.constant(gate);
    let kept = tape.hadamard(normalized, gate)?;
    let weights = tape.sum_normalize_rows(kept)?;
    let embedded = tape.matmul(weights, inst.patches)?;

    // row l: cos(w_l, w^_k) over k; the transpose gives cos(w_k, w^_l) over k.
    let cos = cosine_on_tape(tape, inst.tokens, embedded)?;
    let forward = tape.log_softmax_rows(cos, cfg.temperature)?;
    let cos_t = tape.transpose(cos)?;
    let backward = tape.log_softmax_rows(cos_t, cfg.temperature)?;
    let both = tape.add(forward, backward)?;
    let u = tape.constant(Matrix::diagonal(&inst.importance));
    let weighted = tape.hadamard(both, u)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0 / l as f64)
}

/// Importance-weighted token contrastive loss averaged over instances and
/// both directions. Nonnegative.
pub fn sta_loss_on_tape(tape: &mut Tape, batch: &[StaInstance], cfg: &StaConfig) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::shape("token alignment over an empty batch"));
    }
    let terms = batch
        .iter()
        .map(|inst| instance_term(tape, inst, cfg))
        .collect::<Result<Vec<_>>>()?;
    let total = tape.add_all(&terms)?;
    tape.scale(total, 1.0 / (2.0 * batch.len() as f64))
}

pub fn sta_loss(batch: &[InstancePair], cfg: &StaConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let mut insts = Vec::with_capacity(batch.len());
    for p in batch {
        p.validate()?;
        insts.push(StaInstance {
            tokens: tape.constant(p.tokens.clone()),
            patches: tape.constant(p.patches.clone()),
            importance: p.token_importance.clone(),
        });
    }
    let l = sta_loss_on_tape(&mut tape, &insts, cfg)?;
    tape.scalar(l)
}

/// Smallest distance between any normalized similarity and the threshold,
/// ignoring degenerate rows. Finite differences are only meaningful when this
/// exceeds the step size by a margin.
pub fn selection_margin(tokens: &Matrix, patches: &Matrix, cfg: &StaConfig) -> Result<f64> {
    let map = alignment_map(tokens, patches, cfg)?;
    Ok(map
        .tokens
        .iter()
        .flat_map(|t| t.normalized.iter())
        .map(|v| (v - cfg.sparsity_threshold).abs())
        .fold(f64::INFINITY, f64::min))
}
