//! Instance-level alignment with language-guided soft targets.
//!
//! Report similarities inside a batch promote near-duplicate reports to
//! pseudo-positives. Their rows in the [`SemanticMatrix`] carry a small soft
//! label instead of zero, so semantically equivalent unpaired samples stop
//! being pushed apart as hard negatives. The same matrix drives the
//! cross-modal losses on original and augmented globals and both intra-modal
//! losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_in_place, Matrix, NodeId, Tape};
use crate::error::{Error, Result};
use crate::features::{cosine_on_tape, cosine_sim};

/// How the semantic matrix enters the contrastive objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NceVariant {
    /// Cross-entropy against the row-normalized matrix.
    #[default]
    SoftTarget,
    /// Unnormalized weights inside the partition function: 1 on the
    /// diagonal and for negatives, the soft label for pseudo-positives.
    Literal,
}

/// Whether pseudo-positives are mined at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    #[default]
    Soft,
    /// Every unpaired sample is a negative (plain InfoNCE).
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceLossConfig {
    pub temperature: f64,
    pub pseudo_positive_threshold: f64,
    pub soft_label_value: f64,
    pub variant: NceVariant,
    pub labels: LabelMode,
}

impl Default for InstanceLossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            pseudo_positive_threshold: 0.9,
            soft_label_value: 0.1,
            variant: NceVariant::SoftTarget,
            labels: LabelMode::Soft,
        }
    }
}

impl InstanceLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!(
                "loss.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.pseudo_positive_threshold > 0.0 && self.pseudo_positive_threshold <= 1.0) {
            return Err(Error::config(format!(
                "loss.pseudo_positive_threshold must lie in (0, 1], got {}",
                self.pseudo_positive_threshold
            )));
        }
        if !(self.soft_label_value > 0.0 && self.soft_label_value < 1.0) {
            return Err(Error::config(format!(
                "loss.soft_label_value must lie in (0, 1), got {}",
                self.soft_label_value
            )));
        }
        Ok(())
    }
}

/// Row-stochastic soft-target matrix for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMatrix {
    targets: Matrix,
    pseudo_positive: Vec<bool>,
}

impl SemanticMatrix {
    /// No pseudo-positives: plain one-hot targets.
    pub fn identity(size: usize) -> Self {
        Self {
            targets: Matrix::identity(size),
            pseudo_positive: vec![false; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.targets.rows()
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    pub fn is_pseudo_positive(&self, i: usize, k: usize) -> bool {
        self.pseudo_positive[i * self.size() + k]
    }

    /// Number of ordered off-diagonal pseudo-positive pairs.
    pub fn pseudo_positive_count(&self) -> usize {
        self.pseudo_positive.iter().filter(|p| **p).count()
    }

    /// `ln` of the unnormalized weights used by [`NceVariant::Literal`].
    pub fn literal_log_weights(&self, soft_label_value: f64) -> Matrix {
        let n = self.size();
        let mut w = Matrix::zeros(n, n);
        let ln_soft = soft_label_value.ln();
        for i in 0..n {
            for k in 0..n {
                if self.is_pseudo_positive(i, k) {
                    w.set(i, k, ln_soft);
                }
            }
        }
        w
    }
}

/// Builds `S` from the batch's global report features.
///
/// Diagonal entries start at 1, pairs at or above the threshold at the soft
/// label value, everything else at 0; rows are then divided by their sums.
pub fn build_semantic_matrix(
    report_globals: &Matrix,
    cfg: &InstanceLossConfig,
) -> Result<SemanticMatrix> {
    let n = report_globals.rows();
    if n == 0 {
        return Err(Error::shape("semantic matrix of an empty batch"));
    }
    if cfg.labels == LabelMode::Hard {
        for r in report_globals.iter_rows() {
            normalize_check(r)?;
        }
        return Ok(SemanticMatrix::identity(n));
    }
    let mut raw = Matrix::identity(n);
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for k in (i + 1)..n {
            let sim = cosine_sim(report_globals.row(i), report_globals.row(k))?;
            if sim >= cfg.pseudo_positive_threshold {
                raw.set(i, k, cfg.soft_label_value);
                raw.set(k, i, cfg.soft_label_value);
                mask[i * n + k] = true;
                mask[k * n + i] = true;
            }
        }
    }
    if n == 1 {
        normalize_check(report_globals.row(0))?;
    }
    for i in 0..n {
        let row = raw.row_mut(i);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(SemanticMatrix {
        targets: raw,
        pseudo_positive: mask,
    })
}

fn normalize_check(row: &[f64]) -> Result<()> {
    if row.iter().all(|v| *v == 0.0) {
        Err(Error::Degenerate("zero report feature".into()))
    } else {
        Ok(())
    }
}

/// `-sum_k target[k] * log softmax(sim / tau)[k]` for one anchor.
pub fn soft_infonce(sim_row: &[f64], target_row: &[f64], temperature: f64) -> Result<f64> {
    if sim_row.len() != target_row.len() || sim_row.is_empty() {
        return Err(Error::shape(format!(
            "{} similarities against {} targets",
            sim_row.len(),
            target_row.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let total: f64 = target_row.iter().sum();
    if (total - 1.0).abs() > 1e-6 || target_row.iter().any(|t| *t < 0.0) {
        return Err(Error::Contract(format!(
            "target row must be a distribution, sums to {total}"
        )));
    }
    let mut logp = sim_row.to_vec();
    log_softmax_in_place(&mut logp, temperature);
    Ok(-target_row.iter().zip(&logp).map(|(t, l)| t * l).sum::<f64>())
}

/// Sum over anchors of `sum_k target * log p` for one direction.
fn directional_log_likelihood(
    tape: &mut Tape,
    sims: NodeId,
    s: &SemanticMatrix,
    cfg: &InstanceLossConfig,
) -> Result<NodeId> {
    let (logp, targets) = match cfg.variant {
        NceVariant::SoftTarget => (
            tape.log_softmax_rows(sims, cfg.temperature)?,
            s.targets().clone(),
        ),
        NceVariant::Literal => {
            let z = tape.scale(sims, 1.0 / cfg.temperature)?;
            let w = tape.constant(s.literal_log_weights(cfg.soft_label_value));
            let z = tape.add(z, w)?;
            (tape.log_softmax_rows(z, 1.0)?, Matrix::identity(s.size()))
        }
    };
    let t = tape.constant(targets);
    let weighted = tape.hadamard(logp, t)?;
    tape.sum(weighted)
}

/// Bidirectional semantic-aware contrastive loss between the rows of `a`
/// and `b`, averaged over anchors and directions.
pub fn bidirectional_loss(
    tape: &mut Tape,
    a: NodeId,
    b: NodeId,
    s: &SemanticMatrix,
    cfg: &InstanceLossConfig,
) -> Result<NodeId> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::shape(format!(
            "paired features {}x{} and {}x{}",
            sa.0, sa.1, sb.0, sb.1
        )));
    }
    if s.size() != sa.0 {
        return Err(Error::shape(format!(
            "semantic matrix of size {} for a batch of {}",
            s.size(),
            sa.0
        )));
    }
    let sims = cosine_on_tape(tape, a, b)?;
    let forward = directional_log_likelihood(tape, sims, s, cfg)?;
    let sims_t = tape.transpose(sims)?;
    let backward = directional_log_likelihood(tape, sims_t, s, cfg)?;
    let both = tape.add(forward, backward)?;
    tape.scale(both, -1.0 / (2.0 * sa.0 as f64))
}

/// Image-report loss on original globals.
pub fn sia_loss(
    tape: &mut Tape,
    image_globals: NodeId,
    report_globals: NodeId,
    s: &SemanticMatrix,
    cfg: &InstanceLossConfig,
) -> Result<NodeId> {
    bidirectional_loss(tape, image_globals, report_globals, s, cfg)
}

/// Image-report loss on augmented globals; `s` comes from the original reports.
pub fn sia_aug_loss(
    tape: &mut Tape,
    image_globals_aug: NodeId,
    report_globals_aug: NodeId,
    s: &SemanticMatrix,
    cfg: &InstanceLossConfig,
) -> Result<NodeId> {
    bidirectional_loss(tape, image_globals_aug, report_globals_aug, s, cfg)
}

/// Original vs augmented image globals.
pub fn siva_loss(
    tape: &mut Tape,
    image_globals: NodeId,
    image_globals_aug: NodeId,
    s: &SemanticMatrix,
    cfg: &InstanceLossConfig,
) -> Result<NodeId> {
    bidirectional_loss(tape, image_globals, image_globals_aug, s, cfg)
}

/// Original vs augmented report globals.
pub fn sila_loss(
    tape: &mut Tape,
    report_globals: NodeId,
    report_globals_aug: NodeId,
    s: &SemanticMatrix,
    cfg: &InstanceLossConfig,
) -> Result<NodeId> {
    bidirectional_loss(tape, report_globals, report_globals_aug, s, cfg)
}

/// Evaluates [`bidirectional_loss`] on plain matrices.
pub fn bidirectional_loss_value(
    a: &Matrix,
    b: &Matrix,
    s: &SemanticMatrix,
    cfg: &InstanceLossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let l = bidirectional_loss(&mut tape, a, b, s, cfg)?;
    tape.scalar(l)
}
