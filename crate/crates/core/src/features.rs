//! The shared embedding space: feature containers, projection heads and the
//! cosine similarity used by every loss.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, l2_norm, Matrix, NodeId, Tape};
use crate::error::{Error, Result};

pub const PAPER_EMBED_DIM: usize = 128;

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn normalize(v: &[f64]) -> Result<FeatureVector> {
    let n = l2_norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate(format!("cannot normalize vector of norm {n}")));
    }
    Ok(FeatureVector(v.iter().map(|x| x / n).collect()))
}

/// Cosine similarity, clamped into `[-1, 1]`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!(
            "cosine of {}- and {}-vectors",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if !(nu > 0.0) || !(nv > 0.0) {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Pairwise cosine similarities between the rows of `a` and `b`.
pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = cosine_on_tape(&mut tape, a, b)?;
    Ok(tape.value(c).clone())
}

/// `normalize_rows(a) * normalize_rows(b)^T` recorded on the tape.
pub fn cosine_on_tape(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    let an = tape.normalize_rows(a)?;
    let bn = tape.normalize_rows(b)?;
    let bt = tape.transpose(bn)?;
    tape.matmul(an, bt)
}

/// Residual two-layer projection `h + tanh(h) W + c` with `h = x A + b`,
/// followed by row normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub input_weight: Matrix,
    pub input_bias: Matrix,
    pub hidden_weight: Matrix,
    pub hidden_bias: Matrix,
}

/// Tape handles for the parameters of one head.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub input_weight: NodeId,
    pub input_bias: NodeId,
    pub hidden_weight: NodeId,
    pub hidden_bias: NodeId,
}

impl ProjectionHead {
    /// Identity on the first `min(in, out)` coordinates, zero elsewhere.
    pub fn identity(in_dim: usize, out_dim: usize) -> Self {
        let mut input_weight = Matrix::zeros(in_dim, out_dim);
        for i in 0..in_dim.min(out_dim) {
            input_weight.set(i, i, 1.0);
        }
        Self {
            input_weight,
            input_bias: Matrix::zeros(1, out_dim),
            hidden_weight: Matrix::zeros(out_dim, out_dim),
            hidden_bias: Matrix::zeros(1, out_dim),
        }
    }

    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let input = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).expect("valid std");
        let hidden = Normal::new(0.0, 0.5 / (out_dim as f64).sqrt()).expect("valid std");
        let mut sample = |rows: usize, cols: usize, dist: &Normal<f64>| {
            let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
            Matrix::new(rows, cols, data).expect("sized")
        };
        let input_weight = sample(in_dim, out_dim, &input);
        let hidden_weight = sample(out_dim, out_dim, &hidden);
        Self {
            input_weight,
            input_bias: Matrix::zeros(1, out_dim),
            hidden_weight,
            hidden_bias: Matrix::zeros(1, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.input_weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.input_weight.cols()
    }

    pub fn params(&self) -> [&Matrix; 4] {
        [
            &self.input_weight,
            &self.input_bias,
            &self.hidden_weight,
            &self.hidden_bias,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 4] {
        [
            &mut self.input_weight,
            &mut self.input_bias,
            &mut self.hidden_weight,
            &mut self.hidden_bias,
        ]
    }

    /// Records the parameters on the tape, tracked or as constants.
    pub fn attach(&self, tape: &mut Tape, tracked: bool) -> HeadVars {
        let mut put = |m: &Matrix| {
            if tracked {
                tape.leaf(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        HeadVars {
            input_weight: put(&self.input_weight),
            input_bias: put(&self.input_bias),
            hidden_weight: put(&self.hidden_weight),
            hidden_bias: put(&self.hidden_bias),
        }
    }

    /// Projects every row of `x` to a unit-norm embedding.
    pub fn forward(tape: &mut Tape, vars: &HeadVars, x: NodeId) -> Result<NodeId> {
        let h = tape.matmul(x, vars.input_weight)?;
        let h = tape.add_row(h, vars.input_bias)?;
        let a = tape.tanh(h)?;
        let r = tape.matmul(a, vars.hidden_weight)?;
        let r = tape.add_row(r, vars.hidden_bias)?;
        let out = tape.add(h, r)?;
        tape.normalize_rows(out)
    }

    /// Projects the rows of a raw feature matrix without tracking gradients.
    pub fn project_rows(&self, raw: &Matrix) -> Result<Matrix> {
        if raw.cols() != self.in_dim() {
            return Err(Error::shape(format!(
                "raw features have {} columns, head expects {}",
                raw.cols(),
                self.in_dim()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.attach(&mut tape, false);
        let x = tape.constant(raw.clone());
        let y = Self::forward(&mut tape, &vars, x)?;
        Ok(tape.value(y).clone())
    }
}

pub fn project(raw: &[f64], head: &ProjectionHead) -> Result<FeatureVector> {
    let out = head.project_rows(&Matrix::row_vector(raw))?;
    Ok(FeatureVector(out.into_data()))
}

/// One projected image-report sample.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePair {
    pub image_global: FeatureVector,
    pub patches: Matrix,
    pub report_global: FeatureVector,
    pub tokens: Matrix,
    pub image_global_aug: FeatureVector,
    pub report_global_aug: FeatureVector,
    pub token_importance: Vec<f64>,
}

impl InstancePair {
    pub fn validate(&self) -> Result<()> {
        let d = self.image_global.dim();
        if self.patches.rows() == 0 || self.tokens.rows() == 0 {
            return Err(Error::shape("instance needs at least one patch and one token"));
        }
        if self.patches.cols() != d || self.tokens.cols() != d {
            return Err(Error::shape(format!(
                "local features must be {d}-dimensional"
            )));
        }
        for g in [
            &self.report_global,
            &self.image_global_aug,
            &self.report_global_aug,
        ] {
            if g.dim() != d {
                return Err(Error::shape("global features disagree in dimension"));
            }
        }
        check_importance(&self.token_importance, self.tokens.rows())
    }
}

/// Importance weights must be nonnegative and sum to the token count.
pub fn check_importance(weights: &[f64], tokens: usize) -> Result<()> {
    if weights.len() != tokens {
        return Err(Error::shape(format!(
            "{} importance weights for {tokens} tokens",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Contract("importance weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - tokens as f64).abs() > 1e-6 * tokens.max(1) as f64 {
        return Err(Error::Contract(format!(
            "importance weights sum to {total}, expected {tokens}"
        )));
    }
    Ok(())
}

/// The four heads standing in for image and text encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentModel {
    pub image_global: ProjectionHead,
    pub image_local: ProjectionHead,
    pub report_global: ProjectionHead,
    pub report_local: ProjectionHead,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub image_global: HeadVars,
    pub image_local: HeadVars,
    pub report_global: HeadVars,
    pub report_local: HeadVars,
}

impl AlignmentModel {
    pub fn random<R: Rng + ?Sized>(raw_dim: usize, embed_dim: usize, rng: &mut R) -> Self {
        Self {
            image_global: ProjectionHead::random(raw_dim, embed_dim, rng),
            image_local: ProjectionHead::random(raw_dim, embed_dim, rng),
            report_global: ProjectionHead::random(raw_dim, embed_dim, rng),
            report_local: ProjectionHead::random(raw_dim, embed_dim, rng),
        }
    }

    pub fn raw_dim(&self) -> usize {
        self.image_global.in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.image_global.out_dim()
    }

    fn heads(&self) -> [&ProjectionHead; 4] {
        [
            &self.image_global,
            &self.image_local,
            &self.report_global,
            &self.report_local,
        ]
    }

    /// All parameter matrices in a fixed order.
    pub fn params(&self) -> Vec<&Matrix> {
        self.heads().into_iter().flat_map(|h| h.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        [
            &mut self.image_global,
            &mut self.image_local,
            &mut self.report_global,
            &mut self.report_local,
        ]
        .into_iter()
        .flat_map(|h| h.params_mut())
        .collect()
    }

    pub fn attach(&self, tape: &mut Tape, tracked: bool) -> ModelVars {
        ModelVars {
            image_global: self.image_global.attach(tape, tracked),
            image_local: self.image_local.attach(tape, tracked),
            report_global: self.report_global.attach(tape, tracked),
            report_local: self.report_local.attach(tape, tracked),
        }
    }
}

impl ModelVars {
    /// Node ids in the same order as [`AlignmentModel::params`].
    pub fn ids(&self) -> Vec<NodeId> {
        [
            self.image_global,
            self.image_local,
            self.report_global,
            self.report_local,
        ]
        .iter()
        .flat_map(|h| [h.input_weight, h.input_bias, h.hidden_weight, h.hidden_bias])
        .collect()
    }
}
