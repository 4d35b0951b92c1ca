//! Finite-difference verification of every loss.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, Matrix, NodeId, Tape};
use crate::corpus::{Corpus, RawInstance};
use crate::error::{Error, Result};
use crate::features::{cosine_matrix, AlignmentModel, ModelVars};
use crate::instance::{
    build_semantic_matrix, sia_aug_loss, sia_loss, sila_loss, siva_loss, InstanceLossConfig,
    SemanticMatrix,
};
use crate::sta::{selection_margin, sta_loss_on_tape, StaConfig, StaInstance};
use crate::train::{batch_objective, LossToggles, ObjectiveConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Sia,
    SiaAug,
    Siva,
    Sila,
    Sta,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Sia,
        LossKind::SiaAug,
        LossKind::Siva,
        LossKind::Sila,
        LossKind::Sta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Sia => "sia",
            LossKind::SiaAug => "sia_aug",
            LossKind::Siva => "siva",
            LossKind::Sila => "sila",
            LossKind::Sta => "sta",
        }
    }

    /// Toggles enabling only this loss.
    pub fn only(self) -> LossToggles {
        let mut t = LossToggles::none();
        t.set(self.name(), true).expect("known name");
        t
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    /// Accepted seeds required per loss.
    pub seeds: usize,
    pub base_seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub batch_sizes: Vec<usize>,
    pub dims: Vec<usize>,
    pub max_patches: usize,
    pub max_tokens: usize,
    /// Seeds whose gate or pseudo-positive test sits closer than this to
    /// its threshold are skipped.
    pub boundary_margin: f64,
    pub instance: InstanceLossConfig,
    pub sta: StaConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            base_seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            batch_sizes: vec![2, 4, 8],
            dims: vec![8, 16],
            max_patches: 6,
            max_tokens: 4,
            boundary_margin: 1e-3,
            instance: InstanceLossConfig::default(),
            sta: StaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub loss: LossKind,
    pub seeds_checked: usize,
    pub seeds_skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Matrix::new(rows, cols, data).expect("sized")
}

// Two latent groups so that some report pairs clear the pseudo-positive threshold.
fn clustered(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let centers = gaussian(rng, 2, cols, 1.0);
    let mut m = gaussian(rng, rows, cols, 0.1 / (cols as f64).sqrt());
    for r in 0..rows {
        let c = centers.row(r % 2).to_vec();
        for (v, x) in m.row_mut(r).iter_mut().zip(c) {
            *v += x;
        }
    }
    m
}

fn threshold_margin(reports: &Matrix, cfg: &InstanceLossConfig) -> Result<f64> {
    let c = cosine_matrix(reports, reports)?;
    let mut margin = f64::INFINITY;
    for i in 0..c.rows() {
        for k in 0..c.cols() {
            if i != k {
                margin = margin.min((c.get(i, k) - cfg.pseudo_positive_threshold).abs());
            }
        }
    }
    Ok(margin)
}

type PairLoss = fn(&mut Tape, NodeId, NodeId, &SemanticMatrix, &InstanceLossConfig) -> Result<NodeId>;

fn pair_loss(kind: LossKind) -> PairLoss {
    match kind {
        LossKind::Sia => sia_loss,
        LossKind::SiaAug => sia_aug_loss,
        LossKind::Siva => siva_loss,
        LossKind::Sila => sila_loss,
        LossKind::Sta => unreachable!("token alignment is checked separately"),
    }
}

fn check_instance_seed(kind: LossKind, seed: u64, cfg: &SuiteConfig) -> Result<Option<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = cfg.batch_sizes[rng.random_range(0..cfg.batch_sizes.len())];
    let d = cfg.dims[rng.random_range(0..cfg.dims.len())];
    let reports = clustered(&mut rng, b, d);
    if threshold_margin(&reports, &cfg.instance)? < cfg.boundary_margin {
        return Ok(None);
    }
    let s = build_semantic_matrix(&reports, &cfg.instance)?;
    let first = gaussian(&mut rng, b, d, 1.0);
    let second = gaussian(&mut rng, b, d, 1.0);
    let loss = pair_loss(kind);
    let ic = cfg.instance;
    let wrt_first = grad_check(
        |t, x| {
            let other = t.constant(second.clone());
            loss(t, x, other, &s, &ic)
        },
        &first,
        cfg.step,
    )?;
    let wrt_second = grad_check(
        |t, x| {
            let other = t.constant(first.clone());
            loss(t, other, x, &s, &ic)
        },
        &second,
        cfg.step,
    )?;
    Ok(Some(wrt_first.max(wrt_second)))
}

fn check_sta_seed(seed: u64, cfg: &SuiteConfig) -> Result<Option<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = cfg.batch_sizes[rng.random_range(0..cfg.batch_sizes.len())];
    let d = cfg.dims[rng.random_range(0..cfg.dims.len())];
    let mut tokens = Vec::with_capacity(b);
    let mut patches = Vec::with_capacity(b);
    let mut importance = Vec::with_capacity(b);
    for _ in 0..b {
        let l = rng.random_range(1..=cfg.max_tokens);
        let m = rng.random_range(1..=cfg.max_patches);
        let w = gaussian(&mut rng, l, d, 1.0);
        let p = gaussian(&mut rng, m, d, 1.0);
        if selection_margin(&w, &p, &cfg.sta)? < cfg.boundary_margin {
            return Ok(None);
        }
        let raw: Vec<f64> = (0..l).map(|_| rng.random_range(0.5..3.0)).collect();
        let scale = l as f64 / raw.iter().sum::<f64>();
        importance.push(raw.into_iter().map(|u| u * scale).collect::<Vec<_>>());
        tokens.push(w);
        patches.push(p);
    }
    let sc = cfg.sta;
    let mut worst: f64 = 0.0;
    for target in 0..b {
        for wrt_tokens in [true, false] {
            let x = if wrt_tokens { &tokens[target] } else { &patches[target] };
            let err = grad_check(
                |t, x| {
                    let insts = (0..b)
                        .map(|i| {
                            let w = if i == target && wrt_tokens { x } else { t.constant(tokens[i].clone()) };
                            let p = if i == target && !wrt_tokens { x } else { t.constant(patches[i].clone()) };
                            StaInstance {
                                tokens: w,
                                patches: p,
                                importance: importance[i].clone(),
                            }
                        })
                        .collect::<Vec<_>>();
                    sta_loss_on_tape(t, &insts, &sc)
                },
                x,
                cfg.step,
            )?;
            worst = worst.max(err);
        }
    }
    Ok(Some(worst))
}

/// Checks every loss against central differences with respect to its input
/// features on random batches.
pub fn feature_gradient_suite(cfg: &SuiteConfig) -> Result<Vec<LossCheck>> {
    if cfg.seeds == 0 || cfg.batch_sizes.is_empty() || cfg.dims.is_empty() {
        return Err(Error::config("gradient suite needs seeds, batch sizes and dimensions"));
    }
    LossKind::ALL
        .iter()
        .map(|&kind| {
            let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
            let mut seed = cfg.base_seed.wrapping_add(1_000_003 * kind as u64);
            while checked < cfg.seeds {
                if skipped > 50 * cfg.seeds {
                    return Err(Error::Numeric(format!(
                        "{kind}: too many near-threshold draws"
                    )));
                }
                let r = match kind {
                    LossKind::Sta => check_sta_seed(seed, cfg)?,
                    _ => check_instance_seed(kind, seed, cfg)?,
                };
                match r {
                    Some(e) => {
                        checked += 1;
                        worst = worst.max(e);
                    }
                    None => skipped += 1,
                }
                seed += 1;
            }
            Ok(LossCheck {
                loss: kind,
                seeds_checked: checked,
                seeds_skipped: skipped,
                max_rel_error: worst,
                passed: worst <= cfg.tolerance,
            })
        })
        .collect()
}

fn param_slot(vars: &mut ModelVars, index: usize) -> &mut NodeId {
    let head = match index / 4 {
        0 => &mut vars.image_global,
        1 => &mut vars.image_local,
        2 => &mut vars.report_global,
        _ => &mut vars.report_local,
    };
    match index % 4 {
        0 => &mut head.input_weight,
        1 => &mut head.input_bias,
        2 => &mut head.hidden_weight,
        _ => &mut head.hidden_bias,
    }
}

/// Distance of the batch from any discontinuity of the objective under `model`.
pub fn objective_margin(model: &AlignmentModel, batch: &[&RawInstance], cfg: &ObjectiveConfig) -> Result<f64> {
    let reports = Matrix::from_rows(&batch.iter().map(|i| &i.report_global).collect::<Vec<_>>())?;
    let mut margin = threshold_margin(&model.report_global.project_rows(&reports)?, &cfg.instance)?;
    if cfg.toggles.sta {
        for inst in batch {
            let w = model.report_local.project_rows(&inst.tokens)?;
            let p = model.image_local.project_rows(&inst.patches)?;
            margin = margin.min(selection_margin(&w, &p, &cfg.sta)?);
        }
    }
    Ok(margin)
}

/// Largest relative error over every head parameter of one loss evaluated
/// through the full batch objective.
pub fn model_gradient_check(
    model: &AlignmentModel,
    batch: &[&RawInstance],
    cfg: &ObjectiveConfig,
    step: f64,
) -> Result<f64> {
    let params = model.params();
    let mut worst: f64 = 0.0;
    for (index, param) in params.iter().enumerate() {
        let err = grad_check(
            |t, x| {
                let mut vars = model.attach(t, false);
                *param_slot(&mut vars, index) = x;
                Ok(batch_objective(t, &vars, batch, cfg)?.total)
            },
            param,
            step,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Parameter-level check of each loss on corpus batches of size `batch_size`,
/// skipping batches within `cfg.boundary_margin` of a discontinuity.
pub fn model_gradient_suite(
    model: &AlignmentModel,
    corpus: &Corpus,
    batch_size: usize,
    batches: usize,
    cfg: &SuiteConfig,
) -> Result<Vec<LossCheck>> {
    if batch_size < 2 || corpus.len() < batch_size {
        return Err(Error::config("corpus too small for the requested batch size"));
    }
    LossKind::ALL
        .iter()
        .map(|&kind| {
            let objective = ObjectiveConfig {
                instance: cfg.instance,
                sta: cfg.sta,
                toggles: kind.only(),
            };
            let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
            for chunk in corpus.instances.chunks_exact(batch_size) {
                if checked == batches {
                    break;
                }
                let batch: Vec<&RawInstance> = chunk.iter().collect();
                if objective_margin(model, &batch, &objective)? < cfg.boundary_margin {
                    skipped += 1;
                    continue;
                }
                worst = worst.max(model_gradient_check(model, &batch, &objective, cfg.step)?);
                checked += 1;
            }
            if checked == 0 {
                return Err(Error::Numeric(format!("{kind}: every batch sits on a threshold")));
            }
            Ok(LossCheck {
                loss: kind,
                seeds_checked: checked,
                seeds_skipped: skipped,
                max_rel_error: worst,
                passed: worst <= cfg.tolerance,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};

    #[test]
    fn quick_feature_suite_passes() {
        let cfg = SuiteConfig {
            seeds: 3,
            ..SuiteConfig::default()
        };
        let checks = feature_gradient_suite(&cfg).unwrap();
        assert_eq!(checks.len(), 5);
        for c in checks {
            assert!(c.passed, "{c:?}");
            assert_eq!(c.seeds_checked, 3);
        }
    }

    #[test]
    fn clustered_reports_produce_pseudo_positives() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = clustered(&mut rng, 8, 8);
        let s = build_semantic_matrix(&r, &InstanceLossConfig::default()).unwrap();
        assert!(s.pseudo_positive_count() > 0);
    }

    #[test]
    fn parameter_gradients_match() {
        let corpus = generate_corpus(&CorpusSpec {
            num_instances: 8,
            raw_dim: 6,
            num_clusters: 2,
            cluster_spread: 0.2,
            patches_per_image: 3,
            tokens_per_report: 3,
            seed: 2,
            ..CorpusSpec::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = AlignmentModel::random(6, 4, &mut rng);
        let checks = model_gradient_suite(&model, &corpus, 4, 1, &SuiteConfig::default()).unwrap();
        for c in checks {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn only_enables_one_loss() {
        for k in LossKind::ALL {
            assert_eq!(k.only().label(), k.name());
        }
    }
}
