//! Joint optimization of the projection heads.

mod checkpoint;
mod metrics;
mod objective;
mod optim;
mod schedule;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use metrics::{metrics_from_csv, metrics_to_csv, read_metrics, write_metrics, MetricsRow, Split};
pub use objective::{
    batch_objective, evaluate_batch, BatchObjective, LossBreakdown, LossToggles, ObjectiveConfig,
};
pub use optim::{AdamW, AdamWState};
pub use schedule::LrSchedule;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, RawInstance};
use crate::error::{Error, Result};
use crate::features::{AlignmentModel, PAPER_EMBED_DIM};
use crate::instance::InstanceLossConfig;
use crate::sta::StaConfig;
use crate::autodiff::Tape;

/// Smallest batch kept when the epoch does not divide evenly.
pub const MIN_BATCH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub init_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub early_stop_patience: usize,
    pub embed_dim: usize,
    pub val_fraction: f64,
    pub toggles: LossToggles,
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub loss: InstanceLossConfig,
    #[serde(skip)]
    pub sta: StaConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            base_lr: 3e-3,
            init_lr: 1e-8,
            weight_decay: 0.05,
            warmup_epochs: 10,
            early_stop_patience: 5,
            embed_dim: 16,
            val_fraction: 0.1,
            toggles: LossToggles::all(),
            seed: 0,
            loss: InstanceLossConfig::default(),
            sta: StaConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Overrides the published hyperparameters on top of `self`.
    pub fn with_paper_preset(mut self) -> Self {
        self.base_lr = 2e-5;
        self.init_lr = 1e-8;
        self.weight_decay = 0.05;
        self.warmup_epochs = 10;
        self.embed_dim = PAPER_EMBED_DIM;
        self.loss.temperature = 0.2;
        self.sta.temperature = 0.2;
        self
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            instance: self.loss,
            sta: self.sta,
            toggles: self.toggles,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be at least 1"));
        }
        if self.batch_size < MIN_BATCH {
            return Err(Error::config(format!(
                "train.batch_size must be at least {MIN_BATCH}, got {}",
                self.batch_size
            )));
        }
        for (key, v) in [
            ("base_lr", self.base_lr),
            ("init_lr", self.init_lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "train.{key} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.embed_dim == 0 {
            return Err(Error::config("train.embed_dim must be at least 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config(format!(
                "train.val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if !self.toggles.any() {
            return Err(Error::config("train.toggles must enable at least one loss"));
        }
        self.loss.validate()?;
        self.sta.validate()
    }
}

/// Seed-fixed train/validation partition of instance indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<DataSplit> {
    if n < 2 * MIN_BATCH {
        return Err(Error::config(format!(
            "corpus has {n} instances, training needs at least {}",
            2 * MIN_BATCH
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(MIN_BATCH, n - MIN_BATCH);
    let train = idx.split_off(n_val);
    Ok(DataSplit { train, val: idx })
}

/// Consecutive chunks of `indices`; a final chunk below [`MIN_BATCH`] is dropped.
pub fn make_batches(indices: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    indices
        .chunks(batch_size.max(1))
        .filter(|c| c.len() >= MIN_BATCH)
        .map(<[usize]>::to_vec)
        .collect()
}

pub fn init_model(raw_dim: usize, cfg: &TrainConfig) -> AlignmentModel {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_4ead);
    AlignmentModel::random(raw_dim, cfg.embed_dim, &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation total.
    pub best: Checkpoint,
    /// Parameters after the last epoch run.
    pub last: Checkpoint,
    pub epochs: Vec<EpochRecord>,
    /// Breakdown of every optimizer step, before its update.
    pub steps: Vec<LossBreakdown>,
    pub stopped_early: bool,
    /// Pseudo-positive pairs seen across all training batches.
    pub pseudo_positive_pairs: usize,
}

impl TrainOutcome {
    pub fn best_epoch(&self) -> usize {
        self.best.epoch
    }

    pub fn metrics(&self) -> Vec<MetricsRow> {
        self.epochs
            .iter()
            .flat_map(|e| {
                [
                    MetricsRow::new(e.epoch, Split::Train, &e.train, e.lr),
                    MetricsRow::new(e.epoch, Split::Val, &e.val, e.lr),
                ]
            })
            .collect()
    }
}

fn gather<'a>(corpus: &'a Corpus, idx: &[usize]) -> Vec<&'a RawInstance> {
    idx.iter().map(|&i| &corpus.instances[i]).collect()
}

/// Trains `model` on the corpus and returns the best and final checkpoints
/// with per-epoch metrics.
pub fn train(corpus: &Corpus, model: AlignmentModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::config("cannot train on an empty corpus"));
    }
    if model.raw_dim() != corpus.spec.raw_dim {
        return Err(Error::shape(format!(
            "model expects raw dimension {}, corpus has {}",
            model.raw_dim(),
            corpus.spec.raw_dim
        )));
    }
    let split = split_indices(corpus.len(), cfg.val_fraction, cfg.seed)?;
    let batches = make_batches(&split.train, cfg.batch_size);
    let val_batch = gather(corpus, &split.val);
    let objective = cfg.objective();

    let per_epoch = batches.len();
    let schedule = LrSchedule {
        base_lr: cfg.base_lr,
        init_lr: cfg.init_lr,
        warmup_steps: cfg.warmup_epochs * per_epoch,
        total_steps: cfg.epochs * per_epoch,
    };
    let optimizer = AdamW::new(cfg.weight_decay);
    let mut model = model;
    let mut state = AdamWState::zeros_like(&model.params());

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::with_capacity(cfg.epochs * per_epoch);
    let mut pseudo_positive_pairs = 0;
    let mut step = 0;
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let mut epoch_steps = Vec::with_capacity(per_epoch);
        let mut lr = schedule.lr_at(step)?;
        for batch in &batches {
            lr = schedule.lr_at(step)?;
            let mut tape = Tape::new();
            let vars = model.attach(&mut tape, true);
            let obj = batch_objective(&mut tape, &vars, &gather(corpus, batch), &objective)?;
            let breakdown = obj.breakdown(&tape)?;
            pseudo_positive_pairs += obj.semantic.pseudo_positive_count();
            let mut grads = tape.backward(obj.total)?;
            let grads = vars
                .ids()
                .into_iter()
                .zip(model.params())
                .map(|(id, p)| {
                    grads
                        .take(id)
                        .unwrap_or_else(|| crate::autodiff::Matrix::zeros(p.rows(), p.cols()))
                })
                .collect::<Vec<_>>();
            optimizer.step(&mut model.params_mut(), &grads, &mut state, lr)?;
            epoch_steps.push(breakdown);
            step += 1;
        }
        let train_mean = LossBreakdown::mean(&epoch_steps);
        steps.extend(epoch_steps);
        let val = evaluate_batch(&model, &val_batch, &objective)?;
        if !train_mean.is_finite() || !val.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss in epoch {epoch}")));
        }
        epochs.push(EpochRecord {
            epoch,
            train: train_mean,
            val,
            lr,
        });

        let improved = best.as_ref().is_none_or(|(b, _)| val.total < *b);
        if improved {
            best = Some((
                val.total,
                Checkpoint::new(epoch, step, model.clone(), state.clone()),
            ));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience.max(1) {
                stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }

    let last_epoch = epochs.last().map_or(0, |e| e.epoch);
    let (_, best) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        best,
        last: Checkpoint::new(last_epoch, step, model, state),
        epochs,
        steps,
        stopped_early,
        pseudo_positive_pairs,
    })
}
