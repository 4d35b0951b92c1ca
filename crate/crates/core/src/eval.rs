//! Retrieval, planted-alignment and ablation metrics.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Matrix;
use crate::corpus::{Corpus, RawInstance};
use crate::error::{Error, Result};
use crate::features::{cosine_matrix, AlignmentModel};
use crate::instance::LabelMode;
use crate::sta::{alignment_map, StaConfig};
use crate::train::{init_model, train, LossToggles, TrainConfig, TrainOutcome};

/// Env var capping the worker threads used for independent runs.
pub const THREADS_ENV: &str = "SISTA_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub cluster_recall_at_1: f64,
    pub cluster_recall_at_5: f64,
    pub mrr: f64,
}

impl RetrievalReport {
    pub fn delta(&self, base: &RetrievalReport) -> RetrievalReport {
        RetrievalReport {
            recall_at_1: self.recall_at_1 - base.recall_at_1,
            recall_at_5: self.recall_at_5 - base.recall_at_5,
            cluster_recall_at_1: self.cluster_recall_at_1 - base.cluster_recall_at_1,
            cluster_recall_at_5: self.cluster_recall_at_5 - base.cluster_recall_at_5,
            mrr: self.mrr - base.mrr,
        }
    }
}

#[derive(Default)]
struct Tally {
    hits: [f64; 2],
    cluster_hits: [f64; 2],
    rr: f64,
}

const KS: [usize; 2] = [1, 5];

// Row i of `sims` scores query i against every candidate; candidate i is its pair.
fn rank_queries(sims: &Matrix, clusters: &[usize], tally: &mut Tally) {
    for (q, row) in sims.iter_rows().enumerate() {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let rank = order.iter().position(|&c| c == q).expect("pair present") + 1;
        tally.rr += 1.0 / rank as f64;
        for (slot, &k) in KS.iter().enumerate() {
            let top = &order[..k.min(order.len())];
            if top.contains(&q) {
                tally.hits[slot] += 1.0;
            }
            if top.iter().any(|&c| clusters[c] == clusters[q]) {
                tally.cluster_hits[slot] += 1.0;
            }
        }
    }
}

/// Image-to-report and report-to-image retrieval by cosine similarity,
/// averaged over both directions. Ties go to the lower index.
pub fn retrieval_eval(
    image_globals: &Matrix,
    report_globals: &Matrix,
    cluster_ids: &[usize],
) -> Result<RetrievalReport> {
    let n = image_globals.rows();
    if report_globals.rows() != n || cluster_ids.len() != n {
        return Err(Error::shape(format!(
            "{n} images, {} reports, {} cluster ids",
            report_globals.rows(),
            cluster_ids.len()
        )));
    }
    if n == 0 {
        return Err(Error::shape("retrieval over zero items"));
    }
    let sims = cosine_matrix(image_globals, report_globals)?;
    let mut tally = Tally::default();
    rank_queries(&sims, cluster_ids, &mut tally);
    rank_queries(&sims.transpose(), cluster_ids, &mut tally);
    let q = 2.0 * n as f64;
    Ok(RetrievalReport {
        recall_at_1: tally.hits[0] / q,
        recall_at_5: tally.hits[1] / q,
        cluster_recall_at_1: tally.cluster_hits[0] / q,
        cluster_recall_at_5: tally.cluster_hits[1] / q,
        mrr: tally.rr / q,
    })
}

fn stack_globals(instances: &[RawInstance], pick: fn(&RawInstance) -> &Vec<f64>) -> Result<Matrix> {
    Matrix::from_rows(&instances.iter().map(pick).collect::<Vec<_>>())
}

/// Retrieval metrics of `model` over every instance of `corpus`.
pub fn retrieval_for_model(model: &AlignmentModel, corpus: &Corpus) -> Result<RetrievalReport> {
    let images = model
        .image_global
        .project_rows(&stack_globals(&corpus.instances, |i| &i.image_global)?)?;
    let reports = model
        .report_global
        .project_rows(&stack_globals(&corpus.instances, |i| &i.report_global)?)?;
    retrieval_eval(&images, &reports, &corpus.cluster_ids())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AlignmentScore {
    /// Pathology tokens whose top-weight patch is their own planted patch.
    pub pathology_hit_rate: f64,
    /// Retained patches per token, averaged over all tokens.
    pub mean_retained: f64,
    /// Hit rate of a uniformly random patch choice.
    pub chance: f64,
    pub pathology_tokens: usize,
}

/// Scores the alignment maps of `model` against the planted patches.
pub fn alignment_eval(model: &AlignmentModel, corpus: &Corpus, cfg: &StaConfig) -> Result<AlignmentScore> {
    let (mut hits, mut scored, mut retained, mut tokens) = (0usize, 0usize, 0.0, 0usize);
    let mut chance = 0.0;
    for inst in &corpus.instances {
        let patches = model.image_local.project_rows(&inst.patches)?;
        let toks = model.report_local.project_rows(&inst.tokens)?;
        let map = alignment_map(&toks, &patches, cfg)?;
        retained += map.mean_retained() * map.tokens.len() as f64;
        tokens += map.tokens.len();
        for (l, k) in inst.pathology_tokens() {
            scored += 1;
            chance += 1.0 / inst.patches.rows() as f64;
            if map.tokens[l].top_patch() == k {
                hits += 1;
            }
        }
    }
    if scored == 0 {
        return Err(Error::config("corpus has no planted pathology tokens"));
    }
    Ok(AlignmentScore {
        pathology_hit_rate: hits as f64 / scored as f64,
        mean_retained: retained / tokens as f64,
        chance: chance / scored as f64,
        pathology_tokens: scored,
    })
}

/// Runs `f` on a pool capped by [`THREADS_ENV`] when it is set.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?,
        Err(_) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone)]
pub struct FalseNegativeReport {
    pub hard: RetrievalReport,
    pub soft: RetrievalReport,
    /// `soft - hard` for every metric.
    pub delta: RetrievalReport,
    /// Pseudo-positive pairs the soft run saw across its training batches.
    pub pseudo_positive_pairs: usize,
    pub hard_outcome: TrainOutcome,
    pub soft_outcome: TrainOutcome,
}

/// Trains identity-target and soft-target twins from the same initial
/// weights and compares their retrieval on the whole corpus.
pub fn false_negative_experiment(corpus: &Corpus, cfg: &TrainConfig) -> Result<FalseNegativeReport> {
    let mut hard_cfg = *cfg;
    hard_cfg.loss.labels = LabelMode::Hard;
    let mut soft_cfg = *cfg;
    soft_cfg.loss.labels = LabelMode::Soft;
    let init = init_model(corpus.spec.raw_dim, cfg);
    let (hard, soft) = with_thread_cap(|| {
        rayon::join(
            || train(corpus, init.clone(), &hard_cfg),
            || train(corpus, init.clone(), &soft_cfg),
        )
    })?;
    let (hard_outcome, soft_outcome) = (hard?, soft?);
    let hard = retrieval_for_model(&hard_outcome.best.model, corpus)?;
    let soft = retrieval_for_model(&soft_outcome.best.model, corpus)?;
    Ok(FalseNegativeReport {
        hard,
        soft,
        delta: soft.delta(&hard),
        pseudo_positive_pairs: soft_outcome.pseudo_positive_pairs,
        hard_outcome,
        soft_outcome,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub sia: bool,
    pub sia_aug: bool,
    pub siva: bool,
    pub sila: bool,
    pub sta: bool,
    pub full_model: bool,
    pub config_hash: String,
    pub best_epoch: usize,
    pub val_total: f64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub cluster_recall_at_1: f64,
    pub cluster_recall_at_5: f64,
    pub mrr: f64,
    pub pathology_hit_rate: f64,
    pub mean_retained: f64,
}

/// The four loss settings of the ablation, from the instance baseline to the
/// full objective.
pub fn ablation_settings() -> Vec<LossToggles> {
    let base = LossToggles {
        sia: true,
        sia_aug: true,
        ..LossToggles::none()
    };
    let with_sta = LossToggles { sta: true, ..base };
    let with_intra = LossToggles {
        siva: true,
        sila: true,
        ..base
    };
    vec![base, with_sta, with_intra, LossToggles::all()]
}

/// Short hex digest of everything that determines a training run.
pub fn config_hash(cfg: &TrainConfig) -> Result<String> {
    let doc = serde_json::json!({
        "train": cfg,
        "seed": cfg.seed,
        "loss": cfg.loss,
        "sta": cfg.sta,
    });
    let digest = Sha256::digest(serde_json::to_vec(&doc)?);
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

fn ablation_row(corpus: &Corpus, cfg: &TrainConfig) -> Result<AblationRow> {
    let out = train(corpus, init_model(corpus.spec.raw_dim, cfg), cfg)?;
    let model = &out.best.model;
    let r = retrieval_for_model(model, corpus)?;
    let a = alignment_eval(model, corpus, &cfg.sta)?;
    let t = cfg.toggles;
    let val_total = out.epochs[out.best.epoch - 1].val.total;
    Ok(AblationRow {
        label: t.label(),
        sia: t.sia,
        sia_aug: t.sia_aug,
        siva: t.siva,
        sila: t.sila,
        sta: t.sta,
        full_model: t.is_all(),
        config_hash: config_hash(cfg)?,
        best_epoch: out.best.epoch,
        val_total,
        recall_at_1: r.recall_at_1,
        recall_at_5: r.recall_at_5,
        cluster_recall_at_1: r.cluster_recall_at_1,
        cluster_recall_at_5: r.cluster_recall_at_5,
        mrr: r.mrr,
        pathology_hit_rate: a.pathology_hit_rate,
        mean_retained: a.mean_retained,
    })
}

/// Trains one model per ablation setting; rows run concurrently.
pub fn ablation_sweep(corpus: &Corpus, base: &TrainConfig) -> Result<Vec<AblationRow>> {
    let cfgs: Vec<TrainConfig> = ablation_settings()
        .into_iter()
        .map(|toggles| TrainConfig { toggles, ..*base })
        .collect();
    with_thread_cap(|| cfgs.par_iter().map(|c| ablation_row(corpus, c)).collect())?
}

pub fn ablation_to_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn ablation_from_csv(text: &str) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_ablation(rows: &[AblationRow], path: &Path) -> Result<()> {
    std::fs::write(path, ablation_to_csv(rows)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn identical_features_are_perfect() {
        let x = random_matrix(10, 6, 1);
        let clusters: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let r = retrieval_eval(&x, &x, &clusters).unwrap();
        assert_eq!(r.recall_at_1, 1.0);
        assert_eq!(r.mrr, 1.0);
        assert_eq!(r.cluster_recall_at_1, 1.0);
    }

    #[test]
    fn random_features_are_near_one_over_n() {
        let n = 20;
        let clusters: Vec<usize> = (0..n).collect();
        let mean = (0..50)
            .map(|s| {
                let a = random_matrix(n, 8, 2 * s);
                let b = random_matrix(n, 8, 2 * s + 1);
                retrieval_eval(&a, &b, &clusters).unwrap().recall_at_1
            })
            .sum::<f64>()
            / 50.0;
        assert!((mean - 1.0 / n as f64).abs() < 0.02, "mean recall@1 {mean}");
    }

    #[test]
    fn ties_break_by_index() {
        let ones = Matrix::filled(3, 2, 1.0);
        let r = retrieval_eval(&ones, &ones, &[0, 1, 2]).unwrap();
        // Query i ranks candidate 0 first; only query 0 hits.
        assert!((r.recall_at_1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.mrr - (1.0 + 0.5 + 1.0 / 3.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        let a = random_matrix(4, 3, 0);
        let b = random_matrix(5, 3, 1);
        assert!(matches!(retrieval_eval(&a, &b, &[0; 4]), Err(Error::Shape(_))));
        assert!(matches!(retrieval_eval(&a, &a, &[0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn alignment_score_bounds() {
        let corpus = generate_corpus(&CorpusSpec {
            num_instances: 20,
            seed: 4,
            ..CorpusSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig::default();
        let s = alignment_eval(&init_model(32, &cfg), &corpus, &StaConfig::default()).unwrap();
        assert!((0.0..=1.0).contains(&s.pathology_hit_rate));
        assert!(s.mean_retained >= 1.0);
        assert_eq!(s.pathology_tokens, 40);
        assert!((s.chance - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn settings_and_hashes_differ() {
        let s = ablation_settings();
        assert_eq!(s.len(), 4);
        assert!(s[3].is_all() && !s[0].is_all());
        let hashes: Vec<String> = s
            .iter()
            .map(|&toggles| {
                config_hash(&TrainConfig {
                    toggles,
                    ..TrainConfig::default()
                })
                .unwrap()
            })
            .collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(hashes[i], hashes[j]);
            }
        }
    }
}
