//! Exit-gate checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sista_core::corpus::{
    corpus_stats, format_corpus, generate_corpus, parse_corpus, CorpusSpec, PLANTED_CLUSTER_SPREAD,
};
use sista_core::eval::{alignment_eval, false_negative_experiment};
use sista_core::features::{cosine_matrix, normalize};
use sista_core::instance::{
    bidirectional_loss_value, build_semantic_matrix, InstanceLossConfig, NceVariant,
};
use sista_core::sta::{
    alignment_weights, cross_modal_embedding, format_heatmap, minmax_normalize, parse_heatmap,
    sparse_select, sta_loss, StaConfig,
};
use sista_core::train::{
    init_model, metrics_from_csv, metrics_to_csv, train, AdamW, AdamWState, Checkpoint,
    LossToggles, LrSchedule, TrainConfig, TrainOutcome,
};
use sista_core::verify::{feature_gradient_suite, SuiteConfig};
use sista_core::features::InstancePair;
use sista_core::Matrix;

const TOY_SEED: u64 = 7;
const PLANTED_SEED: u64 = 1;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn log_softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| ((v - m) / tau).exp()).sum::<f64>().ln();
    row.iter().map(|v| (v - m) / tau - lse).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

// Hard-target symmetric InfoNCE written out from scratch.
fn plain_infonce(a: &Matrix, b: &Matrix, tau: f64) -> f64 {
    let n = a.rows();
    let mut total = 0.0;
    for i in 0..n {
        let forward: Vec<f64> = (0..n).map(|k| cos(a.row(i), b.row(k))).collect();
        let backward: Vec<f64> = (0..n).map(|k| cos(a.row(k), b.row(i))).collect();
        total += log_softmax(&forward, tau)[i] + log_softmax(&backward, tau)[i];
    }
    -total / (2.0 * n as f64)
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let cfg = SuiteConfig::default();
    let checks = match feature_gradient_suite(&cfg) {
        Ok(c) => c,
        Err(e) => return verdict(false, format!("suite error: {e}")),
    };
    let elapsed = start.elapsed();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let enough = checks.iter().all(|c| c.seeds_checked >= 20);
    let skipped: usize = checks.iter().map(|c| c.seeds_skipped).sum();
    verdict(
        checks.len() == 5
            && checks.iter().all(|c| c.passed)
            && enough
            && worst <= 1e-4
            && elapsed < Duration::from_secs(30),
        format!(
            "5 losses x 20 seeds, B in {{2,4,8}}, d in {{8,16}}, h=1e-5: max rel error {worst:.2e} (tol 1e-4), {skipped} near-threshold draws skipped, {:.2}s (limit 30s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Verdict {
    let cfg = InstanceLossConfig::default();
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = [2, 4, 8][seed as usize % 3];
        let d = 16;
        let images = gaussian(&mut rng, b, d);
        let reports = gaussian(&mut rng, b, d);
        let images_aug = gaussian(&mut rng, b, d);
        let reports_aug = gaussian(&mut rng, b, d);
        let c = cosine_matrix(&reports, &reports).unwrap();
        let max_off = (0..b)
            .flat_map(|i| (0..b).filter(move |&k| k != i).map(move |k| (i, k)))
            .map(|(i, k)| c.get(i, k))
            .fold(f64::NEG_INFINITY, f64::max);
        if max_off >= cfg.pseudo_positive_threshold {
            continue;
        }
        cases += 1;
        for variant in [NceVariant::SoftTarget, NceVariant::Literal] {
            let vc = InstanceLossConfig { variant, ..cfg };
            let s = build_semantic_matrix(&reports, &vc).unwrap();
            for (x, y) in [(&images, &reports), (&images, &images_aug), (&reports, &reports_aug)] {
                let got = bidirectional_loss_value(x, y, &s, &vc).unwrap();
                worst = worst.max((got - plain_infonce(x, y, vc.temperature)).abs());
            }
        }
    }
    verdict(
        cases >= 20 && worst <= 1e-12,
        format!("{cases} batches with no pseudo-positives, sia/siva/sila vs plain InfoNCE: max abs diff {worst:.2e} (tol 1e-12)"),
    )
}

fn criterion_3() -> Verdict {
    let cfg = InstanceLossConfig::default();
    let mut row_err: f64 = 0.0;
    let mut dominant = true;
    let mut soft_entries = 0;
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = rng.random_range(2..=10);
        let centers = gaussian(&mut rng, 3, 8);
        let mut reports = gaussian(&mut rng, b, 8);
        for r in 0..b {
            let c = centers.row(r % 3).to_vec();
            for (v, x) in reports.row_mut(r).iter_mut().zip(c) {
                *v = 0.05 * *v + x;
            }
        }
        let s = build_semantic_matrix(&reports, &cfg).unwrap();
        soft_entries += s.pseudo_positive_count();
        let t = s.targets();
        for i in 0..b {
            row_err = row_err.max((t.row(i).iter().sum::<f64>() - 1.0).abs());
            dominant &= (0..b).all(|k| k == i || t.get(i, i) > t.get(i, k));
        }
    }
    let r = Matrix::from_rows(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
    let s = build_semantic_matrix(&r, &cfg).unwrap();
    let row = s.targets().row(0).to_vec();
    let exact = row == vec![1.0 / 1.1, 0.1 / 1.1, 0.0];
    verdict(
        row_err <= 1e-9 && dominant && exact && soft_entries > 0,
        format!(
            "max |row sum - 1| {row_err:.1e} (tol 1e-9), diagonal dominant {dominant}, {soft_entries} pseudo-positives, identical-pair row {row:?}"
        ),
    )
}

// Step-by-step loop oracle for one instance of the token loss.
fn sta_oracle(tokens: &[[f64; 3]], patches: &[[f64; 3]], u: &[f64], theta: f64, tau: f64) -> f64 {
    let l = tokens.len();
    let mut embedded = Vec::new();
    for w in tokens {
        let s: Vec<f64> = patches.iter().map(|p| w.iter().zip(p).map(|(a, b)| a * b).sum()).collect();
        let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let norm: Vec<f64> = s.iter().map(|v| (v - lo) / (hi - lo)).collect();
        let kept: Vec<f64> = norm.iter().map(|&v| if v >= theta { v } else { 0.0 }).collect();
        let z: f64 = kept.iter().sum();
        let mut e = [0.0; 3];
        for (k, p) in patches.iter().enumerate() {
            for j in 0..3 {
                e[j] += kept[k] / z * p[j];
            }
        }
        embedded.push(e);
    }
    let mut total = 0.0;
    for i in 0..l {
        let forward: Vec<f64> = (0..l).map(|k| cos(&tokens[i], &embedded[k])).collect();
        let backward: Vec<f64> = (0..l).map(|k| cos(&tokens[k], &embedded[i])).collect();
        total += u[i] * (log_softmax(&forward, tau)[i] + log_softmax(&backward, tau)[i]);
    }
    -total / l as f64 / 2.0
}

fn criterion_4() -> Verdict {
    let n = minmax_normalize(&[1.0, 2.0, 4.0], 1e-9);
    let kept = sparse_select(&n, 0.3);
    let w = alignment_weights(&n, &kept).unwrap();
    let worked = n == vec![0.0, 1.0 / 3.0, 1.0] && kept == vec![1, 2] && w == vec![0.25, 0.75];

    let tokens = [[0.9, 0.1, -0.3], [-0.2, 0.8, 0.4]];
    let patches = [[1.0, 0.0, 0.2], [0.1, 0.9, 0.1], [0.5, 0.5, -0.6]];
    let u = [1.5, 0.5];
    let cfg = StaConfig::default();
    let unit = normalize(&[1.0, 0.0, 0.0]).unwrap();
    let pair = InstancePair {
        image_global: unit.clone(),
        patches: Matrix::from_rows(&patches).unwrap(),
        report_global: unit.clone(),
        tokens: Matrix::from_rows(&tokens).unwrap(),
        image_global_aug: unit.clone(),
        report_global_aug: unit.clone(),
        token_importance: u.to_vec(),
    };
    let got = sta_loss(&[pair], &cfg).unwrap();
    let want = sta_oracle(&tokens, &patches, &u, cfg.sparsity_threshold, cfg.temperature);
    let diff = (got - want).abs();
    verdict(
        worked && diff <= 1e-10,
        format!(
            "[1,2,4] -> {n:?}, retained {kept:?}, weights {w:?}; pinned B=1 L=2 M=3 loss {got:.12} vs oracle {want:.12} (diff {diff:.1e}, tol 1e-10)"
        ),
    )
}

fn criterion_5() -> Verdict {
    let theta = 0.3;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut argmax_ok, mut sums, mut affine) = (true, 0.0f64, 0.0f64);
    let mut selection_same = true;
    for _ in 0..500 {
        let m = rng.random_range(1..=6);
        let d = 4;
        let patches = gaussian(&mut rng, m, d);
        let s: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let n = minmax_normalize(&s, 1e-9);
        let kept = sparse_select(&n, theta);
        let w = alignment_weights(&n, &kept).unwrap();
        let argmax = (0..m).fold(0, |b, k| if s[k] > s[b] { k } else { b });
        argmax_ok &= kept.contains(&argmax);
        sums = sums.max((w.iter().sum::<f64>() - 1.0).abs());
        let e = cross_modal_embedding(&w, &kept, &patches).unwrap();

        let a = rng.random_range(0.1..10.0);
        let b = rng.random_range(-5.0..5.0);
        let t: Vec<f64> = s.iter().map(|v| a * v + b).collect();
        let n2 = minmax_normalize(&t, 1e-9);
        let kept2 = sparse_select(&n2, theta);
        selection_same &= kept2 == kept;
        if kept2 == kept {
            let w2 = alignment_weights(&n2, &kept2).unwrap();
            let e2 = cross_modal_embedding(&w2, &kept2, &patches).unwrap();
            for (x, y) in n.iter().zip(&n2).chain(w.iter().zip(&w2)).chain(e.iter().zip(&e2)) {
                affine = affine.max((x - y).abs());
            }
        }
    }
    let flat = minmax_normalize(&[0.7; 5], 1e-9);
    let kept = sparse_select(&flat, theta);
    let uniform = alignment_weights(&flat, &kept).unwrap() == vec![0.2; 5];
    verdict(
        argmax_ok && sums <= 1e-9 && selection_same && affine <= 1e-9 && uniform,
        format!(
            "500 draws: argmax retained {argmax_ok}, max |sum w - 1| {sums:.1e}, affine drift {affine:.1e} (selection unchanged {selection_same}), constant similarities uniform {uniform}"
        ),
    )
}

fn toy_run() -> (CorpusSpec, TrainConfig) {
    let spec = CorpusSpec {
        seed: TOY_SEED,
        ..CorpusSpec::default()
    };
    let cfg = TrainConfig {
        seed: TOY_SEED,
        ..TrainConfig::default()
    };
    (spec, cfg)
}

fn total_identity(out: &TrainOutcome, toggles: LossToggles) -> (f64, bool) {
    let mut worst: f64 = 0.0;
    let mut shape = true;
    for s in &out.steps {
        let c = s.components();
        let flags = [toggles.sia, toggles.sia_aug, toggles.siva, toggles.sila, toggles.sta];
        let sum: f64 = c.iter().zip(flags).filter(|(_, on)| *on).map(|(v, _)| v).sum();
        worst = worst.max((s.total - sum).abs());
        shape &= c.iter().zip(flags).all(|(v, on)| if on { *v > 0.0 } else { *v == 0.0 });
    }
    (worst, shape)
}

fn criterion_6(full: &TrainOutcome, corpus: &sista_core::corpus::Corpus, cfg: &TrainConfig) -> Verdict {
    let (worst_all, shape_all) = total_identity(full, LossToggles::all());
    let partial = LossToggles {
        siva: false,
        sta: false,
        ..LossToggles::all()
    };
    let pc = TrainConfig {
        toggles: partial,
        epochs: 5,
        ..*cfg
    };
    let out = train(corpus, init_model(corpus.spec.raw_dim, &pc), &pc).unwrap();
    let (worst_part, shape_part) = total_identity(&out, partial);
    let worst = worst_all.max(worst_part);
    verdict(
        worst <= 1e-12 && shape_all && shape_part,
        format!(
            "{} steps with all five losses plus {} with three: max |total - sum| {worst:.1e} (tol 1e-12), disabled components zero {}",
            full.steps.len(),
            out.steps.len(),
            shape_all && shape_part
        ),
    )
}

fn criterion_7(full: &TrainOutcome, elapsed: Duration, corpus: &sista_core::corpus::Corpus, cfg: &TrainConfig) -> Verdict {
    let first = full.epochs[0].train.total;
    let last = full.epochs.last().unwrap().train.total;
    let reduction = 1.0 - last / first;
    let again = train(corpus, init_model(corpus.spec.raw_dim, cfg), cfg).unwrap();
    let a = metrics_to_csv(&full.metrics()).unwrap();
    let b = metrics_to_csv(&again.metrics()).unwrap();
    let finite = full.steps.iter().all(|s| s.is_finite());
    verdict(
        reduction >= 0.5 && elapsed < Duration::from_secs(120) && a == b && finite,
        format!(
            "200 instances, 4 clusters, B=32, d=16, {} epochs: train total {first:.4} -> {last:.4} ({:.1}% reduction, need 50%), {:.2}s (limit 120s), metrics CSV identical on rerun {}",
            full.epochs.len(),
            100.0 * reduction,
            elapsed.as_secs_f64(),
            a == b
        ),
    )
}

fn criterion_8() -> Verdict {
    let spec = CorpusSpec {
        seed: PLANTED_SEED,
        ..CorpusSpec::planted()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let stats = corpus_stats(&corpus, 0.9).unwrap();
    let cfg = TrainConfig {
        seed: PLANTED_SEED,
        ..TrainConfig::default()
    };
    let r = false_negative_experiment(&corpus, &cfg).unwrap();
    let soft_wins = r.soft.cluster_recall_at_1 >= r.hard.cluster_recall_at_1;

    let mut non_negative = 0;
    for seed in 1..=10 {
        let c = generate_corpus(&CorpusSpec {
            seed,
            ..CorpusSpec::planted()
        })
        .unwrap();
        let rr = false_negative_experiment(&c, &TrainConfig { seed, ..cfg }).unwrap();
        if rr.delta.cluster_recall_at_1 >= 0.0 {
            non_negative += 1;
        }
    }

    let sparse = CorpusSpec {
        num_clusters: 200,
        cluster_spread: 2.0,
        seed: PLANTED_SEED,
        ..CorpusSpec::default()
    };
    let sc = generate_corpus(&sparse).unwrap();
    let twin = false_negative_experiment(&sc, &cfg).unwrap();
    let identical = twin.pseudo_positive_pairs == 0 && twin.hard == twin.soft;

    verdict(
        stats.same_cluster_above >= 0.9 && soft_wins && non_negative >= 9 && identical,
        format!(
            "spread {PLANTED_CLUSTER_SPREAD}: {:.1}% same-cluster pairs above 0.9; cluster_recall@1 soft {:.4} vs hard {:.4} at seed {PLANTED_SEED}; soft >= hard on {non_negative}/10 seeds; no-pseudo-positive twins identical {identical}",
            100.0 * stats.same_cluster_above,
            r.soft.cluster_recall_at_1,
            r.hard.cluster_recall_at_1
        ),
    )
}

fn criterion_9(full: &TrainOutcome, corpus: &sista_core::corpus::Corpus, cfg: &TrainConfig) -> Verdict {
    let trained = alignment_eval(&full.best.model, corpus, &cfg.sta).unwrap();
    let mut rates = Vec::with_capacity(50);
    for seed in 0..50 {
        let c = TrainConfig { seed, ..*cfg };
        let s = alignment_eval(&init_model(corpus.spec.raw_dim, &c), corpus, &cfg.sta).unwrap();
        rates.push(s.pathology_hit_rate);
    }
    let chance = trained.chance;
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let worst = rates.iter().map(|r| (r - chance).abs()).fold(0.0, f64::max);
    verdict(
        trained.pathology_hit_rate > chance && (mean - chance).abs() <= 0.10,
        format!(
            "trained hit rate {:.4} vs chance {chance:.4}; untrained mean over 50 seeds {mean:.4} (within 0.10 of chance), largest single-seed deviation {worst:.4}",
            trained.pathology_hit_rate
        ),
    )
}

fn criterion_10() -> Verdict {
    let (base, init) = (1e-3, 1e-8);
    let sched = LrSchedule {
        base_lr: base,
        init_lr: init,
        warmup_steps: 10,
        total_steps: 110,
    };
    let oracle = |step: usize| -> f64 {
        if step < 10 {
            init + (base - init) * step as f64 / 10.0
        } else {
            let p = (step - 10) as f64 / 100.0;
            init + (base - init) * (1.0 + (std::f64::consts::PI * p).cos()) / 2.0
        }
    };
    let lr_err = [0usize, 10, 60, 110]
        .iter()
        .map(|&s| (sched.lr_at(s).unwrap() - oracle(s)).abs())
        .fold(0.0, f64::max);
    let mid_err = (sched.lr_at(60).unwrap() - (base + init) / 2.0).abs();
    let ends = sched.lr_at(0).unwrap() == init && sched.lr_at(10).unwrap() == base;

    let (lr, wd) = (0.1, 0.01);
    let mut x = Matrix::scalar(1.0);
    let grad = Matrix::scalar(2.0);
    let mut state = AdamWState::zeros_like(&[&x]);
    AdamW::new(wd).step(&mut [&mut x], &[grad], &mut state, lr).unwrap();
    // m_hat = g, v_hat = g^2 after bias correction.
    let want = 1.0 * (1.0 - lr * wd) - lr * 2.0 / (2.0 + 1e-8);
    let opt_err = (x.as_scalar().unwrap() - want).abs();
    verdict(
        lr_err <= 1e-12 && mid_err <= 1e-12 && ends && opt_err <= 1e-12,
        format!(
            "lr_at max error {lr_err:.1e}, midpoint error {mid_err:.1e}, step 0 = 1e-8 {ends}; AdamW step on x^2 error {opt_err:.1e} (tol 1e-12)"
        ),
    )
}

fn criterion_11(full: &TrainOutcome, corpus: &sista_core::corpus::Corpus) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();

    let text = format_corpus(corpus);
    let p = dir.path().join("corpus.txt");
    sista_core::corpus::write_corpus(corpus, &p).unwrap();
    let back = sista_core::corpus::read_corpus(&p).unwrap();
    if back != *corpus || format_corpus(&back) != text || parse_corpus(&text).unwrap() != *corpus {
        failures.push("corpus");
    }

    let p = dir.path().join("checkpoint.json");
    full.best.write(&p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    let ck = Checkpoint::read(&p).unwrap();
    ck.write(&p).unwrap();
    if ck != full.best || std::fs::read(&p).unwrap() != bytes {
        failures.push("checkpoint");
    }

    let csv = metrics_to_csv(&full.metrics()).unwrap();
    let rows = metrics_from_csv(&csv).unwrap();
    if rows != full.metrics() || metrics_to_csv(&rows).unwrap() != csv {
        failures.push("metrics");
    }

    let inst = &corpus.instances[0];
    let tokens = full.best.model.report_local.project_rows(&inst.tokens).unwrap();
    let patches = full.best.model.image_local.project_rows(&inst.patches).unwrap();
    let dense = sista_core::sta::alignment_map(&tokens, &patches, &StaConfig::default())
        .unwrap()
        .to_dense();
    let h = format_heatmap(&dense);
    let parsed = parse_heatmap(&h).unwrap();
    if parsed != dense || format_heatmap(&parsed) != h {
        failures.push("heatmap");
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "corpus, checkpoint, metrics CSV and heatmap: write -> read -> write byte-identical".to_string()
        } else {
            format!("round trip broke for {}", failures.join(", "))
        },
    )
}

fn main() -> ExitCode {
    // Accept and ignore libtest arguments such as --nocapture or filters.
    let (spec, cfg) = toy_run();
    let corpus = generate_corpus(&spec).unwrap();
    let start = Instant::now();
    let full = train(&corpus, init_model(spec.raw_dim, &cfg), &cfg).unwrap();
    let elapsed = start.elapsed();

    let results: Vec<(usize, &str, Verdict)> = vec![
        (1, "gradient suite", criterion_1()),
        (2, "InfoNCE reduction", criterion_2()),
        (3, "semantic matrix contract", criterion_3()),
        (4, "token alignment oracle", criterion_4()),
        (5, "token alignment invariants", criterion_5()),
        (6, "total-loss identity", criterion_6(&full, &corpus, &cfg)),
        (7, "training regression", criterion_7(&full, elapsed, &corpus, &cfg)),
        (8, "false-negative experiment", criterion_8()),
        (9, "alignment recovery", criterion_9(&full, &corpus, &cfg)),
        (10, "scheduler and optimizer oracles", criterion_10()),
        (11, "file round trips", criterion_11(&full, &corpus)),
    ];
    let mut failed = 0;
    for (n, name, v) in &results {
        println!(
            "criterion {n:>2} {}: {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} of {} criteria pass", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
