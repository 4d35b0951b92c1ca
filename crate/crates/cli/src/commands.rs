use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sista_core::corpus::{corpus_stats, generate_corpus, read_corpus, write_corpus, Corpus};
use sista_core::eval::{
    ablation_sweep, alignment_eval, retrieval_for_model, write_ablation, AlignmentScore,
    RetrievalReport,
};
use sista_core::sta::{alignment_map, write_heatmap};
use sista_core::train::{init_model, train as run_training, write_metrics, Checkpoint};
use sista_core::verify::{feature_gradient_suite, model_gradient_suite, LossCheck, SuiteConfig};
use sista_core::{Error, Result};

use crate::config::RunConfig;
use crate::Common;

pub struct Context {
    pub cfg: RunConfig,
    pub timestamp: bool,
}

fn parse_toggle(spec: &str) -> Result<(&str, bool)> {
    let (name, state) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("toggle `{spec}` must look like NAME=on|off")))?;
    let on = match state {
        "on" => true,
        "off" => false,
        other => return Err(Error::Usage(format!("toggle state `{other}` must be on or off"))),
    };
    Ok((name, on))
}

/// Merges defaults, the config file, the paper preset and flags, in that order.
pub fn resolve(common: &Common) -> Result<Context> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if common.paper_preset {
        cfg.apply_paper_preset();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for t in &common.toggles {
        let (name, on) = parse_toggle(t)?;
        cfg.train.toggles.set(name, on)?;
    }
    if let Some(out) = &common.out {
        cfg.paths.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(Context {
        cfg,
        timestamp: !common.no_timestamp,
    })
}

impl Context {
    fn out_dir(&self) -> Result<std::path::PathBuf> {
        let dir = self.cfg.out_dir();
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn dump_config(&self) -> Result<()> {
        let stamp = self.timestamp.then(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        });
        let path = self.out_dir()?.join("config.toml");
        fs::write(path, self.cfg.to_toml(stamp)?)?;
        Ok(())
    }

    fn corpus(&self) -> Result<Corpus> {
        let path = self.cfg.corpus_path();
        if !path.exists() {
            return Err(Error::Usage(format!(
                "corpus {} not found; run `sista gen` first",
                path.display()
            )));
        }
        read_corpus(&path)
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let path = self.cfg.checkpoint_path();
        if !path.exists() {
            return Err(Error::Usage(format!(
                "checkpoint {} not found; run `sista train` first",
                path.display()
            )));
        }
        Checkpoint::read(&path)
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn gen(ctx: &Context) -> Result<()> {
    let spec = ctx.cfg.corpus_spec();
    let corpus = generate_corpus(&spec)?;
    ctx.out_dir()?;
    let path = ctx.cfg.corpus_path();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_corpus(&corpus, &path)?;
    ctx.dump_config()?;
    let stats = corpus_stats(&corpus, ctx.cfg.loss.pseudo_positive_threshold)?;
    println!("wrote {}", path.display());
    println!(
        "instances {}  clusters {}  patches {}  tokens {}",
        corpus.len(),
        spec.num_clusters,
        spec.patches_per_image,
        spec.tokens_per_report
    );
    println!(
        "same-cluster report pairs above threshold {:.3}  cross-cluster {:.3}  planted patch recoverable {:.3}",
        stats.same_cluster_above,
        stats.cross_cluster_above,
        stats.raw_recoverability
    );
    Ok(())
}

pub fn train(ctx: &Context) -> Result<()> {
    let corpus = ctx.corpus()?;
    let cfg = ctx.cfg.train_config();
    let out = run_training(&corpus, init_model(corpus.spec.raw_dim, &cfg), &cfg)?;
    let dir = ctx.out_dir()?;
    let ckpt = ctx.cfg.checkpoint_path();
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    out.best.write(&ckpt)?;
    write_metrics(&out.metrics(), &dir.join("metrics.csv"))?;
    ctx.dump_config()?;
    for e in &out.epochs {
        println!(
            "epoch {:>3}  lr {:.3e}  train {:.6}  val {:.6}",
            e.epoch, e.lr, e.train.total, e.val.total
        );
    }
    println!(
        "best epoch {}{}; checkpoint {}",
        out.best_epoch(),
        if out.stopped_early { " (stopped early)" } else { "" },
        ckpt.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    source: &'static str,
    retrieval: RetrievalReport,
    alignment: AlignmentScore,
}

pub fn eval(ctx: &Context, untrained: bool) -> Result<()> {
    let corpus = ctx.corpus()?;
    let (source, model) = if untrained {
        ("untrained", init_model(corpus.spec.raw_dim, &ctx.cfg.train_config()))
    } else {
        ("checkpoint", ctx.checkpoint()?.model)
    };
    let report = EvalReport {
        source,
        retrieval: retrieval_for_model(&model, &corpus)?,
        alignment: alignment_eval(&model, &corpus, &ctx.cfg.sta)?,
    };
    let path = ctx.out_dir()?.join("eval.json");
    write_json(&report, &path)?;
    ctx.dump_config()?;
    let r = report.retrieval;
    let a = report.alignment;
    println!(
        "recall@1 {:.4}  recall@5 {:.4}  cluster@1 {:.4}  cluster@5 {:.4}  mrr {:.4}",
        r.recall_at_1, r.recall_at_5, r.cluster_recall_at_1, r.cluster_recall_at_5, r.mrr
    );
    println!(
        "pathology hit rate {:.4} (chance {:.4})  mean retained {:.3}",
        a.pathology_hit_rate, a.chance, a.mean_retained
    );
    Ok(())
}

pub fn ablate(ctx: &Context) -> Result<()> {
    let corpus = ctx.corpus()?;
    let rows = ablation_sweep(&corpus, &ctx.cfg.train_config())?;
    let path = ctx.out_dir()?.join("ablation.csv");
    write_ablation(&rows, &path)?;
    ctx.dump_config()?;
    for r in &rows {
        println!(
            "{:<28} cluster@1 {:.4}  recall@1 {:.4}  hit rate {:.4}{}",
            r.label,
            r.cluster_recall_at_1,
            r.recall_at_1,
            r.pathology_hit_rate,
            if r.full_model { "  (full model)" } else { "" }
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct GradcheckReport {
    tolerance: f64,
    features: Vec<LossCheck>,
    parameters: Vec<LossCheck>,
}

pub fn gradcheck(ctx: &Context) -> Result<()> {
    let suite = SuiteConfig {
        seeds: ctx.cfg.eval.gradcheck_seeds,
        base_seed: ctx.cfg.seed,
        instance: ctx.cfg.loss,
        sta: ctx.cfg.sta,
        ..SuiteConfig::default()
    };
    let features = feature_gradient_suite(&suite)?;
    let spec = sista_core::corpus::CorpusSpec {
        num_instances: 16,
        raw_dim: 8,
        patches_per_image: 4,
        tokens_per_report: 3,
        cluster_spread: 0.2,
        seed: ctx.cfg.seed,
        ..sista_core::corpus::CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec)?;
    let cfg = sista_core::train::TrainConfig {
        embed_dim: 8,
        ..ctx.cfg.train_config()
    };
    let model = init_model(spec.raw_dim, &cfg);
    let parameters = model_gradient_suite(&model, &corpus, 4, ctx.cfg.eval.gradcheck_batches, &suite)?;

    for (scope, checks) in [("features", &features), ("parameters", &parameters)] {
        for c in checks.iter() {
            println!(
                "{:<10} {:<8} seeds {:>3} skipped {:>3}  max rel error {:.3e}  {}",
                scope,
                c.loss.name(),
                c.seeds_checked,
                c.seeds_skipped,
                c.max_rel_error,
                if c.passed { "pass" } else { "FAIL" }
            );
        }
    }
    let failed: Vec<String> = features
        .iter()
        .chain(&parameters)
        .filter(|c| !c.passed)
        .map(|c| c.loss.name().to_string())
        .collect();
    let report = GradcheckReport {
        tolerance: suite.tolerance,
        features,
        parameters,
    };
    write_json(&report, &ctx.out_dir()?.join("gradcheck.json"))?;
    ctx.dump_config()?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check above {:e} for {}",
            suite.tolerance,
            failed.join(", ")
        )))
    }
}

pub fn export_heatmap(ctx: &Context, instance: Option<usize>) -> Result<()> {
    let ckpt = ctx.checkpoint()?;
    let corpus = ctx.corpus()?;
    let index = instance.unwrap_or(ctx.cfg.eval.heatmap_instance);
    let inst = corpus.instances.get(index).ok_or_else(|| {
        Error::Usage(format!(
            "instance {index} out of range for a corpus of {}",
            corpus.len()
        ))
    })?;
    let tokens = ckpt.model.report_local.project_rows(&inst.tokens)?;
    let patches = ckpt.model.image_local.project_rows(&inst.patches)?;
    let map = alignment_map(&tokens, &patches, &ctx.cfg.sta)?;
    let path = ctx.out_dir()?.join(format!("heatmap_{index}.txt"));
    write_heatmap(&map.to_dense(), &path)?;
    ctx.dump_config()?;
    println!("wrote {}", path.display());
    for (l, t) in map.tokens.iter().enumerate() {
        let planted = inst.planted_patch[l].map_or("-".to_string(), |k| k.to_string());
        println!("token {l}: top patch {}  planted {planted}", t.top_patch());
    }
    Ok(())
}
