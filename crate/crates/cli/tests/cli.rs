use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn sista(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sista"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) {
    fs::write(dir.join("run.toml"), body).unwrap();
}

const SMALL: &str = "seed = 4\n[corpus]\nnum_instances = 60\n[train]\nepochs = 5\n";

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn gen_is_idempotent_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    let args = ["gen", "--config", "run.toml", "--out", "o", "--no-timestamp"];
    assert_eq!(code(&sista(dir.path(), &args)), 0);
    let first = fs::read(dir.path().join("o/corpus.txt")).unwrap();
    let config = fs::read(dir.path().join("o/config.toml")).unwrap();
    assert_eq!(code(&sista(dir.path(), &args)), 0);
    assert_eq!(fs::read(dir.path().join("o/corpus.txt")).unwrap(), first);
    assert_eq!(fs::read(dir.path().join("o/config.toml")).unwrap(), config);
    let corpus = sista_core::corpus::read_corpus(&dir.path().join("o/corpus.txt")).unwrap();
    assert_eq!(corpus.len(), 60);
    assert_eq!(sista_core::corpus::format_corpus(&corpus).into_bytes(), first);
}

#[test]
fn missing_seed_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "[corpus]\nnum_instances = 10\n");
    let out = sista(dir.path(), &["gen", "--config", "run.toml"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn bad_value_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "seed = 1\n[corpus]\nnum_clusters = 0\n");
    let out = sista(dir.path(), &["gen", "--config", "run.toml"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus.num_clusters"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&sista(dir.path(), &["gen", "--bogus"])), 1);
    assert_eq!(code(&sista(dir.path(), &["train", "--toggle", "sta"])), 1);
    assert_eq!(code(&sista(dir.path(), &["train", "--toggle", "nope=off"])), 1);
    assert_eq!(code(&sista(dir.path(), &["--help"])), 0);
}

#[test]
fn train_needs_a_corpus_and_eval_needs_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    let train = sista(dir.path(), &["train", "--config", "run.toml", "--out", "o"]);
    assert_ne!(code(&train), 0);
    assert_eq!(code(&sista(dir.path(), &["gen", "--config", "run.toml", "--out", "o"])), 0);
    let eval = sista(dir.path(), &["eval", "--config", "run.toml", "--out", "o"]);
    assert_ne!(code(&eval), 0);
    assert!(String::from_utf8_lossy(&eval.stderr).contains("checkpoint"));
    let heat = sista(dir.path(), &["export-heatmap", "--config", "run.toml", "--out", "o"]);
    assert_ne!(code(&heat), 0);
}

#[test]
fn untrained_eval_reports_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    assert_eq!(code(&sista(dir.path(), &["gen", "--config", "run.toml", "--out", "o"])), 0);
    let out = sista(dir.path(), &["eval", "--untrained", "--config", "run.toml", "--out", "o"]);
    assert_eq!(code(&out), 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/eval.json")).unwrap()).unwrap();
    let hit = report["alignment"]["pathology_hit_rate"].as_f64().unwrap();
    let chance = report["alignment"]["chance"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&hit));
    assert!((hit - chance).abs() < 0.3, "hit {hit} chance {chance}");
}

#[test]
fn train_eval_and_heatmap_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    let base = ["--config", "run.toml", "--out", "o", "--no-timestamp"];
    let run = |cmd: &[&str]| {
        let args: Vec<&str> = cmd.iter().chain(base.iter()).copied().collect();
        sista(dir.path(), &args)
    };
    assert_eq!(code(&run(&["gen"])), 0);
    let start = Instant::now();
    assert_eq!(code(&run(&["train"])), 0);
    assert!(start.elapsed() < Duration::from_secs(60));
    let metrics = fs::read_to_string(dir.path().join("o/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,split,sia,sia_aug,siva,sila,sta,total,lr\n"));
    let ckpt = fs::read(dir.path().join("o/checkpoint.json")).unwrap();

    assert_eq!(code(&run(&["train"])), 0);
    assert_eq!(fs::read_to_string(dir.path().join("o/metrics.csv")).unwrap(), metrics);
    assert_eq!(fs::read(dir.path().join("o/checkpoint.json")).unwrap(), ckpt);

    assert_eq!(code(&run(&["eval"])), 0);
    assert!(dir.path().join("o/eval.json").exists());

    assert_eq!(code(&run(&["export-heatmap", "--instance", "3"])), 0);
    let heat = sista_core::sta::read_heatmap(&dir.path().join("o/heatmap_3.txt")).unwrap();
    for row in heat.iter_rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_ne!(code(&run(&["export-heatmap", "--instance", "600"])), 0);
}

#[test]
fn sta_toggle_zeroes_metrics_column() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    let base = ["--config", "run.toml", "--out", "o"];
    let with = |cmd: &[&str]| {
        let args: Vec<&str> = cmd.iter().chain(base.iter()).copied().collect();
        sista(dir.path(), &args)
    };
    assert_eq!(code(&with(&["gen"])), 0);
    assert_eq!(code(&with(&["train", "--toggle", "sta=off"])), 0);
    let text = fs::read_to_string(dir.path().join("o/metrics.csv")).unwrap();
    let rows = sista_core::train::metrics_from_csv(&text).unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.sta == 0.0 && r.sia > 0.0));
    let dump = fs::read_to_string(dir.path().join("o/config.toml")).unwrap();
    assert!(dump.contains("sta = false"));
}

#[test]
fn paper_preset_echoes_temperature() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "seed = 2\n[loss]\ntemperature = 0.5\n");
    let out = sista(dir.path(), &["gen", "--config", "run.toml", "--out", "o", "--paper-preset"]);
    assert_eq!(code(&out), 0);
    let dump = fs::read_to_string(dir.path().join("o/config.toml")).unwrap();
    assert!(dump.starts_with("# resolved at unix time "));
    let body: String = dump.lines().skip(1).collect::<Vec<_>>().join("\n");
    let v: toml::Value = toml::from_str(&body).unwrap();
    assert_eq!(v["loss"]["temperature"].as_float(), Some(0.2));
    assert_eq!(v["sta"]["temperature"].as_float(), Some(0.2));
    assert_eq!(v["train"]["embed_dim"].as_integer(), Some(128));
    assert_eq!(v["train"]["init_lr"].as_float(), Some(1e-8));
}

#[test]
fn gradcheck_passes_on_fresh_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = sista(dir.path(), &["gradcheck", "--seed", "5", "--out", "o"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.matches("pass").count(), 10);
    assert!(dir.path().join("o/gradcheck.json").exists());
}

#[test]
fn ablate_writes_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        "seed = 3\n[corpus]\nnum_instances = 40\n[train]\nepochs = 2\nbatch_size = 16\n",
    );
    let base = ["--config", "run.toml", "--out", "o", "--no-timestamp"];
    let run = |cmd: &str| {
        let args: Vec<&str> = std::iter::once(cmd).chain(base.iter().copied()).collect();
        sista(dir.path(), &args)
    };
    assert_eq!(code(&run("gen")), 0);
    assert_eq!(code(&run("ablate")), 0);
    let text = fs::read_to_string(dir.path().join("o/ablation.csv")).unwrap();
    let rows = sista_core::eval::ablation_from_csv(&text).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows[3].full_model);
    assert_eq!(code(&run("ablate")), 0);
    assert_eq!(fs::read_to_string(dir.path().join("o/ablation.csv")).unwrap(), text);
}
