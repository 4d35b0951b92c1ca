//! Trains the default toy configuration and prints per-epoch losses and
//! final metrics.

use std::time::Instant;

use sista_core::corpus::{generate_corpus, CorpusSpec};
use sista_core::eval::{alignment_eval, retrieval_for_model};
use sista_core::train::{init_model, train, TrainConfig};

fn main() -> sista_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let spread: f64 = args.next().map_or(0.6, |s| s.parse().expect("spread"));
    let lr: f64 = args.next().map_or(1e-3, |s| s.parse().expect("lr"));
    let warmup: usize = args.next().map_or(10, |s| s.parse().expect("warmup"));
    let spec = CorpusSpec {
        cluster_spread: spread,
        seed: 7,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec)?;
    let cfg = TrainConfig {
        base_lr: lr,
        warmup_epochs: warmup,
        seed: 7,
        ..TrainConfig::default()
    };
    let model = init_model(spec.raw_dim, &cfg);
    let before = alignment_eval(&model, &corpus, &cfg.sta)?;
    let start = Instant::now();
    let out = train(&corpus, model, &cfg)?;
    for e in &out.epochs {
        println!(
            "epoch {:>2} lr {:.2e} train {:.4} val {:.4} [{:.3} {:.3} {:.3} {:.3} {:.3}]",
            e.epoch, e.lr, e.train.total, e.val.total, e.train.sia, e.train.sia_aug, e.train.siva, e.train.sila, e.train.sta
        );
    }
    let first = out.epochs[0].train.total;
    let last = out.epochs.last().unwrap().train.total;
    println!("reduction {:.1}% in {:?}", 100.0 * (1.0 - last / first), start.elapsed());
    println!("pseudo-positive pairs {}", out.pseudo_positive_pairs);
    println!("retrieval {:?}", retrieval_for_model(&out.best.model, &corpus)?);
    println!("alignment before {before:?}");
    println!("alignment after {:?}", alignment_eval(&out.best.model, &corpus, &cfg.sta)?);
    Ok(())
}
