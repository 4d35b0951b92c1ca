//! Compares identity-target and soft-target training on a clustered corpus.

use sista_core::corpus::{generate_corpus, CorpusSpec};
use sista_core::eval::false_negative_experiment;
use sista_core::train::TrainConfig;

fn main() -> sista_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let spread: f64 = args.next().map_or(0.25, |s| s.parse().expect("spread"));
    let clusters: usize = args.next().map_or(4, |s| s.parse().expect("clusters"));
    let seed: u64 = args.next().map_or(7, |s| s.parse().expect("seed"));
    let corpus = generate_corpus(&CorpusSpec {
        cluster_spread: spread,
        num_clusters: clusters,
        seed,
        ..CorpusSpec::default()
    })?;
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let r = false_negative_experiment(&corpus, &cfg)?;
    println!("pseudo-positive pairs {}", r.pseudo_positive_pairs);
    println!("hard  {:?}", r.hard);
    println!("soft  {:?}", r.soft);
    println!("delta {:?}", r.delta);
    Ok(())
}
