//! Prints planted-structure statistics across cluster spreads.

use sista_core::corpus::{corpus_stats, generate_corpus, CorpusSpec};

fn main() -> sista_core::Result<()> {
    println!("spread  same>=0.9  cross>=0.9  recoverable");
    for spread in [0.0, 0.1, 0.2, 0.25, 0.3, 0.35, 0.4, 0.5, 0.6, 0.8, 1.0, 2.0, 4.0] {
        let spec = CorpusSpec {
            cluster_spread: spread,
            seed: 7,
            ..CorpusSpec::default()
        };
        let s = corpus_stats(&generate_corpus(&spec)?, 0.9)?;
        println!(
            "{spread:>6}  {:>9.3}  {:>10.3}  {:>11.3}",
            s.same_cluster_above, s.cross_cluster_above, s.raw_recoverability
        );
    }
    Ok(())
}
