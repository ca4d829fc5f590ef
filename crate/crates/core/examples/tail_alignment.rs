//! After full-FC training, how well does each class column point at its
//! class's embedding mean? Rare classes get few pull updates, so their
//! columns lag.
//!
//!     cargo run --release --example tail_alignment

use dcq::evalbench::tail_alignment_diagnostic;
use dcq::trainer::{HeadState, Trainer};
use dcq::{Method, RunConfig};

fn main() -> dcq::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.train.method = Method::CosfaceFull;
    cfg.data.classes = 500;
    cfg.train.epochs = 10;
    cfg.train.decay_epochs = vec![6, 8];
    cfg.eval.interval = 0;
    cfg.eval.probes = 100;
    for a in std::env::args().skip(1) {
        cfg.apply_override(&a)?;
    }

    let mut t = Trainer::from_config(&cfg)?;
    t.run()?;
    let HeadState::Fc { head, classes, .. } = t.head() else {
        unreachable!("FC methods train a matrix head");
    };
    let ids: Vec<usize> = match classes {
        Some(hc) => hc.retained.clone(),
        None => (0..t.counts().len()).collect(),
    };
    let rep = tail_alignment_diagnostic(head, &ids, t.universe(), t.counts(), t.extractor())?;
    println!("instances      classes  mean cosine");
    for b in &rep.buckets {
        let range = match b.max_count_exclusive {
            Some(hi) => format!("{}..{}", b.min_count, hi),
            None => format!("{}+", b.min_count),
        };
        let m = b.mean_cosine.map_or("-".to_string(), |m| format!("{m:.4}"));
        println!("{range:<14} {:>7}  {m:>11}", b.classes);
    }
    Ok(())
}
