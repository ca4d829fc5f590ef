//! Stops a run halfway, saves a checkpoint, reloads it and finishes. The
//! resumed rows match the uninterrupted run exactly.
//!
//!     cargo run --release --example checkpoint_resume

use dcq::trainer::{Checkpoint, Trainer};
use dcq::RunConfig;

fn main() -> dcq::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.classes = 200;
    cfg.train.queue_size = 20;
    cfg.eval.probes = 50;
    cfg.eval.distractors = 50;
    cfg.train.epochs = 8;
    cfg.train.decay_epochs = vec![6];
    cfg.eval.interval = 2;

    let straight = Trainer::from_config(&cfg)?.run()?;

    let mut t = Trainer::from_config(&cfg)?;
    for _ in 0..4 {
        t.run_epoch()?;
    }
    let path = std::env::temp_dir().join("dcq-example.dcqc");
    t.checkpoint().save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    let rest = Trainer::from_checkpoint(&loaded)?.run()?;
    std::fs::remove_file(&path).ok();

    for (a, b) in straight[4..].iter().zip(&rest) {
        let same = a.train_loss.to_bits() == b.train_loss.to_bits() && a.ver_acc.to_bits() == b.ver_acc.to_bits();
        println!("epoch {}  loss {:.6}  resumed {:.6}  identical {same}", a.epoch, a.train_loss, b.train_loss);
    }
    Ok(())
}
