//! Trains the queue method on a reduced long-tail benchmark and prints the
//! per-epoch curve. Extra `key=value` arguments override the config.
//!
//!     cargo run --release --example train_dcq -- epochs=10 K=64

use dcq::trainer::Trainer;
use dcq::RunConfig;

fn main() -> dcq::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.classes = 400;
    cfg.train.queue_size = 40;
    cfg.eval.probes = 100;
    cfg.eval.distractors = 100;
    cfg.train.epochs = 12;
    cfg.train.decay_epochs = vec![6, 10];
    for a in std::env::args().skip(1) {
        cfg.apply_override(&a)?;
    }
    cfg.validate()?;

    let mut t = Trainer::from_config(&cfg)?;
    println!("{} iterations per epoch", t.iterations_per_epoch());
    println!("epoch  lr        loss    ver     rank-1");
    for row in t.run()? {
        println!(
            "{:>5}  {:<8.4} {:>7.4} {:>7.4} {:>7.4}",
            row.epoch, row.lr, row.train_loss, row.ver_acc, row.id_rank1
        );
    }
    if let Some(r) = t.evaluate()? {
        println!("final: ver {:.4} rank-1 {:.4} tail rank-1 {:.4}", r.ver_acc, r.id_rank1, r.tail_rank1);
    }
    Ok(())
}
