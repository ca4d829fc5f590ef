//! The queue method against full-FC CosFace and the head-only variant on
//! the default long-tail benchmark (about a minute in release mode).
//!
//!     cargo run --release --example compare_baselines -- [key=value ...]

use dcq::evalbench::{run_experiment_grid, GridAxis};
use dcq::RunConfig;

fn main() -> dcq::Result<()> {
    let mut cfg = RunConfig::default();
    for a in std::env::args().skip(1) {
        cfg.apply_override(&a)?;
    }
    let methods = ["dcq", "cosface-full", "cosface-head-only"].map(String::from);
    let grid = run_experiment_grid(&cfg, GridAxis::Method, &methods)?;
    println!("{:<18} {:>7} {:>7} {:>11}", "method", "ver", "rank-1", "tail rank-1");
    for r in &grid.rows {
        println!("{:<18} {:>7.4} {:>7.4} {:>11.4}", r.value, r.ver_acc, r.id_rank1, r.tail_rank1);
    }
    Ok(())
}
