//! Sweeps the queue length K for the queue method on the default benchmark.
//!
//!     cargo run --release --example queue_size_sweep -- [key=value ...]

use dcq::evalbench::{run_experiment_grid, GridAxis};
use dcq::RunConfig;

fn main() -> dcq::Result<()> {
    let mut cfg = RunConfig::default();
    for a in std::env::args().skip(1) {
        cfg.apply_override(&a)?;
    }
    let values: Vec<String> = "20,50,100,200,400".split(',').map(String::from).collect();
    let grid = run_experiment_grid(&cfg, GridAxis::QueueSize, &values)?;
    print!("{}", grid.to_csv());
    Ok(())
}
