//! Sweeps the instance- versus class-balanced batch sampling for the queue method on the default benchmark.
//!
//!     cargo run --release --example sampling_sweep -- [key=value ...]

use dcq::evalbench::{run_experiment_grid, GridAxis};
use dcq::RunConfig;

fn main() -> dcq::Result<()> {
    let mut cfg = RunConfig::default();
    for a in std::env::args().skip(1) {
        cfg.apply_override(&a)?;
    }
    let values: Vec<String> = "instance,class".split(',').map(String::from).collect();
    let grid = run_experiment_grid(&cfg, GridAxis::Sampling, &values)?;
    print!("{}", grid.to_csv());
    Ok(())
}
