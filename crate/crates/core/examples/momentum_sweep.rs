//! Sweeps the EMA momentum of the weight generator for the queue method on the default benchmark.
//!
//!     cargo run --release --example momentum_sweep -- [key=value ...]

use dcq::evalbench::{run_experiment_grid, GridAxis};
use dcq::RunConfig;

fn main() -> dcq::Result<()> {
    let mut cfg = RunConfig::default();
    for a in std::env::args().skip(1) {
        cfg.apply_override(&a)?;
    }
    let values: Vec<String> = "0,0.5,0.9,0.99,0.999".split(',').map(String::from).collect();
    let grid = run_experiment_grid(&cfg, GridAxis::Alpha, &values)?;
    print!("{}", grid.to_csv());
    Ok(())
}
