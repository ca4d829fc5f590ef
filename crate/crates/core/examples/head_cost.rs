//! Parameter and compute cost of the classification head, queue versus full
//! FC, at benchmark scale and at a million-identity scale.
//!
//!     cargo run --example head_cost

use dcq::evalbench::head_cost_report;
use dcq::Method;

fn main() -> dcq::Result<()> {
    for (c, k, d, b) in [(2_000u64, 200u64, 32u64, 16u64), (642_962, 65_536, 512, 512)] {
        let full = head_cost_report(Method::CosfaceFull, c, 0, d, b, 4, 0)?;
        // the generator shares the extractor's forward cost; count none here
        let queue = head_cost_report(Method::Dcq, c, k, d, b, 4, 0)?;
        println!("C={c} K={k} D={d} B={b}");
        for r in [&full, &queue] {
            println!(
                "  {:<13} params {:>14} B  optimizer {:>14} B  MACs/batch {:>14}",
                r.method.name(),
                r.head_param_bytes,
                r.optimizer_state_bytes,
                r.head_macs_per_batch
            );
        }
        println!("  ratio {:.5}", queue.param_ratio_vs_full);
    }
    Ok(())
}
