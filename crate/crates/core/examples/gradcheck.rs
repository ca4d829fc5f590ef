//! Finite-difference check of both losses on random small problems.
//!
//!     cargo run --release --example gradcheck -- [cases] [seed]

use dcq::gradsuite::{run_gradient_suite, MAX_RELATIVE_ERROR};

fn main() -> dcq::Result<()> {
    let mut args = std::env::args().skip(1);
    let cases = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let report = run_gradient_suite(cases, seed)?;
    for c in &report {
        println!(
            "case {:>2} dims {:?} B={} K={} s={:.1} m={:.2}  dcq {:.2e}  fc {:.2e}  {}",
            c.case,
            c.dims,
            c.batch,
            c.queue_size,
            c.scale,
            c.margin,
            c.dcq_max_rel_error,
            c.fc_max_rel_error,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    let bad = report.iter().filter(|c| !c.passed()).count();
    println!("{} of {} within {MAX_RELATIVE_ERROR:e}", report.len() - bad, report.len());
    Ok(())
}
