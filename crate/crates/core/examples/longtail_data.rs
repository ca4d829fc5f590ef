//! How the Zipf exponent shapes the per-identity instance counts, and what
//! a sampled training pair looks like.
//!
//!     cargo run --release --example longtail_data

use dcq::synthdata::{assign_longtail_counts, build_universe, draw_instance, summarize_counts, LongTailSpec};
use dcq::RunConfig;

fn main() -> dcq::Result<()> {
    let base = RunConfig::default();
    println!("exponent  total  mean   tail<10");
    for exponent in [0.0, 0.5, 0.75, 1.0, 1.5] {
        let spec = LongTailSpec {
            zipf_exponent: exponent,
            ..base.data.longtail()
        };
        let s = summarize_counts(&assign_longtail_counts(&spec, base.data.classes)?);
        println!("{exponent:>8.2} {:>6} {:>5.2} {:>8.3}", s.total_instances, s.mean_count, s.tail_fraction);
    }

    let counts = assign_longtail_counts(&base.data.longtail(), base.data.classes)?;
    let s = summarize_counts(&counts);
    println!("\ndefault histogram (count: identities)");
    for (count, n) in s.histogram.iter().take(8) {
        println!("{count:>4}: {n}");
    }

    let u = build_universe(base.data.classes, base.data.d_in, base.data.sigma, base.data_seed())?;
    let a = draw_instance(&u, &counts, 0, 0)?;
    let b = draw_instance(&u, &counts, 0, 1)?;
    let cos = dcq::numerics::dot(&a, &b) / (dcq::numerics::dot(&a, &a) * dcq::numerics::dot(&b, &b)).sqrt();
    println!("\ntwo instances of identity 0 have cosine {cos:.3}");
    Ok(())
}
