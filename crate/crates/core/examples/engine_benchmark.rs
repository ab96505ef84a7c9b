//! A small accuracy and timing comparison of MCMC against Laplace on the
//! same simulated trials.
//!
//! ```text
//! cargo run --release --example engine_benchmark
//! ```

use crt_assure::bench::{run_scenario, summarize, BenchOptions, Method, Scenario};
use crt_assure::model::OutcomeKind;

fn main() -> crt_assure::Result<()> {
    let mut s = Scenario::new("continuous-C8", OutcomeKind::Continuous, 8, 0.05);
    s.sample_sizes = vec![100, 1_000, 10_000];
    s.methods = vec![Method::mcmc(100), Method::mcmc(10_000), Method::laplace()];
    s.reps = 10;

    let mut opts = BenchOptions::new(1);
    // One thread keeps the wall-clock comparison fair.
    opts.threads = Some(1);
    let records = run_scenario(&s, &opts)?;

    println!("{:<12} {:>6} {:>9} {:>8} {:>10}", "method", "N", "mean err", "sd", "ms");
    for row in summarize(&records) {
        println!(
            "{:<12} {:>6} {:>9.4} {:>8.4} {:>10.3}",
            row.method,
            row.n,
            row.mean_error,
            row.sd_error,
            row.mean_seconds * 1e3
        );
    }
    Ok(())
}
