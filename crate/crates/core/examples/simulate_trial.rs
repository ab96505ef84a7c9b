//! Draws one hypothetical SPEEDY trial from the expert-average prior and
//! prints the true parameters and per-arm summaries.
//!
//! ```text
//! cargo run --example simulate_trial
//! ```

use std::path::Path;

use crt_assure::config::Scenario;
use crt_assure::simulate::{draw_design_params, fork, replicate_rng, simulate_trial, sizes_for_draw};

fn main() -> crt_assure::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/speedy/continuous_average.json");
    let s = Scenario::load(&path)?;
    let prior = s.require_design_prior()?;
    let design = s.require_design()?.with_total_n(900)?;

    let mut rng = replicate_rng(7, 0);
    let draw = draw_design_params(prior, design.clusters(), design.size_model(), &mut fork(&mut rng))?;
    let sizes = sizes_for_draw(&draw, &design, &mut fork(&mut rng))?;
    let data = simulate_trial(&draw, &design, &sizes, prior.kind(), &mut fork(&mut rng))?;

    println!("true delta {:.1}, sigma_b {:.2}, sigma_w {:.1}, size CV {:.2}", draw.delta, draw.sigma_b, draw.sigma_w.unwrap_or(f64::NAN), draw.nu);
    let stats = data.stats();
    for treated in [false, true] {
        println!(
            "{:<9} n = {:>4}  mean = {:.1}",
            if treated { "treatment" } else { "control" },
            stats.arm_total(treated),
            stats.arm_mean(treated)
        );
    }
    let (smallest, largest) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
    println!("cluster sizes range {smallest}..={largest} over {} clusters", sizes.len());
    Ok(())
}
