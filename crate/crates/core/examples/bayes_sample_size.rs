//! Smallest total sample size whose assurance reaches 0.8 for the binary
//! outcome under the expert-average prior.
//!
//! ```text
//! cargo run --release --example bayes_sample_size
//! ```

use std::path::Path;

use crt_assure::assurance::{AssuranceOptions, AssuranceProblem};
use crt_assure::config::Scenario;

fn main() -> crt_assure::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/speedy/binary_average.json");
    let s = Scenario::load(&path)?;
    let problem = AssuranceProblem {
        design: s.require_design()?.clone(),
        design_prior: s.require_design_prior()?.clone(),
        analysis_prior: s.analysis_prior()?,
        engine: s.engine.clone(),
        options: AssuranceOptions { replicates: 200, seed: 5, ..Default::default() },
    };
    println!("prior probability of success: {:.3}", problem.asymptote());
    let search = problem.find_sample_size(0.8, 150, 15_000)?;
    for p in &search.evaluated {
        println!("n = {:>5}  assurance {:.3} ± {:.3}", p.n, p.estimate.assurance, p.estimate.mcse);
    }
    match search.n {
        Some(n) => println!("smallest n reaching 0.8: {n}"),
        None => println!("0.8 not reached by n = {}", search.cap),
    }
    Ok(())
}
