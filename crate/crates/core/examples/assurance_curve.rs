//! Assurance against average cluster size for the three continuous SPEEDY
//! priors at 50 clusters, with a common seed so the curves are paired.
//!
//! ```text
//! cargo run --release --example assurance_curve
//! ```

use std::path::Path;

use crt_assure::assurance::{AssuranceOptions, AssuranceProblem};
use crt_assure::config::Scenario;
use crt_assure::model::TrialDesign;

fn main() -> crt_assure::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/speedy");
    let nbars = [1.0, 2.0, 4.0, 8.0];
    println!("prior     {}", nbars.map(|m| format!("nbar={m:<3}")).join("  "));
    for who in ["expert1", "expert2", "average"] {
        let s = Scenario::load(&dir.join(format!("continuous_{who}.json")))?;
        let base = s.require_design()?;
        let problem = AssuranceProblem {
            design: TrialDesign::new(50, 50, *base.success())?.with_size_model(*base.size_model())?,
            design_prior: s.require_design_prior()?.clone(),
            analysis_prior: s.analysis_prior()?,
            engine: s.engine.clone(),
            options: AssuranceOptions { replicates: 200, seed: 1, ..Default::default() },
        };
        let curve = problem.assurance_curve(&nbars)?;
        let cells: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.2}±{:.2}", p.estimate.assurance, p.estimate.mcse))
            .collect();
        println!("{who:<8}  {}", cells.join("  "));
    }
    Ok(())
}
