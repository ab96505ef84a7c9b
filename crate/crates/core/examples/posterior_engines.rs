//! Fits one simulated trial with both engines and compares the posterior
//! quantiles of the treatment effect.
//!
//! ```text
//! cargo run --release --example posterior_engines
//! ```

use crt_assure::laplace::{infer_laplace, LaplaceConfig};
use crt_assure::mcmc::{gibbs_continuous, sampler_binary, ChainConfig};
use crt_assure::model::{AnalysisPrior, OutcomeKind, SuccessRule, SummaryRequest, TrialDesign};
use crt_assure::simulate::{equal_cluster_sizes, replicate_rng, simulate_trial, ParamDraw};

fn main() -> crt_assure::Result<()> {
    for kind in [OutcomeKind::Continuous, OutcomeKind::Binary] {
        let design = TrialDesign::new(12, 600, SuccessRule::default())?;
        let truth = ParamDraw {
            lambda: 1.0,
            delta: 0.8,
            sigma_b: 0.5,
            sigma_w: (kind == OutcomeKind::Continuous).then_some(2.0),
            p: vec![1.0 / 12.0; 12],
            nu: 0.0,
            concentration: None,
            concentration_clamped: None,
        };
        let data = simulate_trial(&truth, &design, &equal_cluster_sizes(600, 12), kind, &mut replicate_rng(3, 0))?;
        let prior = AnalysisPrior::vague(kind, 1.0)?;
        let request = SummaryRequest::default();

        let chain = ChainConfig::new(10_000, 1_000, 1, 11)?;
        let (_, mcmc) = match kind {
            OutcomeKind::Continuous => gibbs_continuous(&data, &prior, &chain, &request)?,
            OutcomeKind::Binary => sampler_binary(&data, &prior, &chain, &request)?,
        };
        let fit = infer_laplace(&data, &prior, &LaplaceConfig::default(), &request)?;

        println!("{kind:?} outcome, true delta {}", truth.delta);
        println!("  level      mcmc   laplace");
        for (a, b) in mcmc.quantiles.iter().zip(&fit.summary.quantiles) {
            println!("  {:5.3}  {:8.4}  {:8.4}", a.level, a.value, b.value);
        }
        println!(
            "  time {:.2} ms vs {:.2} ms; grid kept {} of {} points\n",
            mcmc.seconds * 1e3,
            fit.summary.seconds * 1e3,
            fit.diagnostics.points_kept,
            fit.diagnostics.points_total
        );
    }
    Ok(())
}
