use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::{chain_names, summarize_draws, Chain, ChainConfig};
use crate::error::{Error, Result};
use crate::model::{AnalysisPrior, GammaSpec, Marginal, OutcomeKind, Param, PosteriorSummary, SummaryRequest, TrialData};

/// Precision that is either updated from its conjugate Gamma conditional
/// or held at a fixed value.
#[derive(Clone, Copy)]
pub(super) enum Precision {
    Update(GammaSpec),
    Pinned,
}

impl Precision {
    pub(super) fn init(p: &Param<GammaSpec>) -> (Self, f64) {
        match p {
            Param::Random(g) => (Precision::Update(*g), g.mean()),
            Param::Fixed { fixed } => (Precision::Pinned, *fixed),
        }
    }

    /// Draw from `Gamma(shape + extra_shape, rate + extra_rate)`, or keep `current`.
    pub(super) fn draw(&self, current: f64, extra_shape: f64, extra_rate: f64, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Precision::Pinned => current,
            Precision::Update(g) => {
                let shape = g.shape() + extra_shape;
                let rate = g.rate() + extra_rate;
                let v = Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters").sample(rng);
                // Guard the subnormal corner; a zero precision would break the next update.
                v.max(f64::MIN_POSITIVE)
            }
        }
    }
}

pub(crate) fn require_both_arms(data: &TrialData) -> Result<()> {
    let n = data.cluster_sizes();
    for treated in [false, true] {
        let count: usize = data
            .arms()
            .iter()
            .zip(&n)
            .filter(|(a, _)| a.is_treated() == treated)
            .map(|(_, n)| n)
            .sum();
        if count == 0 {
            return Err(Error::Inference(format!(
                "the {} arm has no individuals",
                if treated { "treatment" } else { "control" }
            )));
        }
    }
    Ok(())
}

/// Systematic-scan Gibbs sampler for the random-intercept linear model.
///
/// Each sweep draws `lambda`, `delta`, every `c_j` from their normal full
/// conditionals, then `tau_w ~ Gamma(r_w + n/2, s_w + SSR/2)` and
/// `tau_b ~ Gamma(r_b + J/2, s_b + sum c_j^2 / 2)`. The data enter only
/// through per-cluster counts, means and within-cluster sums of squares.
pub fn gibbs_continuous(
    data: &TrialData,
    prior: &AnalysisPrior,
    cfg: &ChainConfig,
    request: &SummaryRequest,
) -> Result<(Chain, PosteriorSummary)> {
    let start = Instant::now();
    cfg.validate()?;
    if data.kind() != OutcomeKind::Continuous {
        return Err(Error::Inference("gibbs_continuous needs continuous outcomes".into()));
    }
    prior.validate_for(OutcomeKind::Continuous)?;
    require_both_arms(data)?;

    let stats = data.stats();
    let j = stats.clusters();
    let n_total = stats.total();
    let x: Vec<f64> = stats.treated.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let n_treated = stats.arm_total(true);
    let within: f64 = stats.within_ss.iter().sum();

    let (tau_b_kind, mut tau_b) = Precision::init(&prior.tau_b);
    let (tau_w_kind, mut tau_w) = Precision::init(prior.tau_w.as_ref().expect("validated"));

    let (m_l, p_l) = (prior.lambda.mean(), prior.lambda.precision());
    let (m_d, p_d) = (prior.delta.mean(), prior.delta.precision());

    let mut lambda = stats.arm_mean(false);
    let mut delta = stats.arm_mean(true) - lambda;
    let mut c = vec![0.0; j];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let names = chain_names(true, j, cfg.keep_cluster_effects);
    let mut chain = Chain::with_capacity(names, cfg.samples);
    let mut deltas = Vec::with_capacity(cfg.samples);

    for it in 0..cfg.total_iterations() {
        // lambda | rest
        let mut r = 0.0;
        for k in 0..j {
            r += stats.n[k] * (stats.mean[k] - x[k] * delta - c[k]);
        }
        let prec = p_l + tau_w * n_total;
        lambda = (p_l * m_l + tau_w * r) / prec + normal(&mut rng) / prec.sqrt();

        // delta | rest
        let mut r = 0.0;
        for k in 0..j {
            if x[k] > 0.0 {
                r += stats.n[k] * (stats.mean[k] - lambda - c[k]);
            }
        }
        let prec = p_d + tau_w * n_treated;
        delta = (p_d * m_d + tau_w * r) / prec + normal(&mut rng) / prec.sqrt();

        // c_j | rest
        let mut c_ss = 0.0;
        for k in 0..j {
            let prec = tau_b + tau_w * stats.n[k];
            let mean = tau_w * stats.n[k] * (stats.mean[k] - lambda - x[k] * delta) / prec;
            c[k] = mean + normal(&mut rng) / prec.sqrt();
            c_ss += c[k] * c[k];
        }

        // precisions
        let mut ssr = within;
        for k in 0..j {
            let d = stats.mean[k] - lambda - x[k] * delta - c[k];
            ssr += stats.n[k] * d * d;
        }
        tau_w = tau_w_kind.draw(tau_w, 0.5 * n_total, 0.5 * ssr, &mut rng);
        tau_b = tau_b_kind.draw(tau_b, 0.5 * j as f64, 0.5 * c_ss, &mut rng);

        if it >= cfg.burn_in && (it - cfg.burn_in) % cfg.thin == 0 {
            let head = [lambda, delta, tau_b, tau_w];
            if cfg.keep_cluster_effects {
                chain.push_row(head.into_iter().chain(c.iter().copied()));
            } else {
                chain.push_row(head);
            }
            deltas.push(delta);
        }
    }

    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::Inference("non-finite draw in the Gibbs chain".into()));
    }
    let mut summary = summarize_draws(&deltas, request)?;
    summary.seconds = start.elapsed().as_secs_f64();
    Ok((chain, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcmc::{batch_means_mcse, split_half_z};
    use crate::model::{balanced_allocation, NormalSpec, SuccessRule, TrialDesign};
    use crate::simulate::{equal_cluster_sizes, replicate_rng, simulate_trial, ParamDraw};
    use crate::testing::dense_conjugate_posterior;
    use proptest::prelude::*;
    use rand::Rng;

    fn fixed_prior(tau_b: f64, tau_w: f64) -> AnalysisPrior {
        AnalysisPrior {
            lambda: NormalSpec::new(0.0, 100.0).unwrap(),
            delta: NormalSpec::new(0.0, 100.0).unwrap(),
            tau_b: Param::fixed(tau_b),
            tau_w: Some(Param::fixed(tau_w)),
        }
    }

    fn small_data(seed: u64, j: usize, n: usize) -> TrialData {
        let design = TrialDesign::new(j, n, SuccessRule::default()).unwrap();
        let draw = ParamDraw {
            lambda: 1.0,
            delta: 2.0,
            sigma_b: 0.5,
            sigma_w: Some(1.5),
            p: vec![1.0 / j as f64; j],
            nu: 0.0,
            concentration: None,
            concentration_clamped: None,
        };
        simulate_trial(&draw, &design, &equal_cluster_sizes(n, j), OutcomeKind::Continuous, &mut replicate_rng(seed, 0))
            .unwrap()
    }

    #[test]
    fn fixed_precisions_match_conjugate_posterior() {
        let data = small_data(1, 6, 60);
        let prior = fixed_prior(4.0, 0.5);
        let cfg = ChainConfig::new(40_000, 1_000, 1, 7).unwrap();
        let (chain, _) = gibbs_continuous(&data, &prior, &cfg, &SummaryRequest::default()).unwrap();
        let (mean, cov) = dense_conjugate_posterior(&data, &prior, 4.0, 0.5);
        let d = chain.delta();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let v = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        let mcse = batch_means_mcse(&d);
        assert!((m - mean[1]).abs() < 3.0 * mcse, "mean {m} vs {} (mcse {mcse})", mean[1]);
        let sq: Vec<f64> = d.iter().map(|x| (x - mean[1]).powi(2)).collect();
        let var_mcse = batch_means_mcse(&sq);
        assert!((v - cov[(1, 1)]).abs() < 3.0 * var_mcse, "var {v} vs {}", cov[(1, 1)]);
    }

    #[test]
    fn bookkeeping_rows_and_columns() {
        let data = small_data(2, 4, 40);
        let cfg = ChainConfig::new(50, 100, 2, 1).unwrap();
        let prior = AnalysisPrior::vague(OutcomeKind::Continuous, 1.0).unwrap();
        let (chain, summary) = gibbs_continuous(&data, &prior, &cfg, &SummaryRequest::default()).unwrap();
        assert_eq!(chain.rows(), 50);
        assert_eq!(chain.width(), 4 + 4);
        assert_eq!(summary.samples, Some(50));
        for i in 0..chain.rows() {
            assert!(chain.row(i)[2] > 0.0 && chain.row(i)[3] > 0.0);
            assert!(chain.row(i).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let data = small_data(3, 4, 40);
        let prior = AnalysisPrior::vague(OutcomeKind::Continuous, 1.0).unwrap();
        let cfg = ChainConfig::new(500, 100, 1, 99).unwrap();
        let a = gibbs_continuous(&data, &prior, &cfg, &SummaryRequest::default()).unwrap().0;
        let b = gibbs_continuous(&data, &prior, &cfg, &SummaryRequest::default()).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn stationarity_smoke_test() {
        let data = small_data(4, 8, 200);
        let prior = AnalysisPrior::vague(OutcomeKind::Continuous, 1.0).unwrap();
        let cfg = ChainConfig::new(20_000, 1_000, 1, 5).unwrap();
        let (chain, _) = gibbs_continuous(&data, &prior, &cfg, &SummaryRequest::default()).unwrap();
        assert!(split_half_z(&chain.delta()) < 4.0);
    }

    #[test]
    fn empty_arm_is_an_error() {
        let arms = balanced_allocation(2);
        let data = TrialData::new(OutcomeKind::Continuous, arms, vec![0, 0], vec![1.0, 2.0]).unwrap();
        let prior = AnalysisPrior::vague(OutcomeKind::Continuous, 1.0).unwrap();
        let err = gibbs_continuous(&data, &prior, &ChainConfig::default(), &SummaryRequest::default());
        assert!(matches!(err, Err(Error::Inference(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn conjugate_equivalence_on_small_instances(seed in 0u64..1000, j in 2usize..=4, per in 2usize..=10) {
            let data = small_data(seed, j, j * per);
            let mut rng = replicate_rng(seed, 1);
            let tb = rng.random_range(0.5..5.0);
            let tw = rng.random_range(0.2..2.0);
            let prior = fixed_prior(tb, tw);
            let cfg = ChainConfig::new(20_000, 500, 1, seed).unwrap();
            let (chain, _) = gibbs_continuous(&data, &prior, &cfg, &SummaryRequest::default()).unwrap();
            let (mean, _) = dense_conjugate_posterior(&data, &prior, tb, tw);
            let d = chain.delta();
            let m = d.iter().sum::<f64>() / d.len() as f64;
            // 4 MCSE keeps the family-wise false-alarm rate small over cases.
            prop_assert!((m - mean[1]).abs() < 4.0 * batch_means_mcse(&d));
        }
    }
}
