use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gibbs::{require_both_arms, Precision};
use super::slice::{slice_step, SliceTuning};
use super::{chain_names, summarize_draws, Chain, ChainConfig};
use crate::dist::{logistic, softplus};
use crate::error::{Error, Result};
use crate::model::{AnalysisPrior, OutcomeKind, PosteriorSummary, SummaryRequest, TrialData};

/// Cluster log-likelihood `s_j eta - n_j log(1 + e^eta)`.
#[inline]
fn cluster_ll(s: f64, n: f64, eta: f64) -> f64 {
    s * eta - n * softplus(eta)
}

/// Bracket width from the conditional curvature at the current point.
fn width(curvature: f64) -> SliceTuning {
    SliceTuning {
        width: 2.0 / curvature.max(1e-12).sqrt(),
        max_steps: 64,
    }
}

/// Metropolis-within-Gibbs sampler for the random-intercept logistic model.
///
/// `lambda`, `delta` and each `c_j` are updated by univariate slice
/// sampling; `tau_b` has a conjugate Gamma update.
pub fn sampler_binary(
    data: &TrialData,
    prior: &AnalysisPrior,
    cfg: &ChainConfig,
    request: &SummaryRequest,
) -> Result<(Chain, PosteriorSummary)> {
    let start = Instant::now();
    cfg.validate()?;
    if data.kind() != OutcomeKind::Binary {
        return Err(Error::Inference("sampler_binary needs binary outcomes".into()));
    }
    prior.validate_for(OutcomeKind::Binary)?;
    require_both_arms(data)?;

    let stats = data.stats();
    let j = stats.clusters();
    let n = stats.n.clone();
    let s: Vec<f64> = (0..j).map(|k| stats.sum(k)).collect();
    let x: Vec<f64> = stats.treated.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();

    let mut warnings = Vec::new();
    for treated in [false, true] {
        let tot = stats.arm_total(treated);
        let succ: f64 = (0..j).filter(|&k| stats.treated[k] == treated).map(|k| s[k]).sum();
        if succ == 0.0 || succ == tot {
            warnings.push(format!(
                "{} arm is all {}; the effect is identified only through the prior",
                if treated { "treatment" } else { "control" },
                if succ == 0.0 { "failures" } else { "successes" }
            ));
        }
    }

    let (tau_b_kind, mut tau_b) = Precision::init(&prior.tau_b);
    let (m_l, p_l) = (prior.lambda.mean(), prior.lambda.precision());
    let (m_d, p_d) = (prior.delta.mean(), prior.delta.precision());

    let logit = |succ: f64, tot: f64| ((succ + 0.5) / (tot - succ + 0.5)).ln();
    let s_ctrl: f64 = (0..j).filter(|&k| !stats.treated[k]).map(|k| s[k]).sum();
    let s_trt: f64 = (0..j).filter(|&k| stats.treated[k]).map(|k| s[k]).sum();
    let mut lambda = logit(s_ctrl, stats.arm_total(false));
    let mut delta = logit(s_trt, stats.arm_total(true)) - lambda;
    let mut c = vec![0.0; j];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names = chain_names(false, j, cfg.keep_cluster_effects);
    let mut chain = Chain::with_capacity(names, cfg.samples);
    let mut deltas = Vec::with_capacity(cfg.samples);

    for it in 0..cfg.total_iterations() {
        // lambda
        let log_f = |l: f64| {
            let mut v = -0.5 * p_l * (l - m_l).powi(2);
            for k in 0..j {
                v += cluster_ll(s[k], n[k], l + x[k] * delta + c[k]);
            }
            v
        };
        let curv = p_l
            + (0..j)
                .map(|k| {
                    let p = logistic(lambda + x[k] * delta + c[k]);
                    n[k] * p * (1.0 - p)
                })
                .sum::<f64>();
        lambda = slice_step(lambda, log_f(lambda), log_f, width(curv), &mut rng).0;

        // delta
        let log_f = |d: f64| {
            let mut v = -0.5 * p_d * (d - m_d).powi(2);
            for k in 0..j {
                if x[k] > 0.0 {
                    v += cluster_ll(s[k], n[k], lambda + d + c[k]);
                }
            }
            v
        };
        let curv = p_d
            + (0..j)
                .filter(|&k| x[k] > 0.0)
                .map(|k| {
                    let p = logistic(lambda + delta + c[k]);
                    n[k] * p * (1.0 - p)
                })
                .sum::<f64>();
        delta = slice_step(delta, log_f(delta), log_f, width(curv), &mut rng).0;

        // cluster effects
        let mut c_ss = 0.0;
        for k in 0..j {
            let base = lambda + x[k] * delta;
            let log_f = |ck: f64| -0.5 * tau_b * ck * ck + cluster_ll(s[k], n[k], base + ck);
            let p = logistic(base + c[k]);
            let curv = tau_b + n[k] * p * (1.0 - p);
            c[k] = slice_step(c[k], log_f(c[k]), log_f, width(curv), &mut rng).0;
            c_ss += c[k] * c[k];
        }

        tau_b = tau_b_kind.draw(tau_b, 0.5 * j as f64, 0.5 * c_ss, &mut rng);

        if it >= cfg.burn_in && (it - cfg.burn_in) % cfg.thin == 0 {
            let head = [lambda, delta, tau_b];
            if cfg.keep_cluster_effects {
                chain.push_row(head.into_iter().chain(c.iter().copied()));
            } else {
                chain.push_row(head);
            }
            deltas.push(delta);
        }
    }

    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::Inference("non-finite draw in the binary chain".into()));
    }
    let mut summary = summarize_draws(&deltas, request)?;
    summary.warnings = warnings;
    summary.seconds = start.elapsed().as_secs_f64();
    Ok((chain, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcmc::{batch_means_mcse, split_half_z};
    use crate::model::{balanced_allocation, NormalSpec, Param};

    /// Two clusters per arm with fixed `tau_b` large enough that the cluster
    /// effects are nearly pinned at zero, leaving a 2-parameter logistic
    /// posterior we can integrate on a grid.
    fn grid_oracle_mean(s: [f64; 4], n: [f64; 4], prior: &AnalysisPrior) -> f64 {
        let x = [0.0, 1.0, 0.0, 1.0];
        let (mut z, mut m) = (0.0, 0.0);
        let h = 0.01;
        let mut logs = Vec::new();
        for a in -400..400 {
            for b in -400..400 {
                let (l, d) = (a as f64 * h, b as f64 * h);
                let mut v = -0.5 * prior.lambda.precision() * (l - prior.lambda.mean()).powi(2)
                    - 0.5 * prior.delta.precision() * (d - prior.delta.mean()).powi(2);
                for k in 0..4 {
                    let eta: f64 = l + x[k] * d;
                    v += s[k] * eta - n[k] * (1.0 + eta.exp()).ln();
                }
                logs.push((d, v));
            }
        }
        let top = logs.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        for (d, v) in logs {
            let w = (v - top).exp();
            z += w;
            m += w * d;
        }
        m / z
    }

    fn data_from_counts(s: [f64; 4], n: [f64; 4]) -> TrialData {
        let arms = balanced_allocation(4);
        let (mut cl, mut y) = (Vec::new(), Vec::new());
        for k in 0..4 {
            for i in 0..n[k] as usize {
                cl.push(k);
                y.push(if (i as f64) < s[k] { 1.0 } else { 0.0 });
            }
        }
        TrialData::new(OutcomeKind::Binary, arms, cl, y).unwrap()
    }

    #[test]
    fn matches_grid_integration_when_clusters_are_pinned() {
        let s = [6.0, 13.0, 4.0, 11.0];
        let n = [20.0, 20.0, 20.0, 20.0];
        let data = data_from_counts(s, n);
        let prior = AnalysisPrior {
            lambda: NormalSpec::new(0.0, 2.0).unwrap(),
            delta: NormalSpec::new(0.0, 2.0).unwrap(),
            tau_b: Param::fixed(1e8),
            tau_w: None,
        };
        let cfg = ChainConfig::new(40_000, 1_000, 1, 11).unwrap();
        let (chain, _) = sampler_binary(&data, &prior, &cfg, &SummaryRequest::default()).unwrap();
        let d = chain.delta();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let expect = grid_oracle_mean(s, n, &prior);
        let mcse = batch_means_mcse(&d);
        assert!((mean - expect).abs() < 3.0 * mcse, "{mean} vs {expect} (mcse {mcse})");
    }

    #[test]
    fn long_chain_is_stationary_and_seeded() {
        let s = [3.0, 9.0, 5.0, 12.0];
        let n = [15.0, 18.0, 16.0, 20.0];
        let data = data_from_counts(s, n);
        let prior = AnalysisPrior::vague(OutcomeKind::Binary, 0.1).unwrap();
        let cfg = ChainConfig::new(20_000, 1_000, 1, 3).unwrap();
        let (a, sa) = sampler_binary(&data, &prior, &cfg, &SummaryRequest::default()).unwrap();
        let (b, _) = sampler_binary(&data, &prior, &cfg, &SummaryRequest::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.width(), 3 + 4);
        assert!(split_half_z(&a.delta()) < 4.0);
        assert!(sa.warnings.is_empty());
    }

    #[test]
    fn separation_warns_but_succeeds() {
        let data = data_from_counts([0.0, 5.0, 0.0, 7.0], [10.0, 10.0, 10.0, 10.0]);
        let prior = AnalysisPrior::vague(OutcomeKind::Binary, 0.1).unwrap();
        let cfg = ChainConfig::new(500, 100, 1, 0).unwrap();
        let (_, s) = sampler_binary(&data, &prior, &cfg, &SummaryRequest::default()).unwrap();
        assert_eq!(s.warnings.len(), 1);
        assert!(s.quantiles.iter().all(|q| q.value.is_finite()));
    }
}
