//! Closed-form frequentist power and sample size for two-arm cluster
//! randomised trials.
//!
//! The continuous formula is the one-sided Wald test with the design effect
//! `1 + {(nu^2 + 1) nbar - 1} rho`, which accounts for unequal cluster
//! sizes through their CV `nu`. The binary formula is the two-proportion
//! approximation with design effect `1 + rho (nbar - 1)`, implemented
//! exactly as it is usually printed (including its behaviour at
//! `p1 == p2`, where it does not reduce to `alpha`).

use serde::{Deserialize, Serialize};

use crate::dist::{norm_cdf, norm_quantile};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sided {
    #[default]
    One,
    Two,
}

impl Sided {
    /// Critical value: `z_{1-alpha}` or `z_{1-alpha/2}`.
    pub fn critical(self, alpha: f64) -> f64 {
        match self {
            Sided::One => norm_quantile(1.0 - alpha),
            Sided::Two => norm_quantile(1.0 - alpha / 2.0),
        }
    }
}

/// How the `n` inside the binary formula relates to the trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NConvention {
    /// `n` is the size of one arm, `C * nbar / 2`.
    #[default]
    PerArm,
    /// `n` is the whole trial, `C * nbar`.
    Total,
}

impl NConvention {
    fn fraction(self) -> f64 {
        match self {
            NConvention::PerArm => 0.5,
            NConvention::Total => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerInputsContinuous {
    pub delta: f64,
    pub sigma: f64,
    pub rho: f64,
    pub nu: f64,
    pub clusters: f64,
    pub nbar: f64,
    pub alpha: f64,
    #[serde(default)]
    pub sided: Sided,
}

impl PowerInputsContinuous {
    fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !self.delta.is_finite() {
            bad.push(format!("delta={}", self.delta));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            bad.push(format!("sigma={} (must be > 0)", self.sigma));
        }
        if !(0.0..1.0).contains(&self.rho) {
            bad.push(format!("rho={} (must lie in [0, 1))", self.rho));
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            bad.push(format!("nu={} (must be >= 0)", self.nu));
        }
        if !(self.clusters > 0.0 && self.clusters.is_finite()) {
            bad.push(format!("clusters={} (must be > 0)", self.clusters));
        }
        if !(self.nbar > 0.0 && self.nbar.is_finite()) {
            bad.push(format!("nbar={} (must be > 0)", self.nbar));
        }
        check_alpha(self.alpha, &mut bad);
        finish(bad)
    }

    fn design_effect(&self) -> f64 {
        1.0 + ((self.nu * self.nu + 1.0) * self.nbar - 1.0) * self.rho
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerInputsBinary {
    pub p1: f64,
    pub p2: f64,
    pub rho: f64,
    pub clusters: f64,
    pub nbar: f64,
    pub alpha: f64,
    #[serde(default)]
    pub n_convention: NConvention,
    #[serde(default = "two_sided")]
    pub sided: Sided,
}

fn two_sided() -> Sided {
    Sided::Two
}

impl PowerInputsBinary {
    fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, p) in [("p1", self.p1), ("p2", self.p2)] {
            if !(p > 0.0 && p < 1.0) {
                bad.push(format!("{name}={p} (must lie in (0, 1))"));
            }
        }
        if !(0.0..1.0).contains(&self.rho) {
            bad.push(format!("rho={} (must lie in [0, 1))", self.rho));
        }
        if !(self.clusters > 0.0 && self.clusters.is_finite()) {
            bad.push(format!("clusters={} (must be > 0)", self.clusters));
        }
        if !self.nbar.is_finite() {
            bad.push(format!("nbar={}", self.nbar));
        }
        check_alpha(self.alpha, &mut bad);
        finish(bad)
    }

    /// The `n` entering the formula under the chosen convention.
    pub fn resolved_n(&self) -> f64 {
        self.n_convention.fraction() * self.clusters * self.nbar
    }
}

fn check_alpha(alpha: f64, bad: &mut Vec<String>) {
    if !(alpha > 0.0 && alpha <= 0.5) {
        bad.push(format!("alpha={alpha} (must lie in (0, 0.5])"));
    }
}

fn finish(bad: Vec<String>) -> Result<()> {
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Domain(bad.join(", ")))
    }
}

pub fn power_continuous(inputs: &PowerInputsContinuous) -> Result<f64> {
    inputs.validate()?;
    let z = inputs.sided.critical(inputs.alpha);
    let info = inputs.clusters * inputs.nbar
        / (4.0 * inputs.sigma * inputs.sigma * inputs.design_effect());
    let arg = inputs.delta * info.sqrt() - z;
    if !arg.is_finite() || info <= 0.0 {
        return Err(Error::Computation {
            message: "non-finite power argument".into(),
            inputs: format!("{inputs:?}"),
        });
    }
    Ok(norm_cdf(arg))
}

/// Binary power given `tau / n`, the design-effect-per-observation ratio.
fn binary_power_from_ratio(p1: f64, p2: f64, z: f64, tau_over_n: f64) -> f64 {
    let pbar = 0.5 * (p1 + p2);
    let sd_pooled = (tau_over_n * pbar * (1.0 - pbar)).sqrt();
    let sd_diff = (2.0 * tau_over_n * (p1 * (1.0 - p1) + p2 * (1.0 - p2))).sqrt();
    let value = norm_cdf(((p2 - p1) - z * sd_pooled) / sd_diff)
        + norm_cdf(((p1 - p2) - z * sd_pooled) / sd_diff);
    value.clamp(0.0, 1.0)
}

pub fn power_binary(inputs: &PowerInputsBinary) -> Result<f64> {
    inputs.validate()?;
    let n = inputs.resolved_n();
    if !(n > 0.0) {
        return Err(Error::Domain(format!(
            "resolved sample size {n} is not positive ({:?} convention)",
            inputs.n_convention
        )));
    }
    let tau = 1.0 + inputs.rho * (inputs.nbar - 1.0);
    let z = inputs.sided.critical(inputs.alpha);
    let p = binary_power_from_ratio(inputs.p1, inputs.p2, z, tau / n);
    if !p.is_finite() {
        return Err(Error::Computation {
            message: "non-finite binary power".into(),
            inputs: format!("{inputs:?}"),
        });
    }
    Ok(p)
}

/// Result of a frequentist sample-size search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleSize {
    /// Average cluster size `total_n / clusters`.
    pub nbar: f64,
    pub total_n: usize,
    /// Power at the returned size.
    pub power: f64,
    /// Power one trial member smaller (absent at the lower boundary).
    pub power_below: Option<f64>,
    pub convention: String,
}

/// Smallest integer total `n >= C` (so `nbar = n / C >= 1`) with
/// `power(n / C) >= target`, by bracket doubling and integer bisection.
fn search_total(
    clusters: usize,
    target: f64,
    asymptote: f64,
    power_at: impl Fn(f64) -> Result<f64>,
) -> Result<(usize, f64, Option<f64>)> {
    let c = clusters as f64;
    let at = |n: usize| power_at(n as f64 / c);
    let p_min = at(clusters)?;
    if p_min >= target {
        return Ok((clusters, p_min, None));
    }
    if asymptote <= target {
        return Err(Error::Infeasible { target, asymptote });
    }
    let mut lo = clusters;
    let mut hi = clusters.saturating_mul(2);
    let mut p_hi = at(hi)?;
    while p_hi < target {
        lo = hi;
        hi = hi
            .checked_mul(2)
            .filter(|&h| h < (1usize << 52))
            .ok_or(Error::Infeasible { target, asymptote })?;
        p_hi = at(hi)?;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let p = at(mid)?;
        if p >= target {
            hi = mid;
            p_hi = p;
        } else {
            lo = mid;
        }
    }
    Ok((hi, p_hi, Some(at(hi - 1)?)))
}

fn check_target(target: f64, alpha: f64) -> Result<()> {
    if !(target > alpha && target < 1.0) {
        return Err(Error::Domain(format!(
            "target power {target} must lie in (alpha={alpha}, 1)"
        )));
    }
    Ok(())
}

fn whole_clusters(clusters: f64) -> Result<usize> {
    if clusters < 1.0 || clusters.fract() != 0.0 {
        return Err(Error::Domain(format!(
            "sample-size search needs a whole number of clusters, got {clusters}"
        )));
    }
    Ok(clusters as usize)
}

/// Sample size for the continuous outcome. `inputs.nbar` is ignored.
pub fn sample_size_continuous(inputs: &PowerInputsContinuous, target: f64) -> Result<SampleSize> {
    check_target(target, inputs.alpha)?;
    let probe = PowerInputsContinuous { nbar: 1.0, ..*inputs };
    probe.validate()?;
    let clusters = whole_clusters(inputs.clusters)?;
    // nbar -> infinity: the information saturates at C / (4 sigma^2 (nu^2 + 1) rho).
    let z = inputs.sided.critical(inputs.alpha);
    let asymptote = if inputs.delta <= 0.0 {
        norm_cdf(-z)
    } else if inputs.rho == 0.0 {
        1.0
    } else {
        let info = inputs.clusters
            / (4.0 * inputs.sigma * inputs.sigma * (inputs.nu * inputs.nu + 1.0) * inputs.rho);
        norm_cdf(inputs.delta * info.sqrt() - z)
    };
    let (total_n, power, power_below) = search_total(clusters, target, asymptote, |nbar| {
        power_continuous(&PowerInputsContinuous { nbar, ..*inputs })
    })?;
    Ok(SampleSize {
        nbar: total_n as f64 / inputs.clusters,
        total_n,
        power,
        power_below,
        convention: format!("{:?}-sided wald, total n = clusters x nbar", inputs.sided).to_lowercase(),
    })
}

/// Sample size for the binary outcome. `inputs.nbar` is ignored.
pub fn sample_size_binary(inputs: &PowerInputsBinary, target: f64) -> Result<SampleSize> {
    check_target(target, inputs.alpha)?;
    let probe = PowerInputsBinary { nbar: 1.0, ..*inputs };
    probe.validate()?;
    let clusters = whole_clusters(inputs.clusters)?;
    let z = inputs.sided.critical(inputs.alpha);
    // tau / n -> rho / (k C) as nbar grows.
    let limit_ratio = inputs.rho / (inputs.n_convention.fraction() * inputs.clusters);
    let asymptote = if limit_ratio > 0.0 {
        binary_power_from_ratio(inputs.p1, inputs.p2, z, limit_ratio)
    } else if inputs.p1 != inputs.p2 {
        1.0
    } else {
        binary_power_from_ratio(inputs.p1, inputs.p2, z, 1.0)
    };
    let (total_n, power, power_below) = search_total(clusters, target, asymptote, |nbar| {
        power_binary(&PowerInputsBinary { nbar, ..*inputs })
    })?;
    let conv = match inputs.n_convention {
        NConvention::PerArm => "per-arm",
        NConvention::Total => "total",
    };
    let sided = match inputs.sided {
        Sided::One => "one-sided",
        Sided::Two => "two-sided",
    };
    Ok(SampleSize {
        nbar: total_n as f64 / inputs.clusters,
        total_n,
        power,
        power_below,
        convention: format!("{conv} n, {sided}"),
    })
}
