//! MCMC inference for the treatment effect.
//!
//! The continuous model uses a systematic-scan Gibbs sampler with conjugate
//! full conditionals. The binary model replaces the location updates with
//! univariate stepping-out slice sampling and keeps the conjugate update for
//! the between-cluster precision.

mod binary;
mod gibbs;
pub mod slice;

pub use binary::sampler_binary;
pub use gibbs::gibbs_continuous;
pub(crate) use gibbs::require_both_arms;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{EngineTag, PosteriorSummary, QuantilePoint, SummaryRequest};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainConfig {
    /// Retained draws.
    pub samples: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Store the cluster effects in the chain. Assurance runs only need the
    /// fixed effects and precisions.
    pub keep_cluster_effects: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            burn_in: 1_000,
            thin: 1,
            seed: 0,
            keep_cluster_effects: true,
        }
    }
}

impl ChainConfig {
    pub fn new(samples: usize, burn_in: usize, thin: usize, seed: u64) -> Result<Self> {
        let cfg = Self {
            samples,
            burn_in,
            thin,
            seed,
            keep_cluster_effects: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::domain("chain needs at least one retained sample"));
        }
        if self.thin == 0 {
            return Err(Error::domain("thinning interval must be at least 1"));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.burn_in + self.samples * self.thin
    }
}

/// Retained draws, one row per retained iteration.
///
/// Columns are `lambda, delta, tau_b, [tau_w], [c_1..c_J]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    names: Vec<String>,
    data: Vec<f64>,
}

impl Chain {
    pub(crate) fn with_capacity(names: Vec<String>, rows: usize) -> Self {
        let width = names.len();
        Self {
            names,
            data: Vec::with_capacity(rows * width),
        }
    }

    pub(crate) fn push_row(&mut self, row: impl IntoIterator<Item = f64>) {
        let before = self.data.len();
        self.data.extend(row);
        debug_assert_eq!(self.data.len() - before, self.names.len());
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.width()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, idx: usize) -> Vec<f64> {
        self.data.iter().skip(idx).step_by(self.width()).copied().collect()
    }

    pub fn delta(&self) -> Vec<f64> {
        self.column(1)
    }

    /// Writes the chain as CSV with a header row.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.names)?;
        for i in 0..self.rows() {
            w.write_record(self.row(i).iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Empirical quantile with linear interpolation between order statistics:
/// position `h = (K - 1) q` in the sorted draws.
pub fn posterior_quantile(samples: &[f64], level: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Inference("empty chain".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::domain(format!("quantile level {level} outside (0, 1)")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted_quantile(&sorted, level))
}

fn sorted_quantile(sorted: &[f64], level: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summary of the treatment-effect draws.
pub fn summarize_draws(draws: &[f64], request: &SummaryRequest) -> Result<PosteriorSummary> {
    request.validate()?;
    if draws.is_empty() {
        return Err(Error::Inference("empty chain".into()));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quantiles = request
        .levels
        .iter()
        .map(|&level| QuantilePoint {
            level,
            value: sorted_quantile(&sorted, level),
        })
        .collect();
    let beyond = match request.direction {
        crate::model::Direction::Greater => draws.iter().filter(|&&d| d > request.margin).count(),
        crate::model::Direction::Less => draws.iter().filter(|&&d| d < request.margin).count(),
    };
    Ok(PosteriorSummary::from_quantiles(
        quantiles,
        beyond as f64 / draws.len() as f64,
        request,
        EngineTag::Mcmc,
        Some(draws.len()),
    ))
}

/// Monte Carlo standard error of the mean by non-overlapping batch means
/// (about `sqrt(K)` batches).
pub fn batch_means_mcse(x: &[f64]) -> f64 {
    let n = x.len();
    let batches = ((n as f64).sqrt().floor() as usize).max(2);
    let size = n / batches;
    if size == 0 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..batches)
        .map(|b| x[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

/// Difference of first- and second-half means in units of their combined
/// batch-means MCSE.
pub fn split_half_z(x: &[f64]) -> f64 {
    let (a, b) = x.split_at(x.len() / 2);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let se = (batch_means_mcse(a).powi(2) + batch_means_mcse(b).powi(2)).sqrt();
    (mean(a) - mean(b)).abs() / se
}

pub(crate) fn chain_names(with_tau_w: bool, clusters: usize, keep_c: bool) -> Vec<String> {
    let mut names = vec!["lambda".to_string(), "delta".into(), "tau_b".into()];
    if with_tau_w {
        names.push("tau_w".into());
    }
    if keep_c {
        names.extend((1..=clusters).map(|j| format!("c{j}")));
    }
    names
}
