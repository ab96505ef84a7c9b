//! Accuracy and wall-time comparison of the inference engines on simulated
//! trials with known truth.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::Serialize;

use crate::assurance::EngineSettings;
use crate::error::{Error, Result};
use crate::laplace::LaplaceConfig;
use crate::model::{AnalysisPrior, EngineTag, OutcomeKind, SuccessRule, SummaryRequest, TrialDesign};
use crate::simulate::{draw_cluster_sizes, fork, replicate_rng, simulate_trial, ParamDraw};

/// An engine and, for MCMC, its number of retained draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Method {
    pub engine: EngineTag,
    pub samples: Option<usize>,
}

impl Method {
    pub fn mcmc(samples: usize) -> Self {
        Self { engine: EngineTag::Mcmc, samples: Some(samples) }
    }

    pub fn laplace() -> Self {
        Self { engine: EngineTag::Laplace, samples: None }
    }

    pub fn label(&self) -> String {
        match self.samples {
            Some(k) => format!("mcmc-K{k}"),
            None => "laplace".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub id: String,
    pub kind: OutcomeKind,
    pub clusters: usize,
    /// ICC; for binary outcomes it is on the latent logistic scale.
    pub rho: f64,
    /// Within-cluster SD (continuous outcomes).
    pub sigma_w: f64,
    pub sample_sizes: Vec<usize>,
    pub lambda: f64,
    pub delta: f64,
    pub methods: Vec<Method>,
    pub reps: usize,
    pub burn_in: usize,
}

impl Scenario {
    /// Defaults: `sigma_w = 2`, `N` in {100, 500, 1000, 2000, 10000}, MCMC at
    /// K in {100, 1000, 10000} plus Laplace, 100 replicates, truth (1, 2).
    pub fn new(id: impl Into<String>, kind: OutcomeKind, clusters: usize, rho: f64) -> Self {
        Self {
            id: id.into(),
            kind,
            clusters,
            rho,
            sigma_w: 2.0,
            sample_sizes: vec![100, 500, 1000, 2000, 10_000],
            lambda: 1.0,
            delta: 2.0,
            methods: vec![Method::mcmc(100), Method::mcmc(1000), Method::mcmc(10_000), Method::laplace()],
            reps: 100,
            burn_in: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.clusters < 2 {
            bad.push(format!("clusters={} (need at least 2)", self.clusters));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            bad.push(format!("rho={} (must lie in (0, 1))", self.rho));
        }
        if !(self.sigma_w > 0.0 && self.sigma_w.is_finite()) {
            bad.push(format!("sigma_w={} (must be > 0)", self.sigma_w));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.iter().any(|&n| n < self.clusters) {
            bad.push(format!("sample sizes {:?} must be nonempty and at least the cluster count", self.sample_sizes));
        }
        if self.methods.is_empty() || self.methods.iter().any(|m| m.samples == Some(0)) {
            bad.push("methods must be nonempty with K >= 1".into());
        }
        if self.reps == 0 {
            bad.push("reps must be at least 1".into());
        }
        if !(self.lambda.is_finite() && self.delta.is_finite()) {
            bad.push("true lambda and delta must be finite".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    /// Between-cluster SD implied by the ICC. Binary outcomes use the
    /// logistic latent-variable residual variance `pi^2 / 3`.
    pub fn sigma_b(&self) -> f64 {
        let within = match self.kind {
            OutcomeKind::Continuous => self.sigma_w * self.sigma_w,
            OutcomeKind::Binary => PI * PI / 3.0,
        };
        (self.rho / (1.0 - self.rho) * within).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub scenario: String,
    pub method: String,
    pub engine: EngineTag,
    pub samples: Option<usize>,
    pub n: usize,
    pub rep: usize,
    /// Posterior median minus the true effect; NaN when the engine failed.
    pub error: f64,
    /// Engine wall time, excluding simulation.
    pub seconds: f64,
    /// Fingerprint of the analysed dataset; equal across methods in a rep.
    pub dataset_hash: u64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub seed: u64,
    /// `Some(1)` gives fair single-threaded timings.
    pub threads: Option<usize>,
    /// Defaults to the vague prior at unit outcome scale.
    pub analysis_prior: Option<AnalysisPrior>,
    pub laplace: LaplaceConfig,
}

impl BenchOptions {
    pub fn new(seed: u64) -> Self {
        Self { seed, threads: None, analysis_prior: None, laplace: LaplaceConfig::default() }
    }
}

/// Runs every method on the same simulated trials.
pub fn run_scenario(s: &Scenario, opts: &BenchOptions) -> Result<Vec<BenchRecord>> {
    s.validate()?;
    let prior = match &opts.analysis_prior {
        Some(p) => p.clone(),
        None => AnalysisPrior::vague(s.kind, 1.0)?,
    };
    prior.validate_for(s.kind)?;
    let jobs: Vec<(usize, usize)> = s
        .sample_sizes
        .iter()
        .enumerate()
        .flat_map(|(i, _)| (0..s.reps).map(move |r| (i, r)))
        .collect();
    let work = || -> Result<Vec<Vec<BenchRecord>>> {
        jobs.par_iter().map(|&(i, rep)| one_rep(s, &prior, opts, i, rep)).collect()
    };
    let nested = match opts.threads {
        None => work()?,
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(vec![format!("thread pool: {e}")]))?
            .install(work)?,
    };
    Ok(nested.into_iter().flatten().collect())
}

fn one_rep(s: &Scenario, prior: &AnalysisPrior, opts: &BenchOptions, size_idx: usize, rep: usize) -> Result<Vec<BenchRecord>> {
    let n = s.sample_sizes[size_idx];
    let mut rng = replicate_rng(opts.seed, (size_idx * s.reps + rep) as u64);
    let mut size_rng = fork(&mut rng);
    let mut sim_rng = fork(&mut rng);
    let design = TrialDesign::new(s.clusters, n, SuccessRule::default())?;
    let j = s.clusters;
    let draw = ParamDraw {
        lambda: s.lambda,
        delta: s.delta,
        sigma_b: s.sigma_b(),
        sigma_w: (s.kind == OutcomeKind::Continuous).then_some(s.sigma_w),
        p: vec![1.0 / j as f64; j],
        nu: 0.0,
        concentration: None,
        concentration_clamped: None,
    };
    let sizes = draw_cluster_sizes(n, &draw.p, design.size_model().retry_cap, &mut size_rng)?;
    let data = simulate_trial(&draw, &design, &sizes, s.kind, &mut sim_rng)?;
    let hash = data.fingerprint();
    let request = SummaryRequest::default();

    let mut out = Vec::with_capacity(s.methods.len());
    for m in &s.methods {
        let engine_seed = rng.next_u64();
        let mut settings = EngineSettings::default();
        settings.laplace = opts.laplace.clone();
        if let Some(k) = m.samples {
            settings.chain.samples = k;
            settings.chain.burn_in = s.burn_in;
        }
        let start = Instant::now();
        let result = settings.analyse(m.engine, &data, prior, &request, engine_seed);
        let seconds = start.elapsed().as_secs_f64();
        let (error, failure) = match result.map(|r| r.median()) {
            Ok(Some(med)) if med.is_finite() => (med - s.delta, None),
            Ok(_) => (f64::NAN, Some("no finite posterior median".to_string())),
            Err(e) => (f64::NAN, Some(e.to_string())),
        };
        out.push(BenchRecord {
            scenario: s.id.clone(),
            method: m.label(),
            engine: m.engine,
            samples: m.samples,
            n,
            rep,
            error,
            seconds,
            dataset_hash: hash,
            failure,
        });
    }
    Ok(out)
}

/// Single-pass mean and variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct Welford {
    count: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 { f64::NAN } else { self.mean }
    }

    /// Sample SD (n - 1 denominator); 0 for a single value.
    pub fn sd(&self) -> f64 {
        match self.count {
            0 => f64::NAN,
            1 => 0.0,
            n => (self.m2 / (n - 1) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub method: String,
    pub n: usize,
    pub count: usize,
    pub failed: usize,
    pub mean_error: f64,
    pub sd_error: f64,
    pub lower: f64,
    pub upper: f64,
    pub mean_seconds: f64,
    pub sd_seconds: f64,
}

/// Mean and SD of error and time per (scenario, method, N), in order of
/// first appearance. Failed records count toward `failed` only.
pub fn summarize(records: &[BenchRecord]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String, usize)> = Vec::new();
    let mut acc: HashMap<(String, String, usize), (Welford, Welford, usize)> = HashMap::new();
    for r in records {
        let key = (r.scenario.clone(), r.method.clone(), r.n);
        let e = acc.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Default::default()
        });
        if r.error.is_finite() {
            e.0.push(r.error);
            e.1.push(r.seconds);
        } else {
            e.2 += 1;
        }
    }
    order
        .into_iter()
        .map(|key| {
            let (err, secs, failed) = acc[&key];
            let (m, sd) = (err.mean(), err.sd());
            SummaryRow {
                scenario: key.0,
                method: key.1,
                n: key.2,
                count: err.count(),
                failed,
                mean_error: m,
                sd_error: sd,
                lower: m - 2.0 * sd,
                upper: m + 2.0 * sd,
                mean_seconds: secs.mean(),
                sd_seconds: secs.sd(),
            }
        })
        .collect()
}

pub fn write_records_csv<W: std::io::Write>(records: &[BenchRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "engine", "K", "N", "rep", "error", "seconds", "dataset_hash"])?;
    for r in records {
        w.write_record([
            r.scenario.clone(),
            r.method.clone(),
            r.samples.map(|k| k.to_string()).unwrap_or_default(),
            r.n.to_string(),
            r.rep.to_string(),
            r.error.to_string(),
            r.seconds.to_string(),
            format!("{:016x}", r.dataset_hash),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: std::io::Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
