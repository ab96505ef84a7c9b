//! Two-loop Monte Carlo assurance and the sample-size search built on it.
//!
//! Each outer replicate draws true parameters from the design prior, draws
//! cluster sizes, simulates a trial and analyses it with one engine. The
//! replicate's randomness comes from a stream keyed by `(seed, index)`, so
//! results do not depend on the worker count, and runs that share a seed
//! share their random numbers (across sample sizes and across priors).

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::{infer_laplace, LaplaceConfig};
use crate::mcmc::{gibbs_continuous, sampler_binary, ChainConfig};
use crate::model::{
    AnalysisPrior, AssuranceEstimate, DesignPrior, Direction, EngineTag, OutcomeKind, Param,
    PosteriorSummary, SuccessRule, SummaryRequest, TrialData, TrialDesign,
};
use crate::simulate::{draw_design_params, fork, replicate_rng, simulate_trial, sizes_for_draw};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineChoice {
    #[default]
    Auto,
    Mcmc,
    Laplace,
}

impl std::str::FromStr for EngineChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "mcmc" => Ok(Self::Mcmc),
            "laplace" => Ok(Self::Laplace),
            other => Err(Error::domain(format!("unknown engine {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineSettings {
    pub choice: EngineChoice,
    pub chain: ChainConfig,
    pub laplace: LaplaceConfig,
    /// Under `auto`, continuous trials up to this total size use MCMC.
    pub auto_mcmc_max_n: usize,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            choice: EngineChoice::Auto,
            chain: ChainConfig {
                keep_cluster_effects: false,
                ..ChainConfig::default()
            },
            laplace: LaplaceConfig::default(),
            auto_mcmc_max_n: 500,
        }
    }
}

impl EngineSettings {
    pub fn with_choice(choice: EngineChoice) -> Self {
        Self { choice, ..Self::default() }
    }

    /// Binary trials always go to Laplace; continuous ones to MCMC up to
    /// `auto_mcmc_max_n` and Laplace beyond.
    pub fn resolve(&self, kind: OutcomeKind, n: usize) -> EngineTag {
        match self.choice {
            EngineChoice::Mcmc => EngineTag::Mcmc,
            EngineChoice::Laplace => EngineTag::Laplace,
            EngineChoice::Auto => match kind {
                OutcomeKind::Binary => EngineTag::Laplace,
                OutcomeKind::Continuous if n <= self.auto_mcmc_max_n => EngineTag::Mcmc,
                OutcomeKind::Continuous => EngineTag::Laplace,
            },
        }
    }

    /// Runs the resolved engine. `seed` replaces the chain seed.
    pub fn analyse(
        &self,
        engine: EngineTag,
        data: &TrialData,
        prior: &AnalysisPrior,
        request: &SummaryRequest,
        seed: u64,
    ) -> Result<PosteriorSummary> {
        match engine {
            EngineTag::Laplace => Ok(infer_laplace(data, prior, &self.laplace, request)?.summary),
            EngineTag::Mcmc => {
                let cfg = ChainConfig { seed, ..self.chain.clone() };
                let run = match data.kind() {
                    OutcomeKind::Continuous => gibbs_continuous(data, prior, &cfg, request)?,
                    OutcomeKind::Binary => sampler_binary(data, prior, &cfg, request)?,
                };
                Ok(run.1)
            }
        }
    }
}

/// Whether a posterior summary meets the success rule. The comparison is
/// strict, so a quantile sitting exactly on the margin is a failure.
pub fn success_indicator(summary: &PosteriorSummary, rule: &SuccessRule) -> Result<bool> {
    let level = rule.decision_level();
    let q = summary.quantile(level).ok_or_else(|| {
        Error::Inference(format!("summary lacks the quantile at level {level}"))
    })?;
    Ok(match rule.direction() {
        Direction::Greater => q > rule.margin(),
        Direction::Less => q < rule.margin(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssuranceOptions {
    /// Outer replicates `L`.
    pub replicates: usize,
    pub seed: u64,
    /// Replace the cluster-size CV prior with a point mass at zero.
    pub freeze_nu: bool,
    /// Worker threads; `None` uses rayon's global pool.
    pub threads: Option<usize>,
}

impl Default for AssuranceOptions {
    fn default() -> Self {
        Self {
            replicates: 1_000,
            seed: 0,
            freeze_nu: false,
            threads: None,
        }
    }
}

/// Everything an assurance evaluation needs except the sample size.
#[derive(Debug, Clone)]
pub struct AssuranceProblem {
    pub design: TrialDesign,
    pub design_prior: DesignPrior,
    pub analysis_prior: AnalysisPrior,
    pub engine: EngineSettings,
    pub options: AssuranceOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssurancePoint {
    pub n: usize,
    pub nbar: f64,
    pub engine: EngineTag,
    #[serde(flatten)]
    pub estimate: AssuranceEstimate,
    /// First few failure messages, for diagnosis.
    pub failure_messages: Vec<String>,
}

enum Outcome {
    Success(bool),
    Failed(String),
}

impl AssuranceProblem {
    fn validate(&self) -> Result<()> {
        if self.options.replicates == 0 {
            return Err(Error::domain("at least one replicate is required"));
        }
        if self.design_prior.kind() != self.analysis_prior_kind() {
            return Err(Error::domain("design and analysis priors are for different outcome types"));
        }
        self.analysis_prior.validate_for(self.design_prior.kind())?;
        if let Some(0) = self.options.threads {
            return Err(Error::domain("threads must be at least 1"));
        }
        Ok(())
    }

    fn analysis_prior_kind(&self) -> OutcomeKind {
        if self.analysis_prior.tau_w.is_some() {
            OutcomeKind::Continuous
        } else {
            OutcomeKind::Binary
        }
    }

    fn effective_prior(&self) -> DesignPrior {
        let mut p = self.design_prior.clone();
        if self.options.freeze_nu {
            *p.nu_mut() = Param::fixed(0.0);
        }
        p
    }

    fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        match self.options.threads {
            None => Ok(f()),
            Some(t) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build()
                    .map_err(|e| Error::Config(vec![format!("thread pool: {e}")]))?;
                Ok(pool.install(f))
            }
        }
    }

    fn replicate(
        &self,
        prior: &DesignPrior,
        design: &TrialDesign,
        engine: EngineTag,
        request: &SummaryRequest,
        index: u64,
    ) -> Outcome {
        let mut rng = replicate_rng(self.options.seed, index);
        let mut param_rng = fork(&mut rng);
        let mut size_rng = fork(&mut rng);
        let mut sim_rng = fork(&mut rng);
        let engine_seed = rng.next_u64();
        let mut run = || -> Result<bool> {
            let params = draw_design_params(prior, design.clusters(), design.size_model(), &mut param_rng)?;
            let sizes = sizes_for_draw(&params, design, &mut size_rng)?;
            let data = simulate_trial(&params, design, &sizes, prior.kind(), &mut sim_rng)?;
            let summary = self.engine.analyse(engine, &data, &self.analysis_prior, request, engine_seed)?;
            success_indicator(&summary, design.success())
        };
        match run() {
            Ok(s) => Outcome::Success(s),
            Err(e) => Outcome::Failed(format!("replicate {index}: {e}")),
        }
    }

    /// Assurance at total sample size `n`.
    pub fn assurance(&self, n: usize) -> Result<AssurancePoint> {
        self.validate()?;
        let design = self.design.with_total_n(n)?;
        let prior = self.effective_prior();
        let engine = self.engine.resolve(prior.kind(), n);
        let request = SummaryRequest::for_rule(design.success());
        let outcomes: Vec<Outcome> = self.in_pool(|| {
            (0..self.options.replicates as u64)
                .into_par_iter()
                .map(|l| self.replicate(&prior, &design, engine, &request, l))
                .collect()
        })?;
        let mut successes = 0;
        let mut failures = Vec::new();
        for o in outcomes {
            match o {
                Outcome::Success(true) => successes += 1,
                Outcome::Success(false) => {}
                Outcome::Failed(msg) => failures.push(msg),
            }
        }
        let failed = failures.len();
        failures.truncate(10);
        Ok(AssurancePoint {
            n,
            nbar: design.mean_cluster_size(),
            engine,
            estimate: AssuranceEstimate::from_counts(successes, self.options.replicates - failed, failed)?,
            failure_messages: failures,
        })
    }

    /// Assurance over average cluster sizes at the design's cluster count;
    /// each total is `round(C * nbar)`.
    pub fn assurance_curve(&self, nbars: &[f64]) -> Result<AssuranceCurve> {
        if nbars.is_empty() {
            return Err(Error::domain("assurance curve needs at least one cluster size"));
        }
        let c = self.design.clusters() as f64;
        let mut points = Vec::with_capacity(nbars.len());
        for &m in nbars {
            if !(m >= 1.0 && m.is_finite()) {
                return Err(Error::domain(format!("average cluster size {m} must be at least 1")));
            }
            points.push(self.assurance((c * m).round() as usize)?);
        }
        let trend = MonotoneTrend::of(&points);
        Ok(AssuranceCurve { points, trend })
    }

    /// Prior probability that the effect lies beyond the margin: the limit
    /// of assurance as the trial grows.
    pub fn asymptote(&self) -> f64 {
        let rule = self.design.success();
        let p = self.design_prior.delta().prob_greater(rule.margin());
        match rule.direction() {
            Direction::Greater => p,
            Direction::Less => 1.0 - p,
        }
    }

    /// Smallest total size on the grid `step, 2 step, ...` (at least the
    /// cluster count) whose estimated assurance reaches `target`.
    pub fn find_sample_size(&self, target: f64, step: usize, cap: usize) -> Result<SampleSizeSearch> {
        if !(target > 0.0 && target < 1.0) {
            return Err(Error::domain(format!("target {target} outside (0, 1)")));
        }
        if step == 0 {
            return Err(Error::domain("step must be positive"));
        }
        let c = self.design.clusters();
        let k_min = c.div_ceil(step).max(1);
        let k_cap = cap / step;
        if k_cap < k_min {
            return Err(Error::domain(format!("cap {cap} is below the smallest admissible size")));
        }
        let mut evaluated: Vec<AssurancePoint> = Vec::new();
        let eval = |k: usize, evaluated: &mut Vec<AssurancePoint>| -> Result<AssurancePoint> {
            if let Some(p) = evaluated.iter().find(|p| p.n == k * step) {
                return Ok(p.clone());
            }
            let p = self.assurance(k * step)?;
            evaluated.push(p.clone());
            Ok(p)
        };

        let first = eval(k_min, &mut evaluated)?;
        let asymptote = self.asymptote();
        let finish = |n, at, below, mut evaluated: Vec<AssurancePoint>| {
            evaluated.sort_by_key(|p: &AssurancePoint| p.n);
            SampleSizeSearch { target, step, cap, n, at, below, asymptote, evaluated }
        };
        if first.estimate.assurance >= target {
            return Ok(finish(Some(first.n), Some(first), None, evaluated));
        }
        // Doubling to bracket, then bisection on the grid index.
        let (mut lo, mut hi) = (k_min, None);
        let mut k = k_min;
        while hi.is_none() {
            if k == k_cap {
                let at_cap = eval(k_cap, &mut evaluated)?;
                return Ok(finish(None, Some(at_cap), None, evaluated));
            }
            k = (k * 2).min(k_cap);
            if eval(k, &mut evaluated)?.estimate.assurance >= target {
                hi = Some(k);
            } else {
                lo = k;
            }
        }
        let mut hi = hi.expect("bracketed");
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if eval(mid, &mut evaluated)?.estimate.assurance >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let at = eval(hi, &mut evaluated)?;
        let below = eval(lo, &mut evaluated)?;
        Ok(finish(Some(at.n), Some(at), Some(below), evaluated))
    }
}

/// Largest step-to-step decrease along a curve, raw and in units of the
/// combined MCSE of the two points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotoneTrend {
    pub max_drop: f64,
    pub max_drop_mcse: f64,
    /// Every step is nondecreasing within 2 combined MCSE.
    pub nondecreasing: bool,
}

impl MonotoneTrend {
    fn of(points: &[AssurancePoint]) -> Self {
        let (mut max_drop, mut max_drop_mcse) = (0.0f64, 0.0f64);
        for w in points.windows(2) {
            let drop = w[0].estimate.assurance - w[1].estimate.assurance;
            let se = w[0].estimate.mcse.hypot(w[1].estimate.mcse);
            max_drop = max_drop.max(drop);
            if drop > 0.0 {
                max_drop_mcse = max_drop_mcse.max(if se > 0.0 { drop / se } else { f64::INFINITY });
            }
        }
        Self { max_drop, max_drop_mcse, nondecreasing: max_drop_mcse <= 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssuranceCurve {
    pub points: Vec<AssurancePoint>,
    pub trend: MonotoneTrend,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleSizeSearch {
    pub target: f64,
    pub step: usize,
    pub cap: usize,
    /// `None` when the target was not reached by the cap.
    pub n: Option<usize>,
    /// Estimate at `n`, or at the cap when infeasible.
    pub at: Option<AssurancePoint>,
    /// Estimate one grid step below `n`; absent when `n` is the smallest size.
    pub below: Option<AssurancePoint>,
    /// Prior probability of success as the trial grows without bound.
    pub asymptote: f64,
    pub evaluated: Vec<AssurancePoint>,
}

impl SampleSizeSearch {
    pub fn feasible(&self) -> bool {
        self.n.is_some()
    }
}
