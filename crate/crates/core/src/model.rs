//! Domain types shared by every stage of the design pipeline: marginal
//! distribution specs, priors, the trial frame, trial data and the two
//! result records (posterior summaries and assurance estimates).

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use serde::Serialize;

use crate::dist::norm_cdf;
use crate::error::{Error, Result};

/// Normal distribution parameterised by mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormalSpec {
    mean: f64,
    sd: f64,
}

impl NormalSpec {
    pub fn new(mean: f64, sd: f64) -> Result<Self> {
        if !mean.is_finite() {
            return Err(Error::domain(format!("normal mean must be finite, got {mean}")));
        }
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(Error::domain(format!("normal sd must be positive, got {sd}")));
        }
        Ok(Self { mean, sd })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn sd(&self) -> f64 {
        self.sd
    }

    pub fn variance(&self) -> f64 {
        self.sd * self.sd
    }

    pub fn precision(&self) -> f64 {
        1.0 / self.variance()
    }
}

/// Gamma distribution in the shape–rate convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaSpec {
    shape: f64,
    rate: f64,
}

impl GammaSpec {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(Error::domain(format!("gamma shape must be positive, got {shape}")));
        }
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::domain(format!("gamma rate must be positive, got {rate}")));
        }
        Ok(Self { shape, rate })
    }

    pub fn from_shape_scale(shape: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::domain(format!("gamma scale must be positive, got {scale}")));
        }
        Self::new(shape, 1.0 / scale)
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BetaSpec {
    a: f64,
    b: f64,
}

impl BetaSpec {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite() && b > 0.0 && b.is_finite()) {
            return Err(Error::domain(format!("beta parameters must be positive, got ({a}, {b})")));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }
}

/// A univariate marginal that can be sampled.
pub trait Marginal {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64;
    fn mean(&self) -> f64;
}

impl Marginal for NormalSpec {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.mean + self.sd * z
    }

    fn mean(&self) -> f64 {
        self.mean
    }
}

impl Marginal for GammaSpec {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Gamma::new(self.shape, 1.0 / self.rate)
            .expect("validated gamma spec")
            .sample(rng)
    }

    fn mean(&self) -> f64 {
        self.shape / self.rate
    }
}

impl Marginal for BetaSpec {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Beta::new(self.a, self.b).expect("validated beta spec").sample(rng)
    }

    fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }
}

/// Either a proper distribution or a point mass.
///
/// The point mass lets a design prior degenerate to the fixed parameter
/// values of a power calculation, and lets an analysis prior pin a
/// precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Param<S> {
    Random(S),
    Fixed { fixed: f64 },
}

impl<S> Param<S> {
    pub fn fixed(value: f64) -> Self {
        Param::Fixed { fixed: value }
    }

    pub fn fixed_value(&self) -> Option<f64> {
        match self {
            Param::Fixed { fixed } => Some(*fixed),
            Param::Random(_) => None,
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, Param::Fixed { .. })
    }
}

impl<S: Marginal> Marginal for Param<S> {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Param::Random(s) => s.sample(rng),
            Param::Fixed { fixed } => *fixed,
        }
    }

    fn mean(&self) -> f64 {
        match self {
            Param::Random(s) => s.mean(),
            Param::Fixed { fixed } => *fixed,
        }
    }
}

impl Param<NormalSpec> {
    /// Prior probability that the parameter exceeds `x`.
    pub fn prob_greater(&self, x: f64) -> f64 {
        match self {
            Param::Random(s) => norm_cdf((s.mean() - x) / s.sd()),
            Param::Fixed { fixed } => {
                if *fixed > x {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Success when the treatment effect is large: lower quantile above the margin.
    Greater,
    /// Success when the treatment effect is small: upper quantile below the margin.
    Less,
}

/// Posterior-quantile success criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuccessRule {
    margin: f64,
    tail: f64,
    direction: Direction,
}

impl SuccessRule {
    pub fn new(margin: f64, tail: f64, direction: Direction) -> Result<Self> {
        if !margin.is_finite() {
            return Err(Error::domain("success margin must be finite"));
        }
        if !(tail > 0.0 && tail < 1.0) {
            return Err(Error::domain(format!("tail level must lie in (0, 1), got {tail}")));
        }
        Ok(Self {
            margin,
            tail,
            direction,
        })
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn tail(&self) -> f64 {
        self.tail
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Posterior quantile level that decides success.
    pub fn decision_level(&self) -> f64 {
        match self.direction {
            Direction::Greater => 1.0 - self.tail,
            Direction::Less => self.tail,
        }
    }
}

impl Default for SuccessRule {
    fn default() -> Self {
        Self {
            margin: 0.0,
            tail: 0.95,
            direction: Direction::Greater,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Arm {
    Control,
    Treatment,
}

impl Arm {
    pub fn indicator(self) -> f64 {
        match self {
            Arm::Control => 0.0,
            Arm::Treatment => 1.0,
        }
    }

    pub fn is_treated(self) -> bool {
        self == Arm::Treatment
    }

    pub fn label(self) -> u8 {
        self.indicator() as u8
    }
}

/// 1:1 allocation: clusters alternate control, treatment, control, ...
/// so an odd count gives the extra cluster to control.
pub fn balanced_allocation(clusters: usize) -> Vec<Arm> {
    (0..clusters)
        .map(|j| if j % 2 == 0 { Arm::Control } else { Arm::Treatment })
        .collect()
}

/// Bounds applied when converting a cluster-size CV into a Dirichlet
/// concentration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizeModel {
    pub concentration_floor: f64,
    pub concentration_ceiling: f64,
    /// Multinomial redraws attempted before empty clusters are repaired.
    pub retry_cap: usize,
}

impl Default for SizeModel {
    fn default() -> Self {
        Self {
            concentration_floor: 0.01,
            concentration_ceiling: 1e8,
            retry_cap: 100,
        }
    }
}

/// The frame every calculation runs against.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialDesign {
    clusters: usize,
    arms: Vec<Arm>,
    total_n: usize,
    size_model: SizeModel,
    success: SuccessRule,
}

impl TrialDesign {
    pub fn new(clusters: usize, total_n: usize, success: SuccessRule) -> Result<Self> {
        if clusters < 2 {
            return Err(Error::domain(format!("need at least two clusters, got {clusters}")));
        }
        if total_n < clusters {
            return Err(Error::domain(format!(
                "total sample size {total_n} is smaller than the cluster count {clusters}"
            )));
        }
        Ok(Self {
            clusters,
            arms: balanced_allocation(clusters),
            total_n,
            size_model: SizeModel::default(),
            success,
        })
    }

    pub fn with_size_model(mut self, size_model: SizeModel) -> Result<Self> {
        let SizeModel {
            concentration_floor: lo,
            concentration_ceiling: hi,
            ..
        } = size_model;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::domain(format!("invalid concentration bounds [{lo}, {hi}]")));
        }
        self.size_model = size_model;
        Ok(self)
    }

    /// Same design at a different total sample size.
    pub fn with_total_n(&self, total_n: usize) -> Result<Self> {
        if total_n < self.clusters {
            return Err(Error::domain(format!(
                "total sample size {total_n} is smaller than the cluster count {}",
                self.clusters
            )));
        }
        Ok(Self {
            total_n,
            ..self.clone()
        })
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn arms(&self) -> &[Arm] {
        &self.arms
    }

    pub fn total_n(&self) -> usize {
        self.total_n
    }

    pub fn mean_cluster_size(&self) -> f64 {
        self.total_n as f64 / self.clusters as f64
    }

    pub fn size_model(&self) -> &SizeModel {
        &self.size_model
    }

    pub fn success(&self) -> &SuccessRule {
        &self.success
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuousDesignPrior {
    pub lambda: Param<NormalSpec>,
    pub delta: Param<NormalSpec>,
    /// Total outcome SD.
    pub sigma: Param<GammaSpec>,
    /// Intra-cluster correlation.
    pub rho: Param<BetaSpec>,
    /// Coefficient of variation of cluster sizes.
    pub nu: Param<GammaSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinaryDesignPrior {
    /// Control-arm log-odds.
    pub lambda: Param<NormalSpec>,
    /// Log odds ratio.
    pub delta: Param<NormalSpec>,
    /// Between-cluster SD on the log-odds scale.
    pub sigma_b: Param<GammaSpec>,
    pub nu: Param<GammaSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum DesignPrior {
    Continuous(ContinuousDesignPrior),
    Binary(BinaryDesignPrior),
}

impl DesignPrior {
    pub fn kind(&self) -> OutcomeKind {
        match self {
            DesignPrior::Continuous(_) => OutcomeKind::Continuous,
            DesignPrior::Binary(_) => OutcomeKind::Binary,
        }
    }

    pub fn delta(&self) -> &Param<NormalSpec> {
        match self {
            DesignPrior::Continuous(p) => &p.delta,
            DesignPrior::Binary(p) => &p.delta,
        }
    }

    pub fn nu(&self) -> &Param<GammaSpec> {
        match self {
            DesignPrior::Continuous(p) => &p.nu,
            DesignPrior::Binary(p) => &p.nu,
        }
    }

    pub(crate) fn nu_mut(&mut self) -> &mut Param<GammaSpec> {
        match self {
            DesignPrior::Continuous(p) => &mut p.nu,
            DesignPrior::Binary(p) => &mut p.nu,
        }
    }
}

/// Prior used when analysing a (real or simulated) trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisPrior {
    pub lambda: NormalSpec,
    pub delta: NormalSpec,
    /// Between-cluster precision.
    pub tau_b: Param<GammaSpec>,
    /// Within-cluster precision; absent for binary outcomes.
    pub tau_w: Option<Param<GammaSpec>>,
}

impl AnalysisPrior {
    /// Vague default: location parameters N(0, (100 * scale)^2), precisions
    /// Gamma(0.1, 0.1).
    pub fn vague(kind: OutcomeKind, outcome_scale: f64) -> Result<Self> {
        if !(outcome_scale > 0.0 && outcome_scale.is_finite()) {
            return Err(Error::domain(format!(
                "outcome scale must be positive, got {outcome_scale}"
            )));
        }
        let loc = NormalSpec::new(0.0, 100.0 * outcome_scale)?;
        let prec = Param::Random(GammaSpec::new(0.1, 0.1)?);
        Ok(Self {
            lambda: loc,
            delta: loc,
            tau_b: prec,
            tau_w: match kind {
                OutcomeKind::Continuous => Some(prec),
                OutcomeKind::Binary => None,
            },
        })
    }

    pub fn validate_for(&self, kind: OutcomeKind) -> Result<()> {
        let check = |p: &Param<GammaSpec>, name: &str| match p.fixed_value() {
            Some(v) if !(v > 0.0 && v.is_finite()) => Err(Error::domain(format!(
                "fixed {name} must be a positive precision, got {v}"
            ))),
            _ => Ok(()),
        };
        check(&self.tau_b, "tau_b")?;
        match (kind, &self.tau_w) {
            (OutcomeKind::Continuous, None) => {
                Err(Error::domain("continuous analysis prior needs tau_w"))
            }
            (OutcomeKind::Continuous, Some(t)) => check(t, "tau_w"),
            (OutcomeKind::Binary, Some(_)) => {
                Err(Error::domain("binary analysis prior must not define tau_w"))
            }
            (OutcomeKind::Binary, None) => Ok(()),
        }
    }
}

/// Individual-level outcomes with cluster membership and cluster arms.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialData {
    kind: OutcomeKind,
    arms: Vec<Arm>,
    cluster: Vec<usize>,
    y: Vec<f64>,
}

impl TrialData {
    /// `cluster[i]` is the zero-based cluster of individual `i`.
    pub fn new(kind: OutcomeKind, arms: Vec<Arm>, cluster: Vec<usize>, y: Vec<f64>) -> Result<Self> {
        if cluster.len() != y.len() {
            return Err(Error::domain(format!(
                "{} cluster labels for {} outcomes",
                cluster.len(),
                y.len()
            )));
        }
        if let Some(&bad) = cluster.iter().find(|&&c| c >= arms.len()) {
            return Err(Error::domain(format!(
                "cluster index {} outside 1..{}",
                bad + 1,
                arms.len()
            )));
        }
        match kind {
            OutcomeKind::Binary => {
                if let Some(v) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
                    return Err(Error::domain(format!("binary outcome must be 0 or 1, got {v}")));
                }
            }
            OutcomeKind::Continuous => {
                if let Some(v) = y.iter().find(|v| !v.is_finite()) {
                    return Err(Error::domain(format!("non-finite outcome {v}")));
                }
            }
        }
        Ok(Self {
            kind,
            arms,
            cluster,
            y,
        })
    }

    pub fn kind(&self) -> OutcomeKind {
        self.kind
    }

    pub fn arms(&self) -> &[Arm] {
        &self.arms
    }

    pub fn clusters(&self) -> usize {
        self.arms.len()
    }

    pub fn cluster_of(&self) -> &[usize] {
        &self.cluster
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.arms.len()];
        for &c in &self.cluster {
            n[c] += 1;
        }
        n
    }

    pub fn stats(&self) -> ClusterStats {
        ClusterStats::from_data(self)
    }

    /// Stable content hash, used to check that paired comparisons see the
    /// same dataset.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.kind.hash(&mut h);
        self.arms.hash(&mut h);
        self.cluster.hash(&mut h);
        for v in &self.y {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Per-cluster sufficient statistics. Both models depend on the data only
/// through these (count, mean, within-cluster sum of squares).
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    pub n: Vec<f64>,
    pub mean: Vec<f64>,
    pub within_ss: Vec<f64>,
    pub treated: Vec<bool>,
}

impl ClusterStats {
    fn from_data(data: &TrialData) -> Self {
        let j = data.clusters();
        let mut n = vec![0.0; j];
        let mut mean = vec![0.0; j];
        let mut ss = vec![0.0; j];
        // Welford per cluster.
        for (&c, &y) in data.cluster.iter().zip(&data.y) {
            n[c] += 1.0;
            let d = y - mean[c];
            mean[c] += d / n[c];
            ss[c] += d * (y - mean[c]);
        }
        Self {
            n,
            mean,
            within_ss: ss,
            treated: data.arms.iter().map(|a| a.is_treated()).collect(),
        }
    }

    pub fn clusters(&self) -> usize {
        self.n.len()
    }

    /// Cluster totals (success counts for binary data).
    pub fn sum(&self, j: usize) -> f64 {
        self.n[j] * self.mean[j]
    }

    pub fn total(&self) -> f64 {
        self.n.iter().sum()
    }

    pub fn arm_total(&self, treated: bool) -> f64 {
        self.n
            .iter()
            .zip(&self.treated)
            .filter(|(_, &t)| t == treated)
            .map(|(n, _)| n)
            .sum()
    }

    pub fn arm_mean(&self, treated: bool) -> f64 {
        let (s, n) = self
            .n
            .iter()
            .zip(&self.mean)
            .zip(&self.treated)
            .filter(|(_, &t)| t == treated)
            .fold((0.0, 0.0), |(s, m), ((n, y), _)| (s + n * y, m + n));
        s / n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineTag {
    Mcmc,
    Laplace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantilePoint {
    pub level: f64,
    pub value: f64,
}

/// Posterior summary of the treatment effect.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorSummary {
    pub quantiles: Vec<QuantilePoint>,
    /// Posterior probability that the effect lies beyond the margin in the
    /// rule's direction.
    pub tail_probability: f64,
    pub margin: f64,
    pub direction: Direction,
    pub engine: EngineTag,
    /// Retained MCMC draws; `None` for the Laplace engine.
    pub samples: Option<usize>,
    /// Engine-only wall-clock time.
    pub seconds: f64,
    pub warnings: Vec<String>,
}

impl PosteriorSummary {
    /// Builds a summary, sorting by level and enforcing monotone values.
    pub(crate) fn from_quantiles(
        mut quantiles: Vec<QuantilePoint>,
        tail_probability: f64,
        request: &SummaryRequest,
        engine: EngineTag,
        samples: Option<usize>,
    ) -> Self {
        quantiles.sort_by(|a, b| a.level.total_cmp(&b.level));
        let mut running = f64::NEG_INFINITY;
        for q in &mut quantiles {
            running = running.max(q.value);
            q.value = running;
        }
        Self {
            quantiles,
            tail_probability: tail_probability.clamp(0.0, 1.0),
            margin: request.margin,
            direction: request.direction,
            engine,
            samples,
            seconds: 0.0,
            warnings: Vec::new(),
        }
    }

    pub fn quantile(&self, level: f64) -> Option<f64> {
        self.quantiles
            .iter()
            .find(|q| (q.level - level).abs() < 1e-12)
            .map(|q| q.value)
    }

    pub fn median(&self) -> Option<f64> {
        self.quantile(0.5)
    }
}

/// What an engine must report: quantile levels and the tail margin.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRequest {
    pub levels: Vec<f64>,
    pub margin: f64,
    pub direction: Direction,
}

impl SummaryRequest {
    pub const DEFAULT_LEVELS: [f64; 5] = [0.025, 0.05, 0.5, 0.95, 0.975];

    /// Default levels plus whatever level the rule needs.
    pub fn for_rule(rule: &SuccessRule) -> Self {
        let mut levels = Self::DEFAULT_LEVELS.to_vec();
        let need = rule.decision_level();
        if !levels.iter().any(|l| (l - need).abs() < 1e-12) {
            levels.push(need);
        }
        levels.sort_by(f64::total_cmp);
        Self {
            levels,
            margin: rule.margin(),
            direction: rule.direction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
            Some(l) => Err(Error::domain(format!("quantile level {l} outside (0, 1)"))),
            None => Ok(()),
        }
    }
}

impl Default for SummaryRequest {
    fn default() -> Self {
        Self::for_rule(&SuccessRule::default())
    }
}

/// Monte Carlo assurance estimate with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AssuranceEstimate {
    pub assurance: f64,
    pub mcse: f64,
    /// Replicates that produced an analysis (failed ones excluded).
    pub replicates: usize,
    pub successes: usize,
    /// Replicates whose inference failed; reported, never imputed.
    pub failed: usize,
}

impl AssuranceEstimate {
    pub fn from_counts(successes: usize, replicates: usize, failed: usize) -> Result<Self> {
        if replicates == 0 {
            return Err(Error::Inference(format!(
                "no replicate produced an analysis ({failed} failed)"
            )));
        }
        if successes > replicates {
            return Err(Error::domain("more successes than replicates"));
        }
        let a = successes as f64 / replicates as f64;
        Ok(Self {
            assurance: a,
            mcse: (a * (1.0 - a) / replicates as f64).sqrt(),
            replicates,
            successes,
            failed,
        })
    }
}

/// Splits a total SD and an ICC into between- and within-cluster SDs.
pub fn variance_decompose(sigma: f64, rho: f64) -> Result<(f64, f64)> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::domain(format!("total SD must be positive, got {sigma}")));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::domain(format!("ICC must lie in [0, 1), got {rho}")));
    }
    Ok((sigma * rho.sqrt(), sigma * (1.0 - rho).sqrt()))
}

/// Intra-cluster correlation from the two SDs.
pub fn icc(sigma_b: f64, sigma_w: f64) -> Result<f64> {
    if !(sigma_b >= 0.0 && sigma_b.is_finite()) {
        return Err(Error::domain(format!("between-cluster SD must be >= 0, got {sigma_b}")));
    }
    if !(sigma_w > 0.0 && sigma_w.is_finite()) {
        return Err(Error::domain(format!("within-cluster SD must be > 0, got {sigma_w}")));
    }
    let b = sigma_b * sigma_b;
    Ok(b / (b + sigma_w * sigma_w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Clamp {
    Floor,
    Ceiling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Concentration {
    pub value: f64,
    pub clamped: Option<Clamp>,
}

/// Symmetric Dirichlet concentration whose implied CV of cluster
/// probabilities, `sqrt((J-1)/(aJ+1))`, equals `nu`.
pub fn dirichlet_a_from_cv(nu: f64, clusters: usize, bounds: &SizeModel) -> Result<Concentration> {
    if !(nu >= 0.0) || nu.is_nan() {
        return Err(Error::domain(format!("cluster-size CV must be >= 0, got {nu}")));
    }
    if clusters < 2 {
        return Err(Error::domain(format!("need at least two clusters, got {clusters}")));
    }
    let j = clusters as f64;
    let raw = ((j - 1.0) / (nu * nu) - 1.0) / j;
    let (value, clamped) = if raw <= bounds.concentration_floor || raw.is_nan() {
        (bounds.concentration_floor, Some(Clamp::Floor))
    } else if raw >= bounds.concentration_ceiling {
        (bounds.concentration_ceiling, Some(Clamp::Ceiling))
    } else {
        (raw, None)
    };
    Ok(Concentration { value, clamped })
}

/// CV of the components of a symmetric Dirichlet(a) vector of length J.
pub fn cv_from_dirichlet_a(a: f64, clusters: usize) -> f64 {
    let j = clusters as f64;
    ((j - 1.0) / (a * j + 1.0)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specs_reject_bad_parameters() {
        assert!(NormalSpec::new(0.0, 0.0).is_err());
        assert!(NormalSpec::new(0.0, -1.0).is_err());
        assert!(GammaSpec::new(0.0, 1.0).is_err());
        assert!(GammaSpec::new(1.0, -1.0).is_err());
        assert!(BetaSpec::new(1.0, 0.0).is_err());
        assert!(SuccessRule::new(0.0, 1.0, Direction::Greater).is_err());
        assert!(SuccessRule::new(0.0, 0.0, Direction::Greater).is_err());
    }

    #[test]
    fn shape_scale_converts_to_rate() {
        let g = GammaSpec::from_shape_scale(2.0, 4.0).unwrap();
        assert_eq!(g.rate(), 0.25);
        assert_eq!(g.mean(), 8.0);
    }

    #[test]
    fn variance_decompose_examples() {
        assert_eq!(variance_decompose(2.0, 0.0).unwrap(), (0.0, 2.0));
        let (b, w) = variance_decompose(120.0, 0.01).unwrap();
        assert!((b - 12.0).abs() < 1e-12);
        assert!((w - 119.398492452).abs() < 1e-8);
        assert!((b * b + w * w - 14400.0).abs() < 1e-9);
        let (_, w) = variance_decompose(2.0, 1.0 - 1e-12).unwrap();
        assert!(w < 1e-5);
        assert!(variance_decompose(2.0, 1.0).is_err());
        assert!(variance_decompose(2.0, -0.1).is_err());
    }

    #[test]
    fn icc_examples() {
        assert_eq!(icc(0.0, 2.0).unwrap(), 0.0);
        assert!((icc(0.2f64.sqrt(), 2.0).unwrap() - 0.2 / 4.2).abs() < 1e-15);
        assert!((icc(0.2f64.sqrt(), 2.0).unwrap() - 0.05).abs() < 0.005);
        assert_eq!(icc(1.0, 1.0).unwrap(), 0.5);
        assert!(icc(1.0, 0.0).is_err());
    }

    #[test]
    fn concentration_examples() {
        let b = SizeModel::default();
        let a = dirichlet_a_from_cv(1.0, 10, &b).unwrap();
        assert!((a.value - 0.8).abs() < 1e-12 && a.clamped.is_none());
        let a = dirichlet_a_from_cv(0.5, 150, &b).unwrap();
        assert!((a.value - 595.0 / 150.0).abs() < 1e-12);
        assert!((cv_from_dirichlet_a(a.value, 150) - 0.5).abs() < 1e-12);
        let a = dirichlet_a_from_cv(0.0, 10, &b).unwrap();
        assert_eq!(a.value, b.concentration_ceiling);
        assert_eq!(a.clamped, Some(Clamp::Ceiling));
        // CV beyond sqrt(J - 1) has no positive concentration.
        let a = dirichlet_a_from_cv(5.0, 10, &b).unwrap();
        assert_eq!(a.value, b.concentration_floor);
        assert_eq!(a.clamped, Some(Clamp::Floor));
    }

    #[test]
    fn allocation_splits_odd_counts_toward_control() {
        let arms = balanced_allocation(7);
        assert_eq!(arms.iter().filter(|a| a.is_treated()).count(), 3);
        let d = TrialDesign::new(8, 100, SuccessRule::default()).unwrap();
        assert_eq!(d.arms().iter().filter(|a| a.is_treated()).count(), 4);
        assert!(TrialDesign::new(8, 7, SuccessRule::default()).is_err());
    }

    #[test]
    fn trial_data_validation() {
        let arms = balanced_allocation(2);
        assert!(TrialData::new(OutcomeKind::Binary, arms.clone(), vec![0, 1], vec![0.0, 2.0]).is_err());
        assert!(TrialData::new(OutcomeKind::Continuous, arms.clone(), vec![0, 2], vec![0.0, 2.0]).is_err());
        let d = TrialData::new(OutcomeKind::Continuous, arms, vec![0, 0, 1], vec![1.0, 3.0, 5.0]).unwrap();
        let s = d.stats();
        assert_eq!(s.n, vec![2.0, 1.0]);
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.within_ss, vec![2.0, 0.0]);
        assert_eq!(s.arm_mean(false), 2.0);
    }

    #[test]
    fn assurance_estimate_is_consistent() {
        let e = AssuranceEstimate::from_counts(90, 100, 3).unwrap();
        assert_eq!(e.assurance * 100.0, 90.0);
        assert!((e.mcse - (0.9f64 * 0.1 / 100.0).sqrt()).abs() < 1e-15);
        assert!(AssuranceEstimate::from_counts(0, 0, 5).is_err());
    }

    proptest! {
        #[test]
        fn decompose_then_icc_round_trips(sb in 0.0f64..50.0, sw in 0.01f64..50.0) {
            let rho = icc(sb, sw).unwrap();
            let sigma = (sb * sb + sw * sw).sqrt();
            let (b, w) = variance_decompose(sigma, rho).unwrap();
            prop_assert!((b - sb).abs() <= 1e-12 * sigma.max(1.0) * 10.0);
            prop_assert!((w - sw).abs() <= 1e-12 * sigma.max(1.0) * 10.0);
        }
    }
}
