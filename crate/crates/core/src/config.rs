//! JSON scenario files.
//!
//! Loading is strict: unknown fields are rejected, every problem is
//! reported at once with its JSON path, and the top-level `"convention"`
//! field must say how Gamma parameters are written (`"shape-rate"` with
//! `{"shape", "rate"}` or `"shape-scale"` with `{"shape", "scale"}`).
//! Internally everything is shape–rate; [`Scenario::resolved`] echoes the
//! converted values in a form that loads back unchanged.

use std::path::Path;

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::assurance::{EngineChoice, EngineSettings};
use crate::bench::{Method, Scenario as BenchScenario};
use crate::error::{Error, Result};
use crate::laplace::LaplaceConfig;
use crate::model::{
    AnalysisPrior, BetaSpec, BinaryDesignPrior, ContinuousDesignPrior, DesignPrior, Direction,
    EngineTag, GammaSpec, NormalSpec, OutcomeKind, Param, SizeModel, SuccessRule, TrialDesign,
};
use crate::power::{NConvention, PowerInputsBinary, PowerInputsContinuous, Sided};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaConvention {
    ShapeRate,
    ShapeScale,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssuranceSection {
    pub replicates: usize,
    pub freeze_nu: bool,
    /// Average cluster sizes for a curve.
    pub nbar_grid: Vec<f64>,
    /// Explicit total sample sizes.
    pub sample_sizes: Vec<usize>,
    pub target: Option<f64>,
    pub step: Option<usize>,
    pub cap: Option<usize>,
}

impl Default for AssuranceSection {
    fn default() -> Self {
        Self {
            replicates: 1000,
            freeze_nu: false,
            nbar_grid: Vec::new(),
            sample_sizes: Vec::new(),
            target: None,
            step: None,
            cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum PowerSection {
    Continuous {
        #[serde(flatten)]
        inputs: PowerInputsContinuous,
        target: Option<f64>,
    },
    Binary {
        #[serde(flatten)]
        inputs: PowerInputsBinary,
        target: Option<f64>,
    },
}

/// A loaded and validated scenario. Sections absent from the file are
/// `None`; commands check for what they need.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub convention: GammaConvention,
    pub description: Option<String>,
    pub outcome: Option<OutcomeKind>,
    pub design: Option<TrialDesign>,
    pub design_prior: Option<DesignPrior>,
    pub analysis_prior: Option<AnalysisPrior>,
    /// Outcome scale used for the vague analysis prior.
    pub outcome_scale: f64,
    pub engine: EngineSettings,
    pub assurance: AssuranceSection,
    /// `nbar` is NaN when the file gives only a target.
    pub power: Option<PowerSection>,
    pub bench: Vec<BenchScenario>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::from_value(&value)
    }

    pub fn from_value(v: &Value) -> Result<Self> {
        let mut c = Ctx::default();
        let s = c.scenario(v);
        match s {
            Some(s) if c.errors.is_empty() => Ok(s),
            _ => Err(Error::Config(c.errors)),
        }
    }

    pub fn outcome(&self) -> Result<OutcomeKind> {
        self.outcome
            .ok_or_else(|| Error::Config(vec!["outcome: required for this command".into()]))
    }

    pub fn require_design(&self) -> Result<&TrialDesign> {
        self.design
            .as_ref()
            .ok_or_else(|| Error::Config(vec!["design: required for this command".into()]))
    }

    pub fn require_design_prior(&self) -> Result<&DesignPrior> {
        self.design_prior
            .as_ref()
            .ok_or_else(|| Error::Config(vec!["design_prior: required for this command".into()]))
    }

    /// The configured analysis prior, or the vague default at `outcome_scale`.
    pub fn analysis_prior(&self) -> Result<AnalysisPrior> {
        match &self.analysis_prior {
            Some(p) => Ok(p.clone()),
            None => AnalysisPrior::vague(self.outcome()?, self.outcome_scale),
        }
    }

    /// Fully resolved configuration in shape–rate form.
    pub fn resolved(&self) -> Value {
        let mut out = Map::new();
        out.insert("convention".into(), json!("shape-rate"));
        if let Some(d) = &self.description {
            out.insert("description".into(), json!(d));
        }
        if let Some(k) = self.outcome {
            out.insert("outcome".into(), json!(k));
        }
        if let Some(d) = &self.design {
            out.insert(
                "design".into(),
                json!({
                    "clusters": d.clusters(),
                    "total_n": d.total_n(),
                    "success": d.success(),
                    "size_model": d.size_model(),
                }),
            );
        }
        if let Some(p) = &self.design_prior {
            let mut v = serde_json::to_value(p).expect("serialisable");
            if let Some(m) = v.as_object_mut() {
                m.remove("outcome");
            }
            out.insert("design_prior".into(), v);
        }
        if self.design_prior.is_some() || self.analysis_prior.is_some() {
            if let Ok(p) = self.analysis_prior() {
                let mut v = serde_json::to_value(&p).expect("serialisable");
                if let Some(m) = v.as_object_mut() {
                    if m.get("tau_w") == Some(&Value::Null) {
                        m.remove("tau_w");
                    }
                }
                out.insert("analysis_prior".into(), v);
            }
        }
        out.insert(
            "engine".into(),
            json!({
                "choice": self.engine.choice,
                "samples": self.engine.chain.samples,
                "burn_in": self.engine.chain.burn_in,
                "thin": self.engine.chain.thin,
                "auto_mcmc_max_n": self.engine.auto_mcmc_max_n,
                "laplace": self.engine.laplace,
            }),
        );
        let mut a = serde_json::to_value(&self.assurance).expect("serialisable");
        if let Some(m) = a.as_object_mut() {
            m.retain(|_, v| !v.is_null());
        }
        out.insert("assurance".into(), a);
        if let Some(p) = &self.power {
            let mut v = serde_json::to_value(p).expect("serialisable");
            if let Some(m) = v.as_object_mut() {
                m.remove("outcome");
                m.retain(|_, v| !v.is_null());
            }
            out.insert("power".into(), v);
        }
        if !self.bench.is_empty() {
            let list: Vec<Value> = self
                .bench
                .iter()
                .map(|s| {
                    json!({
                        "id": s.id,
                        "outcome": s.kind,
                        "clusters": s.clusters,
                        "rho": s.rho,
                        "sigma_w": s.sigma_w,
                        "sample_sizes": s.sample_sizes,
                        "lambda": s.lambda,
                        "delta": s.delta,
                        "methods": s.methods.iter().map(|m| match m.samples {
                            Some(k) => json!({"engine": "mcmc", "samples": k}),
                            None => json!({"engine": "laplace"}),
                        }).collect::<Vec<_>>(),
                        "reps": s.reps,
                        "burn_in": s.burn_in,
                    })
                })
                .collect();
            out.insert("bench".into(), json!({ "scenarios": list }));
        }
        Value::Object(out)
    }
}

#[derive(Default)]
struct Ctx {
    errors: Vec<String>,
    convention: Option<GammaConvention>,
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

impl Ctx {
    fn err(&mut self, path: &str, msg: impl std::fmt::Display) {
        self.errors.push(format!("{path}: {msg}"));
    }

    fn object<'v>(&mut self, path: &str, v: &'v Value, allowed: &[&str]) -> Option<&'v Map<String, Value>> {
        match v.as_object() {
            Some(m) => {
                for k in m.keys() {
                    if !allowed.contains(&k.as_str()) {
                        self.err(&join(path, k), format!("unknown field (expected one of {})", allowed.join(", ")));
                    }
                }
                Some(m)
            }
            None => {
                self.err(path, "expected an object");
                None
            }
        }
    }

    fn f64_opt(&mut self, path: &str, m: &Map<String, Value>, key: &str) -> Option<f64> {
        let v = m.get(key)?;
        match v.as_f64() {
            Some(x) if x.is_finite() => Some(x),
            _ => {
                self.err(&join(path, key), format!("expected a finite number, got {v}"));
                None
            }
        }
    }

    fn f64_req(&mut self, path: &str, m: &Map<String, Value>, key: &str) -> Option<f64> {
        if !m.contains_key(key) {
            self.err(&join(path, key), "missing required field");
            return None;
        }
        self.f64_opt(path, m, key)
    }

    fn usize_opt(&mut self, path: &str, m: &Map<String, Value>, key: &str) -> Option<usize> {
        let v = m.get(key)?;
        match v.as_u64() {
            Some(x) => Some(x as usize),
            None => {
                self.err(&join(path, key), format!("expected a non-negative integer, got {v}"));
                None
            }
        }
    }

    fn usize_req(&mut self, path: &str, m: &Map<String, Value>, key: &str) -> Option<usize> {
        if !m.contains_key(key) {
            self.err(&join(path, key), "missing required field");
            return None;
        }
        self.usize_opt(path, m, key)
    }

    fn bool_opt(&mut self, path: &str, m: &Map<String, Value>, key: &str) -> Option<bool> {
        let v = m.get(key)?;
        let b = v.as_bool();
        if b.is_none() {
            self.err(&join(path, key), format!("expected true or false, got {v}"));
        }
        b
    }

    fn str_opt<'v>(&mut self, path: &str, m: &'v Map<String, Value>, key: &str) -> Option<&'v str> {
        let v = m.get(key)?;
        let s = v.as_str();
        if s.is_none() {
            self.err(&join(path, key), format!("expected a string, got {v}"));
        }
        s
    }

    fn choice<T: Copy>(&mut self, path: &str, m: &Map<String, Value>, key: &str, options: &[(&str, T)]) -> Option<T> {
        let s = self.str_opt(path, m, key)?;
        match options.iter().find(|(name, _)| *name == s) {
            Some((_, t)) => Some(*t),
            None => {
                let names: Vec<&str> = options.iter().map(|o| o.0).collect();
                self.err(&join(path, key), format!("{s:?} is not one of {}", names.join(", ")));
                None
            }
        }
    }

    fn check<T>(&mut self, path: &str, r: Result<T>) -> Option<T> {
        match r {
            Ok(t) => Some(t),
            Err(e) => {
                self.err(path, e);
                None
            }
        }
    }

    fn normal(&mut self, path: &str, v: &Value, allow_fixed: bool) -> Option<Param<NormalSpec>> {
        let m = self.object(path, v, if allow_fixed { &["mean", "sd", "fixed"] } else { &["mean", "sd"] })?;
        if allow_fixed && m.contains_key("fixed") {
            if m.len() > 1 {
                self.err(path, "a fixed value takes no other fields");
            }
            return self.f64_req(path, m, "fixed").map(Param::fixed);
        }
        let mean = self.f64_req(path, m, "mean");
        let sd = self.f64_req(path, m, "sd");
        let (mean, sd) = (mean?, sd?);
        self.check(path, NormalSpec::new(mean, sd)).map(Param::Random)
    }

    /// Gamma spec in the declared convention, or a fixed value at least `min`.
    fn gamma(&mut self, path: &str, v: &Value, fixed_min: Option<(f64, bool)>) -> Option<Param<GammaSpec>> {
        let conv = self.convention?;
        let second = match conv {
            GammaConvention::ShapeRate => "rate",
            GammaConvention::ShapeScale => "scale",
        };
        let allowed: Vec<&str> = match fixed_min {
            Some(_) => vec!["shape", second, "fixed"],
            None => vec!["shape", second],
        };
        let m = self.object(path, v, &allowed)?;
        if let (Some((min, inclusive)), true) = (fixed_min, m.contains_key("fixed")) {
            if m.len() > 1 {
                self.err(path, "a fixed value takes no other fields");
            }
            let x = self.f64_req(path, m, "fixed")?;
            let ok = if inclusive { x >= min } else { x > min };
            if !ok {
                self.err(path, format!("fixed value {x} must be {} {min}", if inclusive { ">=" } else { ">" }));
                return None;
            }
            return Some(Param::fixed(x));
        }
        let shape = self.f64_req(path, m, "shape");
        let p2 = self.f64_req(path, m, second);
        let (shape, p2) = (shape?, p2?);
        let spec = match conv {
            GammaConvention::ShapeRate => GammaSpec::new(shape, p2),
            GammaConvention::ShapeScale => GammaSpec::from_shape_scale(shape, p2),
        };
        self.check(path, spec).map(Param::Random)
    }

    fn beta(&mut self, path: &str, v: &Value) -> Option<Param<BetaSpec>> {
        let m = self.object(path, v, &["a", "b", "fixed"])?;
        if m.contains_key("fixed") {
            if m.len() > 1 {
                self.err(path, "a fixed value takes no other fields");
            }
            let x = self.f64_req(path, m, "fixed")?;
            if !(0.0..1.0).contains(&x) {
                self.err(path, format!("fixed ICC {x} must lie in [0, 1)"));
                return None;
            }
            return Some(Param::fixed(x));
        }
        let a = self.f64_req(path, m, "a");
        let b = self.f64_req(path, m, "b");
        let (a, b) = (a?, b?);
        self.check(path, BetaSpec::new(a, b)).map(Param::Random)
    }

    fn field<'v>(&mut self, path: &str, m: &'v Map<String, Value>, key: &str) -> Option<&'v Value> {
        let v = m.get(key);
        if v.is_none() {
            self.err(&join(path, key), "missing required field");
        }
        v
    }

    fn scenario(&mut self, v: &Value) -> Option<Scenario> {
        let top = self.object(
            "",
            v,
            &[
                "convention",
                "description",
                "outcome",
                "design",
                "design_prior",
                "analysis_prior",
                "engine",
                "assurance",
                "power",
                "bench",
            ],
        )?;
        self.convention = match top.get("convention") {
            None => {
                self.err("convention", "missing required field (\"shape-rate\" or \"shape-scale\")");
                None
            }
            Some(_) => self.choice(
                "",
                top,
                "convention",
                &[("shape-rate", GammaConvention::ShapeRate), ("shape-scale", GammaConvention::ShapeScale)],
            ),
        };
        let description = self.str_opt("", top, "description").map(str::to_string);
        let outcome = self.choice(
            "",
            top,
            "outcome",
            &[("continuous", OutcomeKind::Continuous), ("binary", OutcomeKind::Binary)],
        );
        let needs_outcome = ["design_prior", "analysis_prior"].iter().any(|k| top.contains_key(*k));
        if needs_outcome && outcome.is_none() && !top.contains_key("outcome") {
            self.err("outcome", "required when a prior is given");
        }

        let design = top.get("design").and_then(|d| self.design("design", d));
        let design_prior = match (top.get("design_prior"), outcome) {
            (Some(p), Some(k)) => self.design_prior("design_prior", p, k),
            _ => None,
        };
        let mut outcome_scale = 1.0;
        let analysis_prior = match (top.get("analysis_prior"), outcome) {
            (Some(p), Some(k)) => self.analysis_prior("analysis_prior", p, k, &mut outcome_scale),
            _ => None,
        };
        let engine = match top.get("engine") {
            Some(e) => self.engine("engine", e).unwrap_or_default(),
            None => EngineSettings::default(),
        };
        let assurance = match top.get("assurance") {
            Some(a) => self.assurance("assurance", a).unwrap_or_default(),
            None => AssuranceSection::default(),
        };
        let power = top.get("power").and_then(|p| self.power("power", p, outcome));
        let bench = match top.get("bench") {
            Some(b) => self.bench("bench", b).unwrap_or_default(),
            None => Vec::new(),
        };
        Some(Scenario {
            convention: self.convention?,
            description,
            outcome,
            design,
            design_prior,
            analysis_prior,
            outcome_scale,
            engine,
            assurance,
            power,
            bench,
        })
    }

    fn design(&mut self, path: &str, v: &Value) -> Option<TrialDesign> {
        let m = self.object(path, v, &["clusters", "total_n", "success", "size_model"])?;
        let clusters = self.usize_req(path, m, "clusters");
        let total_n = self.usize_opt(path, m, "total_n");
        let success = match m.get("success") {
            Some(s) => self.success(&join(path, "success"), s),
            None => Some(SuccessRule::default()),
        };
        let size_model = match m.get("size_model") {
            Some(s) => self.size_model(&join(path, "size_model"), s),
            None => Some(SizeModel::default()),
        };
        let clusters = clusters?;
        let d = self.check(path, TrialDesign::new(clusters, total_n.unwrap_or(clusters), success?))?;
        self.check(path, d.with_size_model(size_model?))
    }

    fn success(&mut self, path: &str, v: &Value) -> Option<SuccessRule> {
        let m = self.object(path, v, &["margin", "tail", "direction"])?;
        let margin = self.f64_opt(path, m, "margin").unwrap_or(0.0);
        let tail = self.f64_opt(path, m, "tail").unwrap_or(0.95);
        let direction = if m.contains_key("direction") {
            self.choice(path, m, "direction", &[("greater", Direction::Greater), ("less", Direction::Less)])?
        } else {
            Direction::Greater
        };
        self.check(path, SuccessRule::new(margin, tail, direction))
    }

    fn size_model(&mut self, path: &str, v: &Value) -> Option<SizeModel> {
        let m = self.object(path, v, &["concentration_floor", "concentration_ceiling", "retry_cap"])?;
        let d = SizeModel::default();
        let floor = self.f64_opt(path, m, "concentration_floor").unwrap_or(d.concentration_floor);
        let ceiling = self.f64_opt(path, m, "concentration_ceiling").unwrap_or(d.concentration_ceiling);
        let retry_cap = self.usize_opt(path, m, "retry_cap").unwrap_or(d.retry_cap);
        if !(floor > 0.0 && ceiling > floor) {
            self.err(path, format!("need 0 < concentration_floor < concentration_ceiling, got {floor}, {ceiling}"));
            return None;
        }
        Some(SizeModel { concentration_floor: floor, concentration_ceiling: ceiling, retry_cap })
    }

    fn design_prior(&mut self, path: &str, v: &Value, kind: OutcomeKind) -> Option<DesignPrior> {
        match kind {
            OutcomeKind::Continuous => {
                let m = self.object(path, v, &["lambda", "delta", "sigma", "rho", "nu"])?;
                let l = self.field(path, m, "lambda").cloned();
                let d = self.field(path, m, "delta").cloned();
                let s = self.field(path, m, "sigma").cloned();
                let r = self.field(path, m, "rho").cloned();
                let n = self.field(path, m, "nu").cloned();
                let lambda = l.and_then(|v| self.normal(&join(path, "lambda"), &v, true));
                let delta = d.and_then(|v| self.normal(&join(path, "delta"), &v, true));
                let sigma = s.and_then(|v| self.gamma(&join(path, "sigma"), &v, Some((0.0, false))));
                let rho = r.and_then(|v| self.beta(&join(path, "rho"), &v));
                let nu = n.and_then(|v| self.gamma(&join(path, "nu"), &v, Some((0.0, true))));
                Some(DesignPrior::Continuous(ContinuousDesignPrior {
                    lambda: lambda?,
                    delta: delta?,
                    sigma: sigma?,
                    rho: rho?,
                    nu: nu?,
                }))
            }
            OutcomeKind::Binary => {
                let m = self.object(path, v, &["lambda", "delta", "sigma_b", "nu"])?;
                let l = self.field(path, m, "lambda").cloned();
                let d = self.field(path, m, "delta").cloned();
                let s = self.field(path, m, "sigma_b").cloned();
                let n = self.field(path, m, "nu").cloned();
                let lambda = l.and_then(|v| self.normal(&join(path, "lambda"), &v, true));
                let delta = d.and_then(|v| self.normal(&join(path, "delta"), &v, true));
                let sigma_b = s.and_then(|v| self.gamma(&join(path, "sigma_b"), &v, Some((0.0, true))));
                let nu = n.and_then(|v| self.gamma(&join(path, "nu"), &v, Some((0.0, true))));
                Some(DesignPrior::Binary(BinaryDesignPrior {
                    lambda: lambda?,
                    delta: delta?,
                    sigma_b: sigma_b?,
                    nu: nu?,
                }))
            }
        }
    }

    fn analysis_prior(&mut self, path: &str, v: &Value, kind: OutcomeKind, scale: &mut f64) -> Option<AnalysisPrior> {
        let m = self.object(path, v, &["outcome_scale", "lambda", "delta", "tau_b", "tau_w"])?;
        if let Some(s) = self.f64_opt(path, m, "outcome_scale") {
            *scale = s;
        }
        let mut p = self.check(path, AnalysisPrior::vague(kind, *scale))?;
        if let Some(v) = m.get("lambda") {
            if let Some(Param::Random(n)) = self.normal(&join(path, "lambda"), v, false) {
                p.lambda = n;
            }
        }
        if let Some(v) = m.get("delta") {
            if let Some(Param::Random(n)) = self.normal(&join(path, "delta"), v, false) {
                p.delta = n;
            }
        }
        if let Some(v) = m.get("tau_b") {
            p.tau_b = self.gamma(&join(path, "tau_b"), v, Some((0.0, false)))?;
        }
        match (kind, m.get("tau_w")) {
            (OutcomeKind::Binary, Some(_)) => {
                self.err(&join(path, "tau_w"), "not used for binary outcomes");
                return None;
            }
            (OutcomeKind::Continuous, Some(v)) => {
                p.tau_w = Some(self.gamma(&join(path, "tau_w"), v, Some((0.0, false)))?);
            }
            _ => {}
        }
        Some(p)
    }

    fn engine(&mut self, path: &str, v: &Value) -> Option<EngineSettings> {
        let m = self.object(path, v, &["choice", "samples", "burn_in", "thin", "auto_mcmc_max_n", "laplace"])?;
        let mut e = EngineSettings::default();
        if m.contains_key("choice") {
            e.choice = self.choice(
                path,
                m,
                "choice",
                &[("auto", EngineChoice::Auto), ("mcmc", EngineChoice::Mcmc), ("laplace", EngineChoice::Laplace)],
            )?;
        }
        e.chain.samples = self.usize_opt(path, m, "samples").unwrap_or(e.chain.samples);
        e.chain.burn_in = self.usize_opt(path, m, "burn_in").unwrap_or(e.chain.burn_in);
        e.chain.thin = self.usize_opt(path, m, "thin").unwrap_or(e.chain.thin);
        e.auto_mcmc_max_n = self.usize_opt(path, m, "auto_mcmc_max_n").unwrap_or(e.auto_mcmc_max_n);
        self.check(path, e.chain.validate())?;
        if let Some(l) = m.get("laplace") {
            let lp = join(path, "laplace");
            let lm = self.object(
                &lp,
                l,
                &["grid_points", "grid_step", "prune_drop", "fd_step", "newton_tol", "max_newton", "max_hyper_iter"],
            )?;
            let d = LaplaceConfig::default();
            let cfg = LaplaceConfig {
                grid_points: self.usize_opt(&lp, lm, "grid_points").unwrap_or(d.grid_points),
                grid_step: self.f64_opt(&lp, lm, "grid_step").unwrap_or(d.grid_step),
                prune_drop: self.f64_opt(&lp, lm, "prune_drop").unwrap_or(d.prune_drop),
                fd_step: self.f64_opt(&lp, lm, "fd_step").unwrap_or(d.fd_step),
                newton_tol: self.f64_opt(&lp, lm, "newton_tol").unwrap_or(d.newton_tol),
                max_newton: self.usize_opt(&lp, lm, "max_newton").unwrap_or(d.max_newton),
                max_hyper_iter: self.usize_opt(&lp, lm, "max_hyper_iter").unwrap_or(d.max_hyper_iter),
            };
            e.laplace = self.check(&lp, cfg.validate().map(|_| cfg.clone()))?;
        }
        Some(e)
    }

    fn assurance(&mut self, path: &str, v: &Value) -> Option<AssuranceSection> {
        let m = self.object(
            path,
            v,
            &["replicates", "freeze_nu", "nbar_grid", "sample_sizes", "target", "step", "cap"],
        )?;
        let mut a = AssuranceSection::default();
        a.replicates = self.usize_opt(path, m, "replicates").unwrap_or(a.replicates);
        if a.replicates == 0 {
            self.err(&join(path, "replicates"), "must be at least 1");
        }
        a.freeze_nu = self.bool_opt(path, m, "freeze_nu").unwrap_or(false);
        if let Some(g) = m.get("nbar_grid") {
            a.nbar_grid = self.list(&join(path, "nbar_grid"), g, |c, p, x| match x.as_f64() {
                Some(v) if v >= 1.0 && v.is_finite() => Some(v),
                _ => {
                    c.err(p, format!("expected an average cluster size >= 1, got {x}"));
                    None
                }
            })?;
        }
        if let Some(g) = m.get("sample_sizes") {
            a.sample_sizes = self.list(&join(path, "sample_sizes"), g, |c, p, x| match x.as_u64() {
                Some(v) if v > 0 => Some(v as usize),
                _ => {
                    c.err(p, format!("expected a positive integer, got {x}"));
                    None
                }
            })?;
        }
        a.target = self.f64_opt(path, m, "target");
        if let Some(t) = a.target {
            if !(t > 0.0 && t < 1.0) {
                self.err(&join(path, "target"), format!("{t} must lie in (0, 1)"));
            }
        }
        a.step = self.usize_opt(path, m, "step");
        if a.step == Some(0) {
            self.err(&join(path, "step"), "must be positive");
        }
        a.cap = self.usize_opt(path, m, "cap");
        Some(a)
    }

    fn list<T>(&mut self, path: &str, v: &Value, mut item: impl FnMut(&mut Self, &str, &Value) -> Option<T>) -> Option<Vec<T>> {
        let Some(arr) = v.as_array() else {
            self.err(path, "expected an array");
            return None;
        };
        let mut out = Vec::with_capacity(arr.len());
        let mut ok = true;
        for (i, x) in arr.iter().enumerate() {
            match item(self, &format!("{path}[{i}]"), x) {
                Some(t) => out.push(t),
                None => ok = false,
            }
        }
        ok.then_some(out)
    }

    fn power(&mut self, path: &str, v: &Value, outcome: Option<OutcomeKind>) -> Option<PowerSection> {
        let kind = match outcome {
            Some(k) => k,
            None => {
                self.err("outcome", "required when a power section is given");
                return None;
            }
        };
        let sided = |c: &mut Self, m: &Map<String, Value>, default: Sided| {
            if m.contains_key("sided") {
                c.choice(path, m, "sided", &[("one", Sided::One), ("two", Sided::Two)])
            } else {
                Some(default)
            }
        };
        match kind {
            OutcomeKind::Continuous => {
                let m = self.object(path, v, &["delta", "sigma", "rho", "nu", "clusters", "nbar", "alpha", "sided", "target"])?;
                let inputs = PowerInputsContinuous {
                    delta: self.f64_req(path, m, "delta")?,
                    sigma: self.f64_req(path, m, "sigma")?,
                    rho: self.f64_req(path, m, "rho")?,
                    nu: self.f64_opt(path, m, "nu").unwrap_or(0.0),
                    clusters: self.f64_req(path, m, "clusters")?,
                    nbar: self.f64_opt(path, m, "nbar").unwrap_or(f64::NAN),
                    alpha: self.f64_opt(path, m, "alpha").unwrap_or(0.05),
                    sided: sided(self, m, Sided::One)?,
                };
                let target = self.power_target(path, m, inputs.nbar)?;
                Some(PowerSection::Continuous { inputs, target })
            }
            OutcomeKind::Binary => {
                let m = self.object(
                    path,
                    v,
                    &["p1", "p2", "rho", "clusters", "nbar", "alpha", "n_convention", "sided", "target"],
                )?;
                let n_convention = if m.contains_key("n_convention") {
                    self.choice(path, m, "n_convention", &[("per-arm", NConvention::PerArm), ("total", NConvention::Total)])?
                } else {
                    NConvention::PerArm
                };
                let inputs = PowerInputsBinary {
                    p1: self.f64_req(path, m, "p1")?,
                    p2: self.f64_req(path, m, "p2")?,
                    rho: self.f64_req(path, m, "rho")?,
                    clusters: self.f64_req(path, m, "clusters")?,
                    nbar: self.f64_opt(path, m, "nbar").unwrap_or(f64::NAN),
                    alpha: self.f64_opt(path, m, "alpha").unwrap_or(0.05),
                    n_convention,
                    sided: sided(self, m, Sided::Two)?,
                };
                let target = self.power_target(path, m, inputs.nbar)?;
                Some(PowerSection::Binary { inputs, target })
            }
        }
    }

    /// Outer `None` on error; inner `None` when no target was given.
    fn power_target(&mut self, path: &str, m: &Map<String, Value>, nbar: f64) -> Option<Option<f64>> {
        let target = self.f64_opt(path, m, "target");
        if let Some(t) = target {
            if !(t > 0.0 && t < 1.0) {
                self.err(&join(path, "target"), format!("{t} must lie in (0, 1)"));
                return None;
            }
        }
        if target.is_none() && nbar.is_nan() {
            self.err(path, "give nbar (power), target (sample size), or both");
            return None;
        }
        Some(target)
    }

    fn bench(&mut self, path: &str, v: &Value) -> Option<Vec<BenchScenario>> {
        let m = self.object(path, v, &["scenarios"])?;
        let list = self.field(path, m, "scenarios")?;
        self.list(&join(path, "scenarios"), list, |c, p, x| c.bench_scenario(p, x))
    }

    fn bench_scenario(&mut self, path: &str, v: &Value) -> Option<BenchScenario> {
        let m = self.object(
            path,
            v,
            &["id", "outcome", "clusters", "rho", "sigma_w", "sample_sizes", "lambda", "delta", "methods", "reps", "burn_in"],
        )?;
        let id = self.str_opt(path, m, "id").map(str::to_string);
        if id.is_none() && !m.contains_key("id") {
            self.err(&join(path, "id"), "missing required field");
        }
        let kind = if m.contains_key("outcome") {
            self.choice(path, m, "outcome", &[("continuous", OutcomeKind::Continuous), ("binary", OutcomeKind::Binary)])
        } else {
            self.err(&join(path, "outcome"), "missing required field");
            None
        };
        let clusters = self.usize_req(path, m, "clusters");
        let rho = self.f64_req(path, m, "rho");
        let (id, kind, clusters, rho) = (id?, kind?, clusters?, rho?);
        let mut s = BenchScenario::new(id, kind, clusters, rho);
        s.sigma_w = self.f64_opt(path, m, "sigma_w").unwrap_or(s.sigma_w);
        s.lambda = self.f64_opt(path, m, "lambda").unwrap_or(s.lambda);
        s.delta = self.f64_opt(path, m, "delta").unwrap_or(s.delta);
        s.reps = self.usize_opt(path, m, "reps").unwrap_or(s.reps);
        s.burn_in = self.usize_opt(path, m, "burn_in").unwrap_or(s.burn_in);
        if let Some(g) = m.get("sample_sizes") {
            s.sample_sizes = self.list(&join(path, "sample_sizes"), g, |c, p, x| match x.as_u64() {
                Some(v) if v > 0 => Some(v as usize),
                _ => {
                    c.err(p, format!("expected a positive integer, got {x}"));
                    None
                }
            })?;
        }
        if let Some(ms) = m.get("methods") {
            s.methods = self.list(&join(path, "methods"), ms, |c, p, x| {
                let mm = c.object(p, x, &["engine", "samples"])?;
                let engine = c.choice(p, mm, "engine", &[("mcmc", EngineTag::Mcmc), ("laplace", EngineTag::Laplace)]);
                match (engine, c.usize_opt(p, mm, "samples")) {
                    (Some(EngineTag::Mcmc), Some(k)) => Some(Method::mcmc(k)),
                    (Some(EngineTag::Laplace), None) => Some(Method::laplace()),
                    (Some(EngineTag::Mcmc), None) => {
                        c.err(p, "mcmc needs samples");
                        None
                    }
                    (Some(EngineTag::Laplace), Some(_)) => {
                        c.err(p, "laplace takes no samples");
                        None
                    }
                    (None, _) => {
                        if !mm.contains_key("engine") {
                            c.err(&join(p, "engine"), "missing required field");
                        }
                        None
                    }
                }
            })?;
        }
        self.check(path, s.validate())?;
        Some(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Marginal;

    fn table1_average() -> Value {
        json!({
            "convention": "shape-rate",
            "outcome": "continuous",
            "design": {"clusters": 150, "total_n": 150},
            "design_prior": {
                "lambda": {"mean": 345, "sd": 177.9},
                "delta": {"mean": 90, "sd": 44.5},
                "sigma": {"shape": 9.68, "rate": 0.07},
                "rho": {"a": 0.09, "b": 2.1},
                "nu": {"shape": 0.48, "rate": 0.16}
            }
        })
    }

    #[test]
    fn parses_expert_average_prior() {
        let s = Scenario::from_value(&table1_average()).unwrap();
        let DesignPrior::Continuous(p) = s.design_prior.unwrap() else { panic!() };
        assert_eq!(p.delta.mean(), 90.0);
        assert_eq!(p.sigma, Param::Random(GammaSpec::new(9.68, 0.07).unwrap()));
    }

    #[test]
    fn every_error_is_reported() {
        let mut v = table1_average();
        v["design_prior"]["delta"]["sd"] = json!(-1);
        v["design_prior"]["rho"]["extra"] = json!(1);
        v["bogus"] = json!(true);
        let Err(Error::Config(errs)) = Scenario::from_value(&v) else { panic!() };
        assert_eq!(errs.len(), 3, "{errs:?}");
        assert!(errs.iter().any(|e| e.starts_with("design_prior.delta")));
        assert!(errs.iter().any(|e| e.starts_with("design_prior.rho.extra")));
        assert!(errs.iter().any(|e| e.starts_with("bogus")));
    }

    #[test]
    fn convention_is_mandatory() {
        let mut v = table1_average();
        v.as_object_mut().unwrap().remove("convention");
        let Err(Error::Config(errs)) = Scenario::from_value(&v) else { panic!() };
        assert!(errs[0].starts_with("convention"));
    }

    #[test]
    fn wrong_parameter_name_for_convention() {
        let mut v = table1_average();
        v["convention"] = json!("shape-scale");
        assert!(Scenario::from_value(&v).is_err());
    }

    #[test]
    fn shape_scale_converts_once_and_round_trips() {
        let mut v = table1_average();
        v["convention"] = json!("shape-scale");
        v["design_prior"]["sigma"] = json!({"shape": 9.68, "scale": 4.0});
        v["design_prior"]["nu"] = json!({"shape": 0.48, "scale": 0.16});
        let s = Scenario::from_value(&v).unwrap();
        let DesignPrior::Continuous(p) = s.design_prior.as_ref().unwrap() else { panic!() };
        assert_eq!(p.sigma.mean(), 9.68 * 4.0);
        assert_eq!(p.nu, Param::Random(GammaSpec::new(0.48, 1.0 / 0.16).unwrap()));
        // The echo is shape-rate; loading it again must not convert a second time.
        let again = Scenario::from_value(&s.resolved()).unwrap();
        assert_eq!(again.design_prior, s.design_prior);
        assert_eq!(again.resolved(), s.resolved());
    }

    #[test]
    fn power_section() {
        let v = json!({
            "convention": "shape-rate",
            "outcome": "binary",
            "power": {"p1": 0.132, "p2": 0.216, "rho": 0.01, "clusters": 150, "target": 0.9}
        });
        let s = Scenario::from_value(&v).unwrap();
        let Some(PowerSection::Binary { inputs, target }) = s.power.clone() else { panic!() };
        assert_eq!(target, Some(0.9));
        assert_eq!(inputs.sided, Sided::Two);
        assert_eq!(inputs.n_convention, NConvention::PerArm);
        let again = Scenario::from_value(&s.resolved()).unwrap();
        assert_eq!(again.resolved(), s.resolved());
    }

    #[test]
    fn bench_section_and_fixed_values() {
        let v = json!({
            "convention": "shape-rate",
            "outcome": "continuous",
            "design_prior": {
                "lambda": {"fixed": 0}, "delta": {"fixed": 0.3}, "sigma": {"fixed": 1},
                "rho": {"fixed": 0.05}, "nu": {"fixed": 0}
            },
            "analysis_prior": {"outcome_scale": 2, "tau_b": {"fixed": 4}},
            "bench": {"scenarios": [{"id": "a", "outcome": "binary", "clusters": 8, "rho": 0.05,
                "methods": [{"engine": "mcmc", "samples": 100}, {"engine": "laplace"}], "reps": 2}]}
        });
        let s = Scenario::from_value(&v).unwrap();
        assert_eq!(s.bench[0].methods.len(), 2);
        let a = s.analysis_prior().unwrap();
        assert_eq!(a.lambda.sd(), 200.0);
        assert_eq!(a.tau_b, Param::fixed(4.0));
        let again = Scenario::from_value(&s.resolved()).unwrap();
        assert_eq!(again.resolved(), s.resolved());
    }
}
