//! Nested Laplace inference.
//!
//! Given the log-precisions `theta`, the latent field `(lambda, delta, c)` is
//! approximated by a Gaussian at its conditional mode. For continuous
//! outcomes that Gaussian is exact. The hyperparameters are integrated out on
//! a regular grid around the mode of the approximate hyper-posterior, and
//! the marginal of `delta` is the resulting Gaussian mixture.

mod arrow;
mod mixture;

pub use arrow::{Arrow, ArrowFactor};
pub use mixture::{Component, DeltaMixture};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dist::{logistic, softplus};
use crate::error::{Error, Result};
use crate::model::{
    AnalysisPrior, EngineTag, GammaSpec, OutcomeKind, Param, PosteriorSummary, QuantilePoint,
    SummaryRequest, TrialData,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaplaceConfig {
    /// Grid points per free hyperparameter; must be odd.
    pub grid_points: usize,
    /// Grid spacing in standardised units.
    pub grid_step: f64,
    /// Points whose log-weight falls this far below the mode are dropped.
    pub prune_drop: f64,
    /// Finite-difference step on the log-precision scale.
    pub fd_step: f64,
    /// Gradient sup-norm at which the latent Newton iteration stops.
    pub newton_tol: f64,
    pub max_newton: usize,
    pub max_hyper_iter: usize,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        Self {
            grid_points: 5,
            grid_step: 1.0,
            prune_drop: 10.0,
            fd_step: 1e-4,
            newton_tol: 1e-8,
            max_newton: 100,
            max_hyper_iter: 100,
        }
    }
}

impl LaplaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_points == 0 || self.grid_points % 2 == 0 {
            return Err(Error::domain(format!(
                "grid_points must be odd and positive, got {}",
                self.grid_points
            )));
        }
        for (name, v) in [
            ("grid_step", self.grid_step),
            ("prune_drop", self.prune_drop),
            ("fd_step", self.fd_step),
            ("newton_tol", self.newton_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_newton == 0 || self.max_hyper_iter == 0 {
            return Err(Error::domain("iteration caps must be positive"));
        }
        Ok(())
    }
}

/// Precisions at which the latent field is approximated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hyperparameters {
    pub tau_b: f64,
    /// Within-cluster precision (continuous only).
    pub tau_w: Option<f64>,
}

/// Gaussian approximation of the latent field at fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct LatentMode {
    /// `(lambda, delta, c_1..c_J)` at the mode.
    pub x: Vec<f64>,
    /// Newton steps taken.
    pub iterations: usize,
    /// Log joint density at the mode, up to a constant.
    pub log_joint: f64,
    pub factor: ArrowFactor,
}

impl LatentMode {
    pub fn delta_mean(&self) -> f64 {
        self.x[1]
    }

    pub fn delta_sd(&self) -> f64 {
        self.factor.fixed_covariance()[1][1].sqrt()
    }
}

/// Per-cluster sufficient statistics plus the prior, in the form the
/// Newton iterations need.
struct Problem<'a> {
    kind: OutcomeKind,
    n: Vec<f64>,
    ybar: Vec<f64>,
    succ: Vec<f64>,
    x: Vec<f64>,
    within: f64,
    n_total: f64,
    prior: &'a AnalysisPrior,
}

impl<'a> Problem<'a> {
    fn new(data: &TrialData, prior: &'a AnalysisPrior) -> Result<Self> {
        prior.validate_for(data.kind())?;
        crate::mcmc::require_both_arms(data)?;
        let st = data.stats();
        let j = st.clusters();
        Ok(Self {
            kind: data.kind(),
            succ: (0..j).map(|k| st.sum(k)).collect(),
            x: st.treated.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect(),
            within: st.within_ss.iter().sum(),
            n_total: st.total(),
            n: st.n,
            ybar: st.mean,
            prior,
        })
    }

    fn clusters(&self) -> usize {
        self.n.len()
    }

    fn eta(&self, lat: &[f64], k: usize) -> f64 {
        lat[0] + self.x[k] * lat[1] + lat[2 + k]
    }

    fn latent_prior(&self, lat: &[f64], h: &Hyperparameters) -> f64 {
        let (l, d) = (&self.prior.lambda, &self.prior.delta);
        let c_ss: f64 = lat[2..].iter().map(|c| c * c).sum();
        0.5 * self.clusters() as f64 * h.tau_b.ln()
            - 0.5 * h.tau_b * c_ss
            - 0.5 * l.precision() * (lat[0] - l.mean()).powi(2)
            - 0.5 * d.precision() * (lat[1] - d.mean()).powi(2)
    }

    fn log_joint(&self, lat: &[f64], h: &Hyperparameters) -> f64 {
        let mut ll = 0.0;
        match self.kind {
            OutcomeKind::Continuous => {
                let tw = h.tau_w.expect("continuous");
                let mut ss = self.within;
                for k in 0..self.clusters() {
                    ss += self.n[k] * (self.ybar[k] - self.eta(lat, k)).powi(2);
                }
                ll += 0.5 * self.n_total * tw.ln() - 0.5 * tw * ss;
            }
            OutcomeKind::Binary => {
                for k in 0..self.clusters() {
                    let e = self.eta(lat, k);
                    ll += self.succ[k] * e - self.n[k] * softplus(e);
                }
            }
        }
        ll + self.latent_prior(lat, h)
    }

    /// Log joint, its gradient, and the negative Hessian.
    fn expand(&self, lat: &[f64], h: &Hyperparameters) -> (f64, Vec<f64>, Arrow) {
        let j = self.clusters();
        let (l, d) = (&self.prior.lambda, &self.prior.delta);
        let mut r = vec![0.0; j];
        let mut w = vec![0.0; j];
        for k in 0..j {
            let e = self.eta(lat, k);
            match self.kind {
                OutcomeKind::Continuous => {
                    let tw = h.tau_w.expect("continuous");
                    r[k] = tw * self.n[k] * (self.ybar[k] - e);
                    w[k] = tw * self.n[k];
                }
                OutcomeKind::Binary => {
                    let p = logistic(e);
                    r[k] = self.succ[k] - self.n[k] * p;
                    w[k] = self.n[k] * p * (1.0 - p);
                }
            }
        }
        let mut g = vec![0.0; j + 2];
        g[0] = -l.precision() * (lat[0] - l.mean()) + r.iter().sum::<f64>();
        g[1] = -d.precision() * (lat[1] - d.mean())
            + r.iter().zip(&self.x).map(|(r, x)| r * x).sum::<f64>();
        for k in 0..j {
            g[2 + k] = -h.tau_b * lat[2 + k] + r[k];
        }
        let sw: f64 = w.iter().sum();
        let sxw: f64 = w.iter().zip(&self.x).map(|(w, x)| w * x).sum();
        let q = Arrow {
            a: [[l.precision() + sw, sxw], [sxw, d.precision() + sxw]],
            b: w.iter().zip(&self.x).map(|(w, x)| [*w, x * w]).collect(),
            d: w.iter().map(|w| h.tau_b + w).collect(),
        };
        (self.log_joint(lat, h), g, q)
    }

    /// Arm-mean start on the link scale, cluster effects at zero.
    fn initial_latent(&self) -> Vec<f64> {
        let arm = |t: f64| {
            let (mut num, mut den) = (0.0, 0.0);
            for k in 0..self.clusters() {
                if self.x[k] == t {
                    num += match self.kind {
                        OutcomeKind::Continuous => self.n[k] * self.ybar[k],
                        OutcomeKind::Binary => self.succ[k],
                    };
                    den += self.n[k];
                }
            }
            match self.kind {
                OutcomeKind::Continuous => num / den,
                OutcomeKind::Binary => ((num + 0.5) / (den - num + 0.5)).ln(),
            }
        };
        let l = arm(0.0);
        let mut x = vec![0.0; self.clusters() + 2];
        x[0] = l;
        x[1] = arm(1.0) - l;
        x
    }

    fn mode(&self, h: &Hyperparameters, start: &[f64], cfg: &LaplaceConfig) -> Result<LatentMode> {
        let mut x = start.to_vec();
        let mut trace = Vec::new();
        for iter in 0..=cfg.max_newton {
            let (f, g, q) = self.expand(&x, h);
            let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            trace.push(format!("iter {iter}: log joint {f:.10e}, |grad| {gmax:.3e}"));
            let factor = q.factor()?;
            if gmax < cfg.newton_tol {
                return Ok(LatentMode { x, iterations: iter, log_joint: f, factor });
            }
            if !f.is_finite() || iter == cfg.max_newton {
                break;
            }
            let step = factor.solve(&g);
            let smax = step.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let xmax = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if smax <= 1e-13 * (1.0 + xmax) {
                // Rounding floor: the gradient cannot get any smaller.
                return Ok(LatentMode { x, iterations: iter, log_joint: f, factor });
            }
            let mut t = 1.0;
            let accepted = loop {
                let cand: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + t * s).collect();
                let fc = self.log_joint(&cand, h);
                if fc.is_finite() && fc >= f - 1e-12 * f.abs().max(1.0) {
                    break Some(cand);
                }
                t *= 0.5;
                if t < 1e-12 {
                    break None;
                }
            };
            match accepted {
                Some(c) => x = c,
                None => {
                    trace.push("step-halving failed to increase the log joint".into());
                    break;
                }
            }
        }
        Err(Error::Engine {
            message: format!("latent Newton did not converge at {h:?}"),
            trace,
        })
    }
}

/// Conditional mode and Gaussian approximation of the latent field for
/// fixed precisions. `start` defaults to arm means with zero cluster effects.
pub fn latent_mode(
    data: &TrialData,
    hyper: &Hyperparameters,
    prior: &AnalysisPrior,
    start: Option<&[f64]>,
    cfg: &LaplaceConfig,
) -> Result<LatentMode> {
    let p = Problem::new(data, prior)?;
    check_hyper(&p, hyper)?;
    let init = p.initial_latent();
    let start = start.unwrap_or(&init);
    if start.len() != init.len() {
        return Err(Error::domain(format!(
            "start has {} entries, expected {}",
            start.len(),
            init.len()
        )));
    }
    p.mode(hyper, start, cfg)
}

fn check_hyper(p: &Problem, h: &Hyperparameters) -> Result<()> {
    let ok = |v: f64| v > 0.0 && v.is_finite();
    let w_ok = match (p.kind, h.tau_w) {
        (OutcomeKind::Continuous, Some(w)) => ok(w),
        (OutcomeKind::Binary, None) => true,
        _ => false,
    };
    if !ok(h.tau_b) || !w_ok {
        return Err(Error::domain(format!("invalid hyperparameters {h:?} for {:?} data", p.kind)));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum Coord {
    Free(GammaSpec),
    Fixed(f64),
}

impl Coord {
    fn of(p: &Param<GammaSpec>) -> Self {
        match p {
            Param::Random(g) => Coord::Free(*g),
            Param::Fixed { fixed } => Coord::Fixed(*fixed),
        }
    }
}

/// Hyperparameter space: the free coordinates are log-precisions.
struct Space {
    coords: Vec<Coord>,
}

impl Space {
    fn new(prior: &AnalysisPrior) -> Self {
        let mut coords = vec![Coord::of(&prior.tau_b)];
        if let Some(w) = &prior.tau_w {
            coords.push(Coord::of(w));
        }
        Self { coords }
    }

    fn free(&self) -> Vec<usize> {
        (0..self.coords.len())
            .filter(|&i| matches!(self.coords[i], Coord::Free(_)))
            .collect()
    }

    fn hyper(&self, theta: &[f64]) -> Hyperparameters {
        let mut it = theta.iter();
        let mut vals = self.coords.iter().map(|c| match c {
            Coord::Free(_) => it.next().expect("theta length").exp(),
            Coord::Fixed(v) => *v,
        });
        let tau_b = vals.next().expect("tau_b");
        Hyperparameters { tau_b, tau_w: vals.next() }
    }

    /// Gamma prior density of each free precision, on the log scale
    /// (Jacobian included).
    fn log_prior(&self, theta: &[f64]) -> f64 {
        let mut it = theta.iter();
        self.coords
            .iter()
            .filter_map(|c| match c {
                Coord::Free(g) => {
                    let t = *it.next().expect("theta length");
                    Some(g.shape() * t - g.rate() * t.exp())
                }
                Coord::Fixed(_) => None,
            })
            .sum()
    }
}

/// One hyperparameter configuration kept for integration.
#[derive(Debug, Clone)]
pub struct HyperPoint {
    /// Free log-precision coordinates.
    pub theta: Vec<f64>,
    pub hyper: Hyperparameters,
    /// Unnormalised log hyper-posterior.
    pub log_weight: f64,
    /// Normalised integration weight.
    pub weight: f64,
    pub latent: LatentMode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridDiagnostics {
    pub free_dims: usize,
    pub points_total: usize,
    pub points_kept: usize,
    /// Hyper-posterior mode as log-precisions.
    pub hyper_mode: Vec<f64>,
    pub hyper_iterations: usize,
    /// Latent Newton steps summed over every evaluation.
    pub newton_iterations: usize,
    pub warnings: Vec<String>,
}

pub struct HyperGrid {
    pub points: Vec<HyperPoint>,
    pub diagnostics: GridDiagnostics,
}

struct Evaluator<'a, 'b> {
    problem: &'a Problem<'b>,
    space: Space,
    cfg: &'a LaplaceConfig,
    newton_iterations: usize,
}

const THETA_BOUND: f64 = 40.0;

impl Evaluator<'_, '_> {
    /// Laplace approximation of the log hyper-posterior at `theta`.
    fn eval(&mut self, theta: &[f64], start: &[f64]) -> Result<(f64, LatentMode)> {
        let h = self.space.hyper(theta);
        let m = self.problem.mode(&h, start, self.cfg)?;
        self.newton_iterations += m.iterations;
        let lw = m.log_joint + self.space.log_prior(theta) - 0.5 * m.factor.log_det();
        if !lw.is_finite() {
            return Err(Error::Engine {
                message: "non-finite hyper-posterior".into(),
                trace: vec![format!("theta {theta:?}")],
            });
        }
        Ok((lw, m))
    }

    fn value(&mut self, theta: &[f64], start: &[f64]) -> Result<f64> {
        Ok(self.eval(theta, start)?.0)
    }

    /// Central finite-difference gradient and Hessian.
    fn derivatives(&mut self, theta: &[f64], f0: f64, start: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let d = theta.len();
        let h = self.cfg.fd_step;
        let shifted = |i: usize, si: f64, k: usize, sk: f64| {
            let mut t = theta.to_vec();
            t[i] += si * h;
            if k != usize::MAX {
                t[k] += sk * h;
            }
            t
        };
        let mut g = vec![0.0; d];
        let mut hess = vec![vec![0.0; d]; d];
        for i in 0..d {
            let fp = self.value(&shifted(i, 1.0, usize::MAX, 0.0), start)?;
            let fm = self.value(&shifted(i, -1.0, usize::MAX, 0.0), start)?;
            g[i] = (fp - fm) / (2.0 * h);
            hess[i][i] = (fp - 2.0 * f0 + fm) / (h * h);
        }
        for i in 0..d {
            for k in i + 1..d {
                let fpp = self.value(&shifted(i, 1.0, k, 1.0), start)?;
                let fpm = self.value(&shifted(i, 1.0, k, -1.0), start)?;
                let fmp = self.value(&shifted(i, -1.0, k, 1.0), start)?;
                let fmm = self.value(&shifted(i, -1.0, k, -1.0), start)?;
                hess[i][k] = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
                hess[k][i] = hess[i][k];
            }
        }
        Ok((g, hess))
    }
}

/// Rough moment-based starting point for the free log-precisions.
fn initial_theta(p: &Problem, space: &Space) -> Vec<f64> {
    let j = p.clusters();
    let arm_mean = |t: f64, v: &dyn Fn(usize) -> f64| {
        let idx: Vec<usize> = (0..j).filter(|&k| p.x[k] == t).collect();
        idx.iter().map(|&k| v(k)).sum::<f64>() / idx.len() as f64
    };
    let (level, noise): (Box<dyn Fn(usize) -> f64>, f64) = match p.kind {
        OutcomeKind::Continuous => {
            let sw2 = if p.n_total > j as f64 && p.within > 0.0 {
                p.within / (p.n_total - j as f64)
            } else {
                1.0
            };
            let hm = (0..j).map(|k| 1.0 / p.n[k]).sum::<f64>() / j as f64;
            (Box::new(|k| p.ybar[k]), sw2 * hm)
        }
        OutcomeKind::Binary => {
            let logit = |k: usize| ((p.succ[k] + 0.5) / (p.n[k] - p.succ[k] + 0.5)).ln();
            let noise = (0..j)
                .map(|k| {
                    let q = (p.succ[k] + 0.5) / (p.n[k] + 1.0);
                    1.0 / (p.n[k] * q * (1.0 - q))
                })
                .sum::<f64>()
                / j as f64;
            (Box::new(logit), noise)
        }
    };
    let m0 = arm_mean(0.0, &*level);
    let m1 = arm_mean(1.0, &*level);
    let spread = (0..j)
        .map(|k| (level(k) - if p.x[k] > 0.0 { m1 } else { m0 }).powi(2))
        .sum::<f64>()
        / (j.saturating_sub(2).max(1)) as f64;
    let vb = (spread - noise).max(0.05 * noise.max(1e-12));
    let tau_b = (1.0 / vb).clamp(1e-6, 1e6);
    let tau_w = match p.kind {
        OutcomeKind::Continuous if p.n_total > j as f64 && p.within > 0.0 => {
            (p.n_total - j as f64) / p.within
        }
        _ => 1.0,
    };
    let mut theta = Vec::new();
    for (i, c) in space.coords.iter().enumerate() {
        if matches!(c, Coord::Free(_)) {
            theta.push(if i == 0 { tau_b.ln() } else { tau_w.ln() });
        }
    }
    theta
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Solves `H s = -g` for a negative-definite `H` of size 1 or 2; `None`
/// when `H` is not negative definite.
fn newton_direction(h: &[Vec<f64>], g: &[f64]) -> Option<Vec<f64>> {
    match g.len() {
        1 => (h[0][0] < 0.0).then(|| vec![-g[0] / h[0][0]]),
        2 => {
            let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
            if !(h[0][0] < 0.0 && det > 0.0) {
                return None;
            }
            Some(vec![
                -(h[1][1] * g[0] - h[0][1] * g[1]) / det,
                -(-h[1][0] * g[0] + h[0][0] * g[1]) / det,
            ])
        }
        _ => None,
    }
}

/// Newton step, or a Newton step on `H - mu I` when `H` is not negative
/// definite. A plain gradient step is badly scaled when one precision is
/// sharply identified and the other sits on a flat ridge.
fn ascent_direction(h: &[Vec<f64>], g: &[f64]) -> Vec<f64> {
    if let Some(s) = newton_direction(h, g) {
        return s;
    }
    let top = match h.len() {
        1 => h[0][0],
        2 => {
            let half_trace = 0.5 * (h[0][0] + h[1][1]);
            let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
            half_trace + (half_trace * half_trace - det).max(0.0).sqrt()
        }
        _ => return g.to_vec(),
    };
    let scale = h.iter().enumerate().map(|(i, r)| r[i].abs()).fold(1.0, f64::max);
    let mu = top.max(0.0) + 1e-3 * scale;
    let shifted: Vec<Vec<f64>> = h
        .iter()
        .enumerate()
        .map(|(i, r)| r.iter().enumerate().map(|(k, v)| if i == k { v - mu } else { *v }).collect())
        .collect();
    newton_direction(&shifted, g).unwrap_or_else(|| g.to_vec())
}

/// Lower Cholesky factor of `(-H)^-1` (the standardising transform), with a
/// diagonal fallback when `H` is not negative definite.
fn standardiser(h: &[Vec<f64>], warnings: &mut Vec<String>) -> Vec<Vec<f64>> {
    let d = h.len();
    let neg: Vec<Vec<f64>> = h.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let cov = match d {
        1 if neg[0][0] > 0.0 => Some(vec![vec![1.0 / neg[0][0]]]),
        2 => {
            let det = neg[0][0] * neg[1][1] - neg[0][1] * neg[1][0];
            (neg[0][0] > 0.0 && det > 0.0).then(|| {
                vec![
                    vec![neg[1][1] / det, -neg[0][1] / det],
                    vec![-neg[1][0] / det, neg[0][0] / det],
                ]
            })
        }
        _ => None,
    };
    let cov = cov.unwrap_or_else(|| {
        warnings.push("hyper-posterior curvature not negative definite at the mode; using a diagonal grid".into());
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|k| if i == k { if neg[i][i] > 0.0 { 1.0 / neg[i][i] } else { 1.0 } } else { 0.0 })
                    .collect()
            })
            .collect()
    });
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for k in 0..=i {
            let s: f64 = (0..k).map(|m| l[i][m] * l[k][m]).sum();
            if i == k {
                l[i][i] = (cov[i][i] - s).max(0.0).sqrt();
            } else {
                l[i][k] = (cov[i][k] - s) / l[k][k];
            }
        }
    }
    l
}

/// Locates the hyper-posterior mode and evaluates the integration grid.
pub fn hyper_grid(data: &TrialData, prior: &AnalysisPrior, cfg: &LaplaceConfig) -> Result<HyperGrid> {
    cfg.validate()?;
    let problem = Problem::new(data, prior)?;
    build_grid(&problem, cfg)
}

fn build_grid(problem: &Problem, cfg: &LaplaceConfig) -> Result<HyperGrid> {
    let space = Space::new(problem.prior);
    let free = space.free();
    let d = free.len();
    let mut ev = Evaluator { problem, space, cfg, newton_iterations: 0 };
    let mut warnings = Vec::new();
    let mut theta = initial_theta(problem, &ev.space);
    let x0 = problem.initial_latent();
    let (mut f, mut mode) = ev.eval(&theta, &x0)?;

    let mut iters = 0;
    let mut trace = Vec::new();
    let mut converged = d == 0;
    let mut hess = vec![vec![0.0; d]; d];
    while !converged {
        if iters == cfg.max_hyper_iter {
            return Err(Error::Engine {
                message: "hyper-posterior mode search did not converge".into(),
                trace,
            });
        }
        iters += 1;
        let start = mode.x.clone();
        let (g, h) = ev.derivatives(&theta, f, &start)?;
        hess = h;
        trace.push(format!("iter {iters}: theta {theta:?}, value {f:.10e}, grad {g:?}"));
        let mut step = ascent_direction(&hess, &g);
        let cap = 2.0;
        let smax = sup(&step);
        if smax > cap {
            step.iter_mut().for_each(|s| *s *= cap / smax);
        }
        if sup(&step) < 1e-6 && newton_direction(&hess, &g).is_some() {
            break;
        }
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = theta
                .iter()
                .zip(&step)
                .map(|(a, s)| (a + t * s).clamp(-THETA_BOUND, THETA_BOUND))
                .collect();
            let (fc, mc) = ev.eval(&cand, &start)?;
            if fc >= f - 1e-12 * f.abs().max(1.0) {
                let moved = sup(&cand.iter().zip(&theta).map(|(a, b)| a - b).collect::<Vec<_>>());
                theta = cand;
                f = fc;
                mode = mc;
                if moved < 1e-7 {
                    converged = true;
                }
                break;
            }
            t *= 0.5;
            if t < 1e-8 {
                // No ascent along the step: we are at the mode to working precision.
                converged = true;
                break;
            }
        }
    }
    if d > 0 {
        let start = mode.x.clone();
        hess = ev.derivatives(&theta, f, &start)?.1;
        if theta.iter().any(|t| t.abs() >= THETA_BOUND) {
            warnings.push("hyper-posterior mode on the log-precision bound".into());
        }
    }

    let half = (cfg.grid_points / 2) as i64;
    let offsets: Vec<Vec<f64>> = if d == 0 || cfg.grid_points == 1 {
        vec![vec![0.0; d]]
    } else {
        let l = standardiser(&hess, &mut warnings);
        let mut zs: Vec<Vec<i64>> = vec![vec![]];
        for _ in 0..d {
            zs = zs
                .into_iter()
                .flat_map(|z| (-half..=half).map(move |k| [z.clone(), vec![k]].concat()))
                .collect();
        }
        zs.into_iter()
            .map(|z| {
                (0..d)
                    .map(|i| (0..=i).map(|k| l[i][k] * z[k] as f64 * cfg.grid_step).sum())
                    .collect()
            })
            .collect()
    };

    let start = mode.x.clone();
    let mut raw = Vec::with_capacity(offsets.len());
    for off in &offsets {
        let th: Vec<f64> = theta.iter().zip(off).map(|(a, b)| a + b).collect();
        if sup(off) == 0.0 {
            raw.push((th, f, mode.clone()));
        } else {
            let (lw, m) = ev.eval(&th, &start)?;
            raw.push((th, lw, m));
        }
    }
    let top = raw.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let total = raw.len();
    raw.retain(|r| r.1 >= top - cfg.prune_drop);
    let z: f64 = raw.iter().map(|r| (r.1 - top).exp()).sum();
    let points: Vec<HyperPoint> = raw
        .into_iter()
        .map(|(th, lw, m)| HyperPoint {
            hyper: ev.space.hyper(&th),
            theta: th,
            log_weight: lw,
            weight: (lw - top).exp() / z,
            latent: m,
        })
        .collect();
    Ok(HyperGrid {
        diagnostics: GridDiagnostics {
            free_dims: d,
            points_total: total,
            points_kept: points.len(),
            hyper_mode: theta,
            hyper_iterations: iters,
            newton_iterations: ev.newton_iterations,
            warnings,
        },
        points,
    })
}

/// Engine output: the usual summary plus the mixture and grid diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct LaplaceFit {
    pub summary: PosteriorSummary,
    pub mixture: DeltaMixture,
    pub diagnostics: GridDiagnostics,
}

/// Posterior summary of the treatment effect by nested Laplace
/// approximation. Deterministic given its inputs.
pub fn infer_laplace(
    data: &TrialData,
    prior: &AnalysisPrior,
    cfg: &LaplaceConfig,
    request: &SummaryRequest,
) -> Result<LaplaceFit> {
    let start = Instant::now();
    request.validate()?;
    let grid = hyper_grid(data, prior, cfg)?;
    let mixture = DeltaMixture::new(
        grid.points
            .iter()
            .map(|p| Component {
                weight: p.weight,
                mean: p.latent.delta_mean(),
                sd: p.latent.delta_sd(),
            })
            .collect(),
    )?;
    let quantiles = request
        .levels
        .iter()
        .map(|&level| Ok(QuantilePoint { level, value: mixture.quantile(level)? }))
        .collect::<Result<Vec<_>>>()?;
    let mut summary = PosteriorSummary::from_quantiles(
        quantiles,
        mixture.tail(request.margin, request.direction),
        request,
        EngineTag::Laplace,
        None,
    );
    summary.warnings = grid.diagnostics.warnings.clone();
    summary.seconds = start.elapsed().as_secs_f64();
    Ok(LaplaceFit { summary, mixture, diagnostics: grid.diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::norm_quantile;
    use crate::mcmc::{gibbs_continuous, sampler_binary, ChainConfig};
    use crate::model::{balanced_allocation, NormalSpec, SuccessRule, TrialDesign};
    use crate::simulate::{equal_cluster_sizes, replicate_rng, simulate_trial, ParamDraw};
    use crate::testing::dense_conjugate_posterior;
    use proptest::prelude::*;

    fn simulated(kind: OutcomeKind, seed: u64, j: usize, n: usize, sigma_b: f64) -> TrialData {
        let design = TrialDesign::new(j, n, SuccessRule::default()).unwrap();
        let draw = ParamDraw {
            lambda: if kind == OutcomeKind::Binary { -0.5 } else { 1.0 },
            delta: if kind == OutcomeKind::Binary { 0.6 } else { 2.0 },
            sigma_b,
            sigma_w: Some(1.5),
            p: vec![1.0 / j as f64; j],
            nu: 0.0,
            concentration: None,
            concentration_clamped: None,
        };
        simulate_trial(&draw, &design, &equal_cluster_sizes(n, j), kind, &mut replicate_rng(seed, 0)).unwrap()
    }

    fn pinned(tau_b: f64, tau_w: Option<f64>) -> AnalysisPrior {
        AnalysisPrior {
            lambda: NormalSpec::new(0.5, 10.0).unwrap(),
            delta: NormalSpec::new(0.0, 10.0).unwrap(),
            tau_b: Param::fixed(tau_b),
            tau_w: tau_w.map(Param::fixed),
        }
    }

    #[test]
    fn continuous_mode_is_the_gls_solution() {
        let data = simulated(OutcomeKind::Continuous, 3, 6, 48, 0.7);
        let prior = pinned(2.0, Some(0.4));
        let h = Hyperparameters { tau_b: 2.0, tau_w: Some(0.4) };
        let m = latent_mode(&data, &h, &prior, None, &LaplaceConfig::default()).unwrap();
        let (mean, cov) = dense_conjugate_posterior(&data, &prior, 2.0, 0.4);
        for i in 0..mean.len() {
            assert!((m.x[i] - mean[i]).abs() < 1e-10, "{i}: {} vs {}", m.x[i], mean[i]);
        }
        assert!((m.delta_sd().powi(2) - cov[(1, 1)]).abs() < 1e-10);
        assert!(m.iterations <= 2);
    }

    #[test]
    fn restart_at_mode_takes_no_steps() {
        for kind in [OutcomeKind::Continuous, OutcomeKind::Binary] {
            let data = simulated(kind, 5, 8, 400, 0.3);
            let tw = (kind == OutcomeKind::Continuous).then_some(0.5);
            let prior = pinned(4.0, tw);
            let h = Hyperparameters { tau_b: 4.0, tau_w: tw };
            let cfg = LaplaceConfig::default();
            let m = latent_mode(&data, &h, &prior, None, &cfg).unwrap();
            let again = latent_mode(&data, &h, &prior, Some(&m.x), &cfg).unwrap();
            assert_eq!(again.iterations, 0);
        }
    }

    #[test]
    fn binary_lambda_matches_grid_search() {
        // One control and one treated cluster with the cluster effects pinned
        // near zero; lambda's mode depends on the control cluster alone
        // through the joint with delta, so brute force both.
        let arms = balanced_allocation(2);
        let (mut cl, mut y) = (Vec::new(), Vec::new());
        for (k, (succ, n)) in [(7, 30), (15, 30)].into_iter().enumerate() {
            for i in 0..n {
                cl.push(k);
                y.push(if i < succ { 1.0 } else { 0.0 });
            }
        }
        let data = TrialData::new(OutcomeKind::Binary, arms, cl, y).unwrap();
        let prior = pinned(1e12, None);
        let h = Hyperparameters { tau_b: 1e12, tau_w: None };
        let m = latent_mode(&data, &h, &prior, None, &LaplaceConfig::default()).unwrap();
        let lp = |l: f64, d: f64| {
            -0.5 * (l - 0.5f64).powi(2) / 100.0 - 0.5 * d * d / 100.0 + 7.0 * l - 30.0 * (1.0 + l.exp()).ln()
                + 15.0 * (l + d) - 30.0 * (1.0 + (l + d).exp()).ln()
        };
        let (mut best, mut arg) = (f64::NEG_INFINITY, (0.0, 0.0));
        let step = 1e-3;
        for a in -3000..1000 {
            for b in -1000..3000 {
                let (l, d) = (a as f64 * step, b as f64 * step);
                let v = lp(l, d);
                if v > best {
                    best = v;
                    arg = (l, d);
                }
            }
        }
        assert!((m.x[0] - arg.0).abs() < 1.5 * step, "{} vs {}", m.x[0], arg.0);
        assert!((m.x[1] - arg.1).abs() < 1.5 * step);
    }

    #[test]
    fn single_point_grid_collapses_to_gaussian() {
        let data = simulated(OutcomeKind::Continuous, 8, 4, 40, 0.5);
        let prior = AnalysisPrior::vague(OutcomeKind::Continuous, 1.0).unwrap();
        let cfg = LaplaceConfig { grid_points: 1, ..Default::default() };
        let fit = infer_laplace(&data, &prior, &cfg, &SummaryRequest::default()).unwrap();
        assert_eq!(fit.mixture.components().len(), 1);
        let c = fit.mixture.components()[0];
        for q in &fit.summary.quantiles {
            assert!((q.value - (c.mean + c.sd * norm_quantile(q.level))).abs() < 1e-12);
        }
    }

    #[test]
    fn pinned_precisions_give_conjugate_quantiles() {
        let data = simulated(OutcomeKind::Continuous, 9, 6, 60, 0.5);
        let prior = pinned(3.0, Some(0.5));
        let fit = infer_laplace(&data, &prior, &LaplaceConfig::default(), &SummaryRequest::default()).unwrap();
        let (mean, cov) = dense_conjugate_posterior(&data, &prior, 3.0, 0.5);
        for q in &fit.summary.quantiles {
            let want = mean[1] + cov[(1, 1)].sqrt() * norm_quantile(q.level);
            assert!((q.value - want).abs() < 1e-6);
        }
        assert_eq!(fit.diagnostics.points_kept, 1);
    }

    #[test]
    fn grid_conditionals_are_exact_for_gaussian_likelihood() {
        let data = simulated(OutcomeKind::Continuous, 10, 6, 90, 0.8);
        let prior = AnalysisPrior::vague(OutcomeKind::Continuous, 1.0).unwrap();
        let grid = hyper_grid(&data, &prior, &LaplaceConfig::default()).unwrap();
        assert_eq!(grid.diagnostics.free_dims, 2);
        assert!(grid.diagnostics.points_kept > 1);
        for p in &grid.points {
            let (mean, cov) = dense_conjugate_posterior(&data, &prior, p.hyper.tau_b, p.hyper.tau_w.unwrap());
            assert!((p.latent.delta_mean() - mean[1]).abs() < 1e-8);
            assert!((p.latent.delta_sd() - cov[(1, 1)].sqrt()).abs() < 1e-8);
        }
    }

    #[test]
    fn agrees_with_mcmc_on_a_moderate_trial() {
        for kind in [OutcomeKind::Continuous, OutcomeKind::Binary] {
            let data = simulated(kind, 12, 8, 800, 0.4);
            let prior = AnalysisPrior::vague(kind, 1.0).unwrap();
            let req = SummaryRequest::default();
            let lap = infer_laplace(&data, &prior, &LaplaceConfig::default(), &req).unwrap();
            let cfg = ChainConfig::new(20_000, 1_000, 1, 4).unwrap();
            let mc = match kind {
                OutcomeKind::Continuous => gibbs_continuous(&data, &prior, &cfg, &req).unwrap().1,
                OutcomeKind::Binary => sampler_binary(&data, &prior, &cfg, &req).unwrap().1,
            };
            let width = mc.quantile(0.975).unwrap() - mc.quantile(0.025).unwrap();
            let diff = (lap.summary.median().unwrap() - mc.median().unwrap()).abs();
            assert!(diff < 0.1 * width, "{kind:?}: {diff} vs width {width}");
        }
    }

    #[test]
    fn deterministic_output() {
        let data = simulated(OutcomeKind::Binary, 13, 12, 600, 0.3);
        let prior = AnalysisPrior::vague(OutcomeKind::Binary, 0.1).unwrap();
        let a = infer_laplace(&data, &prior, &LaplaceConfig::default(), &SummaryRequest::default()).unwrap();
        let b = infer_laplace(&data, &prior, &LaplaceConfig::default(), &SummaryRequest::default()).unwrap();
        assert_eq!(a.summary.quantiles, b.summary.quantiles);
        assert_eq!(a.mixture, b.mixture);
    }

    #[test]
    fn mode_search_crosses_a_flat_precision_ridge() {
        // Weak clustering on a large outcome scale: the cluster precision is
        // barely identified while the residual one is sharp.
        let design = TrialDesign::new(150, 564, SuccessRule::default()).unwrap();
        let prior = AnalysisPrior::vague(OutcomeKind::Continuous, 100.0).unwrap();
        for seed in 0..40 {
            let draw = ParamDraw {
                lambda: 300.0,
                delta: 30.0,
                sigma_b: 12.0,
                sigma_w: Some(119.4),
                p: vec![1.0 / 150.0; 150],
                nu: 0.0,
                concentration: None,
                concentration_clamped: None,
            };
            let sizes = equal_cluster_sizes(564, 150);
            let data = simulate_trial(&draw, &design, &sizes, OutcomeKind::Continuous, &mut replicate_rng(seed, 0)).unwrap();
            let grid = hyper_grid(&data, &prior, &LaplaceConfig::default());
            assert!(grid.is_ok(), "seed {seed}: {}", grid.err().map(|e| e.to_string()).unwrap_or_default());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn weights_are_normalised(seed in 0u64..500, j in 2usize..10, per in 3usize..30, binary in any::<bool>()) {
            let kind = if binary { OutcomeKind::Binary } else { OutcomeKind::Continuous };
            let data = simulated(kind, seed, j, j * per, 0.5);
            let prior = AnalysisPrior::vague(kind, 1.0).unwrap();
            let grid = hyper_grid(&data, &prior, &LaplaceConfig::default()).unwrap();
            let total: f64 = grid.points.iter().map(|p| p.weight).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(grid.points.iter().all(|p| p.weight > 0.0 && p.latent.delta_sd() > 0.0));
        }
    }
}
