//! Hypothetical trials: parameter draws from a design prior, cluster sizes
//! from the Dirichlet–multinomial model, and outcomes from the random
//! intercept (G)LMM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, StandardNormal};
use serde::Serialize;

use crate::dist::logistic;
use crate::error::{Error, Result};
use crate::model::{
    dirichlet_a_from_cv, variance_decompose, Arm, Clamp, DesignPrior, Marginal, OutcomeKind, SizeModel,
    TrialData, TrialDesign,
};

/// Counter-based stream for replicate `index` of a run seeded with `seed`.
/// Streams are independent of scheduling, so parallel and sequential runs
/// agree draw for draw.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Child stream forked from `parent`. Forking consumes a fixed amount of
/// the parent, so later forks stay aligned however many draws a child makes.
pub fn fork<R: Rng + ?Sized>(parent: &mut R) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    parent.fill_bytes(&mut seed);
    ChaCha8Rng::from_seed(seed)
}

/// One draw of the true parameters for a hypothetical trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamDraw {
    pub lambda: f64,
    pub delta: f64,
    pub sigma_b: f64,
    /// Within-cluster SD (continuous outcomes only).
    pub sigma_w: Option<f64>,
    /// Cluster recruitment probabilities.
    pub p: Vec<f64>,
    pub nu: f64,
    /// Dirichlet concentration used for `p`; `None` when `nu == 0` and
    /// clusters are exactly equal.
    pub concentration: Option<f64>,
    pub concentration_clamped: Option<Clamp>,
}

impl ParamDraw {
    pub fn equal_sizes(&self) -> bool {
        self.concentration.is_none()
    }
}

/// Draws every component of the design prior, each from its own forked
/// stream so that priors differing in one component share the others'
/// randomness.
pub fn draw_design_params<R: Rng + ?Sized>(
    prior: &DesignPrior,
    clusters: usize,
    size_model: &SizeModel,
    rng: &mut R,
) -> Result<ParamDraw> {
    let mut lambda_rng = fork(rng);
    let mut delta_rng = fork(rng);
    let mut scale_rng = fork(rng);
    let mut rho_rng = fork(rng);
    let mut nu_rng = fork(rng);
    let mut p_rng = fork(rng);

    let (lambda, delta, sigma_b, sigma_w) = match prior {
        DesignPrior::Continuous(c) => {
            let sigma = c.sigma.sample(&mut scale_rng);
            let rho = loop {
                let r = c.rho.sample(&mut rho_rng);
                if r < 1.0 {
                    break r;
                }
            };
            let (sb, sw) = variance_decompose(sigma, rho)?;
            (
                c.lambda.sample(&mut lambda_rng),
                c.delta.sample(&mut delta_rng),
                sb,
                Some(sw),
            )
        }
        DesignPrior::Binary(b) => {
            let sb = b.sigma_b.sample(&mut scale_rng);
            if !(sb >= 0.0) {
                return Err(Error::domain(format!("between-cluster SD draw {sb} is negative")));
            }
            (
                b.lambda.sample(&mut lambda_rng),
                b.delta.sample(&mut delta_rng),
                sb,
                None,
            )
        }
    };

    let nu = prior.nu().sample(&mut nu_rng);
    let (p, concentration, concentration_clamped) = if nu == 0.0 {
        (vec![1.0 / clusters as f64; clusters], None, None)
    } else {
        let a = dirichlet_a_from_cv(nu, clusters, size_model)?;
        (symmetric_dirichlet(a.value, clusters, &mut p_rng), Some(a.value), a.clamped)
    };

    Ok(ParamDraw {
        lambda,
        delta,
        sigma_b,
        sigma_w,
        p,
        nu,
        concentration,
        concentration_clamped,
    })
}

/// Symmetric Dirichlet(a) via normalised gammas, in log space so that tiny
/// concentrations do not underflow every component to zero.
pub fn symmetric_dirichlet<R: Rng + ?Sized>(a: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let log_g: Vec<f64> = if a >= 1.0 {
        let g = Gamma::new(a, 1.0).expect("positive concentration");
        (0..k).map(|_| g.sample(rng).ln()).collect()
    } else {
        // G(a) = G(a + 1) * U^(1/a)
        let g = Gamma::new(a + 1.0, 1.0).expect("positive concentration");
        (0..k)
            .map(|_| {
                let u: f64 = rng.random();
                g.sample(rng).ln() + u.ln() / a
            })
            .collect()
    };
    let max = log_g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_g.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Multinomial(n, p) by sequential conditional binomials.
pub fn multinomial<R: Rng + ?Sized>(n: usize, p: &[f64], rng: &mut R) -> Vec<usize> {
    let mut out = vec![0; p.len()];
    let mut left = n as u64;
    let mut mass = 1.0;
    for (j, &pj) in p.iter().enumerate() {
        if left == 0 {
            break;
        }
        if j + 1 == p.len() {
            out[j] = left as usize;
            break;
        }
        let q = if mass > 0.0 { (pj / mass).clamp(0.0, 1.0) } else { 0.0 };
        let x = Binomial::new(left, q).expect("probability in [0, 1]").sample(rng);
        out[j] = x as usize;
        left -= x;
        mass -= pj;
    }
    out
}

/// Cluster sizes from Multinomial(n, p) with no empty cluster.
///
/// Draws with an empty cluster are redrawn up to `retry_cap` times; after
/// that each empty cluster receives one individual from the currently
/// largest cluster.
pub fn draw_cluster_sizes<R: Rng + ?Sized>(
    n: usize,
    p: &[f64],
    retry_cap: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let j = p.len();
    if j == 0 {
        return Err(Error::DegenerateDesign("no clusters".into()));
    }
    let total: f64 = p.iter().sum();
    if p.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain("cluster probabilities are not a simplex"));
    }
    if n < j {
        return Err(Error::DegenerateDesign(format!(
            "{n} individuals cannot fill {j} clusters"
        )));
    }
    let mut sizes = multinomial(n, p, rng);
    for _ in 0..retry_cap {
        if sizes.iter().all(|&s| s > 0) {
            return Ok(sizes);
        }
        sizes = multinomial(n, p, rng);
    }
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let largest = (0..j).max_by_key(|&k| (sizes[k], std::cmp::Reverse(k))).unwrap();
        sizes[largest] -= 1;
        sizes[empty] += 1;
    }
    Ok(sizes)
}

/// Sizes as equal as possible; the remainder goes to the first clusters.
pub fn equal_cluster_sizes(n: usize, clusters: usize) -> Vec<usize> {
    let base = n / clusters;
    let extra = n % clusters;
    (0..clusters).map(|j| base + usize::from(j < extra)).collect()
}

/// Sizes for a parameter draw: exact equal split when the draw has no
/// size variation, otherwise Dirichlet–multinomial.
pub fn sizes_for_draw<R: Rng + ?Sized>(
    draw: &ParamDraw,
    design: &TrialDesign,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if draw.equal_sizes() {
        Ok(equal_cluster_sizes(design.total_n(), design.clusters()))
    } else {
        draw_cluster_sizes(design.total_n(), &draw.p, design.size_model().retry_cap, rng)
    }
}

/// Simulates outcomes: `c_j ~ N(0, sigma_b^2)` then either
/// `Y ~ N(lambda + X_j delta + c_j, sigma_w^2)` or
/// `Y ~ Bernoulli(logistic(lambda + X_j delta + c_j))`.
pub fn simulate_trial<R: Rng + ?Sized>(
    params: &ParamDraw,
    design: &TrialDesign,
    sizes: &[usize],
    kind: OutcomeKind,
    rng: &mut R,
) -> Result<TrialData> {
    if sizes.len() != design.clusters() {
        return Err(Error::domain(format!(
            "{} cluster sizes for {} clusters",
            sizes.len(),
            design.clusters()
        )));
    }
    let n: usize = sizes.iter().sum();
    if n != design.total_n() {
        return Err(Error::domain(format!(
            "cluster sizes sum to {n}, design expects {}",
            design.total_n()
        )));
    }
    let sigma_w = match (kind, params.sigma_w) {
        (OutcomeKind::Continuous, Some(s)) => s,
        (OutcomeKind::Continuous, None) => {
            return Err(Error::domain("continuous simulation needs a within-cluster SD"))
        }
        (OutcomeKind::Binary, _) => 0.0,
    };
    let mut cluster = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for (j, (&size, arm)) in sizes.iter().zip(design.arms()).enumerate() {
        let z: f64 = StandardNormal.sample(rng);
        let eta = params.lambda + arm.indicator() * params.delta + params.sigma_b * z;
        let prob = logistic(eta);
        for _ in 0..size {
            cluster.push(j);
            y.push(match kind {
                OutcomeKind::Continuous => {
                    let e: f64 = StandardNormal.sample(rng);
                    eta + sigma_w * e
                }
                OutcomeKind::Binary => {
                    let u: f64 = rng.random();
                    if u < prob {
                        1.0
                    } else {
                        0.0
                    }
                }
            });
        }
    }
    TrialData::new(kind, design.arms().to_vec(), cluster, y)
}

/// Writes `cluster,arm,y` rows with one-based cluster labels.
pub fn write_trial_csv<W: std::io::Write>(data: &TrialData, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cluster", "arm", "y"])?;
    for (&c, &y) in data.cluster_of().iter().zip(data.outcomes()) {
        w.write_record([(c + 1).to_string(), data.arms()[c].label().to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the format of [`write_trial_csv`]. Lines starting with `#` are
/// skipped. Cluster labels must run from 1 to J with every label used, and
/// a cluster's arm must not change between rows.
pub fn read_trial_csv<R: std::io::Read>(kind: OutcomeKind, input: R) -> Result<TrialData> {
    #[derive(serde::Deserialize)]
    struct Row {
        cluster: usize,
        arm: u8,
        y: f64,
    }
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(input);
    let mut arms: Vec<Option<Arm>> = Vec::new();
    let (mut cluster, mut y) = (Vec::new(), Vec::new());
    for (line, row) in r.deserialize::<Row>().enumerate() {
        let row = row?;
        if row.cluster == 0 {
            return Err(Error::domain(format!("row {}: cluster labels start at 1", line + 1)));
        }
        let arm = match row.arm {
            0 => Arm::Control,
            1 => Arm::Treatment,
            a => return Err(Error::domain(format!("row {}: arm must be 0 or 1, got {a}", line + 1))),
        };
        let j = row.cluster - 1;
        if arms.len() <= j {
            arms.resize(j + 1, None);
        }
        match arms[j] {
            Some(prev) if prev != arm => {
                return Err(Error::domain(format!("cluster {} appears in both arms", row.cluster)))
            }
            _ => arms[j] = Some(arm),
        }
        cluster.push(j);
        y.push(row.y);
    }
    let arms = arms
        .into_iter()
        .enumerate()
        .map(|(j, a)| a.ok_or_else(|| Error::domain(format!("cluster {} has no rows", j + 1))))
        .collect::<Result<Vec<_>>>()?;
    TrialData::new(kind, arms, cluster, y)
}
