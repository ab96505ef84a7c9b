//! Test-only oracles built from the individual-level design matrix, so
//! they share no code path with the sufficient-statistic engines.

use nalgebra::{DMatrix, DVector};

use crate::model::{AnalysisPrior, TrialData};

/// Exact posterior of `(lambda, delta, c_1..c_J)` for the linear model with
/// both precisions known: mean and covariance.
pub fn dense_conjugate_posterior(
    data: &TrialData,
    prior: &AnalysisPrior,
    tau_b: f64,
    tau_w: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let j = data.clusters();
    let dim = j + 2;
    let n = data.len();
    let mut design = DMatrix::<f64>::zeros(n, dim);
    for (i, &c) in data.cluster_of().iter().enumerate() {
        design[(i, 0)] = 1.0;
        design[(i, 1)] = data.arms()[c].indicator();
        design[(i, 2 + c)] = 1.0;
    }
    let y = DVector::from_column_slice(data.outcomes());
    let mut q = design.transpose() * &design * tau_w;
    let mut b = design.transpose() * y * tau_w;
    q[(0, 0)] += prior.lambda.precision();
    q[(1, 1)] += prior.delta.precision();
    b[0] += prior.lambda.precision() * prior.lambda.mean();
    b[1] += prior.delta.precision() * prior.delta.mean();
    for k in 0..j {
        q[(2 + k, 2 + k)] += tau_b;
    }
    let cov = q.try_inverse().expect("positive definite precision");
    let mean = &cov * b;
    (mean, cov)
}
