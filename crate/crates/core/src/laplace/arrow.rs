//! Precision matrices of arrow shape: a dense 2x2 block for `(lambda, delta)`,
//! a diagonal block for the cluster effects, and a `J x 2` coupling.
//!
//! ```text
//! Q = | A   B' |
//!     | B   D  |
//! ```
//!
//! Eliminating the diagonal block leaves the Schur complement
//! `S = A - B' D^-1 B`, so factorisation, solves and the log-determinant
//! all cost O(J).

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Arrow {
    pub a: [[f64; 2]; 2],
    pub b: Vec<[f64; 2]>,
    pub d: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrowFactor {
    b: Vec<[f64; 2]>,
    d: Vec<f64>,
    /// Inverse of the Schur complement; also the marginal covariance of
    /// `(lambda, delta)`.
    s_inv: [[f64; 2]; 2],
    log_det: f64,
}

impl Arrow {
    pub fn dim(&self) -> usize {
        2 + self.d.len()
    }

    pub fn factor(&self) -> Result<ArrowFactor> {
        let mut s = self.a;
        let mut log_det = 0.0;
        for (bj, &dj) in self.b.iter().zip(&self.d) {
            if !(dj > 0.0 && dj.is_finite()) {
                return Err(Error::Computation {
                    message: "latent precision is not positive definite".into(),
                    inputs: format!("diagonal entry {dj}"),
                });
            }
            log_det += dj.ln();
            for r in 0..2 {
                for c in 0..2 {
                    s[r][c] -= bj[r] * bj[c] / dj;
                }
            }
        }
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        if !(s[0][0] > 0.0 && det > 0.0 && det.is_finite()) {
            return Err(Error::Computation {
                message: "Schur complement is not positive definite".into(),
                inputs: format!("S = {s:?}"),
            });
        }
        log_det += det.ln();
        let s_inv = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
        Ok(ArrowFactor {
            b: self.b.clone(),
            d: self.d.clone(),
            s_inv,
            log_det,
        })
    }

    /// `Q v`, used only to check solves.
    pub fn mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        out[0] = self.a[0][0] * v[0] + self.a[0][1] * v[1];
        out[1] = self.a[1][0] * v[0] + self.a[1][1] * v[1];
        for (j, (bj, dj)) in self.b.iter().zip(&self.d).enumerate() {
            out[0] += bj[0] * v[2 + j];
            out[1] += bj[1] * v[2 + j];
            out[2 + j] = bj[0] * v[0] + bj[1] * v[1] + dj * v[2 + j];
        }
        out
    }
}

impl ArrowFactor {
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Marginal covariance of `(lambda, delta)` under the Gaussian with this
    /// precision.
    pub fn fixed_covariance(&self) -> [[f64; 2]; 2] {
        self.s_inv
    }

    /// Solves `Q x = r`.
    pub fn solve(&self, r: &[f64]) -> Vec<f64> {
        // r_f - B' D^-1 r_c
        let mut rf = [r[0], r[1]];
        for (j, (bj, dj)) in self.b.iter().zip(&self.d).enumerate() {
            let t = r[2 + j] / dj;
            rf[0] -= bj[0] * t;
            rf[1] -= bj[1] * t;
        }
        let xf = [
            self.s_inv[0][0] * rf[0] + self.s_inv[0][1] * rf[1],
            self.s_inv[1][0] * rf[0] + self.s_inv[1][1] * rf[1],
        ];
        let mut x = Vec::with_capacity(2 + self.d.len());
        x.extend_from_slice(&xf);
        for (j, (bj, dj)) in self.b.iter().zip(&self.d).enumerate() {
            x.push((r[2 + j] - bj[0] * xf[0] - bj[1] * xf[1]) / dj);
        }
        x
    }
}
