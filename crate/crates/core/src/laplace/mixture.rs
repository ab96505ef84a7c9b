use serde::Serialize;

use crate::dist::{norm_cdf, norm_quantile};
use crate::error::{Error, Result};
use crate::model::Direction;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Marginal posterior of the treatment effect as a finite Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaMixture {
    components: Vec<Component>,
}

impl DeltaMixture {
    /// Weights are normalised here; they need only be non-negative with a
    /// positive sum.
    pub fn new(mut components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Inference("empty mixture".into()));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Inference(format!("mixture weights sum to {total}")));
        }
        for c in &mut components {
            if !(c.weight >= 0.0 && c.sd > 0.0 && c.mean.is_finite() && c.sd.is_finite()) {
                return Err(Error::Inference(format!("invalid mixture component {c:?}")));
            }
            c.weight /= total;
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * norm_cdf((x - c.mean) / c.sd))
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    /// Posterior probability of the effect lying beyond `margin`.
    pub fn tail(&self, margin: f64, direction: Direction) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let z = (c.mean - margin) / c.sd;
                c.weight
                    * match direction {
                        Direction::Greater => norm_cdf(z),
                        Direction::Less => norm_cdf(-z),
                    }
            })
            .sum()
    }

    /// Quantile by bisection on the CDF, to an absolute width of 1e-10.
    pub fn quantile(&self, level: f64) -> Result<f64> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::domain(format!("quantile level {level} outside (0, 1)")));
        }
        if let [c] = self.components.as_slice() {
            return Ok(c.mean + c.sd * norm_quantile(level));
        }
        // Every component's own quantile brackets the mixture quantile.
        let z = norm_quantile(level);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &self.components {
            lo = lo.min(c.mean + c.sd * z);
            hi = hi.max(c.mean + c.sd * z);
        }
        if hi - lo == 0.0 {
            return Ok(lo);
        }
        for _ in 0..400 {
            if hi - lo <= 1e-10 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) < level {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_component_is_exact() {
        let m = DeltaMixture::new(vec![Component { weight: 3.0, mean: 1.5, sd: 0.4 }]).unwrap();
        for q in [0.025, 0.5, 0.9] {
            assert!((m.quantile(q).unwrap() - (1.5 + 0.4 * norm_quantile(q))).abs() < 1e-14);
        }
        assert!((m.tail(1.5, Direction::Greater) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bisection_inverts_cdf() {
        let m = DeltaMixture::new(vec![
            Component { weight: 0.2, mean: -1.0, sd: 0.5 },
            Component { weight: 0.5, mean: 0.3, sd: 1.0 },
            Component { weight: 0.3, mean: 4.0, sd: 0.2 },
        ])
        .unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 1..100 {
            let q = i as f64 / 100.0;
            let x = m.quantile(q).unwrap();
            assert!(x >= prev);
            prev = x;
            assert!((m.cdf(x) - q).abs() < 1e-9);
        }
        let w: f64 = m.components().iter().map(|c| c.weight).sum();
        assert!((w - 1.0).abs() < 1e-15);
        assert!((m.tail(0.0, Direction::Greater) + m.tail(0.0, Direction::Less) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(DeltaMixture::new(vec![]).is_err());
        assert!(DeltaMixture::new(vec![Component { weight: 1.0, mean: 0.0, sd: 0.0 }]).is_err());
    }
}
