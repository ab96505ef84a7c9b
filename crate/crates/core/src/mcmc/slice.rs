//! Univariate slice sampling with stepping out and shrinkage.

use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceTuning {
    /// Initial bracket width.
    pub width: f64,
    /// Maximum number of width steps taken while stepping out.
    pub max_steps: u32,
}

impl Default for SliceTuning {
    fn default() -> Self {
        Self {
            width: 1.0,
            max_steps: 64,
        }
    }
}

/// One slice-sampling transition from `x0`, where `log_f0 = log_f(x0)`.
/// Returns the new point and its log density.
pub fn slice_step<F, R>(x0: f64, log_f0: f64, mut log_f: F, tuning: SliceTuning, rng: &mut R) -> (f64, f64)
where
    F: FnMut(f64) -> f64,
    R: Rng + ?Sized,
{
    let w = if tuning.width > 0.0 && tuning.width.is_finite() {
        tuning.width
    } else {
        1.0
    };
    let u: f64 = rng.random();
    let level = log_f0 + (1.0 - u).ln();

    let mut left = x0 - rng.random::<f64>() * w;
    let mut right = left + w;
    let m = tuning.max_steps.max(1);
    let mut steps_left = (rng.random::<f64>() * m as f64).floor() as u32;
    let mut steps_right = m - 1 - steps_left;
    while steps_left > 0 && log_f(left) > level {
        left -= w;
        steps_left -= 1;
    }
    while steps_right > 0 && log_f(right) > level {
        right += w;
        steps_right -= 1;
    }

    loop {
        let x1 = left + rng.random::<f64>() * (right - left);
        let f1 = log_f(x1);
        if f1 > level {
            return (x1, f1);
        }
        if x1 < x0 {
            left = x1;
        } else {
            right = x1;
        }
        if right - left <= 1e-14 * (1.0 + x0.abs()) {
            return (x0, log_f0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn samples_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let log_f = |x: f64| -0.5 * x * x;
        let mut x = 0.0;
        let mut lf = log_f(x);
        let n = 100_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            (x, lf) = slice_step(x, lf, log_f, SliceTuning { width: 2.0, max_steps: 64 }, &mut rng);
            s1 += x;
            s2 += x * x;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.03, "{var}");
    }

    #[test]
    fn bounded_triangle_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let log_f = |x: f64| if (0.0..=1.0).contains(&x) { x.ln() } else { f64::NEG_INFINITY };
        let mut x = 0.5;
        let mut lf = log_f(x);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            (x, lf) = slice_step(x, lf, log_f, SliceTuning { width: 0.1, max_steps: 64 }, &mut rng);
            sum += x;
        }
        assert!((sum / n as f64 - 2.0 / 3.0).abs() < 0.01);
    }
}
