use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// Settings for a central-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    /// Number of coordinates probed; `None` probes all of them.
    pub probes: Option<usize>,
    /// Denominator floor. Central differences resolve a derivative only to
    /// about `|f| * 1e-16 / eps`, so below the floor the check measures
    /// absolute rather than relative disagreement.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { eps: 1e-6, probes: Some(64), floor: 1e-4 }
    }
}

impl GradCheck {
    pub fn exhaustive() -> Self {
        Self { probes: None, ..Self::default() }
    }

    pub fn probes(n: usize) -> Self {
        Self { probes: Some(n), ..Self::default() }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }
}

/// Max relative error `|a - n| / max(|a| + |n|, floor)` between the analytic
/// gradient and `(f(θ+ε) - f(θ-ε)) / 2ε` over the probed coordinates.
pub fn grad_check<F, R>(f: F, theta: &[f64], analytic: &[f64], cfg: &GradCheck, rng: &mut R) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    if theta.len() != analytic.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters but {} gradient entries",
            theta.len(),
            analytic.len()
        )));
    }
    let coords: Vec<usize> = match cfg.probes {
        Some(k) if k < theta.len() => sample(rng, theta.len(), k).into_vec(),
        _ => (0..theta.len()).collect(),
    };
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for i in coords {
        let orig = probe[i];
        probe[i] = orig + cfg.eps;
        let plus = f(&probe);
        probe[i] = orig - cfg.eps;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteValue(format!("objective at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * cfg.eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(cfg.floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}
