//! Replicable scalar mean estimation for `[0, 1]`-valued samples.
//!
//! The estimator takes the empirical mean and snaps it to the midpoint of a
//! randomly shifted grid of width `alpha = 2 tau0(n) / (rho1 - 2 delta1)`,
//! where `tau0(n) = sqrt(ln(2 / delta1) / (2n))` is the Hoeffding radius.
//! Both runs of a paired call draw the same shift, so they disagree only when a
//! grid boundary separates their empirical means.

use crate::error::{Error, Result};
use crate::randomness::{Label, StreamHandle};
use crate::repridge::round_scalar;

/// Default value of the universal sample-complexity constant.
pub const C_ME: f64 = 8.0;

/// `tau(n) = sqrt(c_me ln(1 / delta1) / (n (rho1 - delta1)^2))`.
pub fn tau_schedule(n: usize, c_me: f64, delta1: f64, rho1: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::input("tau(n) needs n >= 1"));
    }
    Ok((c_me * (1.0 / delta1).ln() / (n as f64 * (rho1 - delta1).powi(2))).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepMeanParams {
    pub delta1: f64,
    pub rho1: f64,
    pub c_me: f64,
}

impl RepMeanParams {
    pub fn new(delta1: f64, rho1: f64) -> Result<Self> {
        Self::with_constant(delta1, rho1, C_ME)
    }

    /// Rejects parameters outside `0 < delta1 <= rho1 / 4`, `rho1 < 1`, and
    /// parameters for which the grid estimator's accuracy radius would exceed
    /// `tau(n)`.
    pub fn with_constant(delta1: f64, rho1: f64, c_me: f64) -> Result<Self> {
        if !(rho1 > 0.0 && rho1 < 1.0) {
            return Err(Error::config(format!("rho1 must lie in (0, 1), got {rho1}")));
        }
        if !(delta1 > 0.0 && delta1 <= rho1 / 4.0) {
            return Err(Error::config(format!(
                "delta1 <= rho1 / 4 violated: delta1 = {delta1:e}, rho1 / 4 = {:e}",
                rho1 / 4.0
            )));
        }
        if !(c_me > 0.0 && c_me.is_finite()) {
            return Err(Error::config(format!("C_ME must be positive, got {c_me}")));
        }
        let p = Self { delta1, rho1, c_me };
        // Both radii scale as n^{-1/2}, so checking n = 1 covers every n.
        let achieved = p.accuracy_radius(1);
        let promised = p.tau(1)?;
        if achieved > promised {
            return Err(Error::config(format!(
                "accuracy radius {achieved:.6e} exceeds tau(1) = {promised:.6e} for C_ME = {c_me}"
            )));
        }
        Ok(p)
    }

    pub fn tau(&self, n: usize) -> Result<f64> {
        tau_schedule(n, self.c_me, self.delta1, self.rho1)
    }

    /// Hoeffding radius `sqrt(ln(2 / delta1) / (2n))`.
    pub fn hoeffding_radius(&self, n: usize) -> f64 {
        ((2.0 / self.delta1).ln() / (2.0 * n as f64)).sqrt()
    }

    pub fn grid_width(&self, n: usize) -> f64 {
        2.0 * self.hoeffding_radius(n) / (self.rho1 - 2.0 * self.delta1)
    }

    /// Radius the estimator actually achieves with probability `1 - delta1`:
    /// Hoeffding error plus half a grid cell.
    pub fn accuracy_radius(&self, n: usize) -> f64 {
        self.hoeffding_radius(n) * (1.0 + 1.0 / (self.rho1 - 2.0 * self.delta1))
    }

    /// Smallest `n` with `tau(n) <= target`.
    pub fn sample_bound(&self, target: f64) -> usize {
        let n = self.c_me * (1.0 / self.delta1).ln()
            / (target * target * (self.rho1 - self.delta1).powi(2));
        n.ceil().max(1.0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepMeanEstimate {
    pub estimate: f64,
    pub empirical_mean: f64,
    pub alpha: f64,
    pub shift: f64,
}

/// Rounds `x` on the grid of width `alpha` shifted by `shift`.
pub fn rep_mean_with_shift(empirical_mean: f64, alpha: f64, shift: f64) -> RepMeanEstimate {
    RepMeanEstimate {
        estimate: round_scalar(empirical_mean, alpha, shift),
        empirical_mean,
        alpha,
        shift,
    }
}

/// Replicable mean of `samples`; the shift is the first uniform of the shared
/// stream at `call_key`.
pub fn rep_mean(
    samples: &[f64],
    params: &RepMeanParams,
    shared: &StreamHandle,
    call_key: &[Label],
) -> Result<RepMeanEstimate> {
    if samples.is_empty() {
        return Err(Error::input("rep_mean needs at least one sample"));
    }
    if let Some(x) = samples.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::input(format!("sample {x} outside [0, 1]")));
    }
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let alpha = params.grid_width(n);
    let shift = alpha * shared.child(call_key).next_uniform();
    Ok(rep_mean_with_shift(mean, alpha, shift))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels;
    use crate::randomness::SeedPlan;
    use std::f64::consts::E;

    #[test]
    fn tau_examples() {
        let delta1 = 1.0 / E;
        let rho1 = 0.5 + delta1;
        let t32 = tau_schedule(32, 8.0, delta1, rho1).unwrap();
        let t128 = tau_schedule(128, 8.0, delta1, rho1).unwrap();
        assert!((t32 - 1.0).abs() < 1e-15);
        assert!((t128 - 0.5).abs() < 1e-15);
        for n in [1, 7, 1000] {
            let p = RepMeanParams::new(0.001, 0.1).unwrap();
            let ratio = p.tau(n).unwrap() / p.tau(4 * n).unwrap();
            assert!((ratio - 2.0).abs() < 1e-12);
        }
        assert!(tau_schedule(0, 8.0, 0.01, 0.2).is_err());
    }

    #[test]
    fn regime_checks() {
        assert!(RepMeanParams::new(0.05, 0.2).is_ok());
        assert!(RepMeanParams::new(0.051, 0.2).is_err());
        assert!(RepMeanParams::new(0.0, 0.2).is_err());
        assert!(RepMeanParams::new(0.01, 1.0).is_err());
        // A tiny constant makes tau(n) smaller than what the grid estimator achieves.
        assert!(RepMeanParams::with_constant(0.01, 0.2, 0.01).is_err());
    }

    #[test]
    fn accuracy_radius_within_tau() {
        for (d1, r1) in [(0.01, 0.2), (1e-6, 1e-3), (0.05, 0.2), (1.0 / 30720.0, 0.01)] {
            let p = RepMeanParams::new(d1, r1).unwrap();
            for n in [1, 10, 1000, 100_000] {
                assert!(p.accuracy_radius(n) <= p.tau(n).unwrap());
            }
        }
    }

    #[test]
    fn sample_bound_inverts_tau() {
        let p = RepMeanParams::new(0.01, 0.2).unwrap();
        let n = p.sample_bound(0.5);
        assert!(p.tau(n).unwrap() <= 0.5);
        assert!(p.tau(n - 1).unwrap() > 0.5);
    }

    #[test]
    fn constant_samples_forced_rounding() {
        let est = rep_mean_with_shift(0.3, 1.0, 0.0);
        assert_eq!(est.estimate, 0.5);
    }

    #[test]
    fn deterministic_and_bounded() {
        let shared = SeedPlan::new(1, "rm").derive_stream(labels!["shared"]);
        let p = RepMeanParams::new(0.01, 0.2).unwrap();
        let samples: Vec<f64> = (0..50).map(|i| (i % 3) as f64 / 2.0).collect();
        let a = rep_mean(&samples, &p, &shared, &labels!["repmean", 0]).unwrap();
        let mut rev = samples.clone();
        rev.reverse();
        let b = rep_mean(&samples, &p, &shared, &labels!["repmean", 0]).unwrap();
        assert_eq!(a, b);
        let c = rep_mean(&rev, &p, &shared, &labels!["repmean", 0]).unwrap();
        assert!((c.estimate - a.estimate).abs() < 1e-12);
        assert!((a.estimate - a.empirical_mean).abs() <= a.alpha / 2.0);
        assert!((0.0..a.alpha).contains(&a.shift));
    }

    #[test]
    fn input_errors() {
        let shared = SeedPlan::new(1, "rm").derive_stream(labels!["shared"]);
        let p = RepMeanParams::new(0.01, 0.2).unwrap();
        assert!(rep_mean(&[], &p, &shared, &labels!["k"]).is_err());
        assert!(rep_mean(&[0.5, 1.5], &p, &shared, &labels!["k"]).is_err());
    }
}
