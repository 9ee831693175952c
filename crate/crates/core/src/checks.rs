//! Monte Carlo self-tests for the two replicable estimators.
//!
//! Each suite reports observed rates with 95% Wilson intervals. A match-rate
//! property passes when its interval reaches the required rate (or when the
//! lower bound clears the required rate minus an explicit slack); a
//! failure-rate property passes when its interval reaches down to the allowed
//! failure probability.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::environment::LinearInstance;
use crate::error::Result;
use crate::harness::{wilson_interval, Z_95};
use crate::labels;
use crate::randomness::{SeedPlan, StreamHandle};
use crate::repmean::{rep_mean, RepMeanParams};
use crate::repridge::{grid_round, rep_ridge, round_scalar, v_norm, GramState, RepRidgeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Observed rate should be high: pass iff `lo >= required`.
    AtLeast,
    /// Observed rate should be low: pass iff `lo <= required`.
    AtMost,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub property: String,
    pub count: u64,
    pub trials: u64,
    pub observed: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub required: f64,
    pub direction: Direction,
    pub pass: bool,
}

impl SuiteResult {
    /// `count / trials` should be at least `required`, judged on the upper
    /// Wilson bound (`rate + margin >= required`).
    pub fn at_least(property: &str, count: u64, trials: u64, required: f64) -> Self {
        let (lo, hi) = wilson_interval(count, trials, Z_95);
        Self::build(property, count, trials, lo, hi, required, Direction::AtLeast, hi >= required)
    }

    /// Lower Wilson bound must clear `required - slack`; `required` is
    /// reported with the slack already subtracted.
    pub fn at_least_with_slack(
        property: &str,
        count: u64,
        trials: u64,
        target: f64,
        slack: f64,
    ) -> Self {
        let (lo, hi) = wilson_interval(count, trials, Z_95);
        let required = target - slack;
        Self::build(property, count, trials, lo, hi, required, Direction::AtLeast, lo >= required)
    }

    /// `count / trials` should be at most `allowed`, judged on the lower
    /// Wilson bound (`rate - margin <= allowed`).
    pub fn at_most(property: &str, count: u64, trials: u64, allowed: f64) -> Self {
        let (lo, hi) = wilson_interval(count, trials, Z_95);
        Self::build(property, count, trials, lo, hi, allowed, Direction::AtMost, lo <= allowed)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        property: &str,
        count: u64,
        trials: u64,
        wilson_lo: f64,
        wilson_hi: f64,
        required: f64,
        direction: Direction,
        pass: bool,
    ) -> Self {
        Self {
            property: property.to_string(),
            count,
            trials,
            observed: count as f64 / trials as f64,
            wilson_lo,
            wilson_hi,
            required,
            direction,
            pass,
        }
    }

    pub fn line(&self) -> String {
        let op = match self.direction {
            Direction::AtLeast => ">=",
            Direction::AtMost => "<=",
        };
        format!(
            "{} {}: observed {:.4} ({}/{}), 95% CI [{:.4}, {:.4}], required {op} {:.4}",
            if self.pass { "PASS" } else { "FAIL" },
            self.property,
            self.observed,
            self.count,
            self.trials,
            self.wilson_lo,
            self.wilson_hi,
            self.required,
        )
    }
}

fn trial_streams(plan: &SeedPlan, id: u64) -> (StreamHandle, StreamHandle, StreamHandle) {
    let s = plan.paired_streams(id);
    (s.shared, s.env_a, s.env_b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepMeanSuite {
    pub mean: f64,
    pub rho1: f64,
    pub delta1: f64,
    /// Accuracy target; the sample size is the smallest `n` with `tau(n) <= target`.
    pub target_tau: f64,
    pub trials: u64,
}

impl Default for RepMeanSuite {
    fn default() -> Self {
        Self {
            mean: 0.5,
            rho1: 0.2,
            delta1: 0.01,
            target_tau: 0.1,
            trials: 2000,
        }
    }
}

impl RepMeanSuite {
    pub fn run(&self, plan: &SeedPlan) -> Result<Vec<SuiteResult>> {
        let params = RepMeanParams::new(self.delta1, self.rho1)?;
        let n = params.sample_bound(self.target_tau);
        let tau = params.tau(n)?;
        let bernoulli = |env: &mut StreamHandle| -> Vec<f64> {
            (0..n)
                .map(|_| f64::from(u8::from(env.next_uniform() < self.mean)))
                .collect()
        };
        let outcomes: Vec<(bool, bool)> = (0..self.trials)
            .into_par_iter()
            .map(|id| {
                let (shared, mut env_a, mut env_b) = trial_streams(plan, id);
                let key = labels!["repmean", 0, 0];
                let a = rep_mean(&bernoulli(&mut env_a), &params, &shared, &key)?;
                let b = rep_mean(&bernoulli(&mut env_b), &params, &shared, &key)?;
                Ok(((a.estimate - self.mean).abs() > tau, a.estimate == b.estimate))
            })
            .collect::<Result<_>>()?;
        let failures = outcomes.iter().filter(|o| o.0).count() as u64;
        let matches = outcomes.iter().filter(|o| o.1).count() as u64;
        Ok(vec![
            SuiteResult::at_most("repmean accuracy failure", failures, self.trials, self.delta1),
            SuiteResult::at_least("repmean paired match", matches, self.trials, 1.0 - self.rho1),
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepRidgeSuite {
    pub dim: usize,
    pub samples: usize,
    pub sigma: f64,
    pub lambda: f64,
    pub s_bound: f64,
    pub delta: f64,
    pub rho: f64,
    pub trials: u64,
    /// Absolute slack below `1 - rho` allowed for the match-rate lower bound.
    pub slack: f64,
}

impl Default for RepRidgeSuite {
    fn default() -> Self {
        Self {
            dim: 3,
            samples: 200,
            sigma: 0.1,
            lambda: 1.0,
            s_bound: 1.0,
            delta: 0.05,
            rho: 0.3,
            trials: 1000,
            slack: 0.03,
        }
    }
}

impl RepRidgeSuite {
    /// Unit-norm design points, fixed by the master seed.
    fn design(&self, plan: &SeedPlan) -> Vec<DVector<f64>> {
        let mut stream = plan.derive_stream(labels!["design"]);
        (0..self.samples)
            .map(|_| {
                let v = DVector::from_fn(self.dim, |_, _| stream.next_normal());
                let norm = v.norm();
                v / norm
            })
            .collect()
    }

    pub fn run(&self, plan: &SeedPlan) -> Result<Vec<SuiteResult>> {
        let params = RepRidgeParams::new(self.delta, self.rho, self.sigma, self.s_bound)?;
        let design = self.design(plan);
        let theta = LinearInstance::random_theta(plan.master_seed, self.dim, self.s_bound);
        let fit = |env: &mut StreamHandle| -> Result<GramState> {
            let mut state = GramState::new(self.dim, self.lambda)?;
            for x in &design {
                state.update(x, x.dot(&theta) + self.sigma * env.next_normal())?;
            }
            Ok(state)
        };
        let outcomes: Vec<(bool, bool)> = (0..self.trials)
            .into_par_iter()
            .map(|id| {
                let (shared, mut env_a, mut env_b) = trial_streams(plan, id);
                let key = labels!["rep_ridge"];
                let state_a = fit(&mut env_a)?;
                let a = rep_ridge(&state_a, &params, &shared, &key)?;
                let b = rep_ridge(&fit(&mut env_b)?, &params, &shared, &key)?;
                let err = v_norm(state_a.gram(), &(&a.theta_tilde - &theta));
                Ok((err > a.beta_inflated, a.same_output(&b)))
            })
            .collect::<Result<_>>()?;
        let failures = outcomes.iter().filter(|o| o.0).count() as u64;
        let matches = outcomes.iter().filter(|o| o.1).count() as u64;
        Ok(vec![
            SuiteResult::at_least_with_slack(
                "repridge paired match",
                matches,
                self.trials,
                1.0 - self.rho,
                self.slack,
            ),
            SuiteResult::at_most("repridge coverage failure", failures, self.trials, self.delta),
        ])
    }
}

/// Number of `(z, alpha, u)` inputs violating `||Q(z) - z|| <= (alpha / 2) sqrt(d)`
/// beyond `ulps` units in the last place, out of `cases` draws with `d` in `1..=8`.
pub fn rounding_bound_violations(plan: &SeedPlan, cases: u64, ulps: u32) -> Result<u64> {
    let mut s = plan.derive_stream(labels!["rounding-bound"]);
    let mut violations = 0;
    for _ in 0..cases {
        let d = 1 + (s.next_u64() % 8) as usize;
        let alpha = 10f64.powf(6.0 * s.next_uniform() - 3.0);
        let scale = 10f64.powf(4.0 * s.next_uniform() - 1.0);
        let z = DVector::from_fn(d, |_, _| scale * (2.0 * s.next_uniform() - 1.0));
        let u = DVector::from_fn(d, |_, _| alpha * s.next_uniform());
        let q = grid_round(&z, alpha, &u)?;
        let err = (&q - &z).norm();
        let bound = alpha / 2.0 * (d as f64).sqrt();
        if err > bound + ulps as f64 * ulp(bound) {
            violations += 1;
        }
    }
    Ok(violations)
}

fn ulp(x: f64) -> f64 {
    let x = x.abs();
    f64::from_bits(x.to_bits() + 1) - x
}

/// One scalar pair of the boundary-crossing experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossingCase {
    pub z1: f64,
    pub z2: f64,
    pub alpha: f64,
    pub empirical: f64,
    pub predicted: f64,
}

/// For `pairs` random `(z1, z2, alpha)` measures how often a uniform shift
/// rounds the two scalars to different grid points, over `shifts` shifts.
pub fn boundary_crossing(plan: &SeedPlan, pairs: u64, shifts: u64) -> Vec<CrossingCase> {
    (0..pairs)
        .into_par_iter()
        .map(|p| {
            let mut s = plan.derive_stream(labels!["crossing", p]);
            let alpha = 0.1 + 1.9 * s.next_uniform();
            let z1 = 20.0 * s.next_uniform() - 10.0;
            // Spread distances over [0, 1.5 alpha] so both regimes of min(1, .) appear.
            let z2 = z1 + (2.0 * s.next_uniform() - 1.0) * 1.5 * alpha;
            let mut shifts_stream = s.child(&labels!["shifts"]);
            let disagree = (0..shifts)
                .filter(|_| {
                    let u = alpha * shifts_stream.next_uniform();
                    round_scalar(z1, alpha, u)
                        != round_scalar(z2, alpha, u)
                })
                .count();
            CrossingCase {
                z1,
                z2,
                alpha,
                empirical: disagree as f64 / shifts as f64,
                predicted: ((z1 - z2).abs() / alpha).min(1.0),
            }
        })
        .collect()
}
