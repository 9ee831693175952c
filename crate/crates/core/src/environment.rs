//! Reward generators for the K-armed and linear settings, oblivious action-set
//! schedules, and trajectories with their regret accounting.

use std::borrow::Cow;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::labels;
use crate::randomness::{SeedPlan, StreamHandle};

/// Relative slack allowed when checking norm bounds on generated vectors.
const NORM_SLACK: f64 = 1e-12;

/// Reward distribution family for a K-armed instance. All families are
/// supported on `[0, 1]` and have mean equal to the arm mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MabNoise {
    Bernoulli,
    /// Gaussian with the given scale, truncated symmetrically to
    /// `[mu - w, mu + w]` with `w = min(mu, 1 - mu)` so the mean stays `mu`.
    TruncatedGaussian { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MabInstance {
    arm_means: Vec<f64>,
    noise: MabNoise,
}

impl MabInstance {
    pub fn new(arm_means: Vec<f64>, noise: MabNoise) -> Result<Self> {
        if arm_means.is_empty() {
            return Err(Error::input("a bandit instance needs at least one arm"));
        }
        if let Some((a, mu)) = arm_means
            .iter()
            .enumerate()
            .find(|(_, m)| !(0.0..=1.0).contains(*m))
        {
            return Err(Error::input(format!(
                "arm {a} has mean {mu}, outside [0, 1]"
            )));
        }
        if let MabNoise::TruncatedGaussian { scale } = noise {
            if !(scale.is_finite() && scale > 0.0) {
                return Err(Error::input(format!(
                    "truncated gaussian scale must be positive, got {scale}"
                )));
            }
        }
        Ok(Self { arm_means, noise })
    }

    pub fn bernoulli(arm_means: Vec<f64>) -> Result<Self> {
        Self::new(arm_means, MabNoise::Bernoulli)
    }

    pub fn num_arms(&self) -> usize {
        self.arm_means.len()
    }

    pub fn arm_means(&self) -> &[f64] {
        &self.arm_means
    }

    pub fn noise(&self) -> MabNoise {
        self.noise
    }

    pub fn best_mean(&self) -> f64 {
        self.arm_means.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Suboptimality gap of `arm` (0-based).
    pub fn gap(&self, arm: usize) -> f64 {
        self.best_mean() - self.arm_means[arm]
    }

    /// Draws one reward for `arm` (0-based) from `env`.
    pub fn sample_reward(&self, arm: usize, env: &mut StreamHandle) -> Result<f64> {
        let mu = *self.arm_means.get(arm).ok_or_else(|| {
            Error::input(format!(
                "arm index {arm} out of range for {} arms",
                self.num_arms()
            ))
        })?;
        let u = env.next_uniform();
        Ok(match self.noise {
            MabNoise::Bernoulli => {
                if u < mu {
                    1.0
                } else {
                    0.0
                }
            }
            MabNoise::TruncatedGaussian { scale } => {
                let half_width = mu.min(1.0 - mu);
                if half_width <= 0.0 {
                    return Ok(mu);
                }
                let std = Normal::standard();
                let lo = std.cdf(-half_width / scale);
                let p = lo + u * (1.0 - 2.0 * lo);
                (mu + scale * std.inverse_cdf(p)).clamp(0.0, 1.0)
            }
        })
    }

    /// Per-round regret of an arm sequence.
    pub fn instant_regret(&self, actions: &[usize]) -> Vec<f64> {
        actions.iter().map(|&a| self.gap(a)).collect()
    }

    /// Cumulative regret of an arm sequence.
    pub fn regret_series(&self, actions: &[usize]) -> Vec<f64> {
        cumulative(&self.instant_regret(actions))
    }
}

/// How the per-round action sets are generated. Both variants depend only on
/// the schedule parameters and the round index.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionSchedule {
    /// The same action list in every round.
    Fixed(Vec<DVector<f64>>),
    /// `m` fresh directions per round, uniform on the sphere and scaled to `L`.
    RandomSphere { seed: u64, m: usize },
}

impl ActionSchedule {
    /// `m` evenly spaced vectors of length `radius` on the circle, starting at `e1`.
    pub fn circle(m: usize, radius: f64) -> Self {
        let actions = (0..m)
            .map(|k| {
                let angle = std::f64::consts::TAU * k as f64 / m as f64;
                DVector::from_vec(vec![radius * angle.cos(), radius * angle.sin()])
            })
            .collect();
        ActionSchedule::Fixed(actions)
    }

    /// A fixed set of `m` random directions in `d` dimensions, scaled to `radius`.
    pub fn fixed_random(seed: u64, m: usize, d: usize, radius: f64) -> Self {
        let mut stream = SeedPlan::new(seed, "action-schedule").derive_stream(labels!["fixed"]);
        ActionSchedule::Fixed(
            (0..m)
                .map(|_| random_direction(&mut stream, d) * radius)
                .collect(),
        )
    }
}

fn random_direction(stream: &mut StreamHandle, d: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| stream.next_normal());
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearInstance {
    theta_star: DVector<f64>,
    sigma: f64,
    s_bound: f64,
    l_bound: f64,
    schedule: ActionSchedule,
}

impl LinearInstance {
    pub fn new(
        theta_star: DVector<f64>,
        sigma: f64,
        s_bound: f64,
        l_bound: f64,
        schedule: ActionSchedule,
    ) -> Result<Self> {
        let d = theta_star.len();
        if d == 0 {
            return Err(Error::input("dimension d must be at least 1"));
        }
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::input(format!("sigma must be >= 0, got {sigma}")));
        }
        if !(s_bound.is_finite() && s_bound >= 0.0) {
            return Err(Error::input(format!("S must be >= 0, got {s_bound}")));
        }
        if !(l_bound.is_finite() && l_bound > 0.0) {
            return Err(Error::input(format!("L must be > 0, got {l_bound}")));
        }
        let theta_norm = theta_star.norm();
        if theta_norm > s_bound * (1.0 + NORM_SLACK) {
            return Err(Error::input(format!(
                "||theta*|| = {theta_norm} exceeds S = {s_bound}"
            )));
        }
        match &schedule {
            ActionSchedule::Fixed(actions) => {
                if actions.is_empty() {
                    return Err(Error::input("fixed action set is empty"));
                }
                for (i, a) in actions.iter().enumerate() {
                    if a.len() != d {
                        return Err(Error::input(format!(
                            "action {i} has dimension {}, expected {d}",
                            a.len()
                        )));
                    }
                    if a.norm() > l_bound * (1.0 + NORM_SLACK) {
                        return Err(Error::input(format!(
                            "action {i} has norm {} > L = {l_bound}",
                            a.norm()
                        )));
                    }
                }
            }
            ActionSchedule::RandomSphere { m, .. } => {
                if *m == 0 {
                    return Err(Error::input("action sets need m >= 1 vectors"));
                }
            }
        }
        Ok(Self {
            theta_star,
            sigma,
            s_bound,
            l_bound,
            schedule,
        })
    }

    /// A parameter vector of norm `S` in a direction drawn from `seed`.
    pub fn random_theta(seed: u64, d: usize, s_bound: f64) -> DVector<f64> {
        let mut stream = SeedPlan::new(seed, "theta-star").derive_stream(labels!["theta"]);
        random_direction(&mut stream, d) * s_bound
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn theta_star(&self) -> &DVector<f64> {
        &self.theta_star
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn s_bound(&self) -> f64 {
        self.s_bound
    }

    pub fn l_bound(&self) -> f64 {
        self.l_bound
    }

    pub fn schedule(&self) -> &ActionSchedule {
        &self.schedule
    }

    /// The action set offered at round `t` (1-based). Pure in `(self, t)`.
    pub fn action_set_at(&self, t: usize) -> Cow<'_, [DVector<f64>]> {
        match &self.schedule {
            ActionSchedule::Fixed(actions) => Cow::Borrowed(actions),
            ActionSchedule::RandomSphere { seed, m } => {
                let mut stream = SeedPlan::new(*seed, "action-schedule")
                    .derive_stream(labels!["round", t as u64]);
                let d = self.dim();
                Cow::Owned(
                    (0..*m)
                        .map(|_| random_direction(&mut stream, d) * self.l_bound)
                        .collect(),
                )
            }
        }
    }

    pub fn expected_reward(&self, action: &DVector<f64>) -> f64 {
        action.dot(&self.theta_star)
    }

    /// `<action, theta*> + sigma * N(0, 1)`; always consumes one normal draw.
    pub fn sample_reward(&self, action: &DVector<f64>, env: &mut StreamHandle) -> Result<f64> {
        if action.len() != self.dim() {
            return Err(Error::input(format!(
                "action has dimension {}, expected {}",
                action.len(),
                self.dim()
            )));
        }
        let norm = action.norm();
        if norm > self.l_bound * (1.0 + NORM_SLACK) {
            return Err(Error::input(format!(
                "action norm {norm} exceeds L = {}",
                self.l_bound
            )));
        }
        let noise = env.next_normal();
        Ok(self.expected_reward(action) + self.sigma * noise)
    }

    /// Gap between the best action in `A_t` and `action`.
    pub fn gap_at(&self, t: usize, action: &DVector<f64>) -> f64 {
        let best = self
            .action_set_at(t)
            .iter()
            .map(|a| self.expected_reward(a))
            .fold(f64::NEG_INFINITY, f64::max);
        (best - self.expected_reward(action)).max(0.0)
    }

    pub fn instant_regret(&self, actions: &[LinAction]) -> Vec<f64> {
        actions
            .iter()
            .enumerate()
            .map(|(i, a)| self.gap_at(i + 1, &a.vector))
            .collect()
    }

    pub fn regret_series(&self, actions: &[LinAction]) -> Vec<f64> {
        cumulative(&self.instant_regret(actions))
    }
}

/// A chosen linear action: its position in `A_t` and its value.
#[derive(Debug, Clone, PartialEq)]
pub struct LinAction {
    pub index: usize,
    pub vector: DVector<f64>,
}

impl LinAction {
    /// Index equality plus bitwise equality of the vectors.
    pub fn same_as(&self, other: &LinAction) -> bool {
        self.index == other.index
            && self.vector.len() == other.vector.len()
            && self
                .vector
                .iter()
                .zip(other.vector.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

/// Running sum.
pub fn cumulative(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect()
}

/// One executed run: actions, observed rewards, per-round regret and the
/// algorithm's own records.
#[derive(Debug, Clone)]
pub struct Trajectory<A, R> {
    pub actions: Vec<A>,
    pub rewards: Vec<f64>,
    pub instant_regret: Vec<f64>,
    pub record: R,
}

impl<A, R> Trajectory<A, R> {
    pub fn with_capacity(horizon: usize, record: R) -> Self {
        Self {
            actions: Vec::with_capacity(horizon),
            rewards: Vec::with_capacity(horizon),
            instant_regret: Vec::with_capacity(horizon),
            record,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn push(&mut self, action: A, reward: f64, regret: f64) {
        self.actions.push(action);
        self.rewards.push(reward);
        self.instant_regret.push(regret);
    }

    pub fn cumulative_regret(&self) -> Vec<f64> {
        cumulative(&self.instant_regret)
    }

    pub fn final_regret(&self) -> f64 {
        self.instant_regret.iter().sum()
    }
}
