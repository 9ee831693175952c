//! Replicable batched UCB for K-armed bandits, and a plain UCB1 baseline.
//!
//! After one round-robin pull per arm, the arm with the largest optimistic
//! index `U_a = mu_a + 2 tau(N_a)` is played for `N_a` consecutive rounds
//! (doubling its count), then only that arm's replicable mean is recomputed.
//! The index therefore changes at most `1 + ceil(log2 T)` times per arm.
//!
//! Arms are 0-based throughout; ties always go to the smallest index.

use crate::environment::{MabInstance, Trajectory};
use crate::error::{Error, Result};
use crate::labels;
use crate::randomness::StreamHandle;
use crate::repmean::{rep_mean, RepMeanParams};

/// `ceil(log2 t)` for `t >= 1`.
pub fn ceil_log2(t: usize) -> u32 {
    assert!(t >= 1, "ceil_log2 needs t >= 1");
    usize::BITS - (t - 1).leading_zeros()
}

/// Splits a total replicability budget over the at most `M` estimator calls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepUcbBudget {
    pub rho: f64,
    pub num_arms: usize,
    pub horizon: usize,
    /// `K (1 + ceil(log2 T))`.
    pub max_calls: usize,
    /// `rho / M`.
    pub rho1: f64,
    /// `1 / (2 M T)`.
    pub delta1: f64,
}

/// `M = K (1 + ceil(log2 T))`, the estimator call budget.
pub fn max_calls(num_arms: usize, horizon: usize) -> usize {
    num_arms * (1 + ceil_log2(horizon) as usize)
}

pub fn budget_for(num_arms: usize, horizon: usize, rho: f64) -> Result<RepUcbBudget> {
    if num_arms == 0 {
        return Err(Error::config("need at least one arm"));
    }
    if horizon < num_arms {
        return Err(Error::config(format!(
            "horizon T = {horizon} must be at least K = {num_arms}"
        )));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::config(format!("rho must lie in (0, 1), got {rho}")));
    }
    let max_calls = max_calls(num_arms, horizon);
    let rho1 = rho / max_calls as f64;
    let delta1 = 1.0 / (2.0 * max_calls as f64 * horizon as f64);
    if delta1 > rho1 / 4.0 {
        return Err(Error::config(format!(
            "delta1 <= rho1 / 4 violated: delta1 = 1/(2MT) = {delta1:e} > rho1 / 4 = {:e} \
             (K = {num_arms}, T = {horizon}, rho = {rho}, M = {max_calls})",
            rho1 / 4.0
        )));
    }
    Ok(RepUcbBudget {
        rho,
        num_arms,
        horizon,
        max_calls,
        rho1,
        delta1,
    })
}

impl RepUcbBudget {
    pub fn mean_params(&self) -> Result<RepMeanParams> {
        RepMeanParams::new(self.delta1, self.rho1)
    }

    /// `H_a = 9 C_ME ln(1 / delta1) / ((rho1 - delta1)^2 gap^2)`.
    pub fn pull_bound_h(&self, gap: f64, c_me: f64) -> f64 {
        9.0 * c_me * (1.0 / self.delta1).ln() / ((self.rho1 - self.delta1).powi(2) * gap * gap)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmState {
    pub samples: Vec<f64>,
    pub estimate: f64,
    pub radius: f64,
    pub index: f64,
}

impl ArmState {
    pub fn count(&self) -> usize {
        self.samples.len()
    }
}

/// Position of the first maximum.
pub fn argmax_first(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if !(v > b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Arm with the largest optimistic index, smallest index on ties.
pub fn select_arm(states: &[ArmState]) -> usize {
    argmax_first(states.iter().map(|s| s.index)).expect("at least one arm")
}

/// `min(N_a, T - t + 1)` for the 1-based round `t`.
pub fn batch_length(count: usize, t: usize, horizon: usize) -> usize {
    count.min(horizon + 1 - t)
}

/// One estimator call as seen by a [`MeanOracle`].
#[derive(Debug, Clone, Copy)]
pub struct MeanCall<'a> {
    pub arm: usize,
    /// Per-arm call counter, starting at 0 for the initialization call.
    pub call_index: usize,
    pub samples: &'a [f64],
}

/// Source of the mean estimates used by the replicable UCB loop.
pub trait MeanOracle {
    fn estimate(&mut self, call: MeanCall<'_>) -> Result<f64>;
}

/// The replicable mean estimator with shifts keyed by `["repmean", arm, call]`.
#[derive(Debug, Clone)]
pub struct RepMeanOracle {
    pub params: RepMeanParams,
    pub shared: StreamHandle,
}

impl MeanOracle for RepMeanOracle {
    fn estimate(&mut self, call: MeanCall<'_>) -> Result<f64> {
        let key = labels!["repmean", call.arm, call.call_index];
        Ok(rep_mean(call.samples, &self.params, &self.shared, &key)?.estimate)
    }
}

/// Ignores the samples and returns a value fixed by the shared stream and
/// the call position. Two runs using it always agree on every call.
#[derive(Debug, Clone)]
pub struct SharedStubOracle {
    pub shared: StreamHandle,
}

impl MeanOracle for SharedStubOracle {
    fn estimate(&mut self, call: MeanCall<'_>) -> Result<f64> {
        Ok(self
            .shared
            .child(&labels!["stub-mean", call.arm, call.call_index])
            .next_uniform())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanCallRecord {
    pub arm: usize,
    pub call_index: usize,
    /// Sample count the estimate was computed from.
    pub count: usize,
    pub estimate: f64,
    pub tau: f64,
    /// First round after the batch that triggered this call (1-based).
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepUcbRecord {
    pub budget: RepUcbBudget,
    pub c_me: f64,
    pub calls: Vec<MeanCallRecord>,
    pub final_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MabRecord {
    RepUcb(RepUcbRecord),
    PlainUcb { final_counts: Vec<usize> },
}

pub type MabTrajectory = Trajectory<usize, MabRecord>;

/// Runs the replicable UCB algorithm with the replicable mean estimator.
pub fn repucb_run(
    inst: &MabInstance,
    horizon: usize,
    rho: f64,
    shared: &StreamHandle,
    env: &mut StreamHandle,
) -> Result<MabTrajectory> {
    let budget = budget_for(inst.num_arms(), horizon, rho)?;
    let mut oracle = RepMeanOracle {
        params: budget.mean_params()?,
        shared: shared.clone(),
    };
    repucb_run_with_oracle(inst, &budget, &mut oracle, env)
}

/// The replicable UCB loop with an arbitrary mean oracle.
pub fn repucb_run_with_oracle<O: MeanOracle>(
    inst: &MabInstance,
    budget: &RepUcbBudget,
    oracle: &mut O,
    env: &mut StreamHandle,
) -> Result<MabTrajectory> {
    let k = inst.num_arms();
    if budget.num_arms != k {
        return Err(Error::config(format!(
            "budget was computed for {} arms, instance has {k}",
            budget.num_arms
        )));
    }
    let horizon = budget.horizon;
    let params = budget.mean_params()?;
    let mut record = RepUcbRecord {
        budget: *budget,
        c_me: params.c_me,
        calls: Vec::with_capacity(budget.max_calls),
        final_counts: Vec::new(),
    };
    let mut traj = Trajectory::with_capacity(horizon, ());
    let mut calls_per_arm = vec![0usize; k];

    let mut refresh = |arm: usize,
                       state: &mut ArmState,
                       round: usize,
                       calls: &mut Vec<MeanCallRecord>|
     -> Result<()> {
        let call_index = calls_per_arm[arm];
        calls_per_arm[arm] += 1;
        let estimate = oracle.estimate(MeanCall {
            arm,
            call_index,
            samples: &state.samples,
        })?;
        let tau = params.tau(state.count())?;
        state.estimate = estimate;
        state.radius = tau;
        state.index = estimate + 2.0 * tau;
        calls.push(MeanCallRecord {
            arm,
            call_index,
            count: state.count(),
            estimate,
            tau,
            round,
        });
        Ok(())
    };

    let mut arms: Vec<ArmState> = Vec::with_capacity(k);
    for arm in 0..k {
        let reward = inst.sample_reward(arm, env)?;
        traj.push(arm, reward, inst.gap(arm));
        let mut state = ArmState {
            samples: vec![reward],
            estimate: 0.0,
            radius: 0.0,
            index: 0.0,
        };
        refresh(arm, &mut state, arm + 2, &mut record.calls)?;
        arms.push(state);
    }

    let mut t = k + 1;
    while t <= horizon {
        let arm = select_arm(&arms);
        let len = batch_length(arms[arm].count(), t, horizon);
        for _ in 0..len {
            let reward = inst.sample_reward(arm, env)?;
            traj.push(arm, reward, inst.gap(arm));
            arms[arm].samples.push(reward);
        }
        t += len;
        refresh(arm, &mut arms[arm], t, &mut record.calls)?;
    }

    record.final_counts = arms.iter().map(ArmState::count).collect();
    Ok(Trajectory {
        actions: traj.actions,
        rewards: traj.rewards,
        instant_regret: traj.instant_regret,
        record: MabRecord::RepUcb(record),
    })
}

/// UCB1 with per-round updates: index `mean + sqrt(2 ln t / n)`.
pub fn plain_ucb_run(
    inst: &MabInstance,
    horizon: usize,
    env: &mut StreamHandle,
) -> Result<MabTrajectory> {
    let k = inst.num_arms();
    if horizon < k {
        return Err(Error::config(format!(
            "horizon T = {horizon} must be at least K = {k}"
        )));
    }
    let mut traj = Trajectory::with_capacity(horizon, ());
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for t in 1..=horizon {
        let arm = if t <= k {
            t - 1
        } else {
            let log_t = (t as f64).ln();
            argmax_first(
                (0..k).map(|a| sums[a] / counts[a] as f64 + (2.0 * log_t / counts[a] as f64).sqrt()),
            )
            .expect("k >= 1")
        };
        let reward = inst.sample_reward(arm, env)?;
        sums[arm] += reward;
        counts[arm] += 1;
        traj.push(arm, reward, inst.gap(arm));
    }
    Ok(Trajectory {
        actions: traj.actions,
        rewards: traj.rewards,
        instant_regret: traj.instant_regret,
        record: MabRecord::PlainUcb {
            final_counts: counts,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::MabNoise;
    use crate::randomness::SeedPlan;

    fn streams(seed: u64) -> (StreamHandle, StreamHandle) {
        let p = SeedPlan::new(seed, "repucb").paired_streams(0);
        (p.shared, p.env_a)
    }

    fn arm(index: f64) -> ArmState {
        ArmState {
            samples: vec![0.0],
            estimate: 0.0,
            radius: 0.0,
            index,
        }
    }

    #[test]
    fn budget_examples() {
        assert_eq!(budget_for(5, 1000, 0.3).unwrap().max_calls, 55);
        assert_eq!(max_calls(1, 1), 1);
        let b = budget_for(3, 512, 0.3).unwrap();
        assert_eq!(b.max_calls, 30);
        assert!((b.rho1 - 0.01).abs() < 1e-15);
        assert!((b.delta1 - 1.0 / 30720.0).abs() < 1e-18);
    }

    #[test]
    fn budget_rejects_infeasible() {
        // K = 1, T = 1 gives delta1 = 1/2, infeasible for every rho < 1.
        assert!(budget_for(1, 1, 0.9).is_err());
        let err = budget_for(2, 2, 0.01).unwrap_err();
        assert!(err.to_string().contains("delta1 <= rho1 / 4"));
        assert!(budget_for(3, 2, 0.3).is_err());
        assert!(budget_for(3, 100, 1.0).is_err());
    }

    #[test]
    fn ceil_log2_values() {
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(512), 9);
        assert_eq!(ceil_log2(513), 10);
        assert_eq!(ceil_log2(1000), 10);
    }

    #[test]
    fn select_arm_ties() {
        assert_eq!(select_arm(&[arm(0.5), arm(0.9), arm(0.9)]), 1);
        assert_eq!(select_arm(&[arm(1.0), arm(0.2)]), 0);
        assert_eq!(select_arm(&[arm(0.3), arm(0.3), arm(0.3)]), 0);
    }

    #[test]
    fn batch_length_examples() {
        assert_eq!(batch_length(4, 10, 100), 4);
        assert_eq!(batch_length(8, 98, 100), 3);
        assert_eq!(batch_length(1, 100, 100), 1);
    }

    #[test]
    fn repucb_structure() {
        let inst = MabInstance::bernoulli(vec![0.6, 0.5, 0.4]).unwrap();
        let (shared, mut env) = streams(1);
        let traj = repucb_run(&inst, 512, 0.25, &shared, &mut env).unwrap();
        assert_eq!(traj.len(), 512);
        assert_eq!(&traj.actions[..3], &[0, 1, 2]);
        let MabRecord::RepUcb(rec) = &traj.record else {
            panic!("wrong record")
        };
        assert!(rec.calls.len() <= rec.budget.max_calls);
        assert_eq!(rec.final_counts.iter().sum::<usize>(), 512);
        for a in 0..3 {
            let pulls = traj.actions.iter().filter(|&&x| x == a).count();
            assert_eq!(pulls, rec.final_counts[a]);
            assert!(
                rec.calls.iter().filter(|c| c.arm == a).count() <= 1 + ceil_log2(512) as usize
            );
        }
    }

    #[test]
    fn counts_double_outside_final_batch() {
        let inst = MabInstance::bernoulli(vec![0.7, 0.2, 0.5, 0.5]).unwrap();
        let (shared, mut env) = streams(2);
        let horizon = 700;
        let traj = repucb_run(&inst, horizon, 0.3, &shared, &mut env).unwrap();
        let MabRecord::RepUcb(rec) = &traj.record else {
            panic!()
        };
        for a in 0..4 {
            let counts: Vec<usize> = rec
                .calls
                .iter()
                .filter(|c| c.arm == a)
                .map(|c| c.count)
                .collect();
            assert_eq!(counts[0], 1);
            for w in counts.windows(2) {
                let last_batch = w[1] - w[0] < w[0];
                if !last_batch {
                    assert_eq!(w[1], 2 * w[0]);
                }
            }
        }
        // Only the final batch of the run may be truncated.
        let truncated: Vec<_> = rec
            .calls
            .iter()
            .filter(|c| c.call_index > 0)
            .filter(|c| {
                let prev = rec
                    .calls
                    .iter()
                    .find(|p| p.arm == c.arm && p.call_index + 1 == c.call_index)
                    .unwrap();
                c.count != 2 * prev.count
            })
            .collect();
        assert!(truncated.len() <= 1);
        if let Some(c) = truncated.first() {
            assert_eq!(c.round, horizon + 1);
        }
    }

    #[test]
    fn estimates_change_only_at_own_calls() {
        let inst = MabInstance::bernoulli(vec![0.6, 0.5, 0.4]).unwrap();
        let (shared, mut env) = streams(5);
        let traj = repucb_run(&inst, 300, 0.25, &shared, &mut env).unwrap();
        let MabRecord::RepUcb(rec) = &traj.record else {
            panic!()
        };
        // Each call happens right after a batch of the same arm (or initialization).
        for c in rec.calls.iter().filter(|c| c.call_index > 0) {
            assert_eq!(traj.actions[c.round - 2], c.arm);
            let pulls_so_far = traj.actions[..c.round - 1]
                .iter()
                .filter(|&&a| a == c.arm)
                .count();
            assert_eq!(pulls_so_far, c.count);
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let inst =
            MabInstance::new(vec![0.3, 0.6], MabNoise::TruncatedGaussian { scale: 0.2 }).unwrap();
        let (shared, env) = streams(3);
        let a = repucb_run(&inst, 256, 0.2, &shared, &mut env.clone()).unwrap();
        let b = repucb_run(&inst, 256, 0.2, &shared, &mut env.clone()).unwrap();
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.rewards, b.rewards);
        assert_eq!(a.record, b.record);
    }

    #[test]
    fn stub_oracle_gives_identical_trajectories_across_noise() {
        let inst = MabInstance::bernoulli(vec![0.55, 0.5, 0.45, 0.5]).unwrap();
        let p = SeedPlan::new(8, "stub").paired_streams(0);
        let budget = budget_for(4, 400, 0.2).unwrap();
        let mut o1 = SharedStubOracle { shared: p.shared.clone() };
        let mut o2 = SharedStubOracle { shared: p.shared.clone() };
        let a = repucb_run_with_oracle(&inst, &budget, &mut o1, &mut p.env_a.clone()).unwrap();
        let b = repucb_run_with_oracle(&inst, &budget, &mut o2, &mut p.env_b.clone()).unwrap();
        assert_eq!(a.actions, b.actions);
        assert_ne!(a.rewards, b.rewards);
    }

    #[test]
    fn plain_ucb_deterministic_rewards_exploit() {
        let inst = MabInstance::bernoulli(vec![0.0, 1.0, 0.0]).unwrap();
        let (_, mut env) = streams(4);
        let traj = plain_ucb_run(&inst, 200, &mut env).unwrap();
        assert_eq!(&traj.actions[..3], &[0, 1, 2]);
        // The best arm keeps the top index: 1 + sqrt(2 ln t / n) vs sqrt(2 ln t / 1).
        // Exploration pulls of the others are logarithmic; most pulls go to arm 1.
        let best = traj.actions.iter().filter(|&&a| a == 1).count();
        assert!(best > 150, "{best}");

        let single = MabInstance::bernoulli(vec![0.4]).unwrap();
        let traj = plain_ucb_run(&single, 50, &mut env).unwrap();
        assert!(traj.actions.iter().all(|&a| a == 0));
    }
}
