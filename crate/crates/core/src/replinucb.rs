//! Replicable batched linear UCB with determinant-triggered batches, and a
//! per-round LinUCB baseline.
//!
//! The policy `(theta_tilde_b, beta_tilde_b, V_{t_b})` is recomputed only at
//! batch starts. A new batch begins after round `t` when `b <= B - 2` and
//! `det V_{t+1} > q det V_{t_b}`; the comparison is done on log-determinants.

use nalgebra::{Cholesky, DVector, Dyn};

use crate::environment::{LinAction, LinearInstance, Trajectory};
use crate::error::{Error, Result};
use crate::labels;
use crate::linalg::{cholesky, inv_quad_form};
use crate::randomness::StreamHandle;
use crate::repridge::{beta_radius, rep_ridge, ridge_fit, GramState, RepRidgeParams};
use crate::repucb::argmax_first;

/// Batch budget and per-batch confidence/replicability levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchPlan {
    /// `B = ceil(d ln(1 + T L^2 / (lambda d)))`.
    pub max_batches: usize,
    /// `q = (1 + T L^2 / (lambda d))^{d / B}`.
    pub growth: f64,
    pub log_growth: f64,
    pub delta_b: f64,
    pub rho_b: f64,
}

/// `ln(1 + T L^2 / (lambda d))`.
fn log_volume_ratio(d: usize, horizon: usize, l_bound: f64, lambda: f64) -> f64 {
    (horizon as f64 * l_bound * l_bound / (lambda * d as f64)).ln_1p()
}

/// Upper bound `2 d ln(1 + T L^2 / (lambda d))` on the elliptical potential.
pub fn elliptical_potential_bound(d: usize, horizon: usize, l_bound: f64, lambda: f64) -> f64 {
    2.0 * d as f64 * log_volume_ratio(d, horizon, l_bound, lambda)
}

pub fn batch_params(
    d: usize,
    horizon: usize,
    l_bound: f64,
    lambda: f64,
    delta: f64,
    rho: f64,
) -> Result<BatchPlan> {
    if d == 0 || horizon == 0 {
        return Err(Error::config("need d >= 1 and T >= 1"));
    }
    if !(l_bound > 0.0 && lambda > 0.0) {
        return Err(Error::config("need L > 0 and lambda > 0"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::config(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(rho > 3.0 * delta && rho < 1.0) {
        return Err(Error::config(format!(
            "rho must lie in (3 delta, 1) = ({}, 1), got {rho}",
            3.0 * delta
        )));
    }
    let log_ratio = log_volume_ratio(d, horizon, l_bound, lambda);
    let max_batches = ((d as f64 * log_ratio).ceil() as usize).max(1);
    let log_growth = d as f64 * log_ratio / max_batches as f64;
    Ok(BatchPlan {
        max_batches,
        growth: log_growth.exp(),
        log_growth,
        delta_b: delta / max_batches as f64,
        rho_b: rho / max_batches as f64,
    })
}

/// `beta (1 + d / (rho_b - 2 delta_b))`.
pub fn inflated_radius(beta: f64, d: usize, rho_b: f64, delta_b: f64) -> Result<f64> {
    if d == 0 {
        return Err(Error::config("dimension d must be at least 1"));
    }
    if !(rho_b > 2.0 * delta_b) {
        return Err(Error::config(format!(
            "rho_b = {rho_b} must exceed 2 delta_b = {}",
            2.0 * delta_b
        )));
    }
    Ok(beta * (1.0 + d as f64 / (rho_b - 2.0 * delta_b)))
}

/// `det_now > q det_start` with `b <= B - 2`, evaluated on logarithms.
pub fn det_trigger(
    log_det_now: f64,
    log_det_start: f64,
    log_growth: f64,
    batch: usize,
    max_batches: usize,
) -> bool {
    batch + 2 <= max_batches && log_det_now > log_growth + log_det_start
}

/// The policy used for every round of one batch.
#[derive(Debug, Clone)]
pub struct BatchState {
    pub index: usize,
    pub start_round: usize,
    pub theta_tilde: DVector<f64>,
    pub beta: f64,
    pub beta_inflated: f64,
    pub log_det_at_start: f64,
    chol_at_start: Cholesky<f64, Dyn>,
}

impl BatchState {
    pub fn new(
        index: usize,
        start_round: usize,
        gram: &GramState,
        theta_tilde: DVector<f64>,
        beta: f64,
        beta_inflated: f64,
    ) -> Result<Self> {
        Ok(Self {
            index,
            start_round,
            theta_tilde,
            beta,
            beta_inflated,
            log_det_at_start: gram.log_det(),
            chol_at_start: cholesky(gram.gram())?,
        })
    }

    /// `<a, theta_tilde> + beta_tilde ||a||_{V_{t_b}^{-1}}`.
    pub fn score(&self, action: &DVector<f64>) -> f64 {
        action.dot(&self.theta_tilde)
            + self.beta_inflated * inv_quad_form(&self.chol_at_start, action).sqrt()
    }
}

/// Smallest-index maximizer of the batch-start UCB score.
pub fn select_action(actions: &[DVector<f64>], batch: &BatchState) -> Result<usize> {
    argmax_first(actions.iter().map(|a| batch.score(a)))
        .ok_or_else(|| Error::input("action set is empty"))
}

/// What a batch-start estimator returns.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEstimate {
    pub theta_tilde: DVector<f64>,
    pub beta: f64,
}

/// Source of the batch-start parameter estimate.
pub trait BatchEstimator {
    fn estimate(&mut self, gram: &GramState, batch: usize) -> Result<BatchEstimate>;
}

/// The replicable ridge estimator with shifts keyed by `["batch", b]`.
#[derive(Debug, Clone)]
pub struct RepRidgeEstimator {
    pub params: RepRidgeParams,
    pub shared: StreamHandle,
}

impl BatchEstimator for RepRidgeEstimator {
    fn estimate(&mut self, gram: &GramState, batch: usize) -> Result<BatchEstimate> {
        let est = rep_ridge(gram, &self.params, &self.shared, &labels!["batch", batch])?;
        Ok(BatchEstimate {
            theta_tilde: est.theta_tilde,
            beta: est.beta,
        })
    }
}

/// Returns a parameter drawn from the shared stream and the design-only
/// radius `beta`, ignoring all responses.
#[derive(Debug, Clone)]
pub struct SharedStubEstimator {
    pub params: RepRidgeParams,
    pub shared: StreamHandle,
}

impl BatchEstimator for SharedStubEstimator {
    fn estimate(&mut self, gram: &GramState, batch: usize) -> Result<BatchEstimate> {
        let mut s = self.shared.child(&labels!["stub-theta", batch]);
        let theta_tilde = DVector::from_fn(gram.dim(), |_, _| 2.0 * s.next_uniform() - 1.0);
        let beta = beta_radius(gram, self.params.delta, self.params.sigma, self.params.s_bound);
        Ok(BatchEstimate { theta_tilde, beta })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub index: usize,
    pub start_round: usize,
    pub log_det_at_start: f64,
    pub theta_tilde: DVector<f64>,
    pub beta: f64,
    pub beta_inflated: f64,
}

/// Per-round quantities shared by both linear algorithms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GramTrace {
    pub lambda: f64,
    /// `||a_t||^2_{V_t^{-1}}` with the Gram matrix before round `t`'s update.
    pub potential: Vec<f64>,
    /// `ln det V_{t+1}` after round `t`'s update.
    pub log_det_after: Vec<f64>,
    /// `ln det(lambda I)`.
    pub log_det_initial: f64,
}

impl GramTrace {
    /// `sum_t min(1, ||a_t||^2_{V_t^{-1}})`.
    pub fn elliptical_potential(&self) -> f64 {
        self.potential.iter().map(|p| p.min(1.0)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepLinUcbRecord {
    pub plan: BatchPlan,
    pub batches: Vec<BatchRecord>,
    pub trace: GramTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinRecord {
    RepLinUcb(RepLinUcbRecord),
    PlainLinUcb(GramTrace),
}

impl LinRecord {
    pub fn trace(&self) -> &GramTrace {
        match self {
            LinRecord::RepLinUcb(r) => &r.trace,
            LinRecord::PlainLinUcb(t) => t,
        }
    }
}

pub type LinTrajectory = Trajectory<LinAction, LinRecord>;

/// Tuning shared by the linear algorithms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinUcbConfig {
    pub horizon: usize,
    pub lambda: f64,
    pub delta: f64,
    pub rho: f64,
}

impl LinUcbConfig {
    pub fn plan(&self, inst: &LinearInstance) -> Result<BatchPlan> {
        batch_params(
            inst.dim(),
            self.horizon,
            inst.l_bound(),
            self.lambda,
            self.delta,
            self.rho,
        )
    }

    pub fn batch_ridge_params(&self, inst: &LinearInstance) -> Result<RepRidgeParams> {
        let plan = self.plan(inst)?;
        RepRidgeParams::new(plan.delta_b, plan.rho_b, inst.sigma(), inst.s_bound())
    }
}

/// Replicable batched linear UCB with the replicable ridge estimator.
pub fn replinucb_run(
    inst: &LinearInstance,
    config: &LinUcbConfig,
    shared: &StreamHandle,
    env: &mut StreamHandle,
) -> Result<LinTrajectory> {
    let mut estimator = RepRidgeEstimator {
        params: config.batch_ridge_params(inst)?,
        shared: shared.clone(),
    };
    replinucb_run_with_estimator(inst, config, &mut estimator, env)
}

pub fn replinucb_run_with_estimator<E: BatchEstimator>(
    inst: &LinearInstance,
    config: &LinUcbConfig,
    estimator: &mut E,
    env: &mut StreamHandle,
) -> Result<LinTrajectory> {
    let plan = config.plan(inst)?;
    let d = inst.dim();
    let horizon = config.horizon;
    let mut gram = GramState::new(d, config.lambda)?;
    let mut traj = Trajectory::with_capacity(horizon, ());
    let mut trace = GramTrace {
        lambda: config.lambda,
        potential: Vec::with_capacity(horizon),
        log_det_after: Vec::with_capacity(horizon),
        log_det_initial: gram.log_det(),
    };
    let mut batches = Vec::new();

    let mut batch_index = 0usize;
    let mut next_start = 1usize;
    let mut current: Option<BatchState> = None;

    for t in 1..=horizon {
        let actions = inst.action_set_at(t);
        if t == next_start {
            let est = estimator.estimate(&gram, batch_index)?;
            let beta_inflated = inflated_radius(est.beta, d, plan.rho_b, plan.delta_b)?;
            let state =
                BatchState::new(batch_index, t, &gram, est.theta_tilde, est.beta, beta_inflated)?;
            batches.push(BatchRecord {
                index: batch_index,
                start_round: t,
                log_det_at_start: state.log_det_at_start,
                theta_tilde: state.theta_tilde.clone(),
                beta: state.beta,
                beta_inflated: state.beta_inflated,
            });
            current = Some(state);
        }
        let batch = current.as_ref().expect("batch 0 starts at t = 1");
        let index = select_action(&actions, batch)?;
        let vector = actions[index].clone();
        let reward = inst.sample_reward(&vector, env)?;
        let regret = inst.gap_at(t, &vector);
        let quad = gram.update(&vector, reward)?;
        trace.potential.push(quad);
        trace.log_det_after.push(gram.log_det());
        traj.push(LinAction { index, vector }, reward, regret);

        if det_trigger(
            gram.log_det(),
            batch.log_det_at_start,
            plan.log_growth,
            batch_index,
            plan.max_batches,
        ) {
            batch_index += 1;
            next_start = t + 1;
        }
    }

    Ok(Trajectory {
        actions: traj.actions,
        rewards: traj.rewards,
        instant_regret: traj.instant_regret,
        record: LinRecord::RepLinUcb(RepLinUcbRecord {
            plan,
            batches,
            trace,
        }),
    })
}

/// Per-round LinUCB: refit, radius `beta_t(delta)`, no rounding or batching.
pub fn plain_linucb_run(
    inst: &LinearInstance,
    horizon: usize,
    lambda: f64,
    delta: f64,
    env: &mut StreamHandle,
) -> Result<LinTrajectory> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::config(format!("delta must lie in (0, 1), got {delta}")));
    }
    let d = inst.dim();
    let mut gram = GramState::new(d, lambda)?;
    let mut traj = Trajectory::with_capacity(horizon, ());
    let mut trace = GramTrace {
        lambda,
        potential: Vec::with_capacity(horizon),
        log_det_after: Vec::with_capacity(horizon),
        log_det_initial: gram.log_det(),
    };
    for t in 1..=horizon {
        let actions = inst.action_set_at(t);
        let theta_hat = ridge_fit(&gram)?;
        let beta = beta_radius(&gram, delta, inst.sigma(), inst.s_bound());
        let state = BatchState::new(t - 1, t, &gram, theta_hat, beta, beta)?;
        let index = select_action(&actions, &state)?;
        let vector = actions[index].clone();
        let reward = inst.sample_reward(&vector, env)?;
        let regret = inst.gap_at(t, &vector);
        let quad = gram.update(&vector, reward)?;
        trace.potential.push(quad);
        trace.log_det_after.push(gram.log_det());
        traj.push(LinAction { index, vector }, reward, regret);
    }
    Ok(Trajectory {
        actions: traj.actions,
        rewards: traj.rewards,
        instant_regret: traj.instant_regret,
        record: LinRecord::PlainLinUcb(trace),
    })
}
