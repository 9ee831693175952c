//! Paired executions, replicability estimates, regret curves and the
//! per-run diagnostic inequalities.
//!
//! A paired trial runs one algorithm twice with the same shared stream and two
//! independent environment streams, then compares the full action sequences.

use rayon::prelude::*;
use serde::Serialize;

use crate::environment::{LinearInstance, MabInstance};
use crate::error::{Error, Result};
use crate::randomness::{PairedStreams, SeedPlan, StreamHandle};
use crate::replinucb::{
    elliptical_potential_bound, plain_linucb_run, replinucb_run, replinucb_run_with_estimator,
    LinRecord, LinTrajectory, LinUcbConfig, SharedStubEstimator,
};
use crate::repucb::{
    budget_for, plain_ucb_run, repucb_run, repucb_run_with_oracle, MabRecord, MabTrajectory,
    SharedStubOracle,
};

/// Two-sided 95% normal quantile used for every Wilson interval.
pub const Z_95: f64 = 1.96;

/// An algorithm bound to an instance and its tuning.
#[derive(Debug, Clone)]
pub enum Experiment {
    RepUcb {
        inst: MabInstance,
        horizon: usize,
        rho: f64,
    },
    PlainUcb {
        inst: MabInstance,
        horizon: usize,
    },
    RepLinUcb {
        inst: LinearInstance,
        config: LinUcbConfig,
    },
    PlainLinUcb {
        inst: LinearInstance,
        config: LinUcbConfig,
    },
}

/// Which batch-start estimator the replicable algorithms use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMode {
    /// The replicable estimators (the real algorithms).
    Replicable,
    /// Response-independent stubs fixed by the shared stream.
    SharedStub,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::RepUcb { .. } => "repucb",
            Experiment::PlainUcb { .. } => "plain_ucb",
            Experiment::RepLinUcb { .. } => "replinucb",
            Experiment::PlainLinUcb { .. } => "plain_linucb",
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Experiment::RepUcb { horizon, .. } | Experiment::PlainUcb { horizon, .. } => *horizon,
            Experiment::RepLinUcb { config, .. } | Experiment::PlainLinUcb { config, .. } => {
                config.horizon
            }
        }
    }

    /// Checks every parameter-regime condition without running anything.
    pub fn validate(&self) -> Result<()> {
        match self {
            Experiment::RepUcb { inst, horizon, rho } => {
                budget_for(inst.num_arms(), *horizon, *rho)?.mean_params()?;
            }
            Experiment::PlainUcb { inst, horizon } => {
                if *horizon < inst.num_arms() {
                    return Err(Error::config(format!(
                        "horizon T = {horizon} must be at least K = {}",
                        inst.num_arms()
                    )));
                }
            }
            Experiment::RepLinUcb { inst, config } => {
                config.batch_ridge_params(inst)?;
            }
            Experiment::PlainLinUcb { config, .. } => {
                if !(config.delta > 0.0 && config.delta < 1.0) {
                    return Err(Error::config(format!(
                        "delta must lie in (0, 1), got {}",
                        config.delta
                    )));
                }
                if !(config.lambda > 0.0) {
                    return Err(Error::config("lambda must be > 0"));
                }
            }
        }
        if self.horizon() == 0 {
            return Err(Error::config("horizon T must be at least 1"));
        }
        Ok(())
    }

    /// One execution.
    pub fn run(
        &self,
        shared: &StreamHandle,
        env: &mut StreamHandle,
        mode: EstimatorMode,
    ) -> Result<RunOutcome> {
        Ok(match (self, mode) {
            (Experiment::RepUcb { inst, horizon, rho }, EstimatorMode::Replicable) => {
                RunOutcome::Mab(repucb_run(inst, *horizon, *rho, shared, env)?)
            }
            (Experiment::RepUcb { inst, horizon, rho }, EstimatorMode::SharedStub) => {
                let budget = budget_for(inst.num_arms(), *horizon, *rho)?;
                let mut oracle = SharedStubOracle {
                    shared: shared.clone(),
                };
                RunOutcome::Mab(repucb_run_with_oracle(inst, &budget, &mut oracle, env)?)
            }
            (Experiment::PlainUcb { inst, horizon }, _) => {
                RunOutcome::Mab(plain_ucb_run(inst, *horizon, env)?)
            }
            (Experiment::RepLinUcb { inst, config }, EstimatorMode::Replicable) => {
                RunOutcome::Linear(replinucb_run(inst, config, shared, env)?)
            }
            (Experiment::RepLinUcb { inst, config }, EstimatorMode::SharedStub) => {
                let mut est = SharedStubEstimator {
                    params: config.batch_ridge_params(inst)?,
                    shared: shared.clone(),
                };
                RunOutcome::Linear(replinucb_run_with_estimator(inst, config, &mut est, env)?)
            }
            (Experiment::PlainLinUcb { inst, config }, _) => RunOutcome::Linear(plain_linucb_run(
                inst,
                config.horizon,
                config.lambda,
                config.delta,
                env,
            )?),
        })
    }
}

#[derive(Debug, Clone)]
pub enum RunOutcome {
    Mab(MabTrajectory),
    Linear(LinTrajectory),
}

impl RunOutcome {
    pub fn len(&self) -> usize {
        match self {
            RunOutcome::Mab(t) => t.len(),
            RunOutcome::Linear(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cumulative_regret(&self) -> Vec<f64> {
        match self {
            RunOutcome::Mab(t) => t.cumulative_regret(),
            RunOutcome::Linear(t) => t.cumulative_regret(),
        }
    }

    pub fn final_regret(&self) -> f64 {
        match self {
            RunOutcome::Mab(t) => t.final_regret(),
            RunOutcome::Linear(t) => t.final_regret(),
        }
    }

    /// First 1-based round where the action sequences differ. Linear actions
    /// are compared by index in `A_t` and bitwise by value.
    pub fn first_divergence(&self, other: &RunOutcome) -> Option<usize> {
        let pos = match (self, other) {
            (RunOutcome::Mab(a), RunOutcome::Mab(b)) => {
                first_mismatch(&a.actions, &b.actions, |x, y| x == y)
            }
            (RunOutcome::Linear(a), RunOutcome::Linear(b)) => {
                first_mismatch(&a.actions, &b.actions, |x, y| x.same_as(y))
            }
            _ => Some(0),
        };
        pos.map(|i| i + 1)
    }

    /// Start rounds of every batch after the first (replicable linear UCB),
    /// or every round after the first (per-round baselines).
    pub fn batch_starts(&self) -> Option<Vec<usize>> {
        match self {
            RunOutcome::Linear(t) => Some(match &t.record {
                LinRecord::RepLinUcb(r) => r.batches.iter().map(|b| b.start_round).collect(),
                LinRecord::PlainLinUcb(_) => (1..=t.len()).collect(),
            }),
            RunOutcome::Mab(_) => None,
        }
    }

    pub fn elliptical_potential(&self) -> Option<f64> {
        match self {
            RunOutcome::Linear(t) => Some(t.record.trace().elliptical_potential()),
            RunOutcome::Mab(_) => None,
        }
    }
}

fn first_mismatch<T>(a: &[T], b: &[T], eq: impl Fn(&T, &T) -> bool) -> Option<usize> {
    a.iter()
        .zip(b)
        .position(|(x, y)| !eq(x, y))
        .or_else(|| (a.len() != b.len()).then(|| a.len().min(b.len())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// Holds on every run by construction.
    Deterministic,
    /// Holds on runs where the estimators were accurate.
    Probabilistic,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
    pub kind: CheckKind,
}

impl DiagnosticCheck {
    fn le(name: impl Into<String>, lhs: f64, rhs: f64, kind: CheckKind) -> Self {
        Self {
            name: name.into(),
            lhs,
            rhs,
            pass: lhs <= rhs,
            kind,
        }
    }
}

/// Evaluates every diagnostic inequality applicable to `outcome`.
pub fn diagnostic_suite(outcome: &RunOutcome, exp: &Experiment) -> Result<Vec<DiagnosticCheck>> {
    use CheckKind::*;
    let mut checks = Vec::new();
    match (exp, outcome) {
        (Experiment::RepUcb { inst, .. }, RunOutcome::Mab(traj)) => {
            let MabRecord::RepUcb(rec) = &traj.record else {
                return Err(Error::MissingRecord("repmean_calls"));
            };
            let k = inst.num_arms();
            checks.push(DiagnosticCheck::le(
                "repmean_call_budget",
                rec.calls.len() as f64,
                rec.budget.max_calls as f64,
                Deterministic,
            ));
            let off_order = (0..k.min(traj.len()))
                .filter(|&i| traj.actions[i] != i)
                .count();
            checks.push(DiagnosticCheck::le(
                "round_robin_init",
                off_order as f64,
                0.0,
                Deterministic,
            ));
            let inaccurate = rec
                .calls
                .iter()
                .filter(|c| (c.estimate - inst.arm_means()[c.arm]).abs() > c.tau)
                .count();
            checks.push(DiagnosticCheck::le(
                "repmean_accuracy",
                inaccurate as f64,
                0.0,
                Probabilistic,
            ));
            if inaccurate == 0 {
                for a in (0..k).filter(|&a| inst.gap(a) > 0.0) {
                    let h = rec.budget.pull_bound_h(inst.gap(a), rec.c_me);
                    checks.push(DiagnosticCheck::le(
                        format!("suboptimal_pulls_arm{a}"),
                        rec.final_counts[a] as f64,
                        1.0 + 2.0 * h,
                        Probabilistic,
                    ));
                }
            }
        }
        (Experiment::PlainUcb { .. }, RunOutcome::Mab(_)) => {}
        (Experiment::RepLinUcb { inst, config }, RunOutcome::Linear(traj)) => {
            let LinRecord::RepLinUcb(rec) = &traj.record else {
                return Err(Error::MissingRecord("batch_grid"));
            };
            let plan = &rec.plan;
            let trace = &rec.trace;
            if trace.log_det_after.len() != traj.len() {
                return Err(Error::MissingRecord("log_det_after"));
            }
            checks.push(DiagnosticCheck::le(
                "batch_count",
                rec.batches.len() as f64,
                plan.max_batches as f64,
                Deterministic,
            ));
            let mut max_growth = 0.0f64;
            for (i, b) in rec.batches.iter().enumerate() {
                if b.index + 2 > plan.max_batches {
                    continue;
                }
                let end = rec
                    .batches
                    .get(i + 1)
                    .map_or(traj.len() + 1, |n| n.start_round);
                // V_t for rounds t_b < t < end is the Gram matrix after round t - 1.
                for t in (b.start_round + 1)..end {
                    max_growth = max_growth.max(trace.log_det_after[t - 2] - b.log_det_at_start);
                }
            }
            checks.push(DiagnosticCheck::le(
                "within_batch_log_det_growth",
                max_growth,
                plan.log_growth,
                Deterministic,
            ));
            if rec.batches.len() > 1 {
                let min_jump = rec
                    .batches
                    .windows(2)
                    .map(|w| w[1].log_det_at_start - w[0].log_det_at_start)
                    .fold(f64::INFINITY, f64::min);
                checks.push(DiagnosticCheck {
                    name: "trigger_log_det_growth".into(),
                    lhs: min_jump,
                    rhs: plan.log_growth,
                    pass: min_jump > plan.log_growth,
                    kind: Deterministic,
                });
            }
            checks.push(elliptical_check(inst, config, trace.elliptical_potential(), traj.len()));
        }
        (Experiment::PlainLinUcb { inst, config }, RunOutcome::Linear(traj)) => {
            let potential = traj.record.trace().elliptical_potential();
            checks.push(elliptical_check(inst, config, potential, traj.len()));
        }
        _ => return Err(Error::input("run outcome does not match the experiment kind")),
    }
    Ok(checks)
}

fn elliptical_check(
    inst: &LinearInstance,
    config: &LinUcbConfig,
    potential: f64,
    horizon: usize,
) -> DiagnosticCheck {
    DiagnosticCheck::le(
        "elliptical_potential",
        potential,
        elliptical_potential_bound(inst.dim(), horizon, inst.l_bound(), config.lambda),
        CheckKind::Deterministic,
    )
}

/// Outcome of one paired trial.
#[derive(Debug, Clone)]
pub struct PairedRunReport {
    pub trial_id: u64,
    pub matched: bool,
    pub first_divergence_round: Option<usize>,
    pub regret_a: f64,
    pub regret_b: f64,
    pub diagnostics_a: Vec<DiagnosticCheck>,
    pub diagnostics_b: Vec<DiagnosticCheck>,
    pub curve_a: Vec<f64>,
    pub curve_b: Vec<f64>,
    /// Batch start rounds of the first execution (linear algorithms only).
    pub batch_starts_a: Option<Vec<usize>>,
    /// Elliptical potential of the first execution (linear algorithms only).
    pub elliptical_potential_a: Option<f64>,
}

/// Runs both executions of a trial on explicitly supplied streams.
pub fn run_paired_with_streams(
    exp: &Experiment,
    streams: &PairedStreams,
    trial_id: u64,
    mode: EstimatorMode,
) -> Result<PairedRunReport> {
    let wrap = |e: Error| Error::Trial {
        trial: trial_id,
        source: Box::new(e),
    };
    let a = exp
        .run(&streams.shared, &mut streams.env_a.clone(), mode)
        .map_err(wrap)?;
    let b = exp
        .run(&streams.shared, &mut streams.env_b.clone(), mode)
        .map_err(wrap)?;
    let first_divergence_round = a.first_divergence(&b);
    Ok(PairedRunReport {
        trial_id,
        matched: first_divergence_round.is_none(),
        first_divergence_round,
        regret_a: a.final_regret(),
        regret_b: b.final_regret(),
        diagnostics_a: diagnostic_suite(&a, exp).map_err(wrap)?,
        diagnostics_b: diagnostic_suite(&b, exp).map_err(wrap)?,
        curve_a: a.cumulative_regret(),
        curve_b: b.cumulative_regret(),
        batch_starts_a: a.batch_starts(),
        elliptical_potential_a: a.elliptical_potential(),
    })
}

pub fn run_paired(exp: &Experiment, plan: &SeedPlan, trial_id: u64) -> Result<PairedRunReport> {
    run_paired_with_streams(
        exp,
        &plan.paired_streams(trial_id),
        trial_id,
        EstimatorMode::Replicable,
    )
}

/// Runs trials `0..trials` on `workers` threads; the result is in trial order
/// and independent of the worker count.
pub fn run_trials(
    exp: &Experiment,
    plan: &SeedPlan,
    trials: u64,
    workers: usize,
    mode: EstimatorMode,
) -> Result<Vec<PairedRunReport>> {
    exp.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    pool.install(|| {
        (0..trials)
            .into_par_iter()
            .map(|id| run_paired_with_streams(exp, &plan.paired_streams(id), id, mode))
            .collect()
    })
}

/// 95% Wilson score interval for `successes` out of `trials`.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).clamp(0.0, p), (center + half).clamp(p, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReplicabilitySummary {
    pub trials: u64,
    pub matches: u64,
    pub rate: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub target: f64,
}

impl ReplicabilitySummary {
    pub fn from_counts(matches: u64, trials: u64, target: f64) -> Result<Self> {
        if trials == 0 {
            return Err(Error::input("need at least one trial"));
        }
        let (wilson_lo, wilson_hi) = wilson_interval(matches, trials, Z_95);
        Ok(Self {
            trials,
            matches,
            rate: matches as f64 / trials as f64,
            wilson_lo,
            wilson_hi,
            target,
        })
    }
}

/// Match rate with its Wilson interval; `target` is `1 - rho`.
pub fn estimate_replicability(
    reports: &[PairedRunReport],
    target: f64,
) -> Result<ReplicabilitySummary> {
    let matches = reports.iter().filter(|r| r.matched).count() as u64;
    ReplicabilitySummary::from_counts(matches, reports.len() as u64, target)
}

/// Pointwise mean and 10th/90th percentiles of cumulative regret.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretCurve {
    pub mean: Vec<f64>,
    pub p10: Vec<f64>,
    pub p90: Vec<f64>,
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn regret_curve(curves: &[&[f64]]) -> Result<RegretCurve> {
    let Some(first) = curves.first() else {
        return Err(Error::input("need at least one regret series"));
    };
    let horizon = first.len();
    if let Some(bad) = curves.iter().find(|c| c.len() != horizon) {
        return Err(Error::input(format!(
            "horizon mismatch: {} vs {horizon}",
            bad.len()
        )));
    }
    let n = curves.len() as f64;
    let mut out = RegretCurve {
        mean: Vec::with_capacity(horizon),
        p10: Vec::with_capacity(horizon),
        p90: Vec::with_capacity(horizon),
    };
    let mut column = Vec::with_capacity(curves.len());
    for t in 0..horizon {
        column.clear();
        column.extend(curves.iter().map(|c| c[t]));
        out.mean.push(column.iter().sum::<f64>() / n);
        column.sort_by(f64::total_cmp);
        out.p10.push(percentile_sorted(&column, 0.1));
        out.p90.push(percentile_sorted(&column, 0.9));
    }
    Ok(out)
}

/// Regret curve over both executions of every trial.
pub fn regret_curve_of(reports: &[PairedRunReport]) -> Result<RegretCurve> {
    let curves: Vec<&[f64]> = reports
        .iter()
        .flat_map(|r| [r.curve_a.as_slice(), r.curve_b.as_slice()])
        .collect();
    regret_curve(&curves)
}

/// Pass counts of one diagnostic across runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticRate {
    pub name: String,
    pub kind: CheckKind,
    pub evaluated: u64,
    pub passed: u64,
    pub pass_rate: f64,
}

/// Aggregates diagnostics over both executions of every trial, in first-seen
/// name order.
pub fn diagnostic_rates(reports: &[PairedRunReport]) -> Vec<DiagnosticRate> {
    let mut rates: Vec<DiagnosticRate> = Vec::new();
    for check in reports
        .iter()
        .flat_map(|r| r.diagnostics_a.iter().chain(&r.diagnostics_b))
    {
        let entry = match rates.iter_mut().position(|r| r.name == check.name) {
            Some(i) => &mut rates[i],
            None => {
                rates.push(DiagnosticRate {
                    name: check.name.clone(),
                    kind: check.kind,
                    evaluated: 0,
                    passed: 0,
                    pass_rate: 0.0,
                });
                rates.last_mut().unwrap()
            }
        };
        entry.evaluated += 1;
        entry.passed += u64::from(check.pass);
    }
    for r in &mut rates {
        r.pass_rate = r.passed as f64 / r.evaluated as f64;
    }
    rates
}
