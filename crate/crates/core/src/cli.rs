//! Command-line entry points: configuration loading, experiment execution and
//! result files.
//!
//! Output files depend only on the resolved configuration and master seed;
//! the worker count changes wall-clock time and nothing else.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::checks::{RepMeanSuite, RepRidgeSuite, SuiteResult};
use crate::environment::{ActionSchedule, LinearInstance, MabInstance, MabNoise};
use crate::error::{Error, Result};
use crate::harness::{
    diagnostic_rates, estimate_replicability, regret_curve_of, run_trials, CheckKind,
    DiagnosticRate, EstimatorMode, Experiment, PairedRunReport, ReplicabilitySummary,
};
use crate::randomness::SeedPlan;
use crate::replinucb::{BatchPlan, LinUcbConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SUITE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "repbandit", version, about = "Replicable bandit experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `master_seed` from the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `workers` from the configuration.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overrides `output` from the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// K-armed bandit experiment (repucb or plain_ucb).
    Mab(RunArgs),
    /// Linear bandit experiment (replinucb or plain_linucb).
    Linbandit(RunArgs),
    /// Monte Carlo self-test of one estimator.
    Check {
        #[arg(value_enum)]
        suite: SuiteName,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteName {
    Repmean,
    Repridge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Repucb,
    PlainUcb,
    Replinucb,
    PlainLinucb,
}

impl AlgorithmKind {
    fn is_linear(self) -> bool {
        matches!(self, AlgorithmKind::Replinucb | AlgorithmKind::PlainLinucb)
    }
}

fn default_lambda() -> f64 {
    1.0
}

fn default_workers() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn default_l_bound() -> f64 {
    1.0
}

fn default_noise() -> MabNoise {
    MabNoise::Bernoulli
}

/// Top-level configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: AlgorithmKind,
    pub horizon: usize,
    /// Replicability parameter; also sets the reported target `1 - rho`.
    pub rho: f64,
    /// Confidence parameter (linear algorithms only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub trials: u64,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub experiment_id: Option<String>,
    /// Execution knob only; left out of `summary.json` so results do not
    /// depend on it.
    #[serde(default = "default_workers", skip_serializing)]
    pub workers: usize,
    #[serde(default = "default_output", skip_serializing)]
    pub output: PathBuf,
    pub instance: InstanceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InstanceConfig {
    Mab(MabInstanceConfig),
    Linear(LinearInstanceConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MabInstanceConfig {
    pub arm_means: Vec<f64>,
    #[serde(default = "default_noise")]
    pub noise: MabNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearInstanceConfig {
    /// Explicit parameter vector; otherwise drawn from `theta_seed` with norm `S`.
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    #[serde(default)]
    pub theta_seed: Option<u64>,
    #[serde(default)]
    pub dim: Option<usize>,
    pub sigma: f64,
    pub s_bound: f64,
    #[serde(default = "default_l_bound")]
    pub l_bound: f64,
    pub actions: ActionsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActionsConfig {
    /// `m` evenly spaced vectors of length `L` on the circle (d = 2).
    Circle { m: usize },
    /// Explicit action list.
    Fixed { vectors: Vec<Vec<f64>> },
    /// `m` random directions of length `L`, drawn once.
    FixedRandom { seed: u64, m: usize },
    /// `m` fresh random directions of length `L` in every round.
    RandomSphere { seed: u64, m: usize },
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn apply_overrides(&mut self, args: &RunArgs) {
        if let Some(seed) = args.seed {
            self.master_seed = seed;
        }
        if let Some(w) = args.workers {
            self.workers = w;
        }
        if let Some(out) = &args.out {
            self.output = out.clone();
        }
    }

    pub fn seed_plan(&self) -> SeedPlan {
        let id = self
            .experiment_id
            .clone()
            .unwrap_or_else(|| self.experiment().map_or("experiment", |e| e.name()).to_string());
        SeedPlan::new(self.master_seed, id)
    }

    /// Builds and validates the experiment. Every parameter-regime condition is
    /// checked here, before any trial runs.
    pub fn experiment(&self) -> Result<Experiment> {
        if self.trials == 0 {
            return Err(Error::config("trials must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers must be at least 1"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        let exp = match (&self.instance, self.algorithm) {
            (InstanceConfig::Mab(m), kind) if !kind.is_linear() => {
                if self.delta.is_some() {
                    return Err(Error::config("delta applies to linear algorithms only"));
                }
                let inst = MabInstance::new(m.arm_means.clone(), m.noise)?;
                if kind == AlgorithmKind::Repucb {
                    Experiment::RepUcb {
                        inst,
                        horizon: self.horizon,
                        rho: self.rho,
                    }
                } else {
                    Experiment::PlainUcb {
                        inst,
                        horizon: self.horizon,
                    }
                }
            }
            (InstanceConfig::Linear(l), kind) if kind.is_linear() => {
                let delta = self
                    .delta
                    .ok_or_else(|| Error::config("linear algorithms need delta"))?;
                let inst = l.build()?;
                let config = LinUcbConfig {
                    horizon: self.horizon,
                    lambda: self.lambda,
                    delta,
                    rho: self.rho,
                };
                if kind == AlgorithmKind::Replinucb {
                    Experiment::RepLinUcb { inst, config }
                } else {
                    Experiment::PlainLinUcb { inst, config }
                }
            }
            _ => {
                return Err(Error::config(format!(
                    "instance table does not fit algorithm {:?}",
                    self.algorithm
                )))
            }
        };
        exp.validate()?;
        Ok(exp)
    }
}

impl LinearInstanceConfig {
    pub fn build(&self) -> Result<LinearInstance> {
        let theta = match (&self.theta, self.theta_seed, self.dim) {
            (Some(t), None, None) => DVector::from_vec(t.clone()),
            (None, Some(seed), Some(d)) => LinearInstance::random_theta(seed, d, self.s_bound),
            _ => {
                return Err(Error::config(
                    "give either `theta` or both `theta_seed` and `dim`",
                ))
            }
        };
        let d = theta.len();
        let schedule = match &self.actions {
            ActionsConfig::Circle { m } => {
                if d != 2 {
                    return Err(Error::config("circle actions need d = 2"));
                }
                ActionSchedule::circle(*m, self.l_bound)
            }
            ActionsConfig::Fixed { vectors } => ActionSchedule::Fixed(
                vectors.iter().map(|v| DVector::from_vec(v.clone())).collect(),
            ),
            ActionsConfig::FixedRandom { seed, m } => {
                ActionSchedule::fixed_random(*seed, *m, d, self.l_bound)
            }
            ActionsConfig::RandomSphere { seed, m } => {
                ActionSchedule::RandomSphere { seed: *seed, m: *m }
            }
        };
        if let ActionSchedule::Fixed(a) = &schedule {
            if a.is_empty() {
                return Err(Error::config("action set is empty"));
            }
        }
        LinearInstance::new(theta, self.sigma, self.s_bound, self.l_bound, schedule)
    }
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Summary<'a> {
    pub algorithm: &'static str,
    pub config: &'a ExperimentConfig,
    pub replicability: ReplicabilitySummary,
    pub mean_final_regret: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_plan: Option<BatchPlanSummary>,
    pub diagnostics: Vec<DiagnosticRate>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BatchPlanSummary {
    pub max_batches: usize,
    pub growth: f64,
    pub delta_b: f64,
    pub rho_b: f64,
}

impl From<BatchPlan> for BatchPlanSummary {
    fn from(p: BatchPlan) -> Self {
        Self {
            max_batches: p.max_batches,
            growth: p.growth,
            delta_b: p.delta_b,
            rho_b: p.rho_b,
        }
    }
}

/// JSON formatter that writes every float with 17 significant digits.
struct SeventeenDigits<'a>(serde_json::ser::PrettyFormatter<'a>);

impl serde_json::ser::Formatter for SeventeenDigits<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json_17<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let fmt = SeventeenDigits(serde_json::ser::PrettyFormatter::new());
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, fmt);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// Everything an experiment run produced, before it is written to disk.
pub struct ExperimentOutput {
    pub reports: Vec<PairedRunReport>,
    pub summary: ReplicabilitySummary,
    pub diagnostics: Vec<DiagnosticRate>,
}

impl ExperimentOutput {
    /// True when every deterministic diagnostic held on every run.
    pub fn deterministic_checks_hold(&self) -> bool {
        self.diagnostics
            .iter()
            .filter(|d| d.kind == CheckKind::Deterministic)
            .all(|d| d.passed == d.evaluated)
    }
}

/// Runs the configured experiment and writes its result files.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let exp = config.experiment()?;
    let plan = config.seed_plan();
    let reports = run_trials(
        &exp,
        &plan,
        config.trials,
        config.workers,
        EstimatorMode::Replicable,
    )?;
    let summary = estimate_replicability(&reports, 1.0 - config.rho)?;
    let diagnostics = diagnostic_rates(&reports);
    let out = ExperimentOutput {
        reports,
        summary,
        diagnostics,
    };
    write_outputs(config, &exp, &out)?;
    Ok(out)
}

fn write_outputs(config: &ExperimentConfig, exp: &Experiment, out: &ExperimentOutput) -> Result<()> {
    let dir = &config.output;
    fs::create_dir_all(dir)?;
    let reports = &out.reports;
    let linear = matches!(
        exp,
        Experiment::RepLinUcb { .. } | Experiment::PlainLinUcb { .. }
    );

    let batch_plan = match exp {
        Experiment::RepLinUcb { inst, config } => Some(config.plan(inst)?.into()),
        _ => None,
    };
    let mean_final_regret = reports
        .iter()
        .map(|r| r.regret_a + r.regret_b)
        .sum::<f64>()
        / (2 * reports.len()) as f64;
    let summary = Summary {
        algorithm: exp.name(),
        config,
        replicability: out.summary,
        mean_final_regret,
        batch_plan,
        diagnostics: out.diagnostics.clone(),
    };
    fs::write(dir.join("summary.json"), to_json_17(&summary)?)?;

    let curve = regret_curve_of(reports)?;
    let mut w = csv::Writer::from_path(dir.join("regret.csv"))?;
    w.write_record(["round", "mean_regret", "p10", "p90"])?;
    for t in 0..curve.mean.len() {
        w.write_record([
            (t + 1).to_string(),
            curve.mean[t].to_string(),
            curve.p10[t].to_string(),
            curve.p90[t].to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("trials.csv"))?;
    let mut header = vec![
        "trial_id",
        "match",
        "first_divergence_round",
        "regret_a",
        "regret_b",
    ];
    if linear {
        header.push("elliptical_potential");
    }
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![
            r.trial_id.to_string(),
            r.matched.to_string(),
            r.first_divergence_round
                .map_or_else(String::new, |t| t.to_string()),
            r.regret_a.to_string(),
            r.regret_b.to_string(),
        ];
        if linear {
            row.push(r.elliptical_potential_a.unwrap_or(f64::NAN).to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    if linear {
        let mut w = csv::Writer::from_path(dir.join("batches.csv"))?;
        w.write_record(["trial_id", "batch_count", "trigger_rounds"])?;
        for r in reports {
            let starts = r
                .batch_starts_a
                .as_deref()
                .ok_or(Error::MissingRecord("batch_starts"))?;
            let triggers: Vec<String> = starts.iter().skip(1).map(|t| t.to_string()).collect();
            w.write_record([
                r.trial_id.to_string(),
                starts.len().to_string(),
                triggers.join(";"),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn report_error(e: &Error) -> i32 {
    eprintln!("error: {e}");
    if e.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

fn cmd_run(args: &RunArgs, linear: bool) -> i32 {
    let mut config = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => return report_error(&e),
    };
    config.apply_overrides(args);
    if config.algorithm.is_linear() != linear {
        let sub = if linear { "linbandit" } else { "mab" };
        return report_error(&Error::config(format!(
            "algorithm {:?} cannot run under `{sub}`",
            config.algorithm
        )));
    }
    match run_experiment(&config) {
        Ok(out) => {
            let s = &out.summary;
            println!(
                "match rate {:.4} ({}/{}), 95% CI [{:.4}, {:.4}], target {:.4}",
                s.rate, s.matches, s.trials, s.wilson_lo, s.wilson_hi, s.target
            );
            for d in &out.diagnostics {
                println!("{}: {}/{} pass", d.name, d.passed, d.evaluated);
            }
            if out.deterministic_checks_hold() {
                EXIT_OK
            } else {
                eprintln!("error: a deterministic diagnostic failed");
                EXIT_SUITE
            }
        }
        Err(e) => report_error(&e),
    }
}

/// Runs one Monte Carlo suite and returns its results.
pub fn run_suite(which: SuiteName, seed: u64) -> Result<Vec<SuiteResult>> {
    match which {
        SuiteName::Repmean => RepMeanSuite::default().run(&SeedPlan::new(seed, "check-repmean")),
        SuiteName::Repridge => {
            RepRidgeSuite::default().run(&SeedPlan::new(seed, "check-repridge"))
        }
    }
}

fn cmd_check(which: SuiteName, seed: u64, workers: Option<usize>) -> i32 {
    let run = || run_suite(which, seed);
    let results = match workers {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(run),
            Err(e) => return report_error(&Error::Io(io::Error::other(e))),
        },
        None => run(),
    };
    match results {
        Ok(results) => {
            for r in &results {
                println!("{}", r.line());
            }
            let failed: Vec<_> = results.iter().filter(|r| !r.pass).collect();
            if failed.is_empty() {
                EXIT_OK
            } else {
                for r in failed {
                    eprintln!(
                        "failed: {} observed {:.4}, required {:.4}",
                        r.property, r.observed, r.required
                    );
                }
                EXIT_SUITE
            }
        }
        Err(e) => report_error(&e),
    }
}

/// Executes a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Mab(args) => cmd_run(&args, false),
        Command::Linbandit(args) => cmd_run(&args, true),
        Command::Check {
            suite,
            seed,
            workers,
        } => cmd_check(suite, seed, workers),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAB: &str = r#"
algorithm = "repucb"
horizon = 128
rho = 0.25
trials = 4
master_seed = 3

[instance]
arm_means = [0.6, 0.5, 0.4]
"#;

    const LIN: &str = r#"
algorithm = "replinucb"
horizon = 200
rho = 0.3
delta = 0.05
trials = 3

[instance]
theta = [0.6, 0.3]
sigma = 0.1
s_bound = 1.0
actions = { kind = "circle", m = 8 }
"#;

    #[test]
    fn parses_both_instance_kinds() {
        let c = ExperimentConfig::from_toml(MAB).unwrap();
        assert!(matches!(c.experiment().unwrap(), Experiment::RepUcb { .. }));
        assert_eq!(c.workers, 1);
        let c = ExperimentConfig::from_toml(LIN).unwrap();
        assert!(matches!(c.experiment().unwrap(), Experiment::RepLinUcb { .. }));
        assert_eq!(c.lambda, 1.0);
    }

    #[test]
    fn validation_errors_are_config_errors() {
        let zero = MAB.replace("trials = 4", "trials = 0");
        let e = ExperimentConfig::from_toml(&zero).unwrap().experiment().unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("trials"));

        let tight = LIN.replace("rho = 0.3", "rho = 0.1");
        let e = ExperimentConfig::from_toml(&tight).unwrap().experiment().unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("3 delta"));

        let typo = MAB.replace("horizon", "horizn");
        assert!(ExperimentConfig::from_toml(&typo).unwrap_err().is_config());

        let mixed = MAB.replace("repucb", "replinucb");
        let e = ExperimentConfig::from_toml(&mixed).unwrap().experiment().unwrap_err();
        assert!(e.is_config());
    }

    #[test]
    fn json_floats_have_17_digits() {
        let s = to_json_17(&serde_json::json!({"x": 0.1, "n": 3, "bad": f64::NAN})).unwrap();
        assert!(s.contains("1.0000000000000001e-1"));
        assert!(s.contains("\"n\": 3"));
        assert!(s.contains("null"));
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["x"].as_f64(), Some(0.1));
    }

    #[test]
    fn writes_linear_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::from_toml(LIN).unwrap();
        c.output = dir.path().to_path_buf();
        let out = run_experiment(&c).unwrap();
        assert!(out.deterministic_checks_hold());
        for f in ["summary.json", "regret.csv", "trials.csv", "batches.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let trials = fs::read_to_string(dir.path().join("trials.csv")).unwrap();
        assert!(trials.starts_with(
            "trial_id,match,first_divergence_round,regret_a,regret_b,elliptical_potential\n"
        ));
        assert_eq!(trials.lines().count(), 4);
        let regret = fs::read_to_string(dir.path().join("regret.csv")).unwrap();
        assert_eq!(regret.lines().count(), 201);
    }
}
