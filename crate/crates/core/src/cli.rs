//! Command-line surface: JSON experiment configs, the experiment commands and
//! their result files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{
    bias_bound, learning_condition_report, m_coefficients, theoretical_rate, AnalysisError, LearningReport, RateOutcome,
};
use crate::beliefs::aggregate_identity;
use crate::engine::{monte_carlo_with, summarize, RecordOptions, RunConfig, SimError, Trajectory, ENGINE_PERRON_TOL};
use crate::graph::{is_strongly_connected, GraphError, Network, SpectralData};
use crate::model::{is_globally_identifiable, lambda_matrix, InitialPriors, ModelError, SignalModel, StateSpace};
use crate::rules::{Schedule, UpdateRule};

/// Environment variable naming the output directory when the config has none.
pub const OUTPUT_DIR_ENV: &str = "NETLEARN_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "out";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("run failed: {0}")]
    Runtime(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Invalid(_) | CliError::Unsupported(_) => 1,
            CliError::Runtime(_) | CliError::Io { .. } => 2,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Step { .. } | SimError::Init(_) => CliError::Runtime(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorsSpec {
    Named(String),
    PerAgent(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleName {
    CommonPrior,
    RandomWalk,
    Geometric,
    TimeVarying,
    WeightedSelf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Power,
    LogPower,
    Geometric,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

impl ScheduleSpec {
    /// Missing `c` defaults to the value giving `x_1 = ρ/2`.
    pub fn resolve(&self, rho: f64) -> Schedule {
        let half = 0.5 * rho;
        match self.kind {
            ScheduleKind::Power => {
                let p = self.p.unwrap_or(1.0);
                Schedule::Power { c: self.c.unwrap_or(half), p }
            }
            ScheduleKind::LogPower => {
                let p = self.p.unwrap_or(1.0);
                Schedule::LogPower { c: self.c.unwrap_or(half * 3f64.ln().powi(2)), p }
            }
            ScheduleKind::Geometric => {
                let p = self.p.unwrap_or(0.5);
                Schedule::Geometric { c: self.c.unwrap_or(half / p), p }
            }
            ScheduleKind::Constant => Schedule::Constant { c: self.c.unwrap_or(half) },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_schedule: Option<ScheduleSpec>,
    #[serde(rename = "P", default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<Vec<f64>>>,
    /// Common prior of the `common_prior` rule; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub name: RuleName,
    #[serde(default)]
    pub params: RuleParams,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `network[i]` lists the nodes whose beliefs node `i` observes.
    pub network: Vec<Vec<usize>>,
    pub states: Vec<String>,
    /// Label of the true state; drawn from `nature_prior` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nature_prior: Option<Vec<f64>>,
    pub likelihoods: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub allow_zero_likelihoods: bool,
    pub priors: PriorsSpec,
    pub rule: RuleSpec,
    pub horizon: usize,
    pub seed: u64,
    #[serde(default = "one")]
    pub n_seeds: usize,
    #[serde(default = "one")]
    pub record_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// A config turned into engine inputs.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub run: RunConfig,
    pub spectral: SpectralData,
    pub hash: String,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Parse { path: if path.is_empty() { "config".into() } else { path }, message: e.into_inner().to_string() }
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON rendering, without `output_dir`.
    pub fn hash(&self) -> String {
        let canonical = Self { output_dir: None, ..self.clone() };
        hex::encode(Sha256::digest(serde_json::to_string(&canonical).expect("config serializes").as_bytes()))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    pub fn build(&self) -> Result<Experiment, CliError> {
        let n = self.network.len();
        for (i, nbrs) in self.network.iter().enumerate() {
            if let Some(&j) = nbrs.iter().find(|&&j| j >= n) {
                return Err(CliError::Invalid(format!("network[{i}]: node {j} does not exist (n = {n})")));
            }
        }
        let network = Network::from_neighbors(self.network.clone())?;
        if !is_strongly_connected(&network) {
            return Err(CliError::Invalid("network: not strongly connected".into()));
        }
        if self.likelihoods.len() != n {
            return Err(CliError::Invalid(format!("likelihoods: expected {n} agents, got {}", self.likelihoods.len())));
        }
        let m = self.states.len();
        let (truth, sample_truth) = match &self.truth {
            Some(label) => (
                self.states
                    .iter()
                    .position(|s| s == label)
                    .ok_or_else(|| CliError::Invalid(format!("truth: unknown state label {label:?}")))?,
                false,
            ),
            None => (0, true),
        };
        let states = match &self.nature_prior {
            Some(nu) => StateSpace::with_nature_prior(self.states.clone(), truth, nu.clone())?,
            None => StateSpace::new(self.states.clone(), truth)?,
        };
        let signals = if self.allow_zero_likelihoods {
            SignalModel::with_zeros(self.likelihoods.clone(), m)?
        } else {
            SignalModel::new(self.likelihoods.clone(), m)?
        };
        let priors = match &self.priors {
            PriorsSpec::Named(s) if s == "uniform" => InitialPriors::uniform(n, m),
            PriorsSpec::Named(s) => return Err(CliError::Invalid(format!("priors: expected \"uniform\" or per-agent arrays, got {s:?}"))),
            PriorsSpec::PerAgent(p) => {
                if p.len() != n {
                    return Err(CliError::Invalid(format!("priors: expected {n} agents, got {}", p.len())));
                }
                InitialPriors::new(p.clone(), m)?
            }
        };
        if self.horizon < 1 {
            return Err(CliError::Invalid("horizon: must be at least 1".into()));
        }
        if self.n_seeds < 1 {
            return Err(CliError::Invalid("n_seeds: must be at least 1".into()));
        }
        if self.record_every < 1 {
            return Err(CliError::Invalid("record_every: must be at least 1".into()));
        }
        let spectral = SpectralData::compute(&network, ENGINE_PERRON_TOL)?;
        let rule = self.rule_for(&network, spectral.rho, m)?;
        let run = RunConfig {
            network,
            states,
            signals,
            priors,
            rule,
            horizon: self.horizon,
            seed: self.seed,
            sample_truth,
            record: RecordOptions { every: self.record_every, ..RecordOptions::full() },
        };
        run.validate()?;
        Ok(Experiment { config: self.clone(), run, spectral, hash: self.hash() })
    }

    fn rule_for(&self, net: &Network, rho: f64, m: usize) -> Result<UpdateRule, CliError> {
        let params = &self.rule.params;
        let invalid = |e: crate::rules::RuleError| CliError::Invalid(format!("rule.params: {e}"));
        let rule = match self.rule.name {
            RuleName::CommonPrior => {
                let prior = params.prior.clone().unwrap_or_else(|| vec![1.0 / m as f64; m]);
                if prior.len() != m {
                    return Err(CliError::Invalid(format!("rule.params.prior: expected {m} entries, got {}", prior.len())));
                }
                UpdateRule::common_prior(prior).map_err(invalid)?
            }
            RuleName::RandomWalk => match &params.p {
                None => UpdateRule::random_walk_uniform(net).map_err(invalid)?,
                Some(rows) => {
                    let n = net.n();
                    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                        return Err(CliError::Invalid(format!("rule.params.P: expected a {n}x{n} matrix")));
                    }
                    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                    UpdateRule::random_walk(net, DMatrix::from_row_slice(n, n, &flat)).map_err(invalid)?
                }
            },
            RuleName::Geometric => UpdateRule::GeometricAveragePrior,
            RuleName::TimeVarying => {
                let schedule = match &params.x_schedule {
                    Some(spec) => spec.resolve(rho),
                    None => Schedule::default_for(rho),
                };
                UpdateRule::TimeVaryingLogLinear { schedule }
            }
            RuleName::WeightedSelf => {
                let eta = params.eta.ok_or_else(|| CliError::Invalid("rule.params.eta: required for weighted_self".into()))?;
                UpdateRule::weighted_self(eta).map_err(invalid)?
            }
        };
        Ok(rule)
    }
}

#[derive(Debug, Parser)]
#[command(name = "netlearn", version, about = "Memoryless Bayesian learning on directed networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Report connectivity, spectral data and identifiability.
    Inspect { config: PathBuf },
    /// Simulate every seed and write trajectories and a summary.
    Simulate { config: PathBuf },
    /// Print the closed-form asymptotic rates.
    Rates { config: PathBuf },
    /// Report the weight-schedule coefficients of the time-varying rule.
    Coeffs {
        config: PathBuf,
        /// Horizon of the coefficient table; defaults to the config horizon.
        #[arg(long)]
        t_max: Option<usize>,
        /// Number of start times `τ` whose final rows are reported.
        #[arg(long, default_value_t = 4)]
        tau_max: usize,
    },
    /// Compare theoretical and ensemble empirical rates.
    Compare { config: PathBuf },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match execute(&cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Inspect { config } => cmd_inspect(&ExperimentConfig::load(config)?, out),
        Command::Simulate { config } => cmd_simulate(&ExperimentConfig::load(config)?, out).map(|_| ()),
        Command::Rates { config } => cmd_rates(&ExperimentConfig::load(config)?, out).map(|_| ()),
        Command::Coeffs { config, t_max, tau_max } => {
            cmd_coeffs(&ExperimentConfig::load(config)?, *t_max, *tau_max, out).map(|_| ())
        }
        Command::Compare { config } => cmd_compare(&ExperimentConfig::load(config)?, out).map(|_| ()),
    }
}

fn stdout_err(e: std::io::Error) -> CliError {
    CliError::Io { path: PathBuf::from("<stdout>"), source: e }
}

fn fmt_vec(v: impl IntoIterator<Item = f64>) -> String {
    let parts: Vec<String> = v.into_iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn rounded(x: f64) -> f64 {
    (x * 1e10).round() / 1e10
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

pub fn cmd_inspect(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let exp = cfg.build()?;
    let sp = &exp.spectral;
    let sig = &exp.run.signals;
    let truth = exp.run.states.truth;
    let labels = &exp.run.states.labels;
    let ident = is_globally_identifiable(sig, truth);
    let lambda = lambda_matrix(sig, truth)?;
    (|| -> std::io::Result<()> {
        writeln!(out, "strongly connected: yes, aperiodic: {}, ρ={:?}", yes_no(sp.aperiodic), rounded(sp.rho))?;
        writeln!(out, "α: {}", fmt_vec(sp.alpha.iter().copied()))?;
        writeln!(out, "s̄: {}", fmt_vec(sp.s_vec.iter().copied()))?;
        writeln!(out, "diameter: {}", sp.diameter)?;
        if exp.run.sample_truth {
            writeln!(out, "truth: not pinned; identifiability reported against {}", labels[truth])?;
        }
        writeln!(out, "identifiable: {}", yes_no(ident.identifiable))?;
        for (k, agents) in &ident.witnesses {
            writeln!(out, "  {}: agents {:?}", labels[*k], agents)?;
        }
        writeln!(out, "λ:")?;
        for (i, row) in lambda.iter().enumerate() {
            writeln!(out, "  agent {i}: {}", fmt_vec(row.iter().copied()))?;
        }
        Ok(())
    })()
    .map_err(stdout_err)
}

pub fn cmd_rates(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<RateOutcome, CliError> {
    let exp = cfg.build()?;
    let outcome = rates_of(&exp)?;
    let labels = &exp.run.states.labels;
    let res = match &outcome {
        RateOutcome::NoClosedForm => writeln!(out, "no closed-form rate; run coeffs"),
        RateOutcome::Exponential(p) => (|| {
            writeln!(out, "rule: {}", p.rule)?;
            writeln!(out, "{:<16} {:>14}", "state", "rate")?;
            for (k, r) in &p.per_state {
                writeln!(out, "{:<16} {:>14.8}", labels[*k], r)?;
            }
            writeln!(out, "slowest: {} at rate {:.8}", labels[p.slowest_state], p.rate)?;
            if !p.identifiable {
                writeln!(out, "truth is not globally identifiable")?;
            }
            Ok(())
        })(),
    };
    res.map_err(stdout_err)?;
    Ok(outcome)
}

fn rates_of(exp: &Experiment) -> Result<RateOutcome, CliError> {
    theoretical_rate(&exp.run.rule, &exp.run.network, &exp.spectral, &exp.run.signals, exp.run.states.truth)
        .map_err(|e| CliError::Unsupported(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoeffReport {
    pub t_max: usize,
    pub j_cap: usize,
    pub final_rows: Vec<Vec<f64>>,
    pub learning: LearningReport,
    /// `(θ̌ label, ‖ψ̄(θ̌)‖ exp(M₁))`.
    pub bias_bounds: Vec<(String, f64)>,
}

pub fn cmd_coeffs(cfg: &ExperimentConfig, t_max: Option<usize>, tau_max: usize, out: &mut dyn Write) -> Result<CoeffReport, CliError> {
    let exp = cfg.build()?;
    let schedule = match &exp.run.rule {
        UpdateRule::TimeVaryingLogLinear { schedule } => schedule.clone(),
        other => {
            return Err(CliError::Unsupported(format!(
                "coeffs needs the time_varying rule, config uses {}",
                other.name()
            )))
        }
    };
    let t_max = t_max.unwrap_or(exp.run.horizon);
    let coeffs = m_coefficients(&schedule, t_max, tau_max)?;
    let learning = learning_condition_report(&coeffs, &exp.spectral);
    let truth = exp.run.states.truth;
    let labels = &exp.run.states.labels;
    let bias_bounds: Vec<(String, f64)> = (0..labels.len())
        .filter(|&k| k != truth)
        .map(|k| (labels[k].clone(), bias_bound(&exp.run.priors, k, truth, &coeffs)))
        .collect();
    let report = CoeffReport { t_max, j_cap: coeffs.j_cap, final_rows: coeffs.final_rows.clone(), learning, bias_bounds };
    let l = &report.learning;
    (|| -> std::io::Result<()> {
        writeln!(out, "schedule: {schedule:?}")?;
        writeln!(out, "t_max: {t_max}, j_cap: {}", report.j_cap)?;
        for (tau, row) in report.final_rows.iter().enumerate() {
            let shown: Vec<String> = row.iter().take(6).map(|x| format!("{x:.6e}")).collect();
            writeln!(out, "M_j(t_max, τ={tau}) for j=0..: [{}]", shown.join(", "))?;
        }
        writeln!(out, "M1 partial sum: {:.10} (trend: {:?}, decade ratio {:?})", l.m1_partial, l.m1_trend, l.m1_decade_ratio)?;
        writeln!(out, "S_d(t_max), d={}: {:.6e} (trend: {:?}, decade ratio {:?})", l.d, l.s_d, l.s_d_trend, l.s_d_decade_ratio)?;
        writeln!(out, "double sum from j=0: {:.6e} ({:?})", l.double_sum_from_zero, l.double_sum_from_zero_trend)?;
        writeln!(out, "double sum from j=1: {:.6e} ({:?})", l.double_sum_from_one, l.double_sum_from_one_trend)?;
        writeln!(out, "K1, K2 over trailing half: {:.6e}, {:.6e}", l.k1, l.k2)?;
        for (label, b) in &report.bias_bounds {
            writeln!(out, "bias bound {label}: {b:.6e}")?;
        }
        writeln!(out, "verdict: {:?} ({})", l.verdict, l.note)?;
        Ok(())
    })()
    .map_err(stdout_err)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateRates {
    pub state: String,
    pub per_agent: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub seed: u64,
    pub truth: String,
    pub trajectory_file: String,
    /// Empty when the horizon is too short for a slope estimate.
    pub empirical_rates: Vec<StateRates>,
    /// `(θ̌ label, max residual)` of the aggregate identity.
    pub identity_residuals: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub config_hash: String,
    pub rule: String,
    pub theoretical: Option<RateOutcome>,
    pub theoretical_error: Option<String>,
    pub runs: Vec<RunRecord>,
}

/// Writes one trajectory as `t,agent,state,belief` rows.
pub fn write_trajectory_csv(traj: &Trajectory, labels: &[String], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e.into() })?;
    let wrap = |e: csv::Error| CliError::Io { path: path.to_path_buf(), source: e.into() };
    w.write_record(["t", "agent", "state", "belief"]).map_err(wrap)?;
    for snap in &traj.snapshots {
        let t = snap.t.to_string();
        for i in 0..traj.n_agents {
            let agent = i.to_string();
            for (k, lb) in snap.log_belief(i).iter().enumerate() {
                w.write_record([t.as_str(), agent.as_str(), labels[k].as_str(), &format!("{:.16e}", lb.exp())])
                    .map_err(wrap)?;
            }
        }
    }
    w.flush().map_err(io_err(path))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Removes files written so far when a command fails.
struct Outputs {
    files: Vec<PathBuf>,
    keep: bool,
}

impl Outputs {
    fn new() -> Self {
        Self { files: Vec::new(), keep: false }
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.keep {
            for f in &self.files {
                let _ = fs::remove_file(f);
            }
        }
    }
}

pub fn cmd_simulate(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<SimulateSummary, CliError> {
    let exp = cfg.build()?;
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut outputs = Outputs::new();
    let labels = &exp.run.states.labels;
    let (theoretical, theoretical_error) = match rates_of(&exp) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };

    let results = monte_carlo_with(&exp.run, cfg.n_seeds, |traj| {
        let file = format!("trajectory_{}.csv", traj.seed);
        let path = dir.join(&file);
        write_trajectory_csv(traj, labels, &path).map_err(|e| SimError::Config(e.to_string()))?;
        Ok((path, run_record(&exp, traj, file)))
    });
    let mut runs = Vec::new();
    let mut first_err = None;
    for (seed, r) in results {
        match r {
            Ok((path, rec)) => {
                outputs.files.push(path);
                runs.push(rec?);
            }
            Err(e) => {
                outputs.files.push(dir.join(format!("trajectory_{seed}.csv")));
                first_err.get_or_insert(CliError::Runtime(format!("seed {seed}: {e}")));
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let summary = SimulateSummary { config_hash: exp.hash.clone(), rule: exp.run.rule.name().into(), theoretical, theoretical_error, runs };
    let summary_path = dir.join("summary.json");
    outputs.files.push(summary_path.clone());
    write_json(&summary, &summary_path)?;
    writeln!(out, "wrote {} trajectories and summary.json to {}", summary.runs.len(), dir.display()).map_err(stdout_err)?;
    outputs.keep = true;
    Ok(summary)
}

fn run_record(exp: &Experiment, traj: &Trajectory, file: String) -> Result<RunRecord, CliError> {
    let labels = &exp.run.states.labels;
    let empirical_rates = match summarize(traj) {
        Ok(s) => s
            .rates
            .iter()
            .map(|r| StateRates {
                state: labels[r.theta_check].clone(),
                per_agent: r.slopes.iter().map(|s| -s).collect(),
                mean: r.rate(),
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    let identity_residuals = (0..traj.n_states)
        .filter(|&k| k != traj.truth)
        .map(|k| {
            aggregate_identity(traj, &exp.run.network, &exp.run.signals, &exp.run.priors, &exp.spectral, k)
                .map(|rep| (labels[k].clone(), rep.max_residual))
                .map_err(|e| CliError::Runtime(e.to_string()))
        })
        .collect::<Result<_, _>>()?;
    Ok(RunRecord { seed: traj.seed, truth: labels[traj.truth].clone(), trajectory_file: file, empirical_rates, identity_residuals })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub state: String,
    /// `None` for the ensemble mean row.
    pub agent: Option<usize>,
    pub theoretical: Option<f64>,
    pub empirical_mean: f64,
    pub empirical_std: f64,
    /// Relative error, or absolute error when the prediction is zero.
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub config_hash: String,
    pub rule: String,
    pub n_seeds: usize,
    pub horizon: usize,
    pub identifiable: bool,
    pub theoretical: Option<RateOutcome>,
    pub rows: Vec<CompareRow>,
    pub failed_seeds: Vec<(u64, String)>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn rate_error(theory: Option<f64>, emp: f64) -> Option<f64> {
    theory.map(|th| if th == 0.0 { emp.abs() } else { (emp - th).abs() / th })
}

pub fn cmd_compare(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<CompareReport, CliError> {
    let mut exp = cfg.build()?;
    exp.run.record = RecordOptions { every: exp.run.horizon, ..RecordOptions::default() };
    let theoretical = match rates_of(&exp) {
        Ok(r) => Some(r),
        Err(CliError::Unsupported(msg)) => {
            writeln!(out, "no theoretical rate: {msg}").map_err(stdout_err)?;
            None
        }
        Err(e) => return Err(e),
    };
    let results = monte_carlo_with(&exp.run, cfg.n_seeds, summarize);
    let mut runs = Vec::new();
    let mut failed_seeds = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(s) => runs.push(s),
            Err(e) => failed_seeds.push((seed, e.to_string())),
        }
    }
    if runs.is_empty() {
        return Err(CliError::Runtime("every seed failed".into()));
    }
    let labels = &exp.run.states.labels;
    let prediction = theoretical.as_ref().and_then(RateOutcome::prediction);
    let mut rows = Vec::new();
    for (c, first) in runs[0].rates.iter().enumerate() {
        let k = first.theta_check;
        let th = prediction.and_then(|p| p.per_state.iter().find(|(s, _)| *s == k).map(|(_, r)| *r));
        let means: Vec<f64> = runs.iter().map(|s| s.rates[c].rate()).collect();
        let (mean, std) = mean_std(&means);
        rows.push(CompareRow { state: labels[k].clone(), agent: None, theoretical: th, empirical_mean: mean, empirical_std: std, error: rate_error(th, mean) });
        for i in 0..exp.run.network.n() {
            let v: Vec<f64> = runs.iter().map(|s| -s.rates[c].slopes[i]).collect();
            let (mean, std) = mean_std(&v);
            rows.push(CompareRow { state: labels[k].clone(), agent: Some(i), theoretical: th, empirical_mean: mean, empirical_std: std, error: rate_error(th, mean) });
        }
    }
    let report = CompareReport {
        config_hash: exp.hash.clone(),
        rule: exp.run.rule.name().into(),
        n_seeds: cfg.n_seeds,
        horizon: exp.run.horizon,
        identifiable: is_globally_identifiable(&exp.run.signals, exp.run.states.truth).identifiable,
        theoretical,
        rows,
        failed_seeds,
    };
    (|| -> std::io::Result<()> {
        writeln!(out, "{:<12} {:>6} {:>14} {:>14} {:>12} {:>10}", "state", "agent", "theory", "empirical", "std", "error")?;
        for r in &report.rows {
            let agent = r.agent.map_or("mean".to_string(), |a| a.to_string());
            let th = r.theoretical.map_or("-".to_string(), |x| format!("{x:.6}"));
            let err = r.error.map_or("-".to_string(), |x| format!("{x:.4}"));
            writeln!(out, "{:<12} {:>6} {:>14} {:>14.6} {:>12.6} {:>10}", r.state, agent, th, r.empirical_mean, r.empirical_std, err)?;
        }
        if !report.identifiable {
            writeln!(out, "truth is not globally identifiable")?;
        }
        for (seed, e) in &report.failed_seeds {
            writeln!(out, "seed {seed} failed: {e}")?;
        }
        Ok(())
    })()
    .map_err(stdout_err)?;
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_json(&report, &dir.join("compare.json"))?;
    Ok(report)
}
