//! Simulation driver: synchronous rounds, trajectory recording and seeded
//! Monte Carlo ensembles.

use rand::distributions::{Distribution, WeightedIndex};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{empirical_rate, EmpiricalRate, DEFAULT_WINDOW};
use crate::beliefs::{bayes_init, BeliefError, BeliefState};
use crate::graph::{perron, GraphError, Network};
use crate::model::{InitialPriors, SignalModel, SignalSampler, StateSpace};
use crate::rng::{replicate_seed, Purpose, RngStreams};
use crate::rules::{RuleError, StepContext, UpdateRule, XiChoice};

/// Agent count from which a round is evaluated in parallel.
pub const PARALLEL_THRESHOLD: usize = 64;
/// Tolerance for the Perron pair used by the engine.
pub const ENGINE_PERRON_TOL: f64 = 1e-13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("rule is incompatible with the network: {0}")]
    Rule(RuleError),
    #[error("initial beliefs: {0}")]
    Init(#[from] BeliefError),
    #[error("step {step}: {source}")]
    Step { step: usize, source: RuleError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RecordOptions {
    /// Belief snapshots at every `every`-th step, plus the final step.
    pub every: usize,
    pub signals: bool,
    /// Neighbor choices of the random-walk rule.
    pub choices: bool,
    pub log_ratios: bool,
    /// Prior log-ratios `γ`, needed for the aggregate identity.
    pub priors: bool,
}

impl Default for RecordOptions {
    fn default() -> Self {
        Self { every: 1, signals: false, choices: false, log_ratios: true, priors: false }
    }
}

impl RecordOptions {
    pub fn full() -> Self {
        Self { every: 1, signals: true, choices: true, log_ratios: true, priors: true }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub network: Network,
    pub states: StateSpace,
    pub signals: SignalModel,
    pub priors: InitialPriors,
    pub rule: UpdateRule,
    pub horizon: usize,
    pub seed: u64,
    /// Draw the truth from the nature prior instead of using `states.truth`.
    pub sample_truth: bool,
    pub record: RecordOptions,
}

impl RunConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<f64, SimError> {
        let n = self.network.n();
        let m = self.states.len();
        if self.horizon < 1 {
            return Err(SimError::Config("horizon must be at least 1".into()));
        }
        if self.record.every < 1 {
            return Err(SimError::Config("record interval must be at least 1".into()));
        }
        if self.signals.n_agents() != n || self.priors.n_agents() != n {
            return Err(SimError::Config(format!(
                "network has {n} agents, likelihoods {}, priors {}",
                self.signals.n_agents(),
                self.priors.n_agents()
            )));
        }
        if self.signals.n_states() != m {
            return Err(SimError::Config(format!("{m} states but likelihood tables have {}", self.signals.n_states())));
        }
        if let UpdateRule::CommonFixedPrior { prior } = &self.rule {
            if prior.len() != m {
                return Err(SimError::Config(format!("common prior has {} entries, expected {m}", prior.len())));
            }
        }
        let (rho, _) = perron(&self.network, ENGINE_PERRON_TOL)?;
        self.rule.validate(&self.network, rho, self.horizon).map_err(SimError::Rule)?;
        Ok(rho)
    }

    /// SHA-256 of a canonical JSON rendering of the run.
    pub fn hash(&self) -> String {
        let doc = json!({
            "network": self.network,
            "states": self.states,
            "likelihoods": self.signals,
            "priors": self.priors,
            "rule": rule_json(&self.rule),
            "horizon": self.horizon,
            "seed": self.seed,
            "sample_truth": self.sample_truth,
            "record": self.record,
        });
        hex::encode(Sha256::digest(doc.to_string().as_bytes()))
    }
}

fn rule_json(rule: &UpdateRule) -> serde_json::Value {
    match rule {
        UpdateRule::CommonFixedPrior { prior } => json!({"name": "common_prior", "prior": prior}),
        UpdateRule::RandomWalkNeighbor { choice } => {
            let rows: Vec<Vec<f64>> = choice.row_iter().map(|r| r.iter().copied().collect()).collect();
            json!({"name": "random_walk", "P": rows})
        }
        UpdateRule::GeometricAveragePrior => json!({"name": "geometric"}),
        UpdateRule::TimeVaryingLogLinear { schedule } => json!({"name": "time_varying", "x_schedule": schedule}),
        UpdateRule::WeightedSelfBelief { eta } => json!({"name": "weighted_self", "eta": eta}),
    }
}

/// Dense `φᵢ,ₜ(θ̌)` over `t = 0..=T`, agents and false states.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioSeries {
    n_agents: usize,
    width: usize,
    data: Vec<f64>,
}

impl RatioSeries {
    fn new(n_agents: usize, width: usize, horizon: usize) -> Self {
        Self { n_agents, width, data: Vec::with_capacity((horizon + 1) * n_agents * width) }
    }

    fn push(&mut self, beliefs: &BeliefState, truth: usize) {
        for i in 0..self.n_agents {
            let lb = beliefs.log_belief(i);
            self.data.extend(lb.iter().enumerate().filter(|&(k, _)| k != truth).map(|(_, x)| x - lb[truth]));
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / (self.n_agents * self.width).max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `φᵢ,ₜ` for false-state column `k`.
    pub fn get(&self, t: usize, i: usize, k: usize) -> f64 {
        self.data[(t * self.n_agents + i) * self.width + k]
    }
}

/// Prior log-ratios `γᵢᵢ(θ̌,t)` and `γᵢⱼ(θ̌,t)` for `t ≥ 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PriorRatioSeries {
    width: usize,
    offsets: Vec<usize>,
    stride: usize,
    data: Vec<f64>,
}

impl PriorRatioSeries {
    fn new(net: &Network, width: usize, horizon: usize) -> Self {
        let mut offsets = Vec::with_capacity(net.n());
        let mut stride = 0;
        for i in 0..net.n() {
            offsets.push(stride);
            stride += (1 + net.degree(i)) * width;
        }
        Self { width, offsets, stride, data: Vec::with_capacity(stride * horizon) }
    }

    fn push(&mut self, xis: &[XiChoice], truth: usize) {
        let ratio = |xi: &[f64], data: &mut Vec<f64>| {
            data.extend(xi.iter().enumerate().filter(|&(k, _)| k != truth).map(|(_, x)| x - xi[truth]));
        };
        for xi in xis {
            ratio(&xi.self_prior, &mut self.data);
            for p in &xi.neighbor_priors {
                ratio(p, &mut self.data);
            }
        }
    }

    pub fn self_ratio(&self, t: usize, i: usize, k: usize) -> f64 {
        self.data[(t - 1) * self.stride + self.offsets[i] + k]
    }

    /// `slot` indexes the ascending neighborhood `N(i)`.
    pub fn neighbor_ratio(&self, t: usize, i: usize, slot: usize, k: usize) -> f64 {
        self.data[(t - 1) * self.stride + self.offsets[i] + (1 + slot) * self.width + k]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub config_hash: String,
    pub seed: u64,
    pub truth: usize,
    pub n_agents: usize,
    pub n_states: usize,
    pub horizon: usize,
    /// Snapshots at strictly increasing steps.
    pub snapshots: Vec<BeliefState>,
    /// `signals[t][i]`.
    pub signals: Option<Vec<Vec<usize>>>,
    /// `choices[t - 1][i]`, the neighbor agent `i` read at step `t`.
    pub choices: Option<Vec<Vec<usize>>>,
    pub log_ratios: Option<RatioSeries>,
    pub prior_ratios: Option<PriorRatioSeries>,
}

impl Trajectory {
    pub fn final_beliefs(&self) -> &BeliefState {
        self.snapshots.last().expect("at least the initial snapshot")
    }

    pub fn snapshot(&self, t: usize) -> Option<&BeliefState> {
        self.snapshots.binary_search_by_key(&t, |s| s.t).ok().map(|i| &self.snapshots[i])
    }
}

/// Everything one synchronous round produces.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub beliefs: BeliefState,
    pub signals: Vec<usize>,
    pub choices: Option<Vec<usize>>,
    pub priors: Option<Vec<XiChoice>>,
}

/// Per-run immutable state shared by all rounds.
pub struct Runner<'a> {
    cfg: &'a RunConfig,
    rho: f64,
    truth: usize,
    streams: RngStreams,
    sampler: SignalSampler,
    choosers: Option<Vec<WeightedIndex<f64>>>,
}

impl<'a> Runner<'a> {
    pub fn new(cfg: &'a RunConfig) -> Result<Self, SimError> {
        let rho = cfg.validate()?;
        let streams = RngStreams::new(cfg.seed);
        let truth = if cfg.sample_truth { cfg.states.sample_truth(&mut streams.nature()) } else { cfg.states.truth };
        let sampler = SignalSampler::new(&cfg.signals, truth);
        let choosers = match &cfg.rule {
            UpdateRule::RandomWalkNeighbor { choice } => Some(
                (0..cfg.network.n())
                    .map(|i| {
                        let w: Vec<f64> = cfg.network.neighbors(i).iter().map(|&j| choice[(i, j)]).collect();
                        WeightedIndex::new(w).map_err(|e| SimError::Config(format!("choice row {i}: {e}")))
                    })
                    .collect::<Result<_, _>>()?,
            ),
            _ => None,
        };
        Ok(Self { cfg, rho, truth, streams, sampler, choosers })
    }

    pub fn truth(&self) -> usize {
        self.truth
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    fn signals_at(&self, t: usize) -> Vec<usize> {
        (0..self.cfg.network.n())
            .map(|i| self.sampler.sample(i, &mut self.streams.stream(i, t, Purpose::Signal)))
            .collect()
    }

    /// Beliefs at `t = 0`.
    pub fn initial(&self) -> Result<(BeliefState, Vec<usize>), SimError> {
        let signals = self.signals_at(0);
        Ok((bayes_init(&self.cfg.priors, &self.cfg.signals, &signals)?, signals))
    }

    /// Computes step `t ≥ 1` from the snapshot of step `t − 1`.
    pub fn step(&self, prev: &BeliefState, t: usize, with_priors: bool) -> Result<StepOutput, RuleError> {
        let net = &self.cfg.network;
        let ctx = StepContext { net, sig: &self.cfg.signals, prev, rho: self.rho, t };
        let signals = self.signals_at(t);
        let choices: Option<Vec<usize>> = self.choosers.as_ref().map(|rows| {
            (0..net.n())
                .map(|i| {
                    let slot = rows[i].sample(&mut self.streams.stream(i, t, Purpose::NeighborChoice));
                    net.neighbors(i)[slot]
                })
                .collect()
        });
        let agent = |i: usize| -> Result<(Vec<f64>, Option<XiChoice>), RuleError> {
            let chosen = choices.as_ref().map(|c| c[i]);
            let post = self.cfg.rule.apply(&ctx, i, signals[i], chosen)?;
            let xi = if with_priors { Some(self.cfg.rule.priors(&ctx, i, chosen)?) } else { None };
            Ok((post, xi))
        };
        let results: Vec<_> = if net.n() >= PARALLEL_THRESHOLD {
            (0..net.n()).into_par_iter().map(agent).collect::<Result<_, _>>()?
        } else {
            (0..net.n()).map(agent).collect::<Result<_, _>>()?
        };
        let (logs, xis): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let priors = if with_priors { Some(xis.into_iter().map(Option::unwrap).collect()) } else { None };
        Ok(StepOutput { beliefs: BeliefState::from_log(t, logs), signals, choices, priors })
    }
}

pub fn simulate(cfg: &RunConfig) -> Result<Trajectory, SimError> {
    let runner = Runner::new(cfg)?;
    let rec = cfg.record;
    let n = cfg.network.n();
    let m = cfg.states.len();
    let truth = runner.truth();

    let (mut current, signals0) = runner.initial()?;
    let mut snapshots = vec![current.clone()];
    let mut signals = rec.signals.then(|| {
        let mut v = Vec::with_capacity(cfg.horizon + 1);
        v.push(signals0);
        v
    });
    let mut choices = (rec.choices && runner.choosers.is_some()).then(|| Vec::with_capacity(cfg.horizon));
    let mut log_ratios = rec.log_ratios.then(|| RatioSeries::new(n, m - 1, cfg.horizon));
    if let Some(r) = log_ratios.as_mut() {
        r.push(&current, truth);
    }
    let mut prior_ratios = rec.priors.then(|| PriorRatioSeries::new(&cfg.network, m - 1, cfg.horizon));

    for t in 1..=cfg.horizon {
        let out = runner.step(&current, t, rec.priors).map_err(|source| SimError::Step { step: t, source })?;
        current = out.beliefs;
        if let Some(s) = signals.as_mut() {
            s.push(out.signals);
        }
        if let (Some(c), Some(chosen)) = (choices.as_mut(), out.choices) {
            c.push(chosen);
        }
        if let Some(r) = log_ratios.as_mut() {
            r.push(&current, truth);
        }
        if let (Some(p), Some(xis)) = (prior_ratios.as_mut(), out.priors) {
            p.push(&xis, truth);
        }
        if t % rec.every == 0 || t == cfg.horizon {
            snapshots.push(current.clone());
        }
    }

    Ok(Trajectory {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        truth,
        n_agents: n,
        n_states: m,
        horizon: cfg.horizon,
        snapshots,
        signals,
        choices,
        log_ratios,
        prior_ratios,
    })
}

/// Per-seed outcome of an ensemble run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// Empirical rates per false state, in ascending state order.
    pub rates: Vec<EmpiricalRate>,
    /// Final belief in the truth, per agent.
    pub truth_belief: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleSummary {
    pub runs: Vec<SeedSummary>,
    pub failures: Vec<SeedFailure>,
    /// `(θ̌, mean, std)` of the per-seed decay rates `−mean slope`.
    pub rate_stats: Vec<(usize, f64, f64)>,
}

/// Runs `f` on the trajectory of every replicate `seed_k = seed ⊕ k`.
/// Results are in replicate order; a failing seed does not affect the others.
pub fn monte_carlo_with<R, F>(cfg: &RunConfig, n_seeds: usize, f: F) -> Vec<(u64, Result<R, SimError>)>
where
    R: Send,
    F: Fn(&Trajectory) -> Result<R, SimError> + Sync,
{
    (0..n_seeds as u64)
        .into_par_iter()
        .map(|k| {
            let seed = replicate_seed(cfg.seed, k);
            (seed, simulate(&cfg.with_seed(seed)).and_then(|traj| f(&traj)))
        })
        .collect()
}

pub fn monte_carlo(cfg: &RunConfig, n_seeds: usize) -> Result<EnsembleSummary, SimError> {
    if n_seeds < 1 {
        return Err(SimError::Config("n_seeds must be at least 1".into()));
    }
    let outcomes = monte_carlo_with(cfg, n_seeds, summarize);
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, out) in outcomes {
        match out {
            Ok(s) => runs.push(s),
            Err(e) => failures.push(SeedFailure { seed, error: e.to_string() }),
        }
    }
    let mut rate_stats = Vec::new();
    if let Some(first) = runs.first() {
        for (c, r) in first.rates.iter().enumerate() {
            let v: Vec<f64> = runs.iter().map(|s| s.rates[c].rate()).collect();
            let nf = v.len() as f64;
            let mean = v.iter().sum::<f64>() / nf;
            let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt() } else { 0.0 };
            rate_stats.push((r.theta_check, mean, std));
        }
    }
    Ok(EnsembleSummary { runs, failures, rate_stats })
}

/// Empirical rates over the default window plus final truth beliefs.
pub fn summarize(traj: &Trajectory) -> Result<SeedSummary, SimError> {
    let rates = (0..traj.n_states)
        .filter(|&k| k != traj.truth)
        .map(|k| empirical_rate(traj, k, DEFAULT_WINDOW))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| SimError::Config(e.to_string()))?;
    let last = traj.final_beliefs();
    let truth_belief = (0..traj.n_agents).map(|i| last.log_belief(i)[traj.truth].exp()).collect();
    Ok(SeedSummary { seed: traj.seed, rates, truth_belief })
}
