//! Belief states, their log-ratio view relative to the truth, and the
//! centrality-weighted network aggregates.
//!
//! Beliefs are stored as natural-log probabilities. Log-ratios
//! `φᵢ(θ̌) = log μᵢ(θ̌) − log μᵢ(θ)` are kept for the false states only; the
//! truth column is identically zero and is not stored.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::engine::Trajectory;
use crate::graph::{Network, SpectralData};
use crate::model::{InitialPriors, ModelError, SignalModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeliefError {
    #[error("agent {agent}: normalizer is zero")]
    ZeroNormalizer { agent: usize },
    #[error("agent {agent}: observed signal {signal} has zero likelihood under state {state}")]
    ZeroLikelihood { agent: usize, signal: usize, state: usize },
    #[error("agent {agent}: belief in state {state} is zero")]
    ZeroBelief { agent: usize, state: usize },
    #[error("{what}: expected {expected}, got {got}")]
    Mismatch { what: &'static str, expected: usize, got: usize },
    #[error("trajectory is missing {0}")]
    MissingRecord(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `log Σ exp(v)`, or `-inf` when every entry is `-inf`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalizes unnormalized log-weights in place.
pub(crate) fn normalize_log(v: &mut [f64], agent: usize) -> Result<(), BeliefError> {
    let z = log_sum_exp(v);
    if !z.is_finite() {
        return Err(BeliefError::ZeroNormalizer { agent });
    }
    for x in v.iter_mut() {
        *x -= z;
    }
    Ok(())
}

/// `log ℓᵢ(s|·)`, rejecting signals that are impossible under some state.
pub(crate) fn signal_log_column(sig: &SignalModel, agent: usize, signal: usize) -> Result<Vec<f64>, BeliefError> {
    let col = sig.log_likelihood_column(agent, signal)?;
    if let Some(state) = col.iter().position(|x| *x == f64::NEG_INFINITY) {
        return Err(BeliefError::ZeroLikelihood { agent, signal, state });
    }
    Ok(col)
}

/// Snapshot of every agent's belief at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeliefState {
    pub t: usize,
    log_beliefs: Vec<Vec<f64>>,
}

impl BeliefState {
    pub fn from_log(t: usize, log_beliefs: Vec<Vec<f64>>) -> Self {
        Self { t, log_beliefs }
    }

    /// From linear-domain probabilities (each row is renormalized).
    pub fn from_probabilities(t: usize, probs: &[Vec<f64>]) -> Result<Self, BeliefError> {
        let log_beliefs = probs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut l: Vec<f64> = p.iter().map(|x| x.ln()).collect();
                normalize_log(&mut l, i)?;
                Ok(l)
            })
            .collect::<Result<_, BeliefError>>()?;
        Ok(Self { t, log_beliefs })
    }

    pub fn n_agents(&self) -> usize {
        self.log_beliefs.len()
    }

    pub fn n_states(&self) -> usize {
        self.log_beliefs.first().map_or(0, Vec::len)
    }

    pub fn log_belief(&self, agent: usize) -> &[f64] {
        &self.log_beliefs[agent]
    }

    pub fn log_beliefs(&self) -> &[Vec<f64>] {
        &self.log_beliefs
    }

    pub fn probabilities(&self, agent: usize) -> Vec<f64> {
        self.log_beliefs[agent].iter().map(|x| x.exp()).collect()
    }

    /// Largest `|Σ_θ μᵢ(θ) − 1|` over agents.
    pub fn normalization_error(&self) -> f64 {
        (0..self.n_agents())
            .map(|i| (self.probabilities(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Log-ratio view `φᵢ(θ̌)` over the false states.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRatios {
    pub truth: usize,
    pub n_states: usize,
    /// `values[i][k]` is agent `i`'s ratio for the `k`-th false state (ascending).
    pub values: Vec<Vec<f64>>,
}

impl LogRatios {
    /// Column index of state `check` in `values`; `None` for the truth.
    pub fn column(&self, check: usize) -> Option<usize> {
        false_state_column(self.truth, check)
    }

    /// Stacked `φ̄(θ̌)` across agents.
    pub fn stacked(&self, check: usize) -> Option<Vec<f64>> {
        let k = self.column(check)?;
        Some(self.values.iter().map(|v| v[k]).collect())
    }

    /// Inverse map back to normalized log-beliefs.
    pub fn to_beliefs(&self, t: usize) -> BeliefState {
        let log_beliefs = self
            .values
            .iter()
            .map(|phi| {
                let mut full = Vec::with_capacity(self.n_states);
                let mut it = phi.iter();
                for k in 0..self.n_states {
                    full.push(if k == self.truth { 0.0 } else { *it.next().unwrap() });
                }
                let z = log_sum_exp(&full);
                full.iter().map(|x| x - z).collect()
            })
            .collect();
        BeliefState::from_log(t, log_beliefs)
    }
}

pub(crate) fn false_state_column(truth: usize, check: usize) -> Option<usize> {
    use std::cmp::Ordering;
    match check.cmp(&truth) {
        Ordering::Less => Some(check),
        Ordering::Equal => None,
        Ordering::Greater => Some(check - 1),
    }
}

/// `μᵢ,₀(θ̌) ∝ νᵢ(θ̌) ℓᵢ(sᵢ,₀|θ̌)`.
pub fn bayes_init(priors: &InitialPriors, sig: &SignalModel, signals: &[usize]) -> Result<BeliefState, BeliefError> {
    let n = priors.n_agents();
    if sig.n_agents() != n || signals.len() != n {
        return Err(BeliefError::Mismatch { what: "agents in priors/signals", expected: n, got: signals.len() });
    }
    let log_beliefs = (0..n)
        .map(|i| {
            let ll = signal_log_column(sig, i, signals[i])?;
            let mut post: Vec<f64> = priors.prior(i).iter().zip(&ll).map(|(p, l)| p.ln() + l).collect();
            normalize_log(&mut post, i)?;
            Ok(post)
        })
        .collect::<Result<_, BeliefError>>()?;
    Ok(BeliefState::from_log(0, log_beliefs))
}

pub fn log_linearize(beliefs: &BeliefState, truth: usize) -> Result<LogRatios, BeliefError> {
    let m = beliefs.n_states();
    if truth >= m {
        return Err(BeliefError::Mismatch { what: "truth index", expected: m, got: truth });
    }
    let values = beliefs
        .log_beliefs()
        .iter()
        .enumerate()
        .map(|(i, lb)| {
            if let Some(state) = lb.iter().position(|x| !x.is_finite()) {
                return Err(BeliefError::ZeroBelief { agent: i, state });
            }
            Ok((0..m).filter(|&k| k != truth).map(|k| lb[k] - lb[truth]).collect())
        })
        .collect::<Result<_, BeliefError>>()?;
    Ok(LogRatios { truth, n_states: m, values })
}

/// Network-wide quantities at one step for one false state.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkAggregates {
    /// `Φₜ = Σ αᵢ φᵢ,ₜ`.
    pub phi: f64,
    /// `Λₜ = Σ αᵢ λᵢ,ₜ`.
    pub lambda: f64,
    /// `[Ξₜ]ᵢⱼ = αᵢ γᵢⱼ`; column `i` of row `i` holds the self prior ratio.
    pub xi: DMatrix<f64>,
}

impl NetworkAggregates {
    pub fn trace_xi(&self) -> f64 {
        self.xi.trace()
    }

    /// `tr{Ξₜ Aᵀ}`.
    pub fn trace_xi_at(&self, net: &Network) -> f64 {
        (0..net.n())
            .map(|i| net.neighbors(i).iter().map(|&j| self.xi[(i, j)]).sum::<f64>())
            .sum()
    }
}

/// Network bias `β(θ̌) = ᾱᵀψ̄(θ̌)`.
pub fn network_bias(priors: &InitialPriors, spectral: &SpectralData, check: usize, truth: usize) -> f64 {
    priors
        .psi_vec(check, truth)
        .iter()
        .zip(spectral.alpha.iter())
        .map(|(p, a)| p * a)
        .sum()
}

/// Per-step residuals of the aggregate recursion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateReport {
    pub theta_check: usize,
    /// Entry 0 checks `Φ₀ = β + Λ₀`; entry `t ≥ 1` checks the recursion at step `t`.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    /// Largest `|Σᵢ αᵢ Σ_{j∈N(i)} φⱼ,ₜ₋₁ − ρ Φₜ₋₁|`.
    pub max_neighbor_sum_residual: f64,
}

/// Builds the aggregates of step `t ≥ 1` from a recorded trajectory.
pub fn aggregates_at(
    traj: &Trajectory,
    net: &Network,
    sig: &SignalModel,
    spectral: &SpectralData,
    check: usize,
    t: usize,
) -> Result<NetworkAggregates, BeliefError> {
    let ratios = traj.log_ratios.as_ref().ok_or(BeliefError::MissingRecord("log ratios"))?;
    let signals = traj.signals.as_ref().ok_or(BeliefError::MissingRecord("signals"))?;
    let priors = traj.prior_ratios.as_ref().ok_or(BeliefError::MissingRecord("prior log-ratios"))?;
    let k = false_state_column(traj.truth, check).ok_or(BeliefError::Mismatch {
        what: "false state",
        expected: traj.n_states,
        got: check,
    })?;
    let n = net.n();
    let alpha = &spectral.alpha;
    let phi = (0..n).map(|i| alpha[i] * ratios.get(t, i, k)).sum();
    let lambda = (0..n)
        .map(|i| alpha[i] * sig.log_likelihood_ratio(i, signals[t][i], check, traj.truth))
        .sum();
    let mut xi = DMatrix::zeros(n, n);
    for i in 0..n {
        xi[(i, i)] = alpha[i] * priors.self_ratio(t, i, k);
        for (slot, &j) in net.neighbors(i).iter().enumerate() {
            // a self-loop neighbor shares the diagonal with the self prior
            if j != i {
                xi[(i, j)] = alpha[i] * priors.neighbor_ratio(t, i, slot, k);
            }
        }
    }
    Ok(NetworkAggregates { phi, lambda, xi })
}

/// Checks `Φₜ = tr Ξₜ + Λₜ + ρΦₜ₋₁ − tr{Ξₜ Aᵀ}` at every recorded step, and the
/// neighbor-sum identity `Σᵢ αᵢ Σ_{j∈N(i)} φⱼ,ₜ₋₁ = ρΦₜ₋₁`.
pub fn aggregate_identity(
    traj: &Trajectory,
    net: &Network,
    sig: &SignalModel,
    priors: &InitialPriors,
    spectral: &SpectralData,
    check: usize,
) -> Result<AggregateReport, BeliefError> {
    let ratios = traj.log_ratios.as_ref().ok_or(BeliefError::MissingRecord("log ratios"))?;
    let signals = traj.signals.as_ref().ok_or(BeliefError::MissingRecord("signals"))?;
    let prior_ratios = traj.prior_ratios.as_ref().ok_or(BeliefError::MissingRecord("prior log-ratios"))?;
    let k = false_state_column(traj.truth, check).ok_or(BeliefError::Mismatch {
        what: "false state",
        expected: traj.n_states,
        got: check,
    })?;
    let n = net.n();
    let alpha = &spectral.alpha;
    let rho = spectral.rho;
    let phi_at = |t: usize| -> f64 { (0..n).map(|i| alpha[i] * ratios.get(t, i, k)).sum() };
    let lambda_at = |t: usize| -> f64 {
        (0..n)
            .map(|i| alpha[i] * sig.log_likelihood_ratio(i, signals[t][i], check, traj.truth))
            .sum()
    };

    let mut residuals = Vec::with_capacity(traj.horizon + 1);
    let beta = network_bias(priors, spectral, check, traj.truth);
    let mut prev_phi = phi_at(0);
    residuals.push((prev_phi - beta - lambda_at(0)).abs());
    let mut max_nbr: f64 = 0.0;
    for t in 1..=traj.horizon {
        let mut trace_xi = 0.0;
        let mut trace_xi_at = 0.0;
        let mut nbr_sum = 0.0;
        for i in 0..n {
            trace_xi += alpha[i] * prior_ratios.self_ratio(t, i, k);
            for (slot, &j) in net.neighbors(i).iter().enumerate() {
                trace_xi_at += alpha[i] * prior_ratios.neighbor_ratio(t, i, slot, k);
                nbr_sum += alpha[i] * ratios.get(t - 1, j, k);
            }
        }
        max_nbr = max_nbr.max((nbr_sum - rho * prev_phi).abs());
        let phi = phi_at(t);
        let rhs = trace_xi + lambda_at(t) + rho * prev_phi - trace_xi_at;
        residuals.push((phi - rhs).abs());
        prev_phi = phi;
    }
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    Ok(AggregateReport { theta_check: check, residuals, max_residual, max_neighbor_sum_residual: max_nbr })
}
