//! Belief-update rules for memoryless agents.
//!
//! Every rule is an instance of one kernel: agent `i` combines a prior
//! `ξᵢᵢ`, its private signal, and each neighbor's reported belief divided by
//! the prior `ξᵢⱼ` it attributes to that neighbor,
//!
//! ```text
//! μᵢ,ₜ(θ̌) ∝ ξᵢᵢ(θ̌) ℓᵢ(sᵢ,ₜ|θ̌) Π_{j∈N(i)} μⱼ,ₜ₋₁(θ̌) / ξᵢⱼ(θ̌)
//! ```
//!
//! The five named rules below are closed forms of particular `ξ` choices;
//! [`UpdateRule::priors`] returns those choices so the kernel can reproduce
//! each rule. All vectors here are natural-log distributions. Neighbor terms
//! are always accumulated in ascending agent order.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beliefs::{log_sum_exp, normalize_log, signal_log_column, BeliefError, BeliefState};
use crate::graph::Network;
use crate::model::SignalModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuleError {
    #[error("agent {agent} has {degree} neighbors; this rule needs exactly one")]
    NotSingleNeighbor { agent: usize, degree: usize },
    #[error("agent {agent}: {chosen} is not a neighbor")]
    NotANeighbor { agent: usize, chosen: usize },
    #[error("agent {0} has no neighbors")]
    NoNeighbors(usize),
    #[error("eta must lie in (0, 1), got {0}")]
    EtaOutOfRange(f64),
    #[error("neighbor weight x_t = {x} at t = {t} must satisfy 0 <= x_t < rho = {rho}")]
    WeightOutOfRange { t: usize, x: f64, rho: f64 },
    #[error("neighbor-choice matrix: {0}")]
    BadChoiceMatrix(String),
    #[error("common prior: {0}")]
    BadPrior(String),
    #[error("{what}: expected {expected}, got {got}")]
    Mismatch { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Belief(#[from] BeliefError),
}

/// Neighbor-weight schedule `x_t` (`t ≥ 1`) for the time-varying rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// `c / t^p`
    Power { c: f64, p: f64 },
    /// `c / (t^p ln²(t+2))`
    LogPower { c: f64, p: f64 },
    /// `c · p^t`
    Geometric { c: f64, p: f64 },
    /// `c`
    Constant { c: f64 },
    /// `values[t-1]`; zero past the end.
    Explicit { values: Vec<f64> },
}

impl Schedule {
    pub fn x(&self, t: usize) -> f64 {
        assert!(t >= 1, "schedule is indexed from t = 1");
        let tf = t as f64;
        match self {
            Schedule::Power { c, p } => c / tf.powf(*p),
            Schedule::LogPower { c, p } => c / (tf.powf(*p) * (tf + 2.0).ln().powi(2)),
            Schedule::Geometric { c, p } => c * p.powf(tf),
            Schedule::Constant { c } => *c,
            Schedule::Explicit { values } => values.get(t - 1).copied().unwrap_or(0.0),
        }
    }

    /// `x_1, …, x_{t_max}`.
    pub fn values(&self, t_max: usize) -> Vec<f64> {
        (1..=t_max).map(|t| self.x(t)).collect()
    }

    /// The default slowly-summable schedule `c/(t ln²(t+2))` with `x_1 = ρ/2`.
    pub fn default_for(rho: f64) -> Self {
        Schedule::LogPower { c: 0.5 * rho * 3f64.ln().powi(2), p: 1.0 }
    }
}

/// The rule every agent applies. Homogeneous across agents within a run.
#[derive(Debug, Clone, PartialEq)]
pub enum UpdateRule {
    /// Priors fixed at a common `ν`. On a directed cycle this is the
    /// neighbor-replaced Bayes update.
    CommonFixedPrior { prior: Vec<f64> },
    /// Each step agent `i` picks one neighbor `j` with probability `P[i][j]`
    /// and applies the neighbor-replaced Bayes update to it.
    RandomWalkNeighbor { choice: DMatrix<f64> },
    /// Priors set to the normalized geometric mean of the neighbors' beliefs.
    GeometricAveragePrior,
    /// Self prior is the agent's own last belief; neighbor priors are `μⱼ^{η_t}`
    /// with `η_t = 1 − x_t/ρ`.
    TimeVaryingLogLinear { schedule: Schedule },
    /// Self prior `∝ μᵢ^η`, neighbor priors `∝ μⱼ^{1−(1−η)/d(i)}`.
    WeightedSelfBelief { eta: f64 },
}

impl UpdateRule {
    pub fn common_prior(prior: Vec<f64>) -> Result<Self, RuleError> {
        let sum: f64 = prior.iter().sum();
        if prior.iter().any(|&p| !(p > 0.0 && p.is_finite())) || (sum - 1.0).abs() > 1e-9 {
            return Err(RuleError::BadPrior("must be a strictly positive distribution".into()));
        }
        Ok(Self::CommonFixedPrior { prior })
    }

    /// Random-walk rule with `P`; the support of each row must be exactly the
    /// agent's neighborhood.
    pub fn random_walk(net: &Network, choice: DMatrix<f64>) -> Result<Self, RuleError> {
        let n = net.n();
        if choice.nrows() != n || choice.ncols() != n {
            return Err(RuleError::BadChoiceMatrix(format!("expected {n}x{n}")));
        }
        for i in 0..n {
            let row = choice.row(i);
            if (row.sum() - 1.0).abs() > 1e-9 {
                return Err(RuleError::BadChoiceMatrix(format!("row {i} does not sum to 1")));
            }
            for j in 0..n {
                let p = row[j];
                if !p.is_finite() || p < 0.0 || (p > 0.0) != net.has_edge(j, i) {
                    return Err(RuleError::BadChoiceMatrix(format!(
                        "entry ({i}, {j}) must be positive iff {j} is a neighbor of {i}"
                    )));
                }
            }
        }
        Ok(Self::RandomWalkNeighbor { choice })
    }

    /// Random-walk rule with uniform neighbor choice, `P = T`.
    pub fn random_walk_uniform(net: &Network) -> Result<Self, RuleError> {
        let t = crate::graph::normalized_adjacency(net).map_err(|e| RuleError::BadChoiceMatrix(e.to_string()))?;
        Self::random_walk(net, t)
    }

    pub fn weighted_self(eta: f64) -> Result<Self, RuleError> {
        if !(eta > 0.0 && eta < 1.0) {
            return Err(RuleError::EtaOutOfRange(eta));
        }
        Ok(Self::WeightedSelfBelief { eta })
    }

    pub fn name(&self) -> &'static str {
        match self {
            UpdateRule::CommonFixedPrior { .. } => "common_prior",
            UpdateRule::RandomWalkNeighbor { .. } => "random_walk",
            UpdateRule::GeometricAveragePrior => "geometric",
            UpdateRule::TimeVaryingLogLinear { .. } => "time_varying",
            UpdateRule::WeightedSelfBelief { .. } => "weighted_self",
        }
    }

    /// Checks the rule against the network before a run.
    pub fn validate(&self, net: &Network, rho: f64, horizon: usize) -> Result<(), RuleError> {
        for i in 0..net.n() {
            if net.degree(i) == 0 {
                return Err(RuleError::NoNeighbors(i));
            }
        }
        match self {
            UpdateRule::CommonFixedPrior { .. } => {
                if let Some(i) = (0..net.n()).find(|&i| net.degree(i) != 1) {
                    return Err(RuleError::NotSingleNeighbor { agent: i, degree: net.degree(i) });
                }
            }
            UpdateRule::RandomWalkNeighbor { choice } => {
                Self::random_walk(net, choice.clone())?;
            }
            UpdateRule::TimeVaryingLogLinear { schedule } => {
                for t in 1..=horizon {
                    check_weight(t, schedule.x(t), rho)?;
                }
            }
            UpdateRule::WeightedSelfBelief { eta } => {
                Self::weighted_self(*eta)?;
            }
            UpdateRule::GeometricAveragePrior => {}
        }
        Ok(())
    }

    /// Applies the rule's closed form for agent `i` at step `t ≥ 1`.
    /// `chosen` is the sampled neighbor for the random-walk rule.
    pub fn apply(&self, ctx: &StepContext<'_>, agent: usize, signal: usize, chosen: Option<usize>) -> Result<Vec<f64>, RuleError> {
        let prev = ctx.prev;
        let nbrs = ctx.net.neighbors(agent);
        let nbr_beliefs: Vec<&[f64]> = nbrs.iter().map(|&j| prev.log_belief(j)).collect();
        match self {
            UpdateRule::CommonFixedPrior { .. } => {
                circle_update(ctx.net, agent, nbr_beliefs[0], signal, ctx.sig)
            }
            UpdateRule::RandomWalkNeighbor { .. } => {
                let j = chosen.ok_or(RuleError::NotANeighbor { agent, chosen: usize::MAX })?;
                random_walk_update(ctx.net, agent, j, prev.log_belief(j), signal, ctx.sig)
            }
            UpdateRule::GeometricAveragePrior => geometric_average_update(agent, &nbr_beliefs, signal, ctx.sig),
            UpdateRule::TimeVaryingLogLinear { schedule } => time_varying_update(
                agent,
                prev.log_belief(agent),
                &nbr_beliefs,
                signal,
                schedule.x(ctx.t),
                ctx.rho,
                ctx.sig,
            ),
            UpdateRule::WeightedSelfBelief { eta } => {
                weighted_self_update(agent, prev.log_belief(agent), &nbr_beliefs, signal, *eta, ctx.sig)
            }
        }
    }

    /// The `ξ` choice behind the closed form, as normalized log-distributions.
    /// Neighbor priors follow the ascending order of `N(i)`.
    pub fn priors(&self, ctx: &StepContext<'_>, agent: usize, chosen: Option<usize>) -> Result<XiChoice, RuleError> {
        let prev = ctx.prev;
        let nbrs = ctx.net.neighbors(agent);
        let own = prev.log_belief(agent);
        let normalized = |mut v: Vec<f64>| -> Result<Vec<f64>, RuleError> {
            normalize_log(&mut v, agent)?;
            Ok(v)
        };
        let choice = match self {
            UpdateRule::CommonFixedPrior { prior } => {
                let nu: Vec<f64> = prior.iter().map(|p| p.ln()).collect();
                XiChoice { self_prior: nu.clone(), neighbor_priors: vec![nu; nbrs.len()] }
            }
            UpdateRule::RandomWalkNeighbor { .. } => {
                // the chosen neighbor is read against a flat prior; every other
                // neighbor's prior is its own report, so its term cancels
                let j = chosen.ok_or(RuleError::NotANeighbor { agent, chosen: usize::MAX })?;
                if !nbrs.contains(&j) {
                    return Err(RuleError::NotANeighbor { agent, chosen: j });
                }
                let m = own.len();
                let flat = vec![-(m as f64).ln(); m];
                let neighbor_priors = nbrs
                    .iter()
                    .map(|&k| if k == j { flat.clone() } else { prev.log_belief(k).to_vec() })
                    .collect();
                XiChoice { self_prior: flat, neighbor_priors }
            }
            UpdateRule::GeometricAveragePrior => {
                let d = nbrs.len() as f64;
                let mut g = vec![0.0; own.len()];
                for &j in nbrs {
                    for (acc, x) in g.iter_mut().zip(prev.log_belief(j)) {
                        *acc += x;
                    }
                }
                let g = normalized(g.iter().map(|x| x / d).collect())?;
                XiChoice { self_prior: g.clone(), neighbor_priors: vec![g; nbrs.len()] }
            }
            UpdateRule::TimeVaryingLogLinear { schedule } => {
                let eta = 1.0 - schedule.x(ctx.t) / ctx.rho;
                let neighbor_priors = nbrs
                    .iter()
                    .map(|&j| normalized(prev.log_belief(j).iter().map(|x| eta * x).collect()))
                    .collect::<Result<_, _>>()?;
                XiChoice { self_prior: own.to_vec(), neighbor_priors }
            }
            UpdateRule::WeightedSelfBelief { eta } => {
                let w = 1.0 - (1.0 - eta) / nbrs.len() as f64;
                let neighbor_priors = nbrs
                    .iter()
                    .map(|&j| normalized(prev.log_belief(j).iter().map(|x| w * x).collect()))
                    .collect::<Result<_, _>>()?;
                XiChoice { self_prior: normalized(own.iter().map(|x| eta * x).collect())?, neighbor_priors }
            }
        };
        Ok(choice)
    }
}

fn check_weight(t: usize, x: f64, rho: f64) -> Result<(), RuleError> {
    if !(x.is_finite() && x >= 0.0 && x < rho) {
        return Err(RuleError::WeightOutOfRange { t, x, rho });
    }
    Ok(())
}

/// Read-only inputs shared by all agents in one synchronous round.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub net: &'a Network,
    pub sig: &'a SignalModel,
    pub prev: &'a BeliefState,
    pub rho: f64,
    /// Index of the step being computed, `t ≥ 1`.
    pub t: usize,
}

/// Priors `ξᵢᵢ` and `ξᵢⱼ` (log domain) for one agent at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct XiChoice {
    pub self_prior: Vec<f64>,
    pub neighbor_priors: Vec<Vec<f64>>,
}

impl XiChoice {
    /// Applies the generic kernel with these priors.
    pub fn update(&self, agent: usize, signal: usize, nbr_beliefs: &[&[f64]], sig: &SignalModel) -> Result<Vec<f64>, RuleError> {
        let nbr_priors: Vec<&[f64]> = self.neighbor_priors.iter().map(Vec::as_slice).collect();
        memoryless_update(agent, &self.self_prior, &nbr_priors, signal, nbr_beliefs, sig)
    }
}

/// Generic memoryless update (log domain): `ξᵢᵢ ℓᵢ(s|·) Π μⱼ/ξᵢⱼ`, normalized.
pub fn memoryless_update(
    agent: usize,
    prior_self: &[f64],
    priors_nbrs: &[&[f64]],
    signal: usize,
    nbr_beliefs: &[&[f64]],
    sig: &SignalModel,
) -> Result<Vec<f64>, RuleError> {
    if priors_nbrs.len() != nbr_beliefs.len() {
        return Err(RuleError::Mismatch { what: "neighbor priors", expected: nbr_beliefs.len(), got: priors_nbrs.len() });
    }
    let ll = signal_log_column(sig, agent, signal)?;
    let mut post: Vec<f64> = prior_self.iter().zip(&ll).map(|(p, l)| p + l).collect();
    for (mu, xi) in nbr_beliefs.iter().zip(priors_nbrs) {
        for ((acc, m), x) in post.iter_mut().zip(mu.iter()).zip(xi.iter()) {
            *acc += m - x;
        }
    }
    normalize_log(&mut post, agent)?;
    Ok(post)
}

/// Bayes update of a single agent with its self belief replaced by the
/// belief of its unique neighbor.
pub fn circle_update(net: &Network, agent: usize, unique_nbr_belief: &[f64], signal: usize, sig: &SignalModel) -> Result<Vec<f64>, RuleError> {
    let degree = net.degree(agent);
    if degree != 1 {
        return Err(RuleError::NotSingleNeighbor { agent, degree });
    }
    neighbor_replaced_bayes(agent, unique_nbr_belief, signal, sig)
}

fn neighbor_replaced_bayes(agent: usize, nbr_belief: &[f64], signal: usize, sig: &SignalModel) -> Result<Vec<f64>, RuleError> {
    let ll = signal_log_column(sig, agent, signal)?;
    let mut post: Vec<f64> = nbr_belief.iter().zip(&ll).map(|(m, l)| m + l).collect();
    normalize_log(&mut post, agent)?;
    Ok(post)
}

pub fn random_walk_update(
    net: &Network,
    agent: usize,
    chosen_nbr: usize,
    nbr_belief: &[f64],
    signal: usize,
    sig: &SignalModel,
) -> Result<Vec<f64>, RuleError> {
    if !net.neighbors(agent).contains(&chosen_nbr) {
        return Err(RuleError::NotANeighbor { agent, chosen: chosen_nbr });
    }
    neighbor_replaced_bayes(agent, nbr_belief, signal, sig)
}

/// `μᵢ ∝ ℓᵢ(s|·) (Π μⱼ)^{1/d(i)}`.
pub fn geometric_average_update(agent: usize, nbr_beliefs: &[&[f64]], signal: usize, sig: &SignalModel) -> Result<Vec<f64>, RuleError> {
    if nbr_beliefs.is_empty() {
        return Err(RuleError::NoNeighbors(agent));
    }
    let w = 1.0 / nbr_beliefs.len() as f64;
    let mut post = signal_log_column(sig, agent, signal)?;
    for (k, acc) in post.iter_mut().enumerate() {
        let s: f64 = nbr_beliefs.iter().map(|mu| mu[k]).sum();
        *acc += w * s;
    }
    normalize_log(&mut post, agent)?;
    Ok(post)
}

/// Time-varying log-linear update in belief form:
/// `μᵢ ∝ μᵢ,ₜ₋₁ ℓᵢ(s|·) Π μⱼ^{1−η_t}` with `1 − η_t = x_t/ρ`.
pub fn time_varying_update(
    agent: usize,
    self_belief: &[f64],
    nbr_beliefs: &[&[f64]],
    signal: usize,
    x_t: f64,
    rho: f64,
    sig: &SignalModel,
) -> Result<Vec<f64>, RuleError> {
    check_weight(0, x_t, rho)?;
    let w = x_t / rho;
    let ll = signal_log_column(sig, agent, signal)?;
    let mut post: Vec<f64> = self_belief.iter().zip(&ll).map(|(m, l)| m + l).collect();
    for (k, acc) in post.iter_mut().enumerate() {
        let s: f64 = nbr_beliefs.iter().map(|mu| mu[k]).sum();
        *acc += w * s;
    }
    normalize_log(&mut post, agent)?;
    Ok(post)
}

/// The same rule as a log-ratio recursion:
/// `φᵢ,ₜ = φᵢ,ₜ₋₁ + λᵢ,ₜ + (x_t/ρ) Σ_{j∈N(i)} φⱼ,ₜ₋₁`, one entry per false state.
pub fn time_varying_log_update(phi_self: &[f64], phi_nbrs: &[&[f64]], lambda: &[f64], x_t: f64, rho: f64) -> Result<Vec<f64>, RuleError> {
    check_weight(0, x_t, rho)?;
    let w = x_t / rho;
    Ok((0..phi_self.len())
        .map(|k| {
            let s: f64 = phi_nbrs.iter().map(|p| p[k]).sum();
            phi_self[k] + lambda[k] + w * s
        })
        .collect())
}

/// `μᵢ ∝ ℓᵢ(s|·) μᵢ^η (Π μⱼ)^{(1−η)/d(i)}`.
pub fn weighted_self_update(
    agent: usize,
    self_belief: &[f64],
    nbr_beliefs: &[&[f64]],
    signal: usize,
    eta: f64,
    sig: &SignalModel,
) -> Result<Vec<f64>, RuleError> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(RuleError::EtaOutOfRange(eta));
    }
    if nbr_beliefs.is_empty() {
        return Err(RuleError::NoNeighbors(agent));
    }
    let w = (1.0 - eta) / nbr_beliefs.len() as f64;
    let ll = signal_log_column(sig, agent, signal)?;
    let mut post: Vec<f64> = self_belief.iter().zip(&ll).map(|(m, l)| eta * m + l).collect();
    for (k, acc) in post.iter_mut().enumerate() {
        let s: f64 = nbr_beliefs.iter().map(|mu| mu[k]).sum();
        *acc += w * s;
    }
    normalize_log(&mut post, agent)?;
    Ok(post)
}

/// `B = ηI + (1−η)T`.
pub fn weighted_self_matrix(t_matrix: &DMatrix<f64>, eta: f64) -> DMatrix<f64> {
    let n = t_matrix.nrows();
    DMatrix::identity(n, n) * eta + t_matrix * (1.0 - eta)
}

/// Log-probability of a normalized log-distribution's entries, for callers
/// that build priors from linear-domain tables.
pub fn to_log(p: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = p.iter().map(|x| x.ln()).collect();
    let z = log_sum_exp(&v);
    for x in &mut v {
        *x -= z;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::normalized_adjacency;
    use approx::assert_abs_diff_eq;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    fn probs(log: &[f64]) -> Vec<f64> {
        log.iter().map(|x| x.exp()).collect()
    }

    fn binary_sig(rows: &[[f64; 2]]) -> SignalModel {
        SignalModel::new(vec![rows.iter().map(|r| r.to_vec()).collect()], rows.len()).unwrap()
    }

    #[test]
    fn kernel_without_neighbors_is_bayes() {
        let sig = binary_sig(&[[0.7, 0.3], [0.4, 0.6]]);
        let prior = to_log(&[0.3, 0.7]);
        let out = probs(&memoryless_update(0, &prior, &[], 0, &[], &sig).unwrap());
        let z = 0.3 * 0.7 + 0.7 * 0.4;
        close(&out, &[0.3 * 0.7 / z, 0.7 * 0.4 / z], 1e-15);
    }

    #[test]
    fn kernel_with_neighbor_priors_equal_to_reports_ignores_them() {
        let sig = binary_sig(&[[0.7, 0.3], [0.4, 0.6]]);
        let prior = to_log(&[0.5, 0.5]);
        let mu1 = to_log(&[0.9, 0.1]);
        let mu2 = to_log(&[0.2, 0.8]);
        let out = memoryless_update(0, &prior, &[&mu1, &mu2], 1, &[&mu1, &mu2], &sig).unwrap();
        let bayes = memoryless_update(0, &prior, &[], 1, &[], &sig).unwrap();
        close(&out, &bayes, 1e-15);
    }

    #[test]
    fn kernel_time_one_on_three_cycle_by_hand() {
        // uniform priors everywhere; agent 1 observes agent 0
        // agent 0 saw signal 0 at t = 0: μ₀,₀ = (0.7, 0.4)/1.1
        // agent 1 sees signal 1 at t = 1: μ₁,₁ ∝ 0.5·(0.3, 0.6)·μ₀,₀/0.5
        let sig = SignalModel::new(vec![vec![vec![0.7, 0.3], vec![0.4, 0.6]]; 3], 2).unwrap();
        let uniform = to_log(&[0.5, 0.5]);
        let mu0 = to_log(&[0.7 / 1.1, 0.4 / 1.1]);
        let out = probs(&memoryless_update(1, &uniform, &[&uniform], 1, &[&mu0], &sig).unwrap());
        let a = 0.5 * 0.3 * (0.7 / 1.1) / 0.5;
        let b = 0.5 * 0.6 * (0.4 / 1.1) / 0.5;
        close(&out, &[a / (a + b), b / (a + b)], 1e-15);
        assert_abs_diff_eq!(out[0], 0.21 / 0.45, epsilon = 1e-15);
    }

    #[test]
    fn kernel_zero_normalizer_and_mismatch() {
        let sig = SignalModel::with_zeros(vec![vec![vec![1.0, 0.0], vec![0.5, 0.5]]], 2).unwrap();
        let p = to_log(&[0.5, 0.5]);
        assert!(matches!(
            memoryless_update(0, &p, &[], 1, &[], &sig),
            Err(RuleError::Belief(BeliefError::ZeroLikelihood { .. }))
        ));
        assert!(matches!(memoryless_update(0, &p, &[&p], 0, &[], &sig), Err(RuleError::Mismatch { .. })));
        let dead = vec![f64::NEG_INFINITY; 2];
        let sig = binary_sig(&[[0.5, 0.5], [0.5, 0.5]]);
        assert!(matches!(
            memoryless_update(0, &dead, &[], 0, &[], &sig),
            Err(RuleError::Belief(BeliefError::ZeroNormalizer { agent: 0 }))
        ));
    }

    #[test]
    fn circle_examples() {
        let net = Network::directed_cycle(3);
        let sig = SignalModel::new(vec![vec![vec![0.8, 0.2], vec![0.4, 0.6]]; 3], 2).unwrap();
        let uniform = to_log(&[0.5, 0.5]);
        let out = probs(&circle_update(&net, 0, &uniform, 0, &sig).unwrap());
        close(&out, &[0.8 / 1.2, 0.4 / 1.2], 1e-15);

        let flat = SignalModel::new(vec![vec![vec![0.3, 0.7], vec![0.3, 0.7]]; 3], 2).unwrap();
        let nb = to_log(&[0.9, 0.1]);
        close(&circle_update(&net, 1, &nb, 1, &flat).unwrap(), &nb, 1e-15);

        let star = Network::from_neighbors(vec![vec![1, 2], vec![0], vec![0]]).unwrap();
        assert_eq!(
            circle_update(&star, 0, &nb, 0, &sig),
            Err(RuleError::NotSingleNeighbor { agent: 0, degree: 2 })
        );
    }

    #[test]
    fn random_walk_rejects_non_neighbor() {
        let net = Network::directed_cycle(3);
        let sig = SignalModel::new(vec![vec![vec![0.8, 0.2], vec![0.4, 0.6]]; 3], 2).unwrap();
        let b = to_log(&[0.5, 0.5]);
        assert_eq!(random_walk_update(&net, 0, 1, &b, 0, &sig), Err(RuleError::NotANeighbor { agent: 0, chosen: 1 }));
        close(
            &random_walk_update(&net, 0, 2, &b, 0, &sig).unwrap(),
            &circle_update(&net, 0, &b, 0, &sig).unwrap(),
            0.0,
        );
    }

    #[test]
    fn choice_matrix_validation() {
        let net = Network::from_neighbors(vec![vec![1, 2], vec![0], vec![0]]).unwrap();
        assert!(UpdateRule::random_walk_uniform(&net).is_ok());
        let bad_support = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(UpdateRule::random_walk(&net, bad_support), Err(RuleError::BadChoiceMatrix(_))));
        let bad_sum = DMatrix::from_row_slice(3, 3, &[0.0, 0.5, 0.4, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(UpdateRule::random_walk(&net, bad_sum), Err(RuleError::BadChoiceMatrix(_))));
    }

    #[test]
    fn geometric_examples() {
        let sig = SignalModel::new(vec![vec![vec![0.5, 0.5], vec![0.5, 0.5]]], 2).unwrap();
        let a = to_log(&[0.9, 0.1]);
        let b = to_log(&[0.5, 0.5]);
        let out = probs(&geometric_average_update(0, &[&a, &b], 0, &sig).unwrap());
        let (x, y) = (0.45f64.sqrt(), 0.05f64.sqrt());
        close(&out, &[x / (x + y), y / (x + y)], 1e-15);
        assert_abs_diff_eq!(out[0], 0.75, epsilon = 1e-12);

        let inf = SignalModel::new(vec![vec![vec![0.8, 0.2], vec![0.3, 0.7]]], 2).unwrap();
        let c = to_log(&[0.3, 0.7]);
        let same = geometric_average_update(0, &[&c, &c, &c], 1, &inf).unwrap();
        let single = neighbor_replaced_bayes(0, &c, 1, &inf).unwrap();
        close(&same, &single, 1e-14);
        assert_eq!(geometric_average_update(0, &[], 1, &inf), Err(RuleError::NoNeighbors(0)));
    }

    #[test]
    fn time_varying_examples() {
        let sig = SignalModel::new(vec![vec![vec![0.8, 0.2], vec![0.3, 0.7]]], 2).unwrap();
        let own = to_log(&[0.6, 0.4]);
        let nb = to_log(&[0.1, 0.9]);
        // x_t = 0: standalone Bayes from own belief
        let out = time_varying_update(0, &own, &[&nb], 0, 0.0, 1.5, &sig).unwrap();
        close(&out, &neighbor_replaced_bayes(0, &own, 0, &sig).unwrap(), 1e-15);
        // uniform neighbors carry no log-ratio information
        let u = to_log(&[0.5, 0.5]);
        let out = time_varying_update(0, &own, &[&u, &u], 1, 0.7, 1.5, &sig).unwrap();
        close(&out, &neighbor_replaced_bayes(0, &own, 1, &sig).unwrap(), 1e-14);
        assert!(matches!(
            time_varying_update(0, &own, &[&nb], 0, 1.5, 1.5, &sig),
            Err(RuleError::WeightOutOfRange { .. })
        ));
    }

    #[test]
    fn weighted_self_examples() {
        let sig = SignalModel::new(vec![vec![vec![0.8, 0.2], vec![0.3, 0.7]]], 2).unwrap();
        let own = to_log(&[0.6, 0.4]);
        let a = to_log(&[0.1, 0.9]);
        let b = to_log(&[0.7, 0.3]);
        let near_one = probs(&weighted_self_update(0, &own, &[&a, &b], 0, 0.999, &sig).unwrap());
        let bayes = probs(&neighbor_replaced_bayes(0, &own, 0, &sig).unwrap());
        close(&near_one, &bayes, 1e-3);
        let near_zero = probs(&weighted_self_update(0, &own, &[&a, &b], 0, 0.001, &sig).unwrap());
        let geo = probs(&geometric_average_update(0, &[&a, &b], 0, &sig).unwrap());
        close(&near_zero, &geo, 1e-3);
        let shared = weighted_self_update(0, &a, &[&a, &a], 1, 0.4, &sig).unwrap();
        close(&shared, &neighbor_replaced_bayes(0, &a, 1, &sig).unwrap(), 1e-14);
        for eta in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(matches!(
                weighted_self_update(0, &own, &[&a], 0, eta, &sig),
                Err(RuleError::EtaOutOfRange(_))
            ));
        }
    }

    #[test]
    fn weighted_self_matrix_is_row_stochastic() {
        let net = Network::from_neighbors(vec![vec![1, 2], vec![0, 2], vec![1]]).unwrap();
        let t = normalized_adjacency(&net).unwrap();
        for eta in [0.01, 0.3, 0.5, 0.99] {
            let b = weighted_self_matrix(&t, eta);
            for r in b.row_iter() {
                assert_abs_diff_eq!(r.sum(), 1.0, epsilon = 1e-15);
                assert!(r.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn schedules() {
        assert_eq!(Schedule::Power { c: 1.0, p: 2.0 }.x(3), 1.0 / 9.0);
        assert_eq!(Schedule::Geometric { c: 1.0, p: 0.5 }.x(2), 0.25);
        assert_eq!(Schedule::Constant { c: 0.3 }.x(100), 0.3);
        assert_eq!(Schedule::Explicit { values: vec![0.1, 0.2] }.x(3), 0.0);
        let lp = Schedule::LogPower { c: 2.0, p: 1.0 };
        assert_abs_diff_eq!(lp.x(1), 2.0 / 3f64.ln().powi(2), epsilon = 1e-15);
        assert_abs_diff_eq!(Schedule::default_for(1.5).x(1), 0.75, epsilon = 1e-15);
    }
}
