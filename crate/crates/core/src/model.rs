//! Finite states, private-signal likelihoods, KL divergences and identifiability.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const NORM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("state space needs at least two states, got {0}")]
    TooFewStates(usize),
    #[error("truth index {truth} out of range for {n} states")]
    TruthOutOfRange { truth: usize, n: usize },
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch { what: String, expected: usize, got: usize },
    #[error("{what}: entries must be finite and in [0, 1]")]
    InvalidProbability { what: String },
    #[error("{what}: entries sum to {sum}, expected 1")]
    NotNormalized { what: String, sum: f64 },
    #[error("{what}: zero entry not allowed (full support required)")]
    ZeroProbability { what: String },
    #[error("KL divergence undefined: q is zero where p is positive at index {0}")]
    AbsoluteContinuity(usize),
    #[error("agent {agent}: signal {signal} out of range")]
    SignalOutOfRange { agent: usize, signal: usize },
}

fn check_distribution(what: &str, p: &[f64], strict: bool) -> Result<(), ModelError> {
    if p.iter().any(|&x| !x.is_finite() || !(0.0..=1.0).contains(&x)) {
        return Err(ModelError::InvalidProbability { what: what.into() });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORM_TOL {
        return Err(ModelError::NotNormalized { what: what.into(), sum });
    }
    if strict && p.contains(&0.0) {
        return Err(ModelError::ZeroProbability { what: what.into() });
    }
    Ok(())
}

/// Finite state space Θ with the realized truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    pub labels: Vec<String>,
    pub truth: usize,
    /// Nature's distribution ν. Only consulted when the truth is drawn rather than pinned.
    pub nature_prior: Vec<f64>,
}

impl StateSpace {
    pub fn new(labels: Vec<String>, truth: usize) -> Result<Self, ModelError> {
        let m = labels.len();
        Self::with_nature_prior(labels, truth, vec![1.0 / m as f64; m])
    }

    pub fn with_nature_prior(labels: Vec<String>, truth: usize, nature_prior: Vec<f64>) -> Result<Self, ModelError> {
        let m = labels.len();
        if m < 2 {
            return Err(ModelError::TooFewStates(m));
        }
        if truth >= m {
            return Err(ModelError::TruthOutOfRange { truth, n: m });
        }
        if nature_prior.len() != m {
            return Err(ModelError::LengthMismatch { what: "nature prior".into(), expected: m, got: nature_prior.len() });
        }
        check_distribution("nature prior", &nature_prior, true)?;
        Ok(Self { labels, truth, nature_prior })
    }

    /// States labelled `s0, s1, …` with the given truth.
    pub fn indexed(m: usize, truth: usize) -> Result<Self, ModelError> {
        Self::new((0..m).map(|k| format!("s{k}")).collect(), truth)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Indices of the false states, ascending.
    pub fn false_states(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| k != self.truth).collect()
    }

    /// Draws θ from the nature prior.
    pub fn sample_truth<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        WeightedIndex::new(&self.nature_prior).expect("validated prior").sample(rng)
    }
}

/// Per-agent likelihood tables `ℓᵢ(s | θ)`, rows indexed by state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignalModel {
    likelihoods: Vec<Vec<Vec<f64>>>,
    #[serde(skip)]
    log_likelihoods: Vec<Vec<Vec<f64>>>,
    allow_zero: bool,
}

impl SignalModel {
    /// Full-support model: every likelihood entry must be strictly positive.
    pub fn new(likelihoods: Vec<Vec<Vec<f64>>>, n_states: usize) -> Result<Self, ModelError> {
        Self::build(likelihoods, n_states, false)
    }

    /// Permits zero likelihoods; observing a zero-likelihood signal is then a
    /// runtime error in the update rules.
    pub fn with_zeros(likelihoods: Vec<Vec<Vec<f64>>>, n_states: usize) -> Result<Self, ModelError> {
        Self::build(likelihoods, n_states, true)
    }

    fn build(likelihoods: Vec<Vec<Vec<f64>>>, n_states: usize, allow_zero: bool) -> Result<Self, ModelError> {
        for (i, table) in likelihoods.iter().enumerate() {
            if table.len() != n_states {
                return Err(ModelError::LengthMismatch {
                    what: format!("likelihoods[{i}]"),
                    expected: n_states,
                    got: table.len(),
                });
            }
            let width = table[0].len();
            for (k, row) in table.iter().enumerate() {
                let what = format!("likelihoods[{i}][{k}]");
                if row.len() != width || width == 0 {
                    return Err(ModelError::LengthMismatch { what, expected: width, got: row.len() });
                }
                check_distribution(&what, row, !allow_zero)?;
            }
        }
        let log_likelihoods = likelihoods
            .iter()
            .map(|t| t.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect())
            .collect();
        Ok(Self { likelihoods, log_likelihoods, allow_zero })
    }

    pub fn n_agents(&self) -> usize {
        self.likelihoods.len()
    }

    pub fn n_states(&self) -> usize {
        self.likelihoods.first().map_or(0, Vec::len)
    }

    pub fn n_signals(&self, agent: usize) -> usize {
        self.likelihoods[agent][0].len()
    }

    pub fn allows_zero(&self) -> bool {
        self.allow_zero
    }

    /// `ℓᵢ(·|θ̂)`.
    pub fn row(&self, agent: usize, state: usize) -> &[f64] {
        &self.likelihoods[agent][state]
    }

    pub fn table(&self, agent: usize) -> &[Vec<f64>] {
        &self.likelihoods[agent]
    }

    /// `log ℓᵢ(s|θ̂)` for every state, the vector the update rules consume.
    pub fn log_likelihood_column(&self, agent: usize, signal: usize) -> Result<Vec<f64>, ModelError> {
        if signal >= self.n_signals(agent) {
            return Err(ModelError::SignalOutOfRange { agent, signal });
        }
        Ok(self.log_likelihoods[agent].iter().map(|row| row[signal]).collect())
    }

    /// Per-signal log-likelihood ratio `λᵢ,ₜ(θ̌) = log ℓᵢ(s|θ̌) − log ℓᵢ(s|θ)`.
    pub fn log_likelihood_ratio(&self, agent: usize, signal: usize, check: usize, truth: usize) -> f64 {
        let ll = &self.log_likelihoods[agent];
        ll[check][signal] - ll[truth][signal]
    }
}

/// Per-agent initial priors `νᵢ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialPriors {
    priors: Vec<Vec<f64>>,
}

impl InitialPriors {
    pub fn new(priors: Vec<Vec<f64>>, n_states: usize) -> Result<Self, ModelError> {
        for (i, p) in priors.iter().enumerate() {
            let what = format!("priors[{i}]");
            if p.len() != n_states {
                return Err(ModelError::LengthMismatch { what, expected: n_states, got: p.len() });
            }
            check_distribution(&what, p, true)?;
        }
        Ok(Self { priors })
    }

    pub fn uniform(n_agents: usize, n_states: usize) -> Self {
        Self { priors: vec![vec![1.0 / n_states as f64; n_states]; n_agents] }
    }

    pub fn n_agents(&self) -> usize {
        self.priors.len()
    }

    pub fn prior(&self, agent: usize) -> &[f64] {
        &self.priors[agent]
    }

    /// `ψᵢ(θ̌) = log(νᵢ(θ̌)/νᵢ(θ))`.
    pub fn psi(&self, agent: usize, check: usize, truth: usize) -> f64 {
        (self.priors[agent][check] / self.priors[agent][truth]).ln()
    }

    /// Stacked `ψ̄(θ̌)` across agents.
    pub fn psi_vec(&self, check: usize, truth: usize) -> Vec<f64> {
        (0..self.n_agents()).map(|i| self.psi(i, check, truth)).collect()
    }
}

/// `D_KL(p ‖ q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, ModelError> {
    if p.len() != q.len() {
        return Err(ModelError::LengthMismatch { what: "kl_divergence support".into(), expected: p.len(), got: q.len() });
    }
    let mut d = 0.0;
    for (s, (&ps, &qs)) in p.iter().zip(q).enumerate() {
        if ps > 0.0 {
            if qs <= 0.0 {
                return Err(ModelError::AbsoluteContinuity(s));
            }
            d += ps * (ps / qs).ln();
        }
    }
    // rounding can leave a tiny negative value for p ≈ q
    Ok(d.max(0.0))
}

/// `λᵢ(θ̌) = −D_KL(ℓᵢ(·|θ) ‖ ℓᵢ(·|θ̌))`, shape `n × |Θ|`.
pub fn lambda_matrix(sig: &SignalModel, truth: usize) -> Result<Vec<Vec<f64>>, ModelError> {
    (0..sig.n_agents())
        .map(|i| {
            (0..sig.n_states())
                .map(|k| {
                    if k == truth {
                        Ok(0.0)
                    } else {
                        kl_divergence(sig.row(i, truth), sig.row(i, k)).map(|d| 0.0 - d)
                    }
                })
                .collect()
        })
        .collect()
}

/// Identifiability verdict with, per false state, the agents whose signals
/// separate it from the truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Identifiability {
    pub identifiable: bool,
    /// `(false state, witness agents)` for every θ̌ ≠ θ.
    pub witnesses: Vec<(usize, Vec<usize>)>,
}

pub fn is_globally_identifiable(sig: &SignalModel, truth: usize) -> Identifiability {
    let witnesses: Vec<(usize, Vec<usize>)> = (0..sig.n_states())
        .filter(|&k| k != truth)
        .map(|k| {
            let agents = (0..sig.n_agents())
                .filter(|&i| kl_divergence(sig.row(i, truth), sig.row(i, k)).map_or(true, |d| d > 0.0))
                .collect();
            (k, agents)
        })
        .collect();
    let identifiable = witnesses.iter().all(|(_, w)| !w.is_empty());
    Identifiability { identifiable, witnesses }
}

/// Precomputed samplers for the rows `ℓᵢ(·|θ)` at a fixed truth.
#[derive(Debug, Clone)]
pub struct SignalSampler {
    rows: Vec<WeightedIndex<f64>>,
}

impl SignalSampler {
    pub fn new(sig: &SignalModel, truth: usize) -> Self {
        let rows = (0..sig.n_agents())
            .map(|i| WeightedIndex::new(sig.row(i, truth)).expect("validated likelihood row"))
            .collect();
        Self { rows }
    }

    pub fn sample<R: Rng + ?Sized>(&self, agent: usize, rng: &mut R) -> usize {
        self.rows[agent].sample(rng)
    }
}

/// One private signal for `agent` drawn from `ℓᵢ(·|truth)`.
pub fn sample_signal<R: Rng + ?Sized>(sig: &SignalModel, agent: usize, truth: usize, rng: &mut R) -> usize {
    WeightedIndex::new(sig.row(agent, truth)).expect("validated likelihood row").sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let oracle = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert_abs_diff_eq!(kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap(), oracle, epsilon = 1e-15);
        assert_abs_diff_eq!(oracle, 0.14384, epsilon = 1e-5);
        assert_abs_diff_eq!(kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn kl_errors() {
        assert!(matches!(kl_divergence(&[0.5, 0.5], &[1.0]), Err(ModelError::LengthMismatch { .. })));
        assert_eq!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]), Err(ModelError::AbsoluteContinuity(1)));
    }

    #[test]
    fn lambda_examples() {
        let sig = SignalModel::new(
            vec![
                vec![vec![0.5, 0.5], vec![0.5, 0.5]],
                vec![vec![0.5, 0.5], vec![0.25, 0.75]],
            ],
            2,
        )
        .unwrap();
        let lam = lambda_matrix(&sig, 0).unwrap();
        assert_eq!(lam[0], vec![0.0, 0.0]);
        assert_abs_diff_eq!(lam[1][1], -0.14384, epsilon = 1e-5);
        assert_eq!(lam[1][0], 0.0);
    }

    #[test]
    fn identifiability_examples() {
        let flat = SignalModel::new(vec![vec![vec![0.5, 0.5]; 3]; 2], 3).unwrap();
        assert!(!is_globally_identifiable(&flat, 0).identifiable);

        let one = SignalModel::new(vec![vec![vec![0.5, 0.5], vec![0.2, 0.8]]], 2).unwrap();
        let id = is_globally_identifiable(&one, 0);
        assert!(id.identifiable);
        assert_eq!(id.witnesses, vec![(1, vec![0])]);

        // agent 0 separates state 1 only, agent 1 separates state 2 only
        let a0 = vec![vec![0.5, 0.5], vec![0.2, 0.8], vec![0.5, 0.5]];
        let a1 = vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![0.7, 0.3]];
        let both = SignalModel::new(vec![a0.clone(), a1], 3).unwrap();
        let id = is_globally_identifiable(&both, 0);
        assert!(id.identifiable);
        assert_eq!(id.witnesses, vec![(1, vec![0]), (2, vec![1])]);
        let only_first = SignalModel::new(vec![a0], 3).unwrap();
        assert!(!is_globally_identifiable(&only_first, 0).identifiable);
    }

    #[test]
    fn validation() {
        assert!(matches!(StateSpace::indexed(1, 0), Err(ModelError::TooFewStates(1))));
        assert!(matches!(StateSpace::indexed(2, 2), Err(ModelError::TruthOutOfRange { .. })));
        assert!(matches!(
            SignalModel::new(vec![vec![vec![1.0, 0.0], vec![0.5, 0.5]]], 2),
            Err(ModelError::ZeroProbability { .. })
        ));
        assert!(SignalModel::with_zeros(vec![vec![vec![1.0, 0.0], vec![0.5, 0.5]]], 2).is_ok());
        assert!(matches!(
            SignalModel::new(vec![vec![vec![0.6, 0.6], vec![0.5, 0.5]]], 2),
            Err(ModelError::NotNormalized { .. })
        ));
        assert!(matches!(InitialPriors::new(vec![vec![1.0, 0.0]], 2), Err(ModelError::ZeroProbability { .. })));
        let p = InitialPriors::new(vec![vec![0.25, 0.75]], 2).unwrap();
        assert_eq!(p.psi(0, 0, 0), 0.0);
        assert_abs_diff_eq!(p.psi(0, 1, 0), 3f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn sampling_point_mass_and_determinism() {
        let sig = SignalModel::with_zeros(vec![vec![vec![1.0, 0.0], vec![0.5, 0.5]]], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| sample_signal(&sig, 0, 0, &mut rng) == 0));

        let sig = SignalModel::new(vec![vec![vec![0.3, 0.3, 0.4], vec![0.5, 0.25, 0.25]]], 2).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| sample_signal(&sig, 0, 1, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn sampling_frequency_within_binomial_band() {
        let sig = SignalModel::new(vec![vec![vec![0.3, 0.7], vec![0.8, 0.2]]], 2).unwrap();
        let sampler = SignalSampler::new(&sig, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let hits = (0..n).filter(|_| sampler.sample(0, &mut rng) == 0).count() as f64;
        let p = 0.8;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((hits - n as f64 * p).abs() < 3.0 * sd);
    }

    #[test]
    fn sampling_chi_square_goodness_of_fit() {
        let row = [0.1, 0.2, 0.3, 0.4];
        let sig = SignalModel::new(vec![vec![row.to_vec(), vec![0.25; 4]]], 2).unwrap();
        let sampler = SignalSampler::new(&sig, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sampler.sample(0, &mut rng)] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(row)
            .map(|(&c, p)| {
                let e = n as f64 * p;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        // chi-square, 3 dof, upper 1e-3 quantile
        assert!(chi2 < 16.266, "chi2 = {chi2}");
    }
}
