//! Rate predictions, time-varying weight combinatorics and empirical rate
//! estimation.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::beliefs::false_state_column;
use crate::engine::Trajectory;
use crate::graph::{perron_matrix, stationary_distribution, GraphError, Network, SpectralData, DEFAULT_MAX_ITER};
use crate::model::{is_globally_identifiable, lambda_matrix, InitialPriors, ModelError, SignalModel};
use crate::rules::{weighted_self_matrix, Schedule, UpdateRule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("the common-prior rule needs a directed cycle")]
    NotACycle,
    #[error("the geometric-average rate needs an aperiodic network")]
    Periodic,
    #[error("trajectory has {got} steps, at least {min} are needed")]
    TooShort { got: usize, min: usize },
    #[error("window must lie in (0, 1], got {0}")]
    BadWindow(f64),
    #[error("trajectory was recorded without log ratios")]
    MissingLogRatios,
    #[error("state {0} is the truth or out of range")]
    NotAFalseState(usize),
    #[error("weight x_{t} = {x} must be finite and nonnegative")]
    BadWeight { t: usize, x: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Closed-form asymptotic rate of one rule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatePrediction {
    pub rule: String,
    /// Agent weights: `1/n`, the stationary vector of `P`, or `s̄`.
    pub weights: Vec<f64>,
    /// `(θ̌, r(θ̌))` for every false state in ascending order.
    pub per_state: Vec<(usize, f64)>,
    pub rate: f64,
    pub slowest_state: usize,
    pub identifiable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateOutcome {
    Exponential(RatePrediction),
    /// The time-varying rule has no exponential closed form.
    NoClosedForm,
}

impl RateOutcome {
    pub fn prediction(&self) -> Option<&RatePrediction> {
        match self {
            RateOutcome::Exponential(p) => Some(p),
            RateOutcome::NoClosedForm => None,
        }
    }
}

pub fn theoretical_rate(
    rule: &UpdateRule,
    net: &Network,
    spectral: &SpectralData,
    sig: &SignalModel,
    truth: usize,
) -> Result<RateOutcome, AnalysisError> {
    let n = net.n();
    let weights: Vec<f64> = match rule {
        UpdateRule::CommonFixedPrior { .. } => {
            if !net.is_directed_cycle() {
                return Err(AnalysisError::NotACycle);
            }
            vec![1.0 / n as f64; n]
        }
        UpdateRule::RandomWalkNeighbor { choice } => stationary_distribution(choice, 1e-10)?.iter().copied().collect(),
        UpdateRule::GeometricAveragePrior => {
            if !spectral.aperiodic {
                return Err(AnalysisError::Periodic);
            }
            spectral.s_vec.iter().copied().collect()
        }
        UpdateRule::WeightedSelfBelief { eta } => {
            let b = weighted_self_matrix(&spectral.t_matrix, *eta);
            stationary_distribution(&b, 1e-10)?.iter().copied().collect()
        }
        UpdateRule::TimeVaryingLogLinear { .. } => return Ok(RateOutcome::NoClosedForm),
    };
    Ok(RateOutcome::Exponential(weighted_rate(rule.name(), weights, sig, truth)?))
}

/// `r(θ̌) = −Σ wᵢ λᵢ(θ̌)` and its minimum over false states.
pub fn weighted_rate(rule: &str, weights: Vec<f64>, sig: &SignalModel, truth: usize) -> Result<RatePrediction, AnalysisError> {
    let lambda = lambda_matrix(sig, truth)?;
    let m = sig.n_states();
    let per_state: Vec<(usize, f64)> = (0..m)
        .filter(|&k| k != truth)
        .map(|k| {
            let r: f64 = weights.iter().zip(&lambda).map(|(w, row)| -w * row[k]).sum();
            (k, r.max(0.0))
        })
        .collect();
    let (slowest_state, rate) = per_state
        .iter()
        .copied()
        .fold((usize::MAX, f64::INFINITY), |acc, (k, r)| if r < acc.1 { (k, r) } else { acc });
    Ok(RatePrediction {
        rule: rule.to_string(),
        weights,
        per_state,
        rate,
        slowest_state,
        identifiable: is_globally_identifiable(sig, truth).identifiable,
    })
}

/// Elementary symmetric sums of a weight schedule.
///
/// `M_j^{(t,τ)} = e_j(x_{τ+1}, …, x_t)`. Rows are produced by
/// `M_j^{(t,τ)} = M_j^{(t−1,τ)} + x_t M_{j−1}^{(t−1,τ)}` and truncated at the
/// first `j` where the factorial bound `(Σx)^j / j!` underflows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MCoefficients {
    /// `x_1, …, x_{t_max}`.
    pub x: Vec<f64>,
    pub t_max: usize,
    pub tau_max: usize,
    /// Entries with `j ≥ j_cap` are below the smallest normal float.
    pub j_cap: usize,
    /// `M₁^{(t,0)} = Σ_{u≤t} x_u` for `t = 0..=t_max`.
    pub m1_partial: Vec<f64>,
    /// `M_j^{(t_max,τ)}` for `τ = 0..=min(tau_max, t_max)`.
    pub final_rows: Vec<Vec<f64>>,
}

pub fn m_coefficients(x: &Schedule, t_max: usize, tau_max: usize) -> Result<MCoefficients, AnalysisError> {
    m_coefficients_from(x.values(t_max), tau_max)
}

pub fn m_coefficients_from(x: Vec<f64>, tau_max: usize) -> Result<MCoefficients, AnalysisError> {
    for (u, &v) in x.iter().enumerate() {
        if !(v.is_finite() && v >= 0.0) {
            return Err(AnalysisError::BadWeight { t: u + 1, x: v });
        }
    }
    let t_max = x.len();
    let mut m1_partial = Vec::with_capacity(t_max + 1);
    m1_partial.push(0.0);
    for &v in &x {
        m1_partial.push(m1_partial.last().unwrap() + v);
    }
    let j_cap = factorial_cap(m1_partial[t_max], t_max);
    let mut coeffs = MCoefficients { x, t_max, tau_max, j_cap, m1_partial, final_rows: Vec::new() };
    let mut final_rows = vec![Vec::new(); tau_max.min(t_max) + 1];
    coeffs.visit(|t, tau, row| {
        if t == t_max {
            final_rows[tau] = row.to_vec();
        }
    });
    coeffs.final_rows = final_rows;
    Ok(coeffs)
}

/// Smallest `j ≥ 1` with `s^j / j! < f64::MIN_POSITIVE`, capped at `t_max + 1`.
fn factorial_cap(s: f64, t_max: usize) -> usize {
    let limit = f64::MIN_POSITIVE.ln();
    if s <= 0.0 {
        return 1;
    }
    let ls = s.ln();
    let mut log_bound = 0.0;
    for j in 1..=t_max {
        log_bound += ls - (j as f64).ln();
        if log_bound < limit {
            return j.max(1);
        }
    }
    t_max + 1
}

impl MCoefficients {
    pub fn x(&self, u: usize) -> f64 {
        self.x[u - 1]
    }

    /// Calls `f(t, τ, row)` with `row[j] = M_j^{(t,τ)}` for every
    /// `τ ≤ tau_max` and `τ ≤ t ≤ t_max`, in order of `τ` then `t`.
    pub fn visit<F: FnMut(usize, usize, &[f64])>(&self, mut f: F) {
        for tau in 0..=self.tau_max.min(self.t_max) {
            let mut row = vec![0.0; self.j_cap.max(1)];
            row[0] = 1.0;
            f(tau, tau, &row);
            for t in tau + 1..=self.t_max {
                advance_row(&mut row, self.x(t), t - tau);
                f(t, tau, &row);
            }
        }
    }

    /// `M_j^{(t,τ)}` computed directly.
    pub fn entry(&self, j: usize, t: usize, tau: usize) -> f64 {
        if tau > t || j > t - tau {
            return 0.0;
        }
        if j >= self.j_cap {
            return 0.0;
        }
        let mut row = vec![0.0; j + 1];
        row[0] = 1.0;
        for u in tau + 1..=t {
            advance_row(&mut row, self.x(u), u - tau);
        }
        row[j]
    }

    /// `S_d(t) = Σ_{τ≤t} Σ_{j≥d} M_j^{(t,τ)}` for `t = 0..=t_max`.
    ///
    /// Uses `q_j(t) = Σ_τ M_j^{(t,τ)}`, whose generating function satisfies
    /// `Q_t(z) = (1 + x_t z) Q_{t−1}(z) + 1`.
    pub fn s_sums(&self, d: usize) -> Vec<f64> {
        let width = self.j_cap.max(1) + 1;
        let mut q = vec![0.0; width];
        q[0] = 1.0;
        let tail = |q: &[f64]| q.iter().skip(d).sum::<f64>();
        let mut out = Vec::with_capacity(self.t_max + 1);
        out.push(tail(&q));
        for t in 1..=self.t_max {
            let x = self.x(t);
            for j in (1..width.min(t + 1)).rev() {
                q[j] += x * q[j - 1];
            }
            q[0] += 1.0;
            out.push(tail(&q));
        }
        out
    }
}

fn advance_row(row: &mut [f64], x: f64, len: usize) {
    for j in (1..row.len().min(len + 1)).rev() {
        row[j] += x * row[j - 1];
    }
}

/// Dense table `table[t][τ][j] = M_j^{(t,τ)}` for small horizons.
pub fn full_table(x: &[f64]) -> Vec<Vec<Vec<f64>>> {
    let t_max = x.len();
    let mut table: Vec<Vec<Vec<f64>>> = Vec::with_capacity(t_max + 1);
    for t in 0..=t_max {
        let mut rows = Vec::with_capacity(t + 1);
        for tau in 0..=t {
            let mut row = vec![0.0; t - tau + 1];
            row[0] = 1.0;
            if tau < t {
                let prev = &table[t - 1][tau];
                for j in 1..=t - tau {
                    let keep = prev.get(j).copied().unwrap_or(0.0);
                    row[j] = keep + x[t - 1] * prev[j - 1];
                }
            }
            rows.push(row);
        }
        table.push(rows);
    }
    table
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Converging,
    Diverging,
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LearningVerdict {
    NecessaryConditionViolated,
    LearningTrend,
    NonLearningTrend,
    Undetermined,
}

/// Decade ratio above which a partial-sum sequence is called diverging.
pub const DIVERGENCE_RATIO: f64 = 0.8;
/// Shortest horizon for which trends are reported.
pub const MIN_TREND_HORIZON: usize = 100;

/// Finite-horizon diagnostics only: no verdict here is a proof.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearningReport {
    pub t_max: usize,
    pub d: usize,
    pub m1_partial: f64,
    pub m1_decade_ratio: Option<f64>,
    pub m1_trend: Trend,
    /// `S_d(t_max)`.
    pub s_d: f64,
    pub s_d_decade_ratio: Option<f64>,
    pub s_d_trend: Trend,
    /// `S_0(t_max)`, the double sum including the `M₀ = 1` terms.
    pub double_sum_from_zero: f64,
    pub double_sum_from_zero_trend: Trend,
    /// `S_1(t_max)`.
    pub double_sum_from_one: f64,
    pub double_sum_from_one_trend: Trend,
    /// `exp(Σ_{u≤t_max} x_u)`; multiply by `‖ψ̄‖` for the bias bound.
    pub bias_factor: f64,
    /// Min and max of `S_d(t)/t` over the trailing half of the horizon.
    pub k1: f64,
    pub k2: f64,
    pub verdict: LearningVerdict,
    pub note: &'static str,
}

/// Ratio of the partial-sum increment over the last decade of `t` to the
/// increment over the decade before.
pub fn decade_ratio(partial: &[f64]) -> Option<f64> {
    let t = partial.len().checked_sub(1)?;
    if t < MIN_TREND_HORIZON {
        return None;
    }
    let last = partial[t] - partial[t / 10];
    let prev = partial[t / 10] - partial[t / 100];
    if !last.is_finite() || !prev.is_finite() {
        return Some(f64::INFINITY);
    }
    if last == 0.0 {
        return Some(0.0);
    }
    Some(if prev == 0.0 { f64::INFINITY } else { last / prev })
}

fn trend(partial: &[f64]) -> (Option<f64>, Trend) {
    let r = decade_ratio(partial);
    let tr = match r {
        None => Trend::Undetermined,
        Some(r) if r >= DIVERGENCE_RATIO => Trend::Diverging,
        Some(_) => Trend::Converging,
    };
    (r, tr)
}

pub fn learning_condition_report(coeffs: &MCoefficients, spectral: &SpectralData) -> LearningReport {
    let d = spectral.d_const;
    let (m1_decade_ratio, m1_trend) = trend(&coeffs.m1_partial);
    let s_d = coeffs.s_sums(d);
    let (s_d_decade_ratio, s_d_trend) = trend(&s_d);
    let s0 = coeffs.s_sums(0);
    let s1 = coeffs.s_sums(1);
    let t_max = coeffs.t_max;

    let lo = (t_max / 2).max(1);
    let (mut k1, mut k2) = (f64::INFINITY, f64::NEG_INFINITY);
    for (t, &s) in s_d.iter().enumerate().skip(lo) {
        let v = s / t as f64;
        k1 = k1.min(v);
        k2 = k2.max(v);
    }
    if t_max == 0 {
        k1 = 0.0;
        k2 = 0.0;
    }

    let verdict = match (m1_trend, s_d_trend) {
        (Trend::Undetermined, _) | (_, Trend::Undetermined) => LearningVerdict::Undetermined,
        (Trend::Diverging, _) => LearningVerdict::NecessaryConditionViolated,
        (Trend::Converging, Trend::Diverging) => LearningVerdict::LearningTrend,
        (Trend::Converging, Trend::Converging) => LearningVerdict::NonLearningTrend,
    };
    let m1 = coeffs.m1_partial[t_max];
    LearningReport {
        t_max,
        d,
        m1_partial: m1,
        m1_decade_ratio,
        m1_trend,
        s_d: s_d[t_max],
        s_d_decade_ratio,
        s_d_trend,
        double_sum_from_zero: s0[t_max],
        double_sum_from_zero_trend: trend(&s0).1,
        double_sum_from_one: s1[t_max],
        double_sum_from_one_trend: trend(&s1).1,
        bias_factor: m1.exp(),
        k1,
        k2,
        verdict,
        note: "finite-horizon trend diagnostics, not a proof of convergence or divergence",
    }
}

/// `‖ψ̄(θ̌)‖₂ · exp(Σ x_u)`.
pub fn bias_bound(priors: &InitialPriors, check: usize, truth: usize, coeffs: &MCoefficients) -> f64 {
    let psi = priors.psi_vec(check, truth);
    let norm = psi.iter().map(|p| p * p).sum::<f64>().sqrt();
    norm * coeffs.m1_partial[coeffs.t_max].exp()
}

/// Per-agent least-squares slopes of `φᵢ,ₜ(θ̌)` against `t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalRate {
    pub theta_check: usize,
    pub window: f64,
    pub slopes: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl EmpiricalRate {
    /// Decay rate `−mean slope`, comparable with [`RatePrediction::per_state`].
    pub fn rate(&self) -> f64 {
        -self.mean
    }
}

pub const DEFAULT_WINDOW: f64 = 0.5;
pub const MIN_RATE_HORIZON: usize = 100;

/// Least-squares slope of `series[t]` against `t` over the trailing
/// `window` fraction of the indices.
pub fn trailing_slope(series: &[f64], window: f64) -> Result<f64, AnalysisError> {
    if !(window > 0.0 && window <= 1.0) {
        return Err(AnalysisError::BadWindow(window));
    }
    let len = series.len();
    let count = ((len as f64 * window).ceil() as usize).clamp(2.min(len), len);
    if count < 2 {
        return Err(AnalysisError::TooShort { got: len, min: 2 });
    }
    let start = len - count;
    let nf = count as f64;
    let t_mean = (start + len - 1) as f64 / 2.0;
    let y_mean = series[start..].iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, &y) in series.iter().enumerate().skip(start) {
        let dt = t as f64 - t_mean;
        sxy += dt * (y - y_mean);
        sxx += dt * dt;
    }
    Ok(sxy / sxx)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn empirical_rate(traj: &Trajectory, theta_check: usize, window: f64) -> Result<EmpiricalRate, AnalysisError> {
    let ratios = traj.log_ratios.as_ref().ok_or(AnalysisError::MissingLogRatios)?;
    if traj.horizon < MIN_RATE_HORIZON {
        return Err(AnalysisError::TooShort { got: traj.horizon, min: MIN_RATE_HORIZON });
    }
    let k = false_state_column(traj.truth, theta_check)
        .filter(|_| theta_check < traj.n_states)
        .ok_or(AnalysisError::NotAFalseState(theta_check))?;
    let slopes = (0..traj.n_agents)
        .map(|i| {
            let series: Vec<f64> = (0..=traj.horizon).map(|t| ratios.get(t, i, k)).collect();
            trailing_slope(&series, window)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (mean, std) = mean_std(&slopes);
    Ok(EmpiricalRate { theta_check, window, slopes, mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PowerDiagnostic {
    Reached { steps: usize, limit: Vec<f64> },
    NotReached { cap: usize },
}

pub const DEFAULT_POWER_CAP: usize = 10_000;

/// Smallest `j ≥ 1` with `max_i |[Bʲλ̄]ᵢ − Lᵢ| < eps`, where
/// `L = r (αᵀλ̄)/(αᵀr)` for left and right Perron vectors `α`, `r` of `B`.
/// For row-stochastic `B` this is `Σ αₖλₖ` in every entry.
pub fn power_convergence_diagnostic(
    b: &DMatrix<f64>,
    lambda_bar: &DVector<f64>,
    eps: f64,
    cap: usize,
) -> Result<PowerDiagnostic, AnalysisError> {
    let (rho, alpha) = perron_matrix(b, 1e-14, DEFAULT_MAX_ITER)?;
    let (_, right) = perron_matrix(&b.transpose(), 1e-14, DEFAULT_MAX_ITER)?;
    let scale = alpha.dot(lambda_bar) / alpha.dot(&right);
    let limit: DVector<f64> = &right * scale;
    let mut v = lambda_bar.clone();
    for j in 1..=cap {
        v = b * &v / rho;
        if (&v - &limit).amax() < eps {
            return Ok(PowerDiagnostic::Reached { steps: j, limit: limit.iter().copied().collect() });
        }
    }
    Ok(PowerDiagnostic::NotReached { cap })
}
