//! Directed social networks and the spectral quantities the rate theory needs.
//!
//! Edges point in the direction information flows: `j ∈ N(i)` means agent `i`
//! observes the belief of agent `j`, i.e. the edge `(j, i)`. The adjacency
//! matrix follows the same convention, `A[i][j] = 1` iff `j ∈ N(i)`, so the
//! rows of `A` are the neighborhoods.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default convergence tolerance for the eigen-solvers.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Default iteration cap for power iteration.
pub const DEFAULT_MAX_ITER: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("network must have at least one agent")]
    Empty,
    #[error("agent {agent}: neighbor index {neighbor} out of range for {n} agents")]
    NeighborOutOfRange { agent: usize, neighbor: usize, n: usize },
    #[error("agent {agent}: neighbor {neighbor} listed more than once")]
    DuplicateNeighbor { agent: usize, neighbor: usize },
    #[error("agent {0} has no neighbors")]
    ZeroDegree(usize),
    #[error("network is not strongly connected")]
    NotStronglyConnected,
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix has a negative or non-finite entry at ({row}, {col})")]
    InvalidEntry { row: usize, col: usize },
    #[error("row {row} sums to {sum}, expected 1")]
    NotRowStochastic { row: usize, sum: f64 },
    #[error("Markov chain is reducible")]
    Reducible,
    #[error("power iteration did not reach tolerance {tol:e} within {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, tol: f64, residual: f64 },
    #[error("linear solve for the stationary distribution failed: {0}")]
    Singular(String),
}

/// A directed network given by per-agent neighborhoods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    neighbors: Vec<Vec<usize>>,
}

impl Network {
    /// Builds a network from neighborhoods `N(i)`. Neighbor lists are stored
    /// sorted ascending; self-loops are allowed.
    pub fn from_neighbors(mut neighbors: Vec<Vec<usize>>) -> Result<Self, GraphError> {
        let n = neighbors.len();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        for (agent, nbrs) in neighbors.iter_mut().enumerate() {
            nbrs.sort_unstable();
            for w in nbrs.windows(2) {
                if w[0] == w[1] {
                    return Err(GraphError::DuplicateNeighbor { agent, neighbor: w[0] });
                }
            }
            if let Some(&neighbor) = nbrs.iter().find(|&&j| j >= n) {
                return Err(GraphError::NeighborOutOfRange { agent, neighbor, n });
            }
        }
        Ok(Self { neighbors })
    }

    /// Directed cycle where agent `i` observes agent `i - 1` (mod n).
    pub fn directed_cycle(n: usize) -> Self {
        let neighbors = (0..n).map(|i| vec![(i + n - 1) % n]).collect();
        Self::from_neighbors(neighbors).expect("cycle is well formed")
    }

    /// Complete digraph without self-loops.
    pub fn complete(n: usize) -> Self {
        let neighbors = (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect();
        Self::from_neighbors(neighbors).expect("complete graph is well formed")
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn neighborhoods(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.neighbors[to].binary_search(&from).is_ok()
    }

    pub fn adjacency(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut a = DMatrix::zeros(n, n);
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            for &j in nbrs {
                a[(i, j)] = 1.0;
            }
        }
        a
    }

    /// True when every agent has exactly one neighbor and the graph is
    /// strongly connected, i.e. the network is a single directed cycle.
    pub fn is_directed_cycle(&self) -> bool {
        self.neighbors.iter().all(|nb| nb.len() == 1) && is_strongly_connected(self)
    }

    /// Out-edges in the information-flow direction: `j -> i` for each `j ∈ N(i)`.
    fn successors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n()];
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            for &j in nbrs {
                out[j].push(i);
            }
        }
        out
    }
}

fn bfs(adj: &[Vec<usize>], src: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; adj.len()];
    dist[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].unwrap();
        for &v in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

pub fn is_strongly_connected(net: &Network) -> bool {
    // forward reachability along j -> i and backward along the neighborhoods
    let fwd = bfs(&net.successors(), 0);
    let bwd = bfs(net.neighborhoods(), 0);
    fwd.iter().all(Option::is_some) && bwd.iter().all(Option::is_some)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Period of a strongly connected digraph: gcd over edges `u -> v` of
/// `level(u) + 1 - level(v)` with BFS levels from any root.
pub fn period(net: &Network) -> Result<usize, GraphError> {
    if !is_strongly_connected(net) {
        return Err(GraphError::NotStronglyConnected);
    }
    let succ = net.successors();
    let level = bfs(&succ, 0);
    let mut g = 0;
    for (u, outs) in succ.iter().enumerate() {
        let lu = level[u].unwrap() as i64;
        for &v in outs {
            let lv = level[v].unwrap() as i64;
            g = gcd(g, (lu + 1 - lv).unsigned_abs() as usize);
        }
    }
    Ok(g)
}

pub fn is_aperiodic(net: &Network) -> Result<bool, GraphError> {
    Ok(period(net)? == 1)
}

/// Longest shortest directed path over ordered pairs.
pub fn diameter(net: &Network) -> Result<usize, GraphError> {
    if !is_strongly_connected(net) {
        return Err(GraphError::NotStronglyConnected);
    }
    let succ = net.successors();
    let mut diam = 0;
    for src in 0..net.n() {
        for d in bfs(&succ, src).into_iter().flatten() {
            diam = diam.max(d);
        }
    }
    Ok(diam)
}

/// `T[i][j] = A[i][j] / d(i)`.
pub fn normalized_adjacency(net: &Network) -> Result<DMatrix<f64>, GraphError> {
    let n = net.n();
    let mut t = DMatrix::zeros(n, n);
    for (i, nbrs) in net.neighborhoods().iter().enumerate() {
        if nbrs.is_empty() {
            return Err(GraphError::ZeroDegree(i));
        }
        let w = 1.0 / nbrs.len() as f64;
        for &j in nbrs {
            t[(i, j)] = w;
        }
    }
    Ok(t)
}

fn check_square_nonneg(m: &DMatrix<f64>) -> Result<(), GraphError> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(GraphError::NotSquare { rows: m.nrows(), cols: m.ncols() });
    }
    for row in 0..m.nrows() {
        for col in 0..m.ncols() {
            let v = m[(row, col)];
            if !v.is_finite() || v < 0.0 {
                return Err(GraphError::InvalidEntry { row, col });
            }
        }
    }
    Ok(())
}

/// Strong connectivity of the support graph of a square nonnegative matrix.
pub fn support_is_irreducible(m: &DMatrix<f64>) -> bool {
    let neighbors = (0..m.nrows())
        .map(|i| (0..m.ncols()).filter(|&j| m[(i, j)] > 0.0).collect())
        .collect();
    Network::from_neighbors(neighbors)
        .map(|net| is_strongly_connected(&net))
        .unwrap_or(false)
}

/// Left Perron pair `(ρ, α)` of an irreducible nonnegative matrix `M`, with
/// `αᵀM = ρ αᵀ`, `Σα = 1`, `α > 0`.
///
/// Power iteration runs on `Mᵀ + I`. The unit shift makes the dominant
/// eigenvalue strictly dominant in modulus even for periodic matrices.
pub fn perron_matrix(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<(f64, DVector<f64>), GraphError> {
    check_square_nonneg(m)?;
    if !support_is_irreducible(m) {
        return Err(GraphError::NotStronglyConnected);
    }
    let n = m.nrows();
    let mt = m.transpose();
    let mut v = DVector::from_element(n, 1.0 / n as f64);
    let mut residual = f64::INFINITY;
    for iter in 1..=max_iter {
        let mut next = &mt * &v + &v;
        let s = next.sum();
        next /= s;
        let step = (&next - &v).amax();
        v = next;
        if step <= tol || iter % 64 == 0 || iter == max_iter {
            let mv = &mt * &v;
            let rho = mv.sum();
            residual = (&mv - &v * rho).amax();
            if residual <= tol {
                return Ok((rho, v));
            }
        }
    }
    Err(GraphError::NotConverged { iterations: max_iter, tol, residual })
}

/// Spectral radius and left Perron eigenvector of the adjacency matrix.
pub fn perron(net: &Network, tol: f64) -> Result<(f64, DVector<f64>), GraphError> {
    if !is_strongly_connected(net) {
        return Err(GraphError::NotStronglyConnected);
    }
    perron_matrix(&net.adjacency(), tol, DEFAULT_MAX_ITER)
}

/// Stationary row vector `s` of an irreducible row-stochastic matrix.
///
/// Solves `(Tᵀ - I)s = 0` with one equation replaced by `Σs = 1` (LU with
/// partial pivoting), so periodic chains are handled the same as aperiodic ones.
pub fn stationary_distribution(t: &DMatrix<f64>, tol: f64) -> Result<DVector<f64>, GraphError> {
    check_square_nonneg(t)?;
    for (row, r) in t.row_iter().enumerate() {
        let sum = r.sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(GraphError::NotRowStochastic { row, sum });
        }
    }
    if !support_is_irreducible(t) {
        return Err(GraphError::Reducible);
    }
    let n = t.nrows();
    let mut sys = t.transpose() - DMatrix::identity(n, n);
    sys.row_mut(n - 1).fill(1.0);
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let s = sys
        .lu()
        .solve(&rhs)
        .ok_or_else(|| GraphError::Singular("singular system".into()))?;
    let residual = (t.transpose() * &s - &s).amax();
    if residual > tol || s.iter().any(|&x| x <= 0.0) {
        return Err(GraphError::Singular(format!("residual {residual:e}")));
    }
    Ok(s)
}

/// Everything spectral the update rules and rate formulas depend on.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralData {
    pub rho: f64,
    pub alpha: DVector<f64>,
    pub t_matrix: DMatrix<f64>,
    pub s_vec: DVector<f64>,
    pub diameter: usize,
    pub aperiodic: bool,
    /// `diam(G) + 1`: powers of a primitive `B` are entrywise positive from here on.
    pub d_const: usize,
}

impl SpectralData {
    pub fn compute(net: &Network, tol: f64) -> Result<Self, GraphError> {
        if !is_strongly_connected(net) {
            return Err(GraphError::NotStronglyConnected);
        }
        let (rho, alpha) = perron(net, tol)?;
        let t_matrix = normalized_adjacency(net)?;
        let s_vec = stationary_distribution(&t_matrix, tol.max(1e-12))?;
        let diameter = diameter(net)?;
        Ok(Self {
            rho,
            alpha,
            t_matrix,
            s_vec,
            diameter,
            aperiodic: is_aperiodic(net)?,
            d_const: diameter + 1,
        })
    }
}
