//! Communication graphs and symmetric doubly stochastic mixing matrices.
//!
//! A [`MixingMatrix`] carries its full symmetric eigendecomposition with the
//! Perron vector `1/sqrt(K)` pinned to the first column, so the rest of the
//! crate can split any stacked network quantity into a centroid part and a
//! disagreement part without recomputing spectra.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Tolerance on symmetry and row/column sums.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Tolerance on the eigendecomposition round trip.
pub const RECONSTRUCTION_TOL: f64 = 1e-10;

const RANDOM_GRAPH_RETRIES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GraphKind {
    Ring,
    Line,
    Complete,
    /// Erdős–Rényi graph with the given edge probability, resampled until connected.
    MetropolisRandom { edge_prob: f64 },
}

impl GraphKind {
    pub fn label(&self) -> &'static str {
        match self {
            GraphKind::Ring => "ring",
            GraphKind::Line => "line",
            GraphKind::Complete => "complete",
            GraphKind::MetropolisRandom { .. } => "metropolis",
        }
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Undirected graph over agents `0..K`. Self-loops are implicit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    node_count: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Graph {
    /// Builds a graph from unordered pairs; duplicates and self pairs are dropped.
    pub fn new(node_count: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::InvalidParameter("graph needs at least one node".into()));
        }
        let mut edges = BTreeSet::new();
        for (i, j) in pairs {
            if i >= node_count || j >= node_count {
                return Err(Error::EdgeOutOfRange(i, j, node_count));
            }
            if i != j {
                edges.insert((i.min(j), i.max(j)));
            }
        }
        Ok(Self { node_count, edges })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Edges as ordered pairs `(i, j)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    /// Neighbor lists, excluding the node itself.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn is_connected(&self) -> bool {
        let adj = self.adjacency();
        let mut seen = vec![false; self.node_count];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    queue.push_back(u);
                }
            }
        }
        count == self.node_count
    }
}

/// Builds a connected graph of the requested family.
///
/// `seed` only matters for [`GraphKind::MetropolisRandom`], which redraws
/// until the sample is connected (bounded retries).
pub fn build_graph(kind: GraphKind, k: usize, seed: u64) -> Result<Graph> {
    if k < 2 {
        return Err(Error::TooFewAgents(k));
    }
    match kind {
        GraphKind::Ring => Graph::new(k, (0..k).map(|i| (i, (i + 1) % k))),
        GraphKind::Line => Graph::new(k, (0..k - 1).map(|i| (i, i + 1))),
        GraphKind::Complete => {
            Graph::new(k, (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))))
        }
        GraphKind::MetropolisRandom { edge_prob } => {
            if !(edge_prob > 0.0 && edge_prob <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "edge probability must lie in (0, 1], got {edge_prob}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..RANDOM_GRAPH_RETRIES {
                let mut pairs = Vec::new();
                for i in 0..k {
                    for j in i + 1..k {
                        if rng.random_bool(edge_prob) {
                            pairs.push((i, j));
                        }
                    }
                }
                let g = Graph::new(k, pairs)?;
                if g.is_connected() {
                    return Ok(g);
                }
            }
            Err(Error::RetryBudgetExhausted(RANDOM_GRAPH_RETRIES, edge_prob))
        }
    }
}

/// Eigendecomposition `W = U diag(eigenvalues) U^T` with the Perron pair first.
#[derive(Debug, Clone)]
pub struct SpectralData {
    /// Orthogonal eigenvector matrix; column 0 is exactly `1/sqrt(K)`.
    pub u: DMatrix<f64>,
    /// Eigenvalues, descending; entry 0 is 1.
    pub eigenvalues: DVector<f64>,
    /// Second-largest eigenvalue magnitude.
    pub lambda_mix: f64,
}

impl SpectralData {
    /// The `K x (K-1)` block of eigenvectors orthogonal to the ones vector.
    pub fn uhat(&self) -> DMatrix<f64> {
        let k = self.u.nrows();
        self.u.columns(1, k - 1).into_owned()
    }

    /// Eigenvalues on the complement of `span(1)`.
    pub fn lambda_hat(&self) -> DVector<f64> {
        let k = self.eigenvalues.len();
        self.eigenvalues.rows(1, k - 1).into_owned()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.eigenvalues) * self.u.transpose()
    }
}

/// Symmetric, doubly stochastic, primitive combination matrix.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    w: DMatrix<f64>,
    spectral: SpectralData,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl MixingMatrix {
    /// Validates `w` and computes its spectral data.
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        let k = w.nrows();
        if k != w.ncols() {
            return Err(Error::InvalidMixingMatrix(format!(
                "matrix is {}x{}, expected square",
                w.nrows(),
                w.ncols()
            )));
        }
        if k < 2 {
            return Err(Error::TooFewAgents(k));
        }
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidMixingMatrix("non-finite entry".into()));
        }
        let asym = symmetry_residual(&w);
        if asym > STOCHASTIC_TOL {
            return Err(Error::InvalidMixingMatrix(format!("asymmetry {asym:e}")));
        }
        let stoch = stochasticity_residual(&w);
        if stoch > STOCHASTIC_TOL {
            return Err(Error::InvalidMixingMatrix(format!("row/column sum residual {stoch:e}")));
        }
        let spectral = spectral_data(&w)?;
        if spectral.lambda_mix >= 1.0 - STOCHASTIC_TOL {
            return Err(Error::InvalidMixingMatrix(format!(
                "not primitive: second eigenvalue magnitude {}",
                spectral.lambda_mix
            )));
        }
        let neighbors = neighbor_weights(&w);
        Ok(Self { w, spectral, neighbors })
    }

    /// Metropolis–Hastings weights: `1/(1 + max(deg_i, deg_j))` on edges,
    /// diagonal fills each row to one.
    pub fn metropolis(g: &Graph) -> Result<Self> {
        let k = g.node_count();
        if k < 2 {
            return Err(Error::TooFewAgents(k));
        }
        if !g.is_connected() {
            return Err(Error::Disconnected);
        }
        let deg = g.degrees();
        let mut w = DMatrix::zeros(k, k);
        for (i, j) in g.edges() {
            let v = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
        for i in 0..k {
            let off: f64 = (0..k).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
            w[(i, i)] = 1.0 - off;
        }
        Self::new(w)
    }

    /// `(I + W_mh) / 2` where `W_mh` are the Metropolis weights. All eigenvalues
    /// lie in `[0, 1)`.
    pub fn lazy_metropolis(g: &Graph) -> Result<Self> {
        let base = Self::metropolis(g)?;
        let k = base.size();
        let w = (DMatrix::identity(k, k) + &base.w) * 0.5;
        Self::new(w)
    }

    /// Uniform averaging `11^T / K` (complete graph, one-step consensus).
    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(DMatrix::from_element(k, k, 1.0 / k as f64))
    }

    /// The trivial `[1]` matrix of a single agent. Only used by the
    /// centralized fallback; it has no disagreement subspace.
    pub fn single_agent() -> Self {
        let w = DMatrix::from_element(1, 1, 1.0);
        let spectral = SpectralData {
            u: DMatrix::from_element(1, 1, 1.0),
            eigenvalues: DVector::from_element(1, 1.0),
            lambda_mix: 0.0,
        };
        Self { w, spectral, neighbors: vec![vec![(0, 1.0)]] }
    }

    pub fn size(&self) -> usize {
        self.w.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn spectral(&self) -> &SpectralData {
        &self.spectral
    }

    pub fn lambda_mix(&self) -> f64 {
        self.spectral.lambda_mix
    }

    /// Nonzero entries of row `k` as `(neighbor, weight)`, self included.
    pub fn neighbors(&self, k: usize) -> &[(usize, f64)] {
        &self.neighbors[k]
    }

    /// True when every nonzero off-diagonal entry is an edge of `g`.
    pub fn respects(&self, g: &Graph) -> bool {
        let k = self.size();
        g.node_count() == k
            && (0..k).all(|i| (0..k).all(|j| i == j || self.w[(i, j)] == 0.0 || g.has_edge(i, j)))
    }
}

fn neighbor_weights(w: &DMatrix<f64>) -> Vec<Vec<(usize, f64)>> {
    (0..w.nrows())
        .map(|i| (0..w.ncols()).filter(|&j| w[(i, j)] != 0.0).map(|j| (j, w[(i, j)])).collect())
        .collect()
}

pub(crate) fn symmetry_residual(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

/// Largest deviation of any row or column sum from one.
pub(crate) fn stochasticity_residual(m: &DMatrix<f64>) -> f64 {
    let rows = m.column_sum().map(|s| (s - 1.0).abs()).max();
    let cols = m.row_sum().map(|s| (s - 1.0).abs()).max();
    rows.max(cols)
}

/// Eigendecomposition of a symmetric doubly stochastic matrix, ordered by
/// descending eigenvalue (ties by solver index) with the Perron vector replaced
/// by the exact `1/sqrt(K)` and the other columns re-orthogonalized against it.
pub fn spectral_data(w: &DMatrix<f64>) -> Result<SpectralData> {
    let k = w.nrows();
    let eig = SymmetricEigen::try_new(w.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigensolver did not converge".into()))?;

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b))
    });

    let mut u = DMatrix::zeros(k, k);
    let mut eigenvalues = DVector::zeros(k);
    let perron = DVector::from_element(k, 1.0 / (k as f64).sqrt());
    u.set_column(0, &perron);
    eigenvalues[0] = 1.0;
    for (col, &src) in order.iter().enumerate().skip(1) {
        let mut v = eig.eigenvectors.column(src).into_owned();
        // Modified Gram-Schmidt against every column already placed.
        for prev in 0..col {
            let basis = u.column(prev).into_owned();
            let proj = basis.dot(&v);
            v -= basis * proj;
        }
        let norm = v.norm();
        if norm < 1e-8 {
            return Err(Error::Numeric(format!(
                "eigenvector {col} collapsed during re-orthogonalization"
            )));
        }
        u.set_column(col, &(v / norm));
        eigenvalues[col] = eig.eigenvalues[src];
    }

    let lambda_mix = eigenvalues.iter().skip(1).fold(0.0_f64, |m, v| m.max(v.abs()));
    let data = SpectralData { u, eigenvalues, lambda_mix };
    let err = (data.reconstruct() - w).norm();
    if err > RECONSTRUCTION_TOL {
        return Err(Error::Numeric(format!("eigendecomposition residual {err:e}")));
    }
    Ok(data)
}

/// Weight rule applied to a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MixingRule {
    #[default]
    Metropolis,
    LazyMetropolis,
}

impl MixingRule {
    pub fn apply(self, g: &Graph) -> Result<MixingMatrix> {
        match self {
            MixingRule::Metropolis => MixingMatrix::metropolis(g),
            MixingRule::LazyMetropolis => MixingMatrix::lazy_metropolis(g),
        }
    }
}

impl FromStr for MixingRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "metropolis" => Ok(MixingRule::Metropolis),
            "lazy_metropolis" | "lazy" => Ok(MixingRule::LazyMetropolis),
            other => Err(Error::InvalidParameter(format!("unknown mixing rule `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edge_set(g: &Graph) -> Vec<(usize, usize)> {
        g.edges().collect()
    }

    #[test]
    fn ring_line_complete_edges() {
        let ring = build_graph(GraphKind::Ring, 4, 0).unwrap();
        assert_eq!(edge_set(&ring), vec![(0, 1), (0, 3), (1, 2), (2, 3)]);
        let line = build_graph(GraphKind::Line, 3, 0).unwrap();
        assert_eq!(edge_set(&line), vec![(0, 1), (1, 2)]);
        let complete = build_graph(GraphKind::Complete, 3, 0).unwrap();
        assert_eq!(edge_set(&complete), vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn rejects_single_agent_and_bad_probability() {
        assert!(matches!(build_graph(GraphKind::Ring, 1, 0), Err(Error::TooFewAgents(1))));
        assert!(build_graph(GraphKind::MetropolisRandom { edge_prob: 0.0 }, 5, 0).is_err());
        assert!(build_graph(GraphKind::MetropolisRandom { edge_prob: 1.5 }, 5, 0).is_err());
    }

    #[test]
    fn random_graph_is_connected_and_seeded() {
        let kind = GraphKind::MetropolisRandom { edge_prob: 0.3 };
        let a = build_graph(kind, 12, 7).unwrap();
        let b = build_graph(kind, 12, 7).unwrap();
        assert!(a.is_connected());
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_probability_exhausts_retries() {
        let kind = GraphKind::MetropolisRandom { edge_prob: 1e-9 };
        assert!(matches!(build_graph(kind, 30, 1), Err(Error::RetryBudgetExhausted(..))));
    }

    #[test]
    fn metropolis_line_two() {
        let g = build_graph(GraphKind::Line, 2, 0).unwrap();
        let m = MixingMatrix::metropolis(&g).unwrap();
        for v in m.matrix().iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert!(m.lambda_mix().abs() < 1e-12);
    }

    #[test]
    fn metropolis_ring_three_is_uniform_thirds() {
        let g = build_graph(GraphKind::Ring, 3, 0).unwrap();
        let m = MixingMatrix::metropolis(&g).unwrap();
        for v in m.matrix().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // Uniform averaging: every nontrivial eigenvalue is 0.
        assert!(m.lambda_mix() < 1e-12);
    }

    #[test]
    fn ring_five_matches_circulant_spectrum() {
        let g = build_graph(GraphKind::Ring, 5, 0).unwrap();
        let m = MixingMatrix::metropolis(&g).unwrap();
        let mut expected: Vec<f64> = (0..5)
            .map(|j| (1.0 + 2.0 * (2.0 * std::f64::consts::PI * j as f64 / 5.0).cos()) / 3.0)
            .collect();
        expected.sort_by(|a, b| b.total_cmp(a));
        for (got, want) in m.spectral().eigenvalues.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn complete_mixes_faster_than_ring() {
        for k in [4, 6, 9] {
            let ring = MixingMatrix::metropolis(&build_graph(GraphKind::Ring, k, 0).unwrap()).unwrap();
            let full =
                MixingMatrix::metropolis(&build_graph(GraphKind::Complete, k, 0).unwrap()).unwrap();
            assert!(full.lambda_mix() < ring.lambda_mix());
        }
    }

    #[test]
    fn spectral_block_structure() {
        let g = build_graph(GraphKind::Line, 6, 0).unwrap();
        let m = MixingMatrix::metropolis(&g).unwrap();
        let s = m.spectral();
        let k = m.size();
        let gram = s.u.transpose() * &s.u;
        assert!((gram - DMatrix::<f64>::identity(k, k)).amax() < 1e-10);
        assert!((s.reconstruct() - m.matrix()).norm() < 1e-10);
        assert_eq!(s.uhat().ncols(), k - 1);
        let ones = DVector::from_element(k, 1.0);
        assert!((s.uhat().transpose() * ones).amax() < 1e-12);
        assert!(m.respects(&g));
    }

    #[test]
    fn uniform_two_has_zero_lambda_hat() {
        let m = MixingMatrix::uniform(2).unwrap();
        assert_eq!(m.spectral().lambda_hat().len(), 1);
        assert!(m.spectral().lambda_hat()[0].abs() < 1e-12);
        assert!(m.lambda_mix() < 1e-12);
    }

    #[test]
    fn rejects_invalid_matrices() {
        let asym = DMatrix::from_row_slice(2, 2, &[0.6, 0.4, 0.5, 0.5]);
        assert!(MixingMatrix::new(asym).is_err());
        let identity = DMatrix::<f64>::identity(3, 3);
        assert!(matches!(MixingMatrix::new(identity), Err(Error::InvalidMixingMatrix(_))));
        let disconnected = Graph::new(4, [(0, 1), (2, 3)]).unwrap();
        assert!(matches!(MixingMatrix::metropolis(&disconnected), Err(Error::Disconnected)));
    }

    #[test]
    fn lazy_metropolis_is_positive_semidefinite() {
        let g = build_graph(GraphKind::Ring, 8, 0).unwrap();
        let m = MixingMatrix::lazy_metropolis(&g).unwrap();
        assert!(m.spectral().eigenvalues.min() >= -1e-12);
        let plain = MixingMatrix::metropolis(&g).unwrap();
        assert!((plain.spectral().eigenvalues.min() + 1.0 / 3.0).abs() < 1e-12);
    }
}
