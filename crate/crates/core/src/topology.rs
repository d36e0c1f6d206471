//! Mixing matrices for gossip averaging and their spectra.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("a ring needs at least 3 workers, got {0}")]
    RingTooSmall(usize),
    #[error("self weight must lie in (0, 1), got {0}")]
    SelfWeight(f64),
    #[error("need at least one worker")]
    Empty,
    #[error("matrix is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("row {row} sums to {sum}, not 1")]
    NotStochastic { row: usize, sum: f64 },
    #[error("entry ({0}, {1}) outside [0, 1]")]
    EntryRange(usize, usize),
    #[error("spectral gap assumption violated: rho = {0} (must be < 1)")]
    NoSpectralGap(f64),
    #[error("graph is disconnected")]
    Disconnected,
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    EdgeRange(usize, usize, usize),
    #[error("self loop at {0}")]
    SelfLoop(usize),
    #[error("topology file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cannot read topology file {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Tolerance for row sums and the leading eigenvalue.
const STOCHASTIC_TOL: f64 = 1e-12;

/// Symmetric doubly stochastic `M x M` matrix with cached spectrum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixingMatrix {
    size: usize,
    weights: Vec<f64>,
    /// Descending.
    eigenvalues: Vec<f64>,
    rho: f64,
    mu: f64,
}

/// `rho`, `mu`, and the eigenvalues sorted descending.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spectrum {
    pub rho: f64,
    pub mu: f64,
    pub eigenvalues: Vec<f64>,
}

/// Spectrum of a symmetric matrix given row-major.
///
/// `rho = max(|lambda_2|, |lambda_M|)` and `mu = max_{i>=2} |lambda_i - 1|`.
/// For `M = 1` both are 0.
pub fn spectral_quantities(weights: &[f64], size: usize) -> Result<Spectrum, TopologyError> {
    assert_eq!(weights.len(), size * size);
    for i in 0..size {
        for j in 0..i {
            if weights[i * size + j] != weights[j * size + i] {
                return Err(TopologyError::Asymmetric(i, j));
            }
        }
    }
    let m = DMatrix::from_row_slice(size, size, weights);
    let mut eigenvalues: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    let tail = &eigenvalues[1.min(size)..];
    let rho = tail.iter().map(|l| l.abs()).fold(0.0, f64::max);
    let mu = tail.iter().map(|l| (l - 1.0).abs()).fold(0.0, f64::max);
    Ok(Spectrum { rho, mu, eigenvalues })
}

impl MixingMatrix {
    /// Validate and analyse a row-major weight matrix.
    pub fn from_weights(weights: Vec<f64>, size: usize) -> Result<Self, TopologyError> {
        if size == 0 {
            return Err(TopologyError::Empty);
        }
        assert_eq!(weights.len(), size * size, "weights must be size x size");
        for i in 0..size {
            let row = &weights[i * size..(i + 1) * size];
            if let Some(j) = row.iter().position(|&w| !(0.0..=1.0).contains(&w)) {
                return Err(TopologyError::EntryRange(i, j));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(TopologyError::NotStochastic { row: i, sum });
            }
        }
        let Spectrum { rho, mu, eigenvalues } = spectral_quantities(&weights, size)?;
        if rho >= 1.0 - STOCHASTIC_TOL {
            return Err(TopologyError::NoSpectralGap(rho));
        }
        Ok(MixingMatrix { size, weights, eigenvalues, rho, mu })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn spectrum(&self) -> Spectrum {
        Spectrum { rho: self.rho, mu: self.mu, eigenvalues: self.eigenvalues.clone() }
    }

    /// Indices `j != i` with nonzero weight.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.size).filter(|&j| j != i && self.weight(i, j) != 0.0).collect()
    }

    pub fn max_degree(&self) -> usize {
        (0..self.size).map(|i| self.neighbors(i).len()).max().unwrap_or(0)
    }

    /// `W x` for a vector indexed by worker.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.size)
            .map(|i| (0..self.size).map(|j| self.weight(i, j) * x[j]).sum())
            .collect()
    }
}

/// Circulant ring: each worker keeps `self_weight` and gives
/// `(1 - self_weight)/2` to each of its two neighbours.
pub fn ring_mixing(workers: usize, self_weight: f64) -> Result<MixingMatrix, TopologyError> {
    if workers < 3 {
        return Err(TopologyError::RingTooSmall(workers));
    }
    if !(self_weight > 0.0 && self_weight < 1.0) {
        return Err(TopologyError::SelfWeight(self_weight));
    }
    let side = (1.0 - self_weight) / 2.0;
    let mut w = vec![0.0; workers * workers];
    for i in 0..workers {
        w[i * workers + i] = self_weight;
        w[i * workers + (i + 1) % workers] += side;
        w[i * workers + (i + workers - 1) % workers] += side;
    }
    MixingMatrix::from_weights(w, workers)
}

/// Uniform averaging over all workers, `W = 11^T / M`.
pub fn complete_mixing(workers: usize) -> Result<MixingMatrix, TopologyError> {
    if workers == 0 {
        return Err(TopologyError::Empty);
    }
    MixingMatrix::from_weights(vec![1.0 / workers as f64; workers * workers], workers)
}

/// Undirected simple graph on nodes `0..nodes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    nodes: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Graph {
    pub fn new(nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, TopologyError> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= nodes || b >= nodes {
                return Err(TopologyError::EdgeRange(a, b, nodes));
            }
            if a == b {
                return Err(TopologyError::SelfLoop(a));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Graph { nodes, edges: set })
    }

    /// Parse one `i j` edge per line (0-indexed). Blank lines and `#`
    /// comments are ignored; the node count is one past the largest index.
    pub fn parse(text: &str) -> Result<Self, TopologyError> {
        let mut edges = Vec::new();
        let mut nodes = 0;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| TopologyError::Parse { line: n + 1, msg: msg.to_string() };
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(err("expected two node indices"));
            }
            let a: usize = parts[0].parse().map_err(|_| err("bad node index"))?;
            let b: usize = parts[1].parse().map_err(|_| err("bad node index"))?;
            nodes = nodes.max(a + 1).max(b + 1);
            edges.push((a, b));
        }
        Graph::new(nodes, edges)
    }

    pub fn read(path: &Path) -> Result<Self, TopologyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| TopologyError::Io { path: path.display().to_string(), source })?;
        Graph::parse(&text)
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn degree(&self, i: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == i || b == i).count()
    }

    pub fn is_connected(&self) -> bool {
        if self.nodes == 0 {
            return false;
        }
        let mut seen = vec![false; self.nodes];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &(a, b) in &self.edges {
                let v = if a == u {
                    b
                } else if b == u {
                    a
                } else {
                    continue;
                };
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Metropolis-Hastings weights `1 / (1 + max(deg_i, deg_j))` on edges, with
/// the diagonal taking the remainder of each row.
pub fn metropolis_mixing(graph: &Graph) -> Result<MixingMatrix, TopologyError> {
    if !graph.is_connected() {
        return Err(TopologyError::Disconnected);
    }
    let n = graph.nodes;
    let deg: Vec<usize> = (0..n).map(|i| graph.degree(i)).collect();
    let mut w = vec![0.0; n * n];
    for &(a, b) in &graph.edges {
        let x = 1.0 / (1 + deg[a].max(deg[b])) as f64;
        w[a * n + b] = x;
        w[b * n + a] = x;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[i * n + j]).sum();
        w[i * n + i] = 1.0 - off;
    }
    MixingMatrix::from_weights(w, n)
}

/// Margin `d mu^2 - s^2 (1 - rho)^2`; the quantized gossip analysis needs
/// it negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GossipFeasibility {
    pub margin: f64,
    pub feasible: bool,
}

pub fn check_gossip_feasible(rho: f64, mu: f64, dim: usize, levels: u32) -> GossipFeasibility {
    let s = levels as f64;
    let margin = dim as f64 * mu * mu - s * s * (1.0 - rho) * (1.0 - rho);
    GossipFeasibility { margin, feasible: margin < 0.0 }
}

impl MixingMatrix {
    pub fn gossip_feasibility(&self, dim: usize, levels: u32) -> GossipFeasibility {
        check_gossip_feasible(self.rho, self.mu, dim, levels)
    }
}

/// Ring order used by the all-reduce: worker `m` forwards to `(m + M - 1) % M`.
pub fn ring_successor(worker: usize, workers: usize) -> usize {
    (worker + workers - 1) % workers
}
