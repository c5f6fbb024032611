//! Communication graphs and doubly stochastic mixing matrices.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Ring,
    Dense,
    Bipartite,
}

impl TopologyKind {
    pub const ALL: [TopologyKind; 3] = [
        TopologyKind::Ring,
        TopologyKind::Dense,
        TopologyKind::Bipartite,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TopologyKind::Ring => "ring",
            TopologyKind::Dense => "dense",
            TopologyKind::Bipartite => "bipartite",
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(TopologyKind::Ring),
            "dense" => Ok(TopologyKind::Dense),
            "bipartite" => Ok(TopologyKind::Bipartite),
            other => Err(Error::UnknownTopology(other.to_string())),
        }
    }
}

/// Undirected graph over agents `0..n`. Edges are stored as `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Graph {
    /// Builds a graph from an edge list, normalizing orientation and
    /// rejecting self-loops and out-of-range endpoints.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidAgentCount { what: "graph", n });
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b || a >= n || b >= n {
                return Err(Error::InvalidAgentCount {
                    what: "edge endpoint",
                    n: a.max(b),
                });
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Graph { n, edges: set })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    pub fn is_connected(&self) -> bool {
        let mut adj = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

pub fn build_graph(kind: TopologyKind, n: usize) -> Result<Graph> {
    if n == 0 {
        return Err(Error::InvalidAgentCount {
            what: kind.as_str(),
            n,
        });
    }
    let edges: Vec<(usize, usize)> = match kind {
        TopologyKind::Ring => {
            if n == 1 {
                Vec::new()
            } else {
                (0..n).map(|i| (i, (i + 1) % n)).collect()
            }
        }
        TopologyKind::Dense => (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect(),
        TopologyKind::Bipartite => {
            if n < 2 {
                return Err(Error::InvalidAgentCount {
                    what: "bipartite",
                    n,
                });
            }
            // Odd counts put the extra agent in the second part.
            let split = n / 2;
            (0..split)
                .flat_map(|i| (split..n).map(move |j| (i, j)))
                .collect()
        }
    };
    Graph::from_edges(n, edges)
}

/// Symmetric doubly stochastic mixing matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl WeightMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    /// Indices with nonzero weight in row `i`, self included.
    pub fn neighborhood(&self, i: usize) -> Vec<usize> {
        self.row(i)
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(j, _)| j)
            .collect()
    }

    /// The nonzero weights of row `i`, aligned with [`Self::neighborhood`].
    pub fn neighborhood_weights(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().copied().filter(|&w| w > 0.0).collect()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(v).map(|(w, x)| w * x).sum())
            .collect()
    }

    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.n)
            .map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_col_sum_error(&self) -> f64 {
        (0..self.n)
            .map(|j| ((0..self.n).map(|i| self.get(i, j)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

/// Metropolis-Hastings weights: `W_ij = 1 / (1 + max(deg_i, deg_j))` on edges,
/// remaining mass on the diagonal.
pub fn metropolis_weights(g: &Graph) -> Result<WeightMatrix> {
    if !g.is_connected() {
        return Err(Error::Disconnected);
    }
    let n = g.n();
    let deg = g.degrees();
    let mut entries = vec![0.0; n * n];
    for &(a, b) in g.edges() {
        let w = 1.0 / (1.0 + deg[a].max(deg[b]) as f64);
        entries[a * n + b] = w;
        entries[b * n + a] = w;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| entries[i * n + j]).sum();
        entries[i * n + i] = 1.0 - off;
    }
    Ok(WeightMatrix { n, entries })
}

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 200_000;

/// `|λ₂(W)|`: the spectral radius of `W` restricted to the complement of the
/// all-ones vector, found by power iteration with re-projection each step.
pub fn second_largest_eigenvalue_magnitude(w: &WeightMatrix) -> Result<f64> {
    let n = w.n();
    if n == 1 {
        return Ok(0.0);
    }
    let center = |v: &mut [f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= mean);
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();

    // Irregular start so no eigenvector is orthogonal to it by symmetry.
    let mut v: Vec<f64> = (0..n)
        .map(|k| ((k as f64 + 1.0) * 1.618_033_988_75).sin() + 0.1 * k as f64)
        .collect();
    center(&mut v);
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    let mut estimate = f64::INFINITY;
    for _ in 0..POWER_MAX_ITERS {
        let mut next = w.apply(&v);
        center(&mut next);
        let nn = norm(&next);
        if nn < 1e-300 {
            return Ok(0.0);
        }
        next.iter_mut().for_each(|x| *x /= nn);
        let converged = (nn - estimate).abs() < POWER_TOL;
        estimate = nn;
        v = next;
        if converged {
            return Ok(estimate);
        }
    }
    Err(Error::NoConvergence(POWER_MAX_ITERS))
}
