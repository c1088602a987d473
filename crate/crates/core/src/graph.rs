//! Undirected, optionally weighted networks.
//!
//! Edges are stored once as `(i, j)` with `i < j`; adjacency lists are
//! derived at construction and never mutated afterwards, so a [`Graph`] can
//! be shared freely between threads.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EpiError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    weights: Vec<f64>,
    adj: Vec<Vec<(usize, f64)>>,
}

impl Graph {
    /// Builds a graph from an edge iterator. Duplicate pairs keep their first
    /// weight; self-loops, out-of-range nodes and weights outside `[0, 1]`
    /// are rejected.
    pub fn from_weighted_edges<I>(n: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let mut seen: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (u, v, w) in edges {
            if u == v {
                return Err(EpiError::SelfLoop(u));
            }
            if u >= n || v >= n {
                return Err(EpiError::InvalidParam(format!(
                    "edge ({u}, {v}) references a node outside [0, {n})"
                )));
            }
            if !(0.0..=1.0).contains(&w) {
                return Err(EpiError::BadWeight(w));
            }
            seen.entry((u.min(v), u.max(v))).or_insert(w);
        }
        let (edges, weights): (Vec<_>, Vec<_>) = seen.into_iter().unzip();
        Ok(Self::assemble(n, edges, weights))
    }

    pub fn from_edges<I>(n: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        Self::from_weighted_edges(n, edges.into_iter().map(|(u, v)| (u, v, 1.0)))
    }

    fn assemble(n: usize, edges: Vec<(usize, usize)>, weights: Vec<f64>) -> Self {
        let mut adj = vec![Vec::new(); n];
        for (&(u, v), &w) in edges.iter().zip(&weights) {
            adj[u].push((v, w));
            adj[v].push((u, w));
        }
        for list in &mut adj {
            list.sort_by_key(|&(j, _)| j);
        }
        Graph { n, edges, weights, adj }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_weighted(&self) -> bool {
        self.weights.iter().any(|&w| w != 1.0)
    }

    /// Neighbors of `i` with the weight of the connecting edge.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adj[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj[i].len()
    }

    /// Weight of edge `(i, j)`, or 0 when absent.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adj[i]
            .binary_search_by_key(&j, |&(k, _)| k)
            .map(|pos| self.adj[i][pos].1)
            .unwrap_or(0.0)
    }

    /// `y = W x` with `W` the (weighted) adjacency matrix.
    pub fn adj_mul(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.adj[i].iter().map(|&(j, w)| w * x[j]).sum();
        }
    }

    pub fn adjacency_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut a = nalgebra::DMatrix::zeros(self.n, self.n);
        for (&(u, v), &w) in self.edges.iter().zip(&self.weights) {
            a[(u, v)] = w;
            a[(v, u)] = w;
        }
        a
    }

    /// Connected components as sorted node lists, largest first.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut label = vec![usize::MAX; self.n];
        let mut comps = Vec::new();
        for start in 0..self.n {
            if label[start] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut stack = vec![start];
            let mut comp = Vec::new();
            label[start] = id;
            while let Some(u) = stack.pop() {
                comp.push(u);
                for &(v, _) in &self.adj[u] {
                    if label[v] == usize::MAX {
                        label[v] = id;
                        stack.push(v);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
        comps
    }

    pub fn is_connected(&self) -> bool {
        self.n <= 1 || self.components().len() == 1
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(EpiError::Dimension { expected: self.n, got: perm.len() });
        }
        Self::from_weighted_edges(
            self.n,
            self.edges
                .iter()
                .zip(&self.weights)
                .map(|(&(u, v), &w)| (perm[u], perm[v], w)),
        )
    }

    /// Serializes to the edge-list format read by [`parse_edge_list`].
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("n={}\n", self.n);
        for (&(u, v), &w) in self.edges.iter().zip(&self.weights) {
            if w == 1.0 {
                let _ = writeln!(out, "{u} {v}");
            } else {
                let _ = writeln!(out, "{u} {v} {w}");
            }
        }
        out
    }
}

/// Parses a line-oriented edge list: `u v` or `u v w` per line, `#` starts a
/// comment, and an optional `n=<k>` line fixes the node count (otherwise
/// `1 + max index`).
pub fn parse_edge_list(text: &str) -> Result<Graph> {
    let mut header_n: Option<usize> = None;
    let mut raw = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(rest) = body.strip_prefix("n=") {
            let n = rest.trim().parse::<usize>().map_err(|_| EpiError::Parse {
                line: lineno,
                msg: format!("bad node-count header `{body}`"),
            })?;
            header_n = Some(n);
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() != 2 && fields.len() != 3 {
            return Err(EpiError::Parse {
                line: lineno,
                msg: format!("expected `u v` or `u v w`, got `{body}`"),
            });
        }
        let node = |s: &str| {
            s.parse::<usize>().map_err(|_| EpiError::Parse {
                line: lineno,
                msg: format!("bad node index `{s}`"),
            })
        };
        let u = node(fields[0])?;
        let v = node(fields[1])?;
        let w = match fields.get(2) {
            Some(s) => s.parse::<f64>().map_err(|_| EpiError::Parse {
                line: lineno,
                msg: format!("bad weight `{s}`"),
            })?,
            None => 1.0,
        };
        if u == v {
            return Err(EpiError::SelfLoop(u));
        }
        if !(0.0..=1.0).contains(&w) {
            return Err(EpiError::BadWeight(w));
        }
        raw.push((u, v, w));
    }
    let n = match header_n {
        Some(n) => n,
        None => raw.iter().map(|&(u, v, _)| u.max(v) + 1).max().unwrap_or(0),
    };
    Graph::from_weighted_edges(n, raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GraphKind {
    /// Erdős–Rényi G(n, p).
    Er { n: usize, p: f64 },
    /// Random geometric graph in the unit square; nodes closer than `r` are joined.
    Geometric { n: usize, r: f64 },
    Complete { n: usize },
    /// Node 0 is the hub.
    Star { n: usize },
    Path { n: usize },
}

impl GraphKind {
    pub fn n(&self) -> usize {
        match *self {
            GraphKind::Er { n, .. }
            | GraphKind::Geometric { n, .. }
            | GraphKind::Complete { n }
            | GraphKind::Star { n }
            | GraphKind::Path { n } => n,
        }
    }
}

/// Deterministic graph generator: identical `(kind, seed)` gives an
/// identical graph.
pub fn generate(kind: GraphKind, seed: u64) -> Result<Graph> {
    let n = kind.n();
    if n == 0 {
        return Err(EpiError::InvalidParam("graph must have at least one node".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<(usize, usize)> = match kind {
        GraphKind::Er { p, .. } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(EpiError::InvalidParam(format!("edge probability {p} outside [0, 1]")));
            }
            let mut e = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.gen::<f64>() < p {
                        e.push((i, j));
                    }
                }
            }
            e
        }
        GraphKind::Geometric { r, .. } => {
            if !(r > 0.0 && r.is_finite()) {
                return Err(EpiError::InvalidParam(format!("radius {r} must be positive")));
            }
            let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen(), rng.gen())).collect();
            let mut e = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    let dx = pts[i].0 - pts[j].0;
                    let dy = pts[i].1 - pts[j].1;
                    if (dx * dx + dy * dy).sqrt() < r {
                        e.push((i, j));
                    }
                }
            }
            e
        }
        GraphKind::Complete { .. } => {
            (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
        }
        GraphKind::Star { .. } => (1..n).map(|j| (0, j)).collect(),
        GraphKind::Path { .. } => (1..n).map(|j| (j - 1, j)).collect(),
    };
    Graph::from_edges(n, edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DegreeStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

pub fn degree_stats(graph: &Graph) -> DegreeStats {
    let n = graph.n();
    if n == 0 {
        return DegreeStats { min: 0, max: 0, mean: 0.0 };
    }
    let degrees = (0..n).map(|i| graph.degree(i));
    DegreeStats {
        min: degrees.clone().min().unwrap_or(0),
        max: degrees.clone().max().unwrap_or(0),
        mean: 2.0 * graph.edge_count() as f64 / n as f64,
    }
}

/// Samples `G(n, p)` until it is connected, advancing the seed each attempt.
pub fn connected_er(n: usize, p: f64, seed: u64) -> Result<Graph> {
    for attempt in 0..10_000u64 {
        let g = generate(GraphKind::Er { n, p }, seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9)))?;
        if g.is_connected() {
            return Ok(g);
        }
    }
    Err(EpiError::InvalidParam(format!("G({n}, {p}) never came out connected")))
}
