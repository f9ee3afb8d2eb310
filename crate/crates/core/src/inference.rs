//! Propagation of observed volumes over a non-negative similarity graph by
//! minimizing `Σ ω·(x_a − x_b)²` with observed cells held fixed.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingTable;
use crate::network::RoadNetwork;
use crate::st_graph::STGraph;
use crate::trajectory::VolumeTensor;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("no observed cells to propagate from")]
    NoObserved,
    #[error("graph is {0}x{1} but volumes are {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
    #[error("invalid inference config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMode {
    #[default]
    GaussSeidel,
    Jacobi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub mode: SolverMode,
    /// Keep negative similarities instead of clamping them to zero.
    pub raw_weights: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { tol: 1e-8, max_iter: 10_000, mode: SolverMode::GaussSeidel, raw_weights: false }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<(), InferError> {
        if !(self.tol > 0.0) {
            return Err(InferError::InvalidConfig("tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(InferError::InvalidConfig("max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// Undirected weighted graph over the `m·n` cells, indexed like `VolumeTensor`.
/// Each unordered pair is stored once in `pairs` and twice in `nbrs`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    pub m: usize,
    pub n: usize,
    pairs: Vec<(usize, usize, f64)>,
    nbrs: Vec<Vec<(usize, f64)>>,
}

impl SimilarityGraph {
    /// Merges duplicate pairs (in either orientation) by taking the maximum.
    /// Self pairs and zero weights are dropped.
    pub fn from_pairs(m: usize, n: usize, pairs: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (a, b, w) in pairs {
            assert!(a < m * n && b < m * n, "cell index out of range");
            if a == b || w == 0.0 {
                continue;
            }
            let key = (a.min(b), a.max(b));
            acc.entry(key).and_modify(|x| *x = x.max(w)).or_insert(w);
        }
        let mut nbrs = vec![Vec::new(); m * n];
        let pairs: Vec<_> = acc.into_iter().map(|((a, b), w)| (a, b, w)).collect();
        for &(a, b, w) in &pairs {
            nbrs[a].push((b, w));
            nbrs[b].push((a, w));
        }
        SimilarityGraph { m, n, pairs, nbrs }
    }

    pub fn pairs(&self) -> &[(usize, usize, f64)] {
        &self.pairs
    }

    pub fn neighbors(&self, cell: usize) -> &[(usize, f64)] {
        &self.nbrs[cell]
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn weight(&self, a: usize, b: usize) -> f64 {
        self.nbrs[a].iter().find(|&&(k, _)| k == b).map_or(0.0, |&(_, w)| w)
    }
}

/// Embedding similarities kept only between road-adjacent segments at most one
/// interval apart; negative values are clamped to zero unless `raw`.
pub fn build_masked_graph(table: &EmbeddingTable, net: &RoadNetwork, raw: bool) -> SimilarityGraph {
    let (m, n) = (table.m, table.n);
    assert_eq!(m, net.num_segments(), "embedding and network disagree on segment count");
    let mut pairs = Vec::new();
    for i in 0..m {
        // i itself plus every segment adjacent in either direction
        let mut js = net.undirected_neighbors(i);
        js.push(i);
        for &j in js.iter().filter(|&&j| j >= i) {
            for t in 0..n {
                for t2 in t.saturating_sub(1)..=(t + 1).min(n - 1) {
                    let (a, b) = (i * n + t, j * n + t2);
                    if a >= b {
                        continue;
                    }
                    let s = table.similarity_idx(a, b);
                    let w = if raw { s } else { s.max(0.0) };
                    pairs.push((a, b, w));
                }
            }
        }
    }
    SimilarityGraph::from_pairs(m, n, pairs)
}

/// Similarity taken straight from ST-graph edge weights: `alpha·w_D + (1-alpha)·w_I`.
pub fn graph_from_st(gd: &STGraph, gi: &STGraph, alpha: f64) -> SimilarityGraph {
    let (m, n) = (gd.num_segments(), gd.num_layers());
    assert_eq!((m, n), (gi.num_segments(), gi.num_layers()), "graph dimensions differ");
    let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (g, w) in [(gd, alpha), (gi, 1.0 - alpha)] {
        if w == 0.0 {
            continue;
        }
        for a in 0..g.num_nodes() {
            for &(b, x) in g.out_edges(a) {
                *acc.entry((a.min(b), a.max(b))).or_insert(0.0) += w * x;
            }
        }
    }
    SimilarityGraph::from_pairs(m, n, acc.into_iter().map(|((a, b), w)| (a, b, w)))
}

/// `Σ ω·(x_a − x_b)²`, each unordered pair once.
pub fn objective(graph: &SimilarityGraph, x: &[f64]) -> f64 {
    graph.pairs.iter().map(|&(a, b, w)| w * (x[a] - x[b]).powi(2)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub volumes: VolumeTensor,
    /// Unknown cells with no weighted path to an observed cell.
    pub isolated: Vec<usize>,
    pub iterations: usize,
    /// Largest per-cell change in the last sweep.
    pub residual: f64,
    pub converged: bool,
    /// Objective after each sweep, starting with the initial guess.
    pub objective_history: Vec<f64>,
}

fn observed_mean(v: &VolumeTensor) -> Result<f64, InferError> {
    let (sum, cnt) = v
        .values
        .iter()
        .zip(&v.observed)
        .filter(|(_, &o)| o)
        .fold((0.0, 0usize), |(s, c), (x, _)| (s + x, c + 1));
    if cnt == 0 {
        return Err(InferError::NoObserved);
    }
    Ok(sum / cnt as f64)
}

/// Unknown cells reachable from some observed cell over positive-weight edges.
fn reachable(graph: &SimilarityGraph, observed: &[bool]) -> Vec<bool> {
    let mut seen = observed.to_vec();
    let mut queue: VecDeque<usize> = (0..observed.len()).filter(|&k| observed[k]).collect();
    while let Some(a) = queue.pop_front() {
        for &(b, w) in &graph.nbrs[a] {
            if w > 0.0 && !seen[b] {
                seen[b] = true;
                queue.push_back(b);
            }
        }
    }
    seen
}

/// Harmonic solution: each unknown cell becomes the weighted mean of its
/// neighbours. Isolated unknowns get the global observed mean. Sweeps stop
/// once no cell moves by more than `tol` times the largest observed magnitude,
/// which keeps the result exactly equivariant under power-of-two scaling.
pub fn solve(volumes: &VolumeTensor, graph: &SimilarityGraph, cfg: &InferConfig) -> Result<Solution, InferError> {
    cfg.validate()?;
    if (graph.m, graph.n) != (volumes.m, volumes.n) {
        return Err(InferError::DimMismatch(graph.m, graph.n, volumes.m, volumes.n));
    }
    let mean = observed_mean(volumes)?;
    let reach = reachable(graph, &volumes.observed);
    let mut x = volumes.values.clone();
    let mut isolated = Vec::new();
    let mut unknown = Vec::new();
    for k in 0..x.len() {
        if volumes.observed[k] {
            continue;
        }
        x[k] = mean;
        if reach[k] {
            unknown.push(k);
        } else {
            isolated.push(k);
        }
    }
    let scale = volumes
        .values
        .iter()
        .zip(&volumes.observed)
        .filter(|(_, &o)| o)
        .fold(0.0f64, |a, (x, _)| a.max(x.abs()));
    let tol = cfg.tol * if scale > 0.0 { scale } else { 1.0 };
    let mut history = vec![objective(graph, &x)];
    let mut residual = 0.0;
    let mut iterations = 0;
    let mut converged = unknown.is_empty();
    let mut next = x.clone();
    while !converged && iterations < cfg.max_iter {
        residual = 0.0f64;
        for &k in &unknown {
            let (mut num, mut den) = (0.0, 0.0);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            let src = if cfg.mode == SolverMode::GaussSeidel { &x } else { &next };
            for &(b, w) in &graph.nbrs[k] {
                num += w * src[b];
                den += w;
                if w > 0.0 {
                    lo = lo.min(src[b]);
                    hi = hi.max(src[b]);
                }
            }
            if den == 0.0 {
                continue;
            }
            // rounding must not push a convex combination outside its inputs
            let v = (num / den).clamp(lo, hi);
            residual = residual.max((v - x[k]).abs());
            match cfg.mode {
                SolverMode::GaussSeidel => x[k] = v,
                SolverMode::Jacobi => next[k] = v,
            }
        }
        if cfg.mode == SolverMode::Jacobi {
            // `next` held the previous sweep while reading; publish the new values
            std::mem::swap(&mut x, &mut next);
            next.copy_from_slice(&x);
        }
        iterations += 1;
        history.push(objective(graph, &x));
        converged = residual < tol;
    }
    if !converged {
        log::warn!("inference stopped at max_iter {} with residual {residual:.3e}", cfg.max_iter);
    }
    if !isolated.is_empty() {
        log::warn!("{} unknown cells have no path to an observed cell; using the global mean", isolated.len());
    }
    let mut out = volumes.clone();
    out.values = x;
    Ok(Solution { volumes: out, isolated, iterations, residual, converged, objective_history: history })
}

/// Harmonic solution over all cell pairs with `ω = max(0, u_a·u_b)`, no mask.
/// The unknown-unknown block is held densely in `f32` and the Laplacian
/// system is solved with Jacobi-preconditioned conjugate gradients.
pub fn solve_unmasked(volumes: &VolumeTensor, table: &EmbeddingTable, cfg: &InferConfig) -> Result<Solution, InferError> {
    cfg.validate()?;
    if (table.m, table.n) != (volumes.m, volumes.n) {
        return Err(InferError::DimMismatch(table.m, table.n, volumes.m, volumes.n));
    }
    let mean = observed_mean(volumes)?;
    let obs: Vec<usize> = (0..volumes.values.len()).filter(|&k| volumes.observed[k]).collect();
    let unk: Vec<usize> = (0..volumes.values.len()).filter(|&k| !volumes.observed[k]).collect();
    let nu = unk.len();
    let w = |a: usize, b: usize| table.similarity_idx(a, b).max(0.0);

    let mut rhs = vec![0.0; nu];
    let mut deg = vec![0.0; nu];
    for (p, &a) in unk.iter().enumerate() {
        for &l in &obs {
            let x = w(a, l);
            rhs[p] += x * volumes.values[l];
            deg[p] += x;
        }
    }
    let mut wuu = vec![0.0f32; nu * nu];
    for p in 0..nu {
        for q in p + 1..nu {
            let x = w(unk[p], unk[q]);
            wuu[p * nu + q] = x as f32;
            wuu[q * nu + p] = x as f32;
            deg[p] += x;
            deg[q] += x;
        }
    }
    // cells with no positive weight at all are isolated
    let isolated: Vec<usize> = (0..nu).filter(|&p| deg[p] == 0.0).map(|p| unk[p]).collect();
    let matvec = |v: &[f64], out: &mut [f64]| {
        for p in 0..nu {
            let row = &wuu[p * nu..(p + 1) * nu];
            let s: f64 = row.iter().zip(v).map(|(&a, &b)| a as f64 * b).sum();
            out[p] = deg[p] * v[p] - s;
        }
    };
    let precond: Vec<f64> = deg.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
    let mut x: Vec<f64> = deg.iter().map(|&d| if d > 0.0 { mean } else { 0.0 }).collect();
    let mut ax = vec![0.0; nu];
    matvec(&x, &mut ax);
    let mut r: Vec<f64> = (0..nu).map(|p| if deg[p] > 0.0 { rhs[p] - ax[p] } else { 0.0 }).collect();
    let mut z: Vec<f64> = r.iter().zip(&precond).map(|(a, b)| a * b).collect();
    let mut d = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ad = vec![0.0; nu];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut converged = nu == 0;
    while !converged && iterations < cfg.max_iter {
        matvec(&d, &mut ad);
        let dad: f64 = d.iter().zip(&ad).map(|(a, b)| a * b).sum();
        if dad <= 0.0 {
            break;
        }
        let step = rz / dad;
        residual = 0.0f64;
        for p in 0..nu {
            x[p] += step * d[p];
            r[p] -= step * ad[p];
            residual = residual.max((step * d[p]).abs());
        }
        iterations += 1;
        converged = residual < cfg.tol;
        for p in 0..nu {
            z[p] = r[p] * precond[p];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for p in 0..nu {
            d[p] = z[p] + beta * d[p];
        }
    }
    if !converged {
        log::warn!("unmasked solve stopped after {iterations} iterations with step {residual:.3e}");
    }
    let mut out = volumes.clone();
    for (p, &a) in unk.iter().enumerate() {
        out.values[a] = if deg[p] > 0.0 { x[p] } else { mean };
    }
    Ok(Solution { volumes: out, isolated, iterations, residual, converged, objective_history: Vec::new() })
}
