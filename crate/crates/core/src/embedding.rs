//! Skip-gram with negative sampling over one or more spatiotemporal graphs
//! sharing a single pair of embedding tables.

use std::io::{Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::{derive_seed, rng_for};
use crate::st_graph::{random_walks, STGraph, STNode, DEFAULT_WALKS_PER_NODE, DEFAULT_WALK_LEN};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("no edges to embed")]
    EmptyGraphs,
    #[error("graph dimensions differ: {0:?} vs {1:?}")]
    DimMismatch((usize, usize), (usize, usize)),
    #[error("non-finite update for center {center}, context {context}")]
    NonFinite { center: usize, context: usize },
    #[error("noise distribution needs at least two nodes with positive frequency")]
    DegenerateNoise,
    #[error("invalid embedding config: {0}")]
    InvalidConfig(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("embedding file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub epochs: usize,
    /// Weight of the dense-trajectory graph; the recovered graph gets `1 - alpha`.
    pub alpha: f64,
    pub noise_exponent: f64,
    pub walk_len: usize,
    pub walks_per_node: usize,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            dim: 50,
            window: 10,
            negatives: 5,
            lr: 0.025,
            lr_min: 0.0001,
            epochs: 5,
            alpha: 0.5,
            noise_exponent: 0.75,
            walk_len: DEFAULT_WALK_LEN,
            walks_per_node: DEFAULT_WALKS_PER_NODE,
            seed: 0,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        let bad = |m: &str| Err(EmbedError::InvalidConfig(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if self.negatives == 0 {
            return bad("negatives must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad("need 0 <= lr_min <= lr and lr > 0");
        }
        if self.walk_len == 0 {
            return bad("walk_len must be at least 1");
        }
        if !self.noise_exponent.is_finite() {
            return bad("noise exponent must be finite");
        }
        Ok(())
    }
}

/// Center vectors `u` and context vectors `u'` for all `m·n` nodes, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub m: usize,
    pub n: usize,
    pub dim: usize,
    pub center: Vec<f64>,
    pub context: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(m: usize, n: usize, dim: usize) -> Self {
        EmbeddingTable { m, n, dim, center: vec![0.0; m * n * dim], context: vec![0.0; m * n * dim] }
    }

    /// `u ~ U(-0.5/d, 0.5/d)`, `u' = 0`.
    pub fn init<R: Rng>(m: usize, n: usize, dim: usize, rng: &mut R) -> Self {
        let mut t = EmbeddingTable::zeros(m, n, dim);
        let h = 0.5 / dim as f64;
        for x in &mut t.center {
            *x = rng.random_range(-h..h);
        }
        t
    }

    pub fn num_nodes(&self) -> usize {
        self.m * self.n
    }

    pub fn index(&self, node: STNode) -> usize {
        node.segment * self.n + node.interval
    }

    pub fn u(&self, node: usize) -> &[f64] {
        &self.center[node * self.dim..(node + 1) * self.dim]
    }

    pub fn u_ctx(&self, node: usize) -> &[f64] {
        &self.context[node * self.dim..(node + 1) * self.dim]
    }

    /// Center-center inner product.
    pub fn similarity(&self, a: STNode, b: STNode) -> f64 {
        dot(self.u(self.index(a)), self.u(self.index(b)))
    }

    pub fn similarity_idx(&self, a: usize, b: usize) -> f64 {
        dot(self.u(a), self.u(b))
    }

    pub fn all_finite(&self) -> bool {
        self.center.iter().chain(&self.context).all(|x| x.is_finite())
    }

    /// Rows `segment_id,interval,u0..u{d-1}` (center vectors only).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EmbedError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["segment_id".to_string(), "interval".to_string()];
        header.extend((0..self.dim).map(|k| format!("u{k}")));
        wr.write_record(&header)?;
        for i in 0..self.m {
            for t in 0..self.n {
                let mut row = vec![i.to_string(), t.to_string()];
                row.extend(self.u(i * self.n + t).iter().map(|x| format!("{x:?}")));
                wr.write_record(&row)?;
            }
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads center vectors; context vectors come back as zeros.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, EmbedError> {
        let mut rd = csv::Reader::from_reader(r);
        let dim = rd.headers()?.len().checked_sub(2).filter(|&d| d > 0).ok_or_else(|| EmbedError::Format("no vector columns".into()))?;
        let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let parse_idx = |k: usize| rec[k].parse::<usize>().map_err(|e| EmbedError::Format(format!("row {}: {e}", rows.len() + 1)));
            let (i, t) = (parse_idx(0)?, parse_idx(1)?);
            let v = (2..rec.len())
                .map(|k| rec[k].parse::<f64>().map_err(|e| EmbedError::Format(format!("row {}: {e}", rows.len() + 1))))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push((i, t, v));
        }
        let m = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let n = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        if rows.len() != m * n {
            return Err(EmbedError::Format(format!("expected {} rows for {m}x{n} nodes, found {}", m * n, rows.len())));
        }
        let mut t = EmbeddingTable::zeros(m, n, dim);
        for (i, k, v) in rows {
            let at = (i * n + k) * dim;
            t.center[at..at + dim].copy_from_slice(&v);
        }
        Ok(t)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Ordered `(center, context)` pairs at distance `1..=window` along a walk.
pub fn context_pairs(walk: &[usize], window: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for a in 0..walk.len() {
        let lo = a.saturating_sub(window);
        let hi = (a + window).min(walk.len() - 1);
        for b in lo..=hi {
            if b != a {
                out.push((walk[a], walk[b]));
            }
        }
    }
    out
}

/// Unigram frequency raised to `exponent`.
#[derive(Debug, Clone)]
pub struct NoiseDistribution {
    index: WeightedIndex<f64>,
}

impl NoiseDistribution {
    pub fn new(freq: &[f64], exponent: f64) -> Result<Self, EmbedError> {
        let w: Vec<f64> = freq.iter().map(|&f| if f > 0.0 { f.powf(exponent) } else { 0.0 }).collect();
        if w.iter().filter(|&&x| x > 0.0).count() < 2 {
            return Err(EmbedError::DegenerateNoise);
        }
        let index = WeightedIndex::new(&w).map_err(|_| EmbedError::DegenerateNoise)?;
        Ok(NoiseDistribution { index })
    }
}

/// `k` draws from the noise distribution, redrawing any hit on `exclude`.
pub fn negative_sample<R: Rng>(noise: &NoiseDistribution, k: usize, exclude: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let z = noise.index.sample(rng);
        if z != exclude {
            out.push(z);
        }
    }
    out
}

/// Objective and gradient of
/// `ln σ(u·u'_c) + Σ_z ln σ(-u·u'_z)` with respect to `u_center`, `u'_context`
/// and each `u'_z` (one entry per negative, duplicates kept separate).
#[derive(Debug, Clone, PartialEq)]
pub struct PairGradient {
    pub objective: f64,
    pub center: Vec<f64>,
    pub context: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

pub fn sgns_gradient(table: &EmbeddingTable, center: usize, context: usize, negatives: &[usize]) -> PairGradient {
    let u = table.u(center);
    let uc = table.u_ctx(context);
    let s = dot(u, uc);
    let gc = 1.0 - sigmoid(s);
    let mut objective = log_sigmoid(s);
    let mut g_center: Vec<f64> = uc.iter().map(|x| gc * x).collect();
    let g_context: Vec<f64> = u.iter().map(|x| gc * x).collect();
    let mut g_neg = Vec::with_capacity(negatives.len());
    for &z in negatives {
        let uz = table.u_ctx(z);
        let sz = dot(u, uz);
        objective += log_sigmoid(-sz);
        let g = -sigmoid(sz);
        for (a, b) in g_center.iter_mut().zip(uz) {
            *a += g * b;
        }
        g_neg.push(u.iter().map(|x| g * x).collect());
    }
    PairGradient { objective, center: g_center, context: g_context, negatives: g_neg }
}

/// One ascent step of size `lr·weight` on a single pair. Returns the
/// objective before the update. All updates use pre-step vectors.
pub fn sgns_step(
    table: &mut EmbeddingTable,
    center: usize,
    context: usize,
    negatives: &[usize],
    lr: f64,
    weight: f64,
) -> Result<f64, EmbedError> {
    let g = sgns_gradient(table, center, context, negatives);
    if weight == 0.0 {
        return Ok(g.objective);
    }
    let step = lr * weight;
    let finite = |v: &[f64]| v.iter().all(|x| (step * x).is_finite());
    if !g.objective.is_finite() || !finite(&g.center) || !finite(&g.context) || !g.negatives.iter().all(|v| finite(v)) {
        return Err(EmbedError::NonFinite { center, context });
    }
    let d = table.dim;
    let add = |buf: &mut [f64], node: usize, grad: &[f64]| {
        for (x, g) in buf[node * d..(node + 1) * d].iter_mut().zip(grad) {
            *x += step * g;
        }
    };
    add(&mut table.context, context, &g.context);
    for (&z, gz) in negatives.iter().zip(&g.negatives) {
        add(&mut table.context, z, gz);
    }
    add(&mut table.center, center, &g.center);
    Ok(g.objective)
}

/// A graph contributing to the joint objective with a fixed weight.
#[derive(Debug, Clone, Copy)]
pub struct Source<'a> {
    /// Names the walk stream, so a source yields the same walks alone or jointly.
    pub label: &'a str,
    pub graph: &'a STGraph,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-pair objective over all pairs of the epoch.
    pub mean_objective: f64,
    /// Summed per-pair objective for each source, in source order.
    pub source_objective: Vec<f64>,
    pub pairs: usize,
}

/// Trains on every source with positive weight. Sources with weight 0 are
/// left out entirely, so `[(D, 1), (I, 0)]` and `[(D, 1)]` give the same table.
pub fn train_sources(sources: &[Source<'_>], cfg: &EmbedConfig) -> Result<(EmbeddingTable, Vec<EpochLog>), EmbedError> {
    cfg.validate()?;
    let first = sources.first().ok_or(EmbedError::EmptyGraphs)?;
    let dims = (first.graph.num_segments(), first.graph.num_layers());
    for s in sources {
        let d = (s.graph.num_segments(), s.graph.num_layers());
        if d != dims {
            return Err(EmbedError::DimMismatch(dims, d));
        }
        if !(s.weight >= 0.0 && s.weight.is_finite()) {
            return Err(EmbedError::InvalidConfig(format!("source {} has weight {}", s.label, s.weight)));
        }
    }
    let active: Vec<&Source> = sources.iter().filter(|s| s.weight > 0.0).collect();
    let walks: Vec<Vec<Vec<usize>>> = active
        .iter()
        .map(|s| random_walks(s.graph, cfg.walk_len, cfg.walks_per_node, derive_seed(cfg.seed, &format!("embed/walks/{}", s.label))))
        .collect();
    let (m, n) = dims;
    let mut freq = vec![0.0; m * n];
    for w in walks.iter().flatten().flatten() {
        freq[*w] += 1.0;
    }
    if walks.iter().all(|w| w.iter().all(|p| p.len() < 2)) {
        return Err(EmbedError::EmptyGraphs);
    }
    let noise = NoiseDistribution::new(&freq, cfg.noise_exponent)?;

    let mut table = EmbeddingTable::init(m, n, cfg.dim, &mut rng_for(cfg.seed, "embed/init"));
    let mut order_rng = rng_for(cfg.seed, "embed/order");
    let mut neg_rng = rng_for(cfg.seed, "embed/negatives");
    let mut order: Vec<(usize, usize)> =
        walks.iter().enumerate().flat_map(|(s, ws)| (0..ws.len()).map(move |k| (s, k))).collect();
    let total = (cfg.epochs * order.len()).max(1) as f64;
    let mut done = 0usize;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut per_source = vec![0.0; active.len()];
        let mut pairs = 0usize;
        for &(s, k) in &order {
            let lr = (cfg.lr - (cfg.lr - cfg.lr_min) * done as f64 / total).max(cfg.lr_min);
            done += 1;
            for (c, x) in context_pairs(&walks[s][k], cfg.window) {
                let negs = negative_sample(&noise, cfg.negatives, x, &mut neg_rng);
                per_source[s] += sgns_step(&mut table, c, x, &negs, lr, active[s].weight)?;
                pairs += 1;
            }
        }
        let total_obj: f64 = per_source.iter().sum();
        let mean_objective = if pairs > 0 { total_obj / pairs as f64 } else { 0.0 };
        log::debug!("embedding epoch {epoch}: mean objective {mean_objective:.5} over {pairs} pairs");
        // report in caller's source order, zero for inactive sources
        let mut source_objective = vec![0.0; sources.len()];
        let mut a = 0;
        for (k, src) in sources.iter().enumerate() {
            if src.weight > 0.0 {
                source_objective[k] = per_source[a];
                a += 1;
            }
        }
        log.push(EpochLog { epoch, mean_objective, source_objective, pairs });
    }
    Ok((table, log))
}

/// Joint objective `alpha·O(gD) + (1-alpha)·O(gI)`.
pub fn joint_train(gd: &STGraph, gi: &STGraph, cfg: &EmbedConfig) -> Result<(EmbeddingTable, Vec<EpochLog>), EmbedError> {
    cfg.validate()?;
    train_sources(
        &[
            Source { label: "dense", graph: gd, weight: cfg.alpha },
            Source { label: "recovered", graph: gi, weight: 1.0 - cfg.alpha },
        ],
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pairs_window_one() {
        assert_eq!(context_pairs(&[1, 2, 3], 1), vec![(1, 2), (2, 1), (2, 3), (3, 2)]);
        assert!(context_pairs(&[7], 5).is_empty());
        assert!(context_pairs(&[], 5).is_empty());
    }

    #[test]
    fn wide_window_enumerates_all_ordered_pairs() {
        let walk: Vec<usize> = (0..7).collect();
        assert_eq!(context_pairs(&walk, 7).len(), 7 * 6);
        assert_eq!(context_pairs(&walk, 100).len(), 7 * 6);
        assert_eq!(context_pairs(&walk, 2).len(), 2 * (6 + 5));
    }

    #[test]
    fn negative_sampling_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = NoiseDistribution::new(&[1.0, 1.0], 0.75).unwrap();
        assert!(negative_sample(&noise, 0, 0, &mut rng).is_empty());
        assert!(negative_sample(&noise, 50, 0, &mut rng).iter().all(|&z| z == 1));
        assert!(matches!(NoiseDistribution::new(&[3.0, 0.0], 0.75), Err(EmbedError::DegenerateNoise)));

        let noise = NoiseDistribution::new(&[4.0; 10], 0.75).unwrap();
        let mut counts = [0usize; 10];
        for z in negative_sample(&noise, 10_000, usize::MAX, &mut rng) {
            counts[z] += 1;
        }
        assert!(counts.iter().all(|&c| (800..=1200).contains(&c)), "{counts:?}");
    }

    #[test]
    fn noise_uses_three_quarter_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = NoiseDistribution::new(&[16.0, 1.0], 0.75).unwrap();
        // weights 8 : 1
        let hits = negative_sample(&noise, 90_000, usize::MAX, &mut rng).iter().filter(|&&z| z == 0).count();
        let f = hits as f64 / 90_000.0;
        assert!((f - 8.0 / 9.0).abs() < 0.005, "{f}");
    }

    #[test]
    fn zero_score_pair() {
        let mut t = EmbeddingTable::zeros(1, 2, 2);
        t.context = vec![0.0, 0.0, 1.0, -2.0];
        let g = sgns_gradient(&t, 0, 1, &[]);
        assert!((g.objective - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(g.center, vec![0.5, -1.0]);
    }

    #[test]
    fn zero_weight_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = EmbeddingTable::init(2, 3, 4, &mut rng);
        t.context.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        let before = t.clone();
        let obj = sgns_step(&mut t, 0, 1, &[2, 3], 0.5, 0.0).unwrap();
        assert_eq!(t, before);
        assert_eq!(obj, sgns_gradient(&before, 0, 1, &[2, 3]).objective);
    }

    #[test]
    fn step_applies_scaled_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = EmbeddingTable::init(2, 3, 4, &mut rng);
        t.context.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        let before = t.clone();
        let g = sgns_gradient(&before, 0, 1, &[2, 4]);
        sgns_step(&mut t, 0, 1, &[2, 4], 0.1, 0.5).unwrap();
        for k in 0..4 {
            assert!((t.u(0)[k] - before.u(0)[k] - 0.05 * g.center[k]).abs() < 1e-15);
            assert!((t.u_ctx(1)[k] - before.u_ctx(1)[k] - 0.05 * g.context[k]).abs() < 1e-15);
            assert!((t.u_ctx(4)[k] - before.u_ctx(4)[k] - 0.05 * g.negatives[1][k]).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_update_names_nodes() {
        let mut t = EmbeddingTable::zeros(1, 3, 1);
        t.center[0] = f64::NAN;
        t.context = vec![0.0, 1.0, -1.0];
        let err = sgns_step(&mut t, 0, 1, &[2], 0.1, 1.0).unwrap_err();
        assert!(matches!(err, EmbedError::NonFinite { center: 0, context: 1 }));
    }

    #[test]
    fn similarity_examples() {
        let mut t = EmbeddingTable::zeros(3, 1, 2);
        t.center = vec![1.0, 0.0, 0.5, 0.5, 0.0, 3.0];
        let node = |s| STNode { segment: s, interval: 0 };
        assert_eq!(t.similarity(node(0), node(1)), 0.5);
        assert_eq!(t.similarity(node(2), node(2)), 9.0);
        assert_eq!(t.similarity(node(0), node(2)), 0.0);
    }

    #[test]
    fn csv_round_trip_keeps_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = EmbeddingTable::init(3, 2, 5, &mut rng);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("segment_id,interval,u0,u1,u2,u3,u4\n"));
        let back = EmbeddingTable::read_csv(&buf[..]).unwrap();
        assert_eq!(back.center, t.center);
        assert_eq!((back.m, back.n, back.dim), (3, 2, 5));
    }

    #[test]
    fn config_validation() {
        assert!(EmbedConfig::default().validate().is_ok());
        for bad in [
            EmbedConfig { alpha: 1.5, ..EmbedConfig::default() },
            EmbedConfig { window: 0, ..EmbedConfig::default() },
            EmbedConfig { negatives: 0, ..EmbedConfig::default() },
            EmbedConfig { dim: 0, ..EmbedConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(EmbedError::InvalidConfig(_))));
        }
    }

    fn chain_graph(m: usize, n: usize, seed: u64) -> STGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let edges: Vec<_> = (0..n - 1)
            .flat_map(|t| (0..m).map(move |i| (i, t)))
            .filter_map(|(i, t)| {
                let j = rng.random_range(0..m);
                rng.random_bool(0.7).then(|| (i, t, j, rng.random_range(1.0..4.0)))
            })
            .collect();
        STGraph::from_edges(m, n, edges).unwrap()
    }

    #[test]
    fn alpha_endpoints_match_single_source() {
        let gd = chain_graph(5, 6, 1);
        let gi = chain_graph(5, 6, 2);
        let base = EmbedConfig { dim: 8, epochs: 2, walks_per_node: 3, seed: 9, ..EmbedConfig::default() };
        let one = joint_train(&gd, &gi, &EmbedConfig { alpha: 1.0, ..base.clone() }).unwrap().0;
        let d_only = train_sources(&[Source { label: "dense", graph: &gd, weight: 1.0 }], &base).unwrap().0;
        assert_eq!(one, d_only);
        let zero = joint_train(&gd, &gi, &EmbedConfig { alpha: 0.0, ..base.clone() }).unwrap().0;
        let i_only = train_sources(&[Source { label: "recovered", graph: &gi, weight: 1.0 }], &base).unwrap().0;
        assert_eq!(zero, i_only);
        let half = joint_train(&gd, &gi, &EmbedConfig { alpha: 0.5, ..base }).unwrap().0;
        assert_ne!(half, one);
    }

    #[test]
    fn deterministic_per_seed() {
        let gd = chain_graph(4, 5, 3);
        let gi = chain_graph(4, 5, 4);
        let cfg = EmbedConfig { dim: 6, epochs: 2, walks_per_node: 2, ..EmbedConfig::default() };
        let a = joint_train(&gd, &gi, &cfg).unwrap();
        let b = joint_train(&gd, &gi, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.0.all_finite());
        assert_eq!(a.1.len(), 2);
    }

    #[test]
    fn empty_graphs_are_rejected() {
        let e = STGraph::empty(3, 3);
        assert!(matches!(joint_train(&e, &e, &EmbedConfig::default()), Err(EmbedError::EmptyGraphs)));
        let g = chain_graph(3, 3, 5);
        let h = STGraph::empty(4, 3);
        assert!(matches!(joint_train(&g, &h, &EmbedConfig::default()), Err(EmbedError::DimMismatch(..))));
    }
    fn objective_only(t: &EmbeddingTable, c: usize, x: usize, negs: &[usize]) -> f64 {
        let u = t.u(c);
        log_sigmoid(dot(u, t.u_ctx(x))) + negs.iter().map(|&z| log_sigmoid(-dot(u, t.u_ctx(z)))).sum::<f64>()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c, x, negs) = (1usize, 2usize, [3usize, 5, 3]);
        let mut worst: f64 = 0.0;
        for _ in 0..60 {
            let mut t = EmbeddingTable::zeros(3, 2, 5);
            t.center.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            t.context.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            let g = sgns_gradient(&t, c, x, &negs);
            let k = rng.random_range(0..5);
            // probe one coordinate of the center, the context or a negative
            let (in_center, node, analytic) = match rng.random_range(0..3) {
                0 => (true, c, g.center[k]),
                1 => (false, x, g.context[k]),
                _ => (false, 3, g.negatives[0][k] + g.negatives[2][k]),
            };
            let h = 1e-6;
            let eval = |delta: f64| {
                let mut p = t.clone();
                let buf = if in_center { &mut p.center } else { &mut p.context };
                buf[node * 5 + k] += delta;
                objective_only(&p, c, x, &negs)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn co_occurring_nodes_are_closer() {
        // two clusters of four segments, fully connected inside, never across
        let (m, n) = (8, 6);
        let edges: Vec<_> = (0..n - 1)
            .flat_map(|t| (0..m).flat_map(move |i| (0..m).map(move |j| (i, t, j))))
            .filter(|&(i, _, j)| i / 4 == j / 4)
            .map(|(i, t, j)| (i, t, j, 1.0))
            .collect();
        let g = STGraph::from_edges(m, n, edges).unwrap();
        let node = |i, t| STNode { segment: i, interval: t };
        let mut wins = 0;
        for seed in 0..50 {
            let cfg = EmbedConfig { dim: 16, epochs: 5, walks_per_node: 40, seed, ..EmbedConfig::default() };
            let (t, _) = train_sources(&[Source { label: "g", graph: &g, weight: 1.0 }], &cfg).unwrap();
            if t.similarity(node(0, 2), node(1, 3)) > t.similarity(node(0, 2), node(5, 3)) {
                wins += 1;
            }
        }
        assert!(wins >= 45, "{wins}/50");
    }
}
