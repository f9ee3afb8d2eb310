//! Layered spatiotemporal graph over `(segment, interval)` nodes.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{RoadNetwork, SegmentId};
use crate::seeds::derive_seed;
use crate::trajectory::TrajectorySet;

pub const DEFAULT_WALK_LEN: usize = 20;
pub const DEFAULT_WALKS_PER_NODE: usize = 10;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("edge ({i},{t})->({j},{t_next}) is outside a {m}x{n} graph or skips a layer")]
    BadEdge { i: usize, t: usize, j: usize, t_next: usize, m: usize, n: usize },
    #[error("edge ({i},{t})->({j},{t_next}) has non-positive weight {weight}")]
    BadWeight { i: usize, t: usize, j: usize, t_next: usize, weight: f64 },
    #[error("interval length must be positive, got {0}")]
    BadInterval(f64),
}

/// Node `v_i^t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct STNode {
    pub segment: SegmentId,
    pub interval: usize,
}

/// `m` segments by `n` layers. Node `(i, t)` has dense index `i·n + t`, the
/// same layout as `VolumeTensor`.
#[derive(Debug, Clone, PartialEq)]
pub struct STGraph {
    m: usize,
    n: usize,
    /// Out-edges per node, sorted by target.
    out: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildReport {
    /// Consecutive-traversal events added to some edge.
    pub counted: usize,
    /// Transitions between segments that are not road-adjacent (or unknown).
    pub non_adjacent: usize,
    /// Transitions spanning more than one interval boundary, or going back in time.
    pub skipped_span: usize,
    /// Transitions whose target layer `t+1` falls outside the horizon.
    pub out_of_horizon: usize,
}

impl BuildReport {
    pub fn warnings(&self) -> usize {
        self.non_adjacent + self.skipped_span + self.out_of_horizon
    }
}

impl STGraph {
    pub fn empty(m: usize, n: usize) -> Self {
        STGraph { m, n, out: vec![Vec::new(); m * n] }
    }

    /// Builds a graph from explicit `(i, t, j, weight)` edges into layer `t+1`;
    /// repeated edges accumulate.
    pub fn from_edges(
        m: usize,
        n: usize,
        edges: impl IntoIterator<Item = (SegmentId, usize, SegmentId, f64)>,
    ) -> Result<Self, GraphError> {
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, t, j, w) in edges {
            if i >= m || j >= m || t + 1 >= n {
                return Err(GraphError::BadEdge { i, t, j, t_next: t + 1, m, n });
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(GraphError::BadWeight { i, t, j, t_next: t + 1, weight: w });
            }
            *acc.entry((i * n + t, j * n + t + 1)).or_insert(0.0) += w;
        }
        let mut g = STGraph::empty(m, n);
        for ((a, b), w) in acc {
            g.out[a].push((b, w));
        }
        Ok(g)
    }

    pub fn num_segments(&self) -> usize {
        self.m
    }

    pub fn num_layers(&self) -> usize {
        self.n
    }

    pub fn num_nodes(&self) -> usize {
        self.m * self.n
    }

    pub fn index(&self, node: STNode) -> usize {
        node.segment * self.n + node.interval
    }

    pub fn node(&self, index: usize) -> STNode {
        STNode { segment: index / self.n, interval: index % self.n }
    }

    pub fn out_edges(&self, index: usize) -> &[(usize, f64)] {
        &self.out[index]
    }

    pub fn num_edges(&self) -> usize {
        self.out.iter().map(Vec::len).sum()
    }

    pub fn total_weight(&self) -> f64 {
        self.out.iter().flatten().map(|&(_, w)| w).sum()
    }

    /// Edges as `(from, to, weight)` in node-index order.
    pub fn edges(&self) -> impl Iterator<Item = (STNode, STNode, f64)> + '_ {
        self.out
            .iter()
            .enumerate()
            .flat_map(move |(a, es)| es.iter().map(move |&(b, w)| (self.node(a), self.node(b), w)))
    }

    /// Weight of the edge `a -> b`, 0 if absent.
    pub fn weight(&self, a: usize, b: usize) -> f64 {
        match self.out[a].binary_search_by_key(&b, |&(k, _)| k) {
            Ok(p) => self.out[a][p].1,
            Err(_) => 0.0,
        }
    }

    /// How often each node appears as an edge endpoint, weighted.
    pub fn node_strength(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.num_nodes()];
        for (a, es) in self.out.iter().enumerate() {
            for &(b, w) in es {
                s[a] += w;
                s[b] += w;
            }
        }
        s
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), GraphError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["i", "t", "j", "t_next", "weight"])?;
        for (a, b, weight) in self.edges() {
            wr.serialize((a.segment, a.interval, b.segment, b.interval, weight))?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads an edge list. Without explicit dimensions the graph is sized to
    /// the largest ids present.
    pub fn read_csv<R: Read>(r: R, dims: Option<(usize, usize)>) -> Result<Self, GraphError> {
        let mut rows = Vec::new();
        for rec in csv::Reader::from_reader(r).deserialize() {
            let (i, t, j, t_next, weight): (usize, usize, usize, usize, f64) = rec?;
            rows.push((i, t, j, t_next, weight));
        }
        let (m, n) = dims.unwrap_or_else(|| {
            let m = rows.iter().map(|r| r.0.max(r.2) + 1).max().unwrap_or(0);
            let n = rows.iter().map(|r| r.3 + 1).max().unwrap_or(0);
            (m, n)
        });
        for &(i, t, j, t_next, _) in &rows {
            if t_next != t + 1 {
                return Err(GraphError::BadEdge { i, t, j, t_next, m, n });
            }
        }
        STGraph::from_edges(m, n, rows.into_iter().map(|(i, t, j, _, w)| (i, t, j, w)))
    }
}

/// Counts consecutive traversals `r_i@t -> r_j@t'` as edge `(i,t)->(j,t+1)`
/// when `t'` is `t` or `t+1`. Longer spans, non-adjacent moves and edges
/// leaving the horizon are counted in the report and skipped.
pub fn build(
    set: &TrajectorySet,
    net: &RoadNetwork,
    interval_length: f64,
    n: usize,
) -> Result<(STGraph, BuildReport), GraphError> {
    if !(interval_length > 0.0) {
        return Err(GraphError::BadInterval(interval_length));
    }
    let m = net.num_segments();
    let mut report = BuildReport::default();
    let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let bin = |ts: f64| (ts / interval_length).floor();
    for traj in set {
        let trav = traj.traversals();
        for w in trav.windows(2) {
            let ((i, ti), (j, tj)) = (w[0], w[1]);
            if !net.adjacent(i, j).unwrap_or(false) {
                report.non_adjacent += 1;
                continue;
            }
            let (t, t2) = (bin(ti), bin(tj));
            if t < 0.0 || !(t2 == t || t2 == t + 1.0) {
                report.skipped_span += 1;
                continue;
            }
            let t = t as usize;
            if t + 1 >= n {
                report.out_of_horizon += 1;
                continue;
            }
            *acc.entry((i * n + t, j * n + t + 1)).or_insert(0.0) += 1.0;
            report.counted += 1;
        }
    }
    let mut g = STGraph::empty(m, n);
    for ((a, b), w) in acc {
        g.out[a].push((b, w));
    }
    Ok((g, report))
}

/// One forward walk of at most `walk_len` nodes, stepping to successors with
/// probability proportional to edge weight and stopping at sinks.
pub fn walk_from<R: Rng>(g: &STGraph, start: usize, walk_len: usize, rng: &mut R) -> Vec<usize> {
    let mut walk = Vec::with_capacity(walk_len.min(g.n.max(1)));
    let mut cur = start;
    walk.push(cur);
    while walk.len() < walk_len {
        let es = &g.out[cur];
        if es.is_empty() {
            break;
        }
        let total: f64 = es.iter().map(|&(_, w)| w).sum();
        let mut x = rng.random::<f64>() * total;
        let mut next = es[es.len() - 1].0;
        for &(b, w) in es {
            if x < w {
                next = b;
                break;
            }
            x -= w;
        }
        cur = next;
        walk.push(cur);
    }
    walk
}

/// `walks_per_node` walks from every node with out-edges. Each start node
/// draws from its own stream so the result does not depend on visit order.
pub fn random_walks(g: &STGraph, walk_len: usize, walks_per_node: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(walk_len >= 1, "walk_len must be at least 1");
    let base = derive_seed(seed, "st_graph/walks");
    let mut walks = Vec::new();
    for start in 0..g.num_nodes() {
        if g.out[start].is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(base);
        rng.set_stream(start as u64);
        for _ in 0..walks_per_node {
            walks.push(walk_from(g, start, walk_len, &mut rng));
        }
    }
    walks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Node, RoadNetwork};
    use crate::trajectory::{Trajectory, TrajectoryKind, TrajectoryPoint, VehicleGroup};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    /// Line 0 -> 1 -> 2 -> 3 plus a detached segment 4.
    fn net() -> RoadNetwork {
        let nodes = (0..7).map(|k| Node { id: k, x: 100.0 * k as f64, y: 0.0 }).collect();
        let mut segs: Vec<_> = (0..4).map(|k| crate::network::tests::seg(k, k, k + 1, 100.0)).collect();
        segs.push(crate::network::tests::seg(4, 5, 6, 100.0));
        RoadNetwork::new(nodes, segs, BTreeSet::new(), BTreeSet::new())
    }

    fn traj(id: u64, kind: TrajectoryKind, pts: &[(usize, f64)]) -> Trajectory {
        Trajectory {
            vehicle_id: id,
            kind,
            group: VehicleGroup::Sedan,
            points: pts.iter().map(|&(s, t)| TrajectoryPoint::entry(s, t)).collect(),
        }
    }

    #[test]
    fn two_identical_trips_give_weight_two() {
        let set: TrajectorySet = (0..2).map(|k| traj(k, TrajectoryKind::Dense, &[(1, 10.0), (2, 320.0)])).collect();
        let (g, rep) = build(&set, &net(), 300.0, 4).unwrap();
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.weight(g.index(STNode { segment: 1, interval: 0 }), g.index(STNode { segment: 2, interval: 1 })), 2.0);
        assert_eq!(rep, BuildReport { counted: 2, ..BuildReport::default() });
    }

    #[test]
    fn empty_set_gives_empty_graph() {
        let (g, rep) = build(&TrajectorySet::default(), &net(), 300.0, 4).unwrap();
        assert_eq!((g.num_edges(), g.num_nodes()), (0, 20));
        assert_eq!(rep.warnings(), 0);
    }

    #[test]
    fn same_interval_moves_to_next_layer() {
        let set: TrajectorySet = [traj(0, TrajectoryKind::Dense, &[(0, 5.0), (1, 50.0)])].into_iter().collect();
        let (g, _) = build(&set, &net(), 300.0, 4).unwrap();
        let e: Vec<_> = g.edges().collect();
        assert_eq!(e, vec![(STNode { segment: 0, interval: 0 }, STNode { segment: 1, interval: 1 }, 1.0)]);
    }

    #[test]
    fn long_span_is_skipped_with_a_warning() {
        let set: TrajectorySet = [traj(0, TrajectoryKind::Dense, &[(0, 0.0), (1, 700.0)])].into_iter().collect();
        let (g, rep) = build(&set, &net(), 300.0, 4).unwrap();
        assert_eq!(g.num_edges(), 0);
        assert_eq!(rep.skipped_span, 1);
        assert_eq!(rep.warnings(), 1);
    }

    #[test]
    fn non_adjacent_and_horizon_are_reported() {
        let set: TrajectorySet = [
            traj(0, TrajectoryKind::Dense, &[(0, 0.0), (4, 10.0)]),
            traj(1, TrajectoryKind::Dense, &[(0, 900.0), (1, 910.0)]),
        ]
        .into_iter()
        .collect();
        let (g, rep) = build(&set, &net(), 300.0, 4).unwrap();
        assert_eq!(g.num_edges(), 0);
        assert_eq!((rep.non_adjacent, rep.out_of_horizon), (1, 1));
    }

    #[test]
    fn csv_round_trip() {
        let g = STGraph::from_edges(3, 4, [(0, 0, 1, 2.0), (1, 1, 2, 1.5), (2, 2, 2, 1.0)]).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("i,t,j,t_next,weight\n0,0,1,1,2.0\n"));
        assert_eq!(STGraph::read_csv(&buf[..], Some((3, 4))).unwrap(), g);
        // inferred dimensions only see the ids present
        let h = STGraph::read_csv(&buf[..], None).unwrap();
        assert_eq!((h.num_segments(), h.num_layers()), (3, 4));
    }

    #[test]
    fn csv_rejects_layer_skips() {
        let text = "i,t,j,t_next,weight\n0,0,1,2,1.0\n";
        assert!(matches!(STGraph::read_csv(text.as_bytes(), None), Err(GraphError::BadEdge { .. })));
    }

    #[test]
    fn forced_chain_walk_ends_at_sink() {
        let g = STGraph::from_edges(1, 8, (0..5).map(|t| (0, t, 0, 1.0))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(walk_from(&g, 0, 20, &mut rng), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(walk_from(&g, 5, 20, &mut rng), vec![5]);
        assert_eq!(walk_from(&g, 0, 3, &mut rng), vec![0, 1, 2]);
    }

    #[test]
    fn first_step_follows_weights() {
        let g = STGraph::from_edges(3, 2, [(0, 0, 1, 3.0), (0, 0, 2, 1.0)]).unwrap();
        let a = g.index(STNode { segment: 1, interval: 1 });
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hits = (0..40_000).filter(|_| walk_from(&g, 0, 2, &mut rng)[1] == a).count();
        let f = hits as f64 / 40_000.0;
        assert!((0.74..=0.76).contains(&f), "fraction {f}");
    }

    #[test]
    fn walks_are_seed_deterministic_and_start_everywhere() {
        let g = STGraph::from_edges(2, 3, [(0, 0, 1, 1.0), (0, 0, 0, 1.0), (1, 0, 0, 2.0), (0, 1, 0, 1.0)]).unwrap();
        let a = random_walks(&g, 20, 16, 11);
        assert_eq!(a, random_walks(&g, 20, 16, 11));
        assert_eq!(a.len(), 3 * 16);
        assert_ne!(a, random_walks(&g, 20, 16, 12));
    }

    fn arb_set() -> impl Strategy<Value = TrajectorySet> {
        let trip = (prop::collection::vec(0usize..5, 1..8), prop::collection::vec(0.0f64..400.0, 8), 0.0f64..1500.0);
        prop::collection::vec(trip, 0..12).prop_map(|trips| {
            trips
                .into_iter()
                .enumerate()
                .map(|(k, (segs, gaps, t0))| {
                    let mut t = t0;
                    let pts: Vec<_> = segs
                        .iter()
                        .zip(&gaps)
                        .map(|(&s, &g)| {
                            t += g;
                            (s, t)
                        })
                        .collect();
                    traj(k as u64, TrajectoryKind::Dense, &pts)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn structural_invariants(set in arb_set(), seed in 0u64..1000) {
            let net = net();
            let (g, rep) = build(&set, &net, 300.0, 6).unwrap();
            let transitions: usize = set.iter().map(|t| t.traversals().len().saturating_sub(1)).sum();
            prop_assert_eq!(rep.counted + rep.warnings(), transitions);
            prop_assert_eq!(g.total_weight(), rep.counted as f64);
            for (a, b, w) in g.edges() {
                prop_assert_eq!(b.interval, a.interval + 1);
                prop_assert!(net.adjacent(a.segment, b.segment).unwrap());
                prop_assert!(w > 0.0);
            }
            for walk in random_walks(&g, 20, 2, seed) {
                prop_assert!(walk.len() >= 2);
                for p in walk.windows(2) {
                    prop_assert!(g.weight(p[0], p[1]) > 0.0);
                    prop_assert_eq!(g.node(p[1]).interval, g.node(p[0]).interval + 1);
                }
            }
        }
    }
}
