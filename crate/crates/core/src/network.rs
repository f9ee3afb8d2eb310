//! Directed road networks: nodes, segments, turn restrictions and monitor points.
//!
//! Segment ids are dense indices (`segments[k].id == k`); every per-segment
//! table in the crate is indexed by them. Adjacency is derived from node
//! incidence minus the turn restrictions and is reflexive: a segment is
//! adjacent to itself so temporal smoothing can link a segment with its own
//! neighbouring intervals.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type SegmentId = usize;
pub type NodeId = usize;

/// Global clamp range for any speed limit, in m/s.
pub const SPEED_LIMIT_MIN: f64 = 1.0;
pub const SPEED_LIMIT_MAX: f64 = 40.0;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("unknown segment id {0}")]
    UnknownSegment(SegmentId),
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadClass {
    Major,
    Secondary,
}

impl RoadClass {
    pub const ALL: [RoadClass; 2] = [RoadClass::Major, RoadClass::Secondary];

    pub fn name(self) -> &'static str {
        match self {
            RoadClass::Major => "major",
            RoadClass::Secondary => "secondary",
        }
    }
}

impl fmt::Display for RoadClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: SegmentId,
    pub from_node: NodeId,
    pub to_node: NodeId,
    /// Meters.
    pub length: f64,
    pub lanes: u32,
    pub road_class: RoadClass,
    /// m/s.
    pub speed_limit: f64,
    pub monitored: bool,
}

/// On-disk shape of a network; the derived lookup tables are rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub nodes: Vec<Node>,
    pub segments: Vec<RoadSegment>,
    pub turn_restrictions: Vec<(SegmentId, SegmentId)>,
    pub monitor_points: Vec<SegmentId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "NetworkRecord", into = "NetworkRecord")]
pub struct RoadNetwork {
    nodes: Vec<Node>,
    segments: Vec<RoadSegment>,
    turn_restrictions: BTreeSet<(SegmentId, SegmentId)>,
    monitor_points: BTreeSet<SegmentId>,
    node_index: HashMap<NodeId, usize>,
    successors: Vec<Vec<SegmentId>>,
    predecessors: Vec<Vec<SegmentId>>,
}

impl PartialEq for RoadNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.segments == other.segments
            && self.turn_restrictions == other.turn_restrictions
            && self.monitor_points == other.monitor_points
    }
}

impl From<NetworkRecord> for RoadNetwork {
    fn from(r: NetworkRecord) -> Self {
        RoadNetwork::new(
            r.nodes,
            r.segments,
            r.turn_restrictions.into_iter().collect(),
            r.monitor_points.into_iter().collect(),
        )
    }
}

impl From<RoadNetwork> for NetworkRecord {
    fn from(n: RoadNetwork) -> Self {
        NetworkRecord {
            nodes: n.nodes,
            segments: n.segments,
            turn_restrictions: n.turn_restrictions.into_iter().collect(),
            monitor_points: n.monitor_points.into_iter().collect(),
        }
    }
}

impl RoadNetwork {
    /// Builds the network and its lookup tables. No validation happens here;
    /// use [`validate_network`] to check invariants. Segments' `monitored`
    /// flags are synchronised with `monitor_points`.
    pub fn new(
        nodes: Vec<Node>,
        mut segments: Vec<RoadSegment>,
        turn_restrictions: BTreeSet<(SegmentId, SegmentId)>,
        monitor_points: BTreeSet<SegmentId>,
    ) -> Self {
        for s in segments.iter_mut() {
            s.monitored = monitor_points.contains(&s.id);
        }
        let node_index = nodes.iter().enumerate().map(|(k, n)| (n.id, k)).collect();

        let mut by_from: HashMap<NodeId, Vec<SegmentId>> = HashMap::new();
        for (k, s) in segments.iter().enumerate() {
            by_from.entry(s.from_node).or_default().push(k);
        }
        let mut successors = vec![Vec::new(); segments.len()];
        let mut predecessors = vec![Vec::new(); segments.len()];
        for (i, s) in segments.iter().enumerate() {
            if let Some(cands) = by_from.get(&s.to_node) {
                for &j in cands {
                    if j != i && !turn_restrictions.contains(&(i, j)) {
                        successors[i].push(j);
                        predecessors[j].push(i);
                    }
                }
            }
        }
        for v in successors.iter_mut().chain(predecessors.iter_mut()) {
            v.sort_unstable();
        }

        RoadNetwork {
            nodes,
            segments,
            turn_restrictions,
            monitor_points,
            node_index,
            successors,
            predecessors,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn segment(&self, id: SegmentId) -> Result<&RoadSegment, NetworkError> {
        self.segments.get(id).ok_or(NetworkError::UnknownSegment(id))
    }

    pub fn node(&self, id: NodeId) -> Result<&Node, NetworkError> {
        self.node_index
            .get(&id)
            .map(|&k| &self.nodes[k])
            .ok_or(NetworkError::UnknownNode(id))
    }

    pub fn turn_restrictions(&self) -> &BTreeSet<(SegmentId, SegmentId)> {
        &self.turn_restrictions
    }

    pub fn monitor_points(&self) -> &BTreeSet<SegmentId> {
        &self.monitor_points
    }

    pub fn is_monitored(&self, id: SegmentId) -> bool {
        self.monitor_points.contains(&id)
    }

    /// Segments a vehicle may enter directly after `id` (excludes `id` itself).
    pub fn successors(&self, id: SegmentId) -> &[SegmentId] {
        &self.successors[id]
    }

    pub fn predecessors(&self, id: SegmentId) -> &[SegmentId] {
        &self.predecessors[id]
    }

    /// Road adjacency: head-to-tail and not turn-restricted, or the same segment.
    pub fn adjacent(&self, i: SegmentId, j: SegmentId) -> Result<bool, NetworkError> {
        self.segment(i)?;
        self.segment(j)?;
        Ok(i == j || self.successors[i].binary_search(&j).is_ok())
    }

    /// Neighbours in either direction (successors and predecessors, deduplicated, sorted).
    pub fn undirected_neighbors(&self, id: SegmentId) -> Vec<SegmentId> {
        let mut v: Vec<SegmentId> = self.successors[id]
            .iter()
            .chain(self.predecessors[id].iter())
            .copied()
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Midpoint of a segment in planar coordinates.
    pub fn centroid(&self, id: SegmentId) -> Result<(f64, f64), NetworkError> {
        let s = self.segment(id)?;
        let a = self.node(s.from_node)?;
        let b = self.node(s.to_node)?;
        Ok(((a.x + b.x) / 2.0, (a.y + b.y) / 2.0))
    }

    /// Replaces the monitor set, keeping segment flags in sync.
    pub fn with_monitors(mut self, monitors: BTreeSet<SegmentId>) -> Self {
        for s in self.segments.iter_mut() {
            s.monitored = monitors.contains(&s.id);
        }
        self.monitor_points = monitors;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    DuplicateNodeId,
    NonFiniteCoordinate,
    NonDenseSegmentId,
    UnknownNode,
    SelfLoop,
    NonPositiveLength,
    LengthMismatch,
    NoLanes,
    SpeedLimitOutOfRange,
    DanglingAdjacency,
    UnknownMonitor,
    AllSegmentsMonitored,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::DuplicateNodeId => "duplicate node id",
            ViolationKind::NonFiniteCoordinate => "non-finite coordinate",
            ViolationKind::NonDenseSegmentId => "non-dense segment id",
            ViolationKind::UnknownNode => "unknown node",
            ViolationKind::SelfLoop => "self-loop",
            ViolationKind::NonPositiveLength => "non-positive length",
            ViolationKind::LengthMismatch => "length mismatch",
            ViolationKind::NoLanes => "no lanes",
            ViolationKind::SpeedLimitOutOfRange => "speed limit out of range",
            ViolationKind::DanglingAdjacency => "dangling adjacency",
            ViolationKind::UnknownMonitor => "unknown monitor",
            ViolationKind::AllSegmentsMonitored => "all segments monitored",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub segment: Option<SegmentId>,
    pub node: Option<NodeId>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if let Some(s) = self.segment {
            write!(f, " (segment {s})")?;
        }
        if let Some(n) = self.node {
            write!(f, " (node {n})")?;
        }
        Ok(())
    }
}

/// Checks every network invariant. An empty report means the network is well formed.
pub fn validate_network(net: &RoadNetwork) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for n in &net.nodes {
        if !seen.insert(n.id) {
            out.push(Violation { kind: ViolationKind::DuplicateNodeId, segment: None, node: Some(n.id) });
        }
        if !n.x.is_finite() || !n.y.is_finite() {
            out.push(Violation { kind: ViolationKind::NonFiniteCoordinate, segment: None, node: Some(n.id) });
        }
    }

    for (k, s) in net.segments.iter().enumerate() {
        let seg = Some(s.id);
        if s.id != k {
            out.push(Violation { kind: ViolationKind::NonDenseSegmentId, segment: seg, node: None });
        }
        let a = net.node(s.from_node);
        let b = net.node(s.to_node);
        if a.is_err() {
            out.push(Violation { kind: ViolationKind::UnknownNode, segment: seg, node: Some(s.from_node) });
        }
        if b.is_err() {
            out.push(Violation { kind: ViolationKind::UnknownNode, segment: seg, node: Some(s.to_node) });
        }
        if s.from_node == s.to_node {
            out.push(Violation { kind: ViolationKind::SelfLoop, segment: seg, node: Some(s.from_node) });
        }
        if !(s.length > 0.0) || !s.length.is_finite() {
            out.push(Violation { kind: ViolationKind::NonPositiveLength, segment: seg, node: None });
        } else if let (Ok(a), Ok(b)) = (a, b) {
            let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
            if (s.length - d).abs() > 0.1 * d {
                out.push(Violation { kind: ViolationKind::LengthMismatch, segment: seg, node: None });
            }
        }
        if s.lanes < 1 {
            out.push(Violation { kind: ViolationKind::NoLanes, segment: seg, node: None });
        }
        if !(SPEED_LIMIT_MIN..=SPEED_LIMIT_MAX).contains(&s.speed_limit) {
            out.push(Violation { kind: ViolationKind::SpeedLimitOutOfRange, segment: seg, node: None });
        }
    }

    for &(i, j) in &net.turn_restrictions {
        let meets = match (net.segments.get(i), net.segments.get(j)) {
            (Some(a), Some(b)) => a.to_node == b.from_node,
            _ => false,
        };
        if !meets {
            out.push(Violation { kind: ViolationKind::DanglingAdjacency, segment: Some(i), node: None });
        }
    }

    for &mp in &net.monitor_points {
        if mp >= net.segments.len() {
            out.push(Violation { kind: ViolationKind::UnknownMonitor, segment: Some(mp), node: None });
        }
    }
    if !net.segments.is_empty() && net.monitor_points.len() >= net.segments.len() {
        out.push(Violation { kind: ViolationKind::AllSegmentsMonitored, segment: None, node: None });
    }
    out
}
