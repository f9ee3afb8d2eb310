//! Minimum-travel-time routing over the segment graph.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::network::{RoadNetwork, SegmentId};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Label {
    time: f64,
    hops: usize,
    pred: Option<SegmentId>,
}

impl Label {
    /// Strictly better: lower time, then fewer segments, then lower predecessor id.
    fn beats(&self, other: &Label) -> bool {
        let tol = 1e-9 * self.time.abs().max(other.time.abs()).max(1.0);
        if self.time < other.time - tol {
            return true;
        }
        if self.time > other.time + tol {
            return false;
        }
        (self.hops, self.pred) < (other.hops, other.pred)
    }
}

#[derive(Debug, PartialEq)]
struct HeapEntry {
    time: f64,
    hops: usize,
    seg: SegmentId,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (time, hops, seg)
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.hops.cmp(&self.hops))
            .then_with(|| other.seg.cmp(&self.seg))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Path `[from, …, to]` minimising the summed traversal time of every segment
/// except the last one (the target counts as reached on entry). `travel_time`
/// gives the expected time to traverse a segment. Returns `None` when `to` is
/// unreachable.
pub fn fastest_path<F>(net: &RoadNetwork, from: SegmentId, to: SegmentId, travel_time: F) -> Option<Vec<SegmentId>>
where
    F: Fn(SegmentId) -> f64,
{
    let m = net.num_segments();
    if from >= m || to >= m {
        return None;
    }
    if from == to {
        return Some(vec![from]);
    }
    let mut labels: Vec<Option<Label>> = vec![None; m];
    let mut settled = vec![false; m];
    labels[from] = Some(Label { time: 0.0, hops: 0, pred: None });
    let mut heap = BinaryHeap::new();
    heap.push(HeapEntry { time: 0.0, hops: 0, seg: from });

    while let Some(HeapEntry { seg, .. }) = heap.pop() {
        if settled[seg] {
            continue;
        }
        settled[seg] = true;
        if seg == to {
            break;
        }
        let here = labels[seg].expect("settled segments carry labels");
        let leave = here.time + travel_time(seg);
        for &next in net.successors(seg) {
            if settled[next] {
                continue;
            }
            let cand = Label { time: leave, hops: here.hops + 1, pred: Some(seg) };
            let better = match &labels[next] {
                None => true,
                Some(cur) => cand.beats(cur),
            };
            if better {
                labels[next] = Some(cand);
                heap.push(HeapEntry { time: cand.time, hops: cand.hops, seg: next });
            }
        }
    }

    labels[to]?;
    let mut path = vec![to];
    let mut cur = to;
    while let Some(p) = labels[cur].and_then(|l| l.pred) {
        path.push(p);
        cur = p;
    }
    path.reverse();
    Some(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Node, RoadClass, RoadSegment};
    use std::collections::BTreeSet;

    fn seg(id: usize, from: usize, to: usize, length: f64) -> RoadSegment {
        RoadSegment { id, from_node: from, to_node: to, length, lanes: 1, road_class: RoadClass::Secondary, speed_limit: 10.0, monitored: false }
    }

    /// Diamond: 0 -> {1 (A), 2 (B)} -> 3 via segments 3/4.
    fn diamond() -> RoadNetwork {
        let nodes = vec![
            Node { id: 0, x: 0.0, y: 0.0 },
            Node { id: 1, x: 100.0, y: 0.0 },
            Node { id: 2, x: 400.0, y: 300.0 },
            Node { id: 3, x: 400.0, y: -450.0 },
            Node { id: 4, x: 1000.0, y: 0.0 },
        ];
        let segs = vec![
            seg(0, 0, 1, 100.0),
            seg(1, 1, 2, 300.0),
            seg(2, 1, 3, 450.0),
            seg(3, 2, 4, 300.0),
            seg(4, 3, 4, 450.0),
            seg(5, 4, 0, 1000.0),
        ];
        RoadNetwork::new(nodes, segs, BTreeSet::new(), BTreeSet::new())
    }

    #[test]
    fn identity_route() {
        let net = diamond();
        assert_eq!(fastest_path(&net, 3, 3, |_| 1.0), Some(vec![3]));
    }

    #[test]
    fn picks_lower_travel_time() {
        let net = diamond();
        // free flow at 10 m/s: A (segs 1, 3) = 60 s, B (segs 2, 4) = 90 s.
        let free = |s: usize| net.segments()[s].length / 10.0;
        assert_eq!(fastest_path(&net, 0, 5, free), Some(vec![0, 1, 3, 5]));
        // A congested to an effective 120 s.
        let congested = |s: usize| if s == 1 { 90.0 } else { net.segments()[s].length / 10.0 };
        assert_eq!(fastest_path(&net, 0, 5, congested), Some(vec![0, 2, 4, 5]));
    }

    #[test]
    fn ties_prefer_fewer_segments_then_lower_ids() {
        let net = diamond();
        assert_eq!(fastest_path(&net, 0, 5, |_| 1.0), Some(vec![0, 1, 3, 5]));
    }

    #[test]
    fn unreachable_is_none() {
        let nodes = vec![Node { id: 0, x: 0.0, y: 0.0 }, Node { id: 1, x: 100.0, y: 0.0 }];
        let net = RoadNetwork::new(nodes, vec![seg(0, 0, 1, 100.0), seg(1, 0, 1, 100.0)], BTreeSet::new(), BTreeSet::new());
        assert_eq!(fastest_path(&net, 0, 1, |_| 1.0), None);
    }
}
