//! Trajectory data model, preprocessing and volume counting.
//!
//! Locations are segment-referenced (segment id + offset along it). A
//! traversal is a maximal run of consecutive points on the same segment; its
//! entry time is the timestamp of the run's first point.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{RoadNetwork, SegmentId};

/// Default cut threshold for trajectory gaps (30 minutes).
pub const DEFAULT_GAP_THRESHOLD_S: f64 = 1800.0;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid trajectory kind '{0}'")]
    BadKind(String),
    #[error("interval length must be positive, got {0}")]
    BadInterval(f64),
    #[error("volume csv: {0}")]
    VolumeFormat(String),
}

/// Vehicle size groups; each group shares one speed limit in the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VehicleGroup {
    #[default]
    Sedan,
    Suv,
    Truck,
}

impl VehicleGroup {
    pub const ALL: [VehicleGroup; 3] = [VehicleGroup::Sedan, VehicleGroup::Suv, VehicleGroup::Truck];

    pub fn index(self) -> usize {
        match self {
            VehicleGroup::Sedan => 0,
            VehicleGroup::Suv => 1,
            VehicleGroup::Truck => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Dense,
    Incomplete,
    Recovered,
}

impl TrajectoryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TrajectoryKind::Dense => "dense",
            TrajectoryKind::Incomplete => "incomplete",
            TrajectoryKind::Recovered => "recovered",
        }
    }
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TrajectoryKind {
    type Err = TrajectoryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense" => Ok(TrajectoryKind::Dense),
            "incomplete" => Ok(TrajectoryKind::Incomplete),
            "recovered" => Ok(TrajectoryKind::Recovered),
            other => Err(TrajectoryError::BadKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub segment_id: SegmentId,
    /// Meters along the segment.
    pub offset: f64,
    /// Seconds since scenario start.
    pub timestamp: f64,
}

impl TrajectoryPoint {
    pub fn entry(segment_id: SegmentId, timestamp: f64) -> Self {
        TrajectoryPoint { segment_id, offset: 0.0, timestamp }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub vehicle_id: u64,
    pub kind: TrajectoryKind,
    #[serde(default)]
    pub group: VehicleGroup,
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    /// Start index of every traversal. For dense and recovered trajectories a
    /// traversal is a maximal same-segment run; every incomplete point is its
    /// own sensor reading, so repeated passes of one monitor stay distinct.
    pub fn traversal_starts(&self) -> impl Iterator<Item = usize> + '_ {
        let every_point = self.kind == TrajectoryKind::Incomplete;
        (0..self.points.len()).filter(move |&k| {
            every_point || k == 0 || self.points[k].segment_id != self.points[k - 1].segment_id
        })
    }

    /// `(segment, entry_time)` for every traversal, in order.
    pub fn traversals(&self) -> Vec<(SegmentId, f64)> {
        self.traversal_starts()
            .map(|k| (self.points[k].segment_id, self.points[k].timestamp))
            .collect()
    }

    pub fn is_chronological(&self) -> bool {
        self.points.windows(2).all(|w| w[1].timestamp > w[0].timestamp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct TrajectorySet(pub Vec<Trajectory>);

impl TrajectorySet {
    pub fn iter(&self) -> std::slice::Iter<'_, Trajectory> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Writes `vehicle_id,kind,segment_id,offset_m,timestamp_s` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TrajectoryError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["vehicle_id", "kind", "segment_id", "offset_m", "timestamp_s"])?;
        for t in &self.0 {
            for p in &t.points {
                wr.write_record(&[
                    t.vehicle_id.to_string(),
                    t.kind.to_string(),
                    p.segment_id.to_string(),
                    p.offset.to_string(),
                    p.timestamp.to_string(),
                ])?;
            }
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads the CSV export back; consecutive rows with the same vehicle and
    /// kind form one trajectory. Vehicle groups are not part of the CSV.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, TrajectoryError> {
        #[derive(Deserialize)]
        struct Row {
            vehicle_id: u64,
            kind: String,
            segment_id: SegmentId,
            offset_m: f64,
            timestamp_s: f64,
        }
        let mut rd = csv::Reader::from_reader(r);
        let mut out: Vec<Trajectory> = Vec::new();
        for row in rd.deserialize::<Row>() {
            let row = row?;
            let kind: TrajectoryKind = row.kind.parse()?;
            let point = TrajectoryPoint { segment_id: row.segment_id, offset: row.offset_m, timestamp: row.timestamp_s };
            match out.last_mut() {
                Some(t) if t.vehicle_id == row.vehicle_id && t.kind == kind => t.points.push(point),
                _ => out.push(Trajectory { vehicle_id: row.vehicle_id, kind, group: VehicleGroup::default(), points: vec![point] }),
            }
        }
        Ok(TrajectorySet(out))
    }
}

impl FromIterator<Trajectory> for TrajectorySet {
    fn from_iter<I: IntoIterator<Item = Trajectory>>(iter: I) -> Self {
        TrajectorySet(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a TrajectorySet {
    type Item = &'a Trajectory;
    type IntoIter = std::slice::Iter<'a, Trajectory>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Splits trajectories wherever consecutive points are more than
/// `gap_threshold` seconds apart. A gap of exactly the threshold is kept.
pub fn cut_on_gaps(set: &TrajectorySet, gap_threshold: f64) -> TrajectorySet {
    let mut out = Vec::with_capacity(set.len());
    for t in set {
        let mut piece: Vec<TrajectoryPoint> = Vec::new();
        for p in &t.points {
            if let Some(last) = piece.last() {
                if p.timestamp - last.timestamp > gap_threshold {
                    out.push(Trajectory { points: std::mem::take(&mut piece), ..t.clone() });
                }
            }
            piece.push(*p);
        }
        if !piece.is_empty() {
            out.push(Trajectory { points: piece, ..t.clone() });
        }
    }
    TrajectorySet(out)
}

/// What a monitor-point sensor sees of a vehicle: one point per traversal of
/// a monitored segment, taken at segment entry.
pub fn downsample_to_monitors(dense: &Trajectory, net: &RoadNetwork) -> Trajectory {
    let points = dense
        .traversal_starts()
        .map(|k| dense.points[k])
        .filter(|p| net.is_monitored(p.segment_id))
        .collect();
    Trajectory { vehicle_id: dense.vehicle_id, kind: TrajectoryKind::Incomplete, group: dense.group, points }
}

/// `m × n` volumes stored row-major (`values[i * n + t]`) with an observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeTensor {
    pub m: usize,
    pub n: usize,
    pub interval_seconds: f64,
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

/// JSON layout of a [`VolumeTensor`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct VolumeRecord {
    m: usize,
    n: usize,
    interval_seconds: f64,
    data: Vec<f64>,
    mask: Vec<bool>,
}

impl Serialize for VolumeTensor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        VolumeRecord {
            m: self.m,
            n: self.n,
            interval_seconds: self.interval_seconds,
            data: self.values.clone(),
            mask: self.observed.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for VolumeTensor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = VolumeRecord::deserialize(d)?;
        if r.data.len() != r.m * r.n || r.mask.len() != r.m * r.n {
            return Err(serde::de::Error::custom(format!(
                "volume tensor {}x{} needs {} entries, got data={} mask={}",
                r.m,
                r.n,
                r.m * r.n,
                r.data.len(),
                r.mask.len()
            )));
        }
        Ok(VolumeTensor { m: r.m, n: r.n, interval_seconds: r.interval_seconds, values: r.data, observed: r.mask })
    }
}

impl VolumeTensor {
    pub fn zeros(m: usize, n: usize, interval_seconds: f64) -> Self {
        VolumeTensor { m, n, interval_seconds, values: vec![0.0; m * n], observed: vec![true; m * n] }
    }

    #[inline]
    pub fn idx(&self, i: SegmentId, t: usize) -> usize {
        i * self.n + t
    }

    pub fn get(&self, i: SegmentId, t: usize) -> f64 {
        self.values[self.idx(i, t)]
    }

    pub fn set(&mut self, i: SegmentId, t: usize, v: f64) {
        let k = self.idx(i, t);
        self.values[k] = v;
    }

    pub fn is_observed(&self, i: SegmentId, t: usize) -> bool {
        self.observed[self.idx(i, t)]
    }

    pub fn row(&self, i: SegmentId) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn masked_to_rows(&self, rows: &[SegmentId]) -> VolumeTensor {
        let mut out = VolumeTensor::zeros(self.m, self.n, self.interval_seconds);
        out.observed.iter_mut().for_each(|o| *o = false);
        for &i in rows {
            for t in 0..self.n {
                let k = out.idx(i, t);
                out.observed[k] = true;
                out.values[k] = self.values[k];
            }
        }
        out
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Rows `segment_id,interval,volume,was_observed`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TrajectoryError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["segment_id", "interval", "volume", "was_observed"])?;
        for i in 0..self.m {
            for t in 0..self.n {
                let k = self.idx(i, t);
                wr.write_record(&[i.to_string(), t.to_string(), format!("{:?}", self.values[k]), self.observed[k].to_string()])?;
            }
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads the CSV export; every cell of the `m x n` grid must appear once.
    pub fn read_csv<R: Read>(r: R, m: usize, n: usize, interval_seconds: f64) -> Result<Self, TrajectoryError> {
        #[derive(Deserialize)]
        struct Row {
            segment_id: SegmentId,
            interval: usize,
            volume: f64,
            was_observed: bool,
        }
        let mut out = VolumeTensor::zeros(m, n, interval_seconds);
        let mut seen = vec![false; m * n];
        for row in csv::Reader::from_reader(r).deserialize::<Row>() {
            let row = row?;
            if row.segment_id >= m || row.interval >= n {
                return Err(TrajectoryError::VolumeFormat(format!("cell ({}, {}) outside {m}x{n}", row.segment_id, row.interval)));
            }
            let k = out.idx(row.segment_id, row.interval);
            if std::mem::replace(&mut seen[k], true) {
                return Err(TrajectoryError::VolumeFormat(format!("cell ({}, {}) listed twice", row.segment_id, row.interval)));
            }
            out.values[k] = row.volume;
            out.observed[k] = row.was_observed;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(TrajectoryError::VolumeFormat(format!("cell ({}, {}) missing", k / n, k % n)));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CountReport {
    /// Traversal events whose entry time falls outside `[0, n·L)`.
    pub dropped_out_of_horizon: usize,
    /// Traversal events on segment ids the network does not know.
    pub dropped_unknown_segment: usize,
}

/// Counts traversal entries per `(segment, interval)` with half-open bins
/// `[t·L, (t+1)·L)`. A vehicle re-entering a segment counts again.
pub fn count_volumes(
    set: &TrajectorySet,
    net: &RoadNetwork,
    interval_length: f64,
    n: usize,
) -> Result<(VolumeTensor, CountReport), TrajectoryError> {
    if !(interval_length > 0.0) {
        return Err(TrajectoryError::BadInterval(interval_length));
    }
    let m = net.num_segments();
    let mut vol = VolumeTensor::zeros(m, n, interval_length);
    let mut report = CountReport::default();
    for t in set {
        for (seg, ts) in t.traversals() {
            if seg >= m {
                report.dropped_unknown_segment += 1;
                continue;
            }
            let bin = (ts / interval_length).floor();
            if ts < 0.0 || bin >= n as f64 {
                report.dropped_out_of_horizon += 1;
                continue;
            }
            let k = vol.idx(seg, bin as usize);
            vol.values[k] += 1.0;
        }
    }
    Ok((vol, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Node, RoadNetwork};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn line_network(segments: usize, monitors: &[usize]) -> RoadNetwork {
        let nodes = (0..=segments).map(|k| Node { id: k, x: 100.0 * k as f64, y: 0.0 }).collect();
        let segs = (0..segments).map(|k| crate::network::tests::seg(k, k, k + 1, 100.0)).collect();
        RoadNetwork::new(nodes, segs, BTreeSet::new(), monitors.iter().copied().collect())
    }

    #[test]
    fn volume_csv_round_trip() {
        let mut v = VolumeTensor::zeros(2, 3, 300.0);
        v.values = vec![0.1, 2.0, 1.0 / 3.0, 7.0, 0.0, 1e-17];
        v.observed = vec![true, false, true, false, false, true];
        let mut buf = Vec::new();
        v.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("segment_id,interval,volume,was_observed\n0,0,0.1,true\n"));
        assert_eq!(VolumeTensor::read_csv(buf.as_slice(), 2, 3, 300.0).unwrap(), v);
        assert!(VolumeTensor::read_csv(buf.as_slice(), 2, 4, 300.0).is_err());
        assert!(VolumeTensor::read_csv(buf.as_slice(), 1, 3, 300.0).is_err());
    }

    fn traj(points: &[(usize, f64)]) -> Trajectory {
        Trajectory {
            vehicle_id: 1,
            kind: TrajectoryKind::Dense,
            group: VehicleGroup::Sedan,
            points: points.iter().map(|&(s, t)| TrajectoryPoint::entry(s, t)).collect(),
        }
    }

    #[test]
    fn cut_splits_only_on_gaps_over_threshold() {
        // gaps: 10 min, 31 min, 5 min
        let t = traj(&[(0, 0.0), (1, 600.0), (2, 600.0 + 1860.0), (3, 600.0 + 1860.0 + 300.0)]);
        let out = cut_on_gaps(&TrajectorySet(vec![t]), DEFAULT_GAP_THRESHOLD_S);
        assert_eq!(out.len(), 2);
        assert_eq!(out.0[0].points.len(), 2);
        assert_eq!(out.0[1].points.len(), 2);
    }

    #[test]
    fn cut_keeps_gap_equal_to_threshold() {
        let t = traj(&[(0, 0.0), (1, 1800.0)]);
        let out = cut_on_gaps(&TrajectorySet(vec![t.clone()]), DEFAULT_GAP_THRESHOLD_S);
        assert_eq!(out.0, vec![t]);
    }

    #[test]
    fn cut_is_identity_without_long_gaps() {
        let set = TrajectorySet(vec![traj(&[(0, 0.0), (1, 60.0), (2, 120.0)])]);
        assert_eq!(cut_on_gaps(&set, DEFAULT_GAP_THRESHOLD_S), set);
    }

    #[test]
    fn downsample_filters_to_monitors() {
        let net = line_network(4, &[2]);
        let d = traj(&[(1, 0.0), (2, 10.0), (3, 20.0)]);
        let inc = downsample_to_monitors(&d, &net);
        assert_eq!(inc.kind, TrajectoryKind::Incomplete);
        assert_eq!(inc.points, vec![TrajectoryPoint::entry(2, 10.0)]);

        let all = line_network(4, &[0, 1, 2, 3]);
        assert_eq!(downsample_to_monitors(&d, &all).points.len(), 3);

        let none = line_network(4, &[0]);
        assert!(downsample_to_monitors(&d, &none).points.is_empty());
    }

    #[test]
    fn downsample_keeps_one_point_per_traversal() {
        let net = line_network(3, &[1]);
        let d = Trajectory {
            points: vec![
                TrajectoryPoint::entry(1, 0.0),
                TrajectoryPoint { segment_id: 1, offset: 50.0, timestamp: 5.0 },
                TrajectoryPoint::entry(2, 10.0),
            ],
            ..traj(&[])
        };
        assert_eq!(downsample_to_monitors(&d, &net).points, vec![TrajectoryPoint::entry(1, 0.0)]);
    }

    #[test]
    fn count_single_event() {
        let net = line_network(5, &[]);
        let set = TrajectorySet(vec![traj(&[(3, 10.0)])]);
        let (v, _) = count_volumes(&set, &net, 300.0, 4).unwrap();
        assert_eq!(v.get(3, 0), 1.0);
        assert_eq!(v.total(), 1.0);
    }

    #[test]
    fn count_reentry_counts_twice() {
        let net = line_network(5, &[]);
        let set = TrajectorySet(vec![traj(&[(3, 10.0), (4, 20.0), (3, 30.0)])]);
        let (v, _) = count_volumes(&set, &net, 300.0, 4).unwrap();
        assert_eq!(v.get(3, 0), 2.0);
    }

    #[test]
    fn count_bins_are_half_open() {
        let net = line_network(5, &[]);
        let set = TrajectorySet(vec![traj(&[(3, 300.0)])]);
        let (v, _) = count_volumes(&set, &net, 300.0, 4).unwrap();
        assert_eq!(v.get(3, 0), 0.0);
        assert_eq!(v.get(3, 1), 1.0);
    }

    #[test]
    fn count_drops_events_past_horizon() {
        let net = line_network(5, &[]);
        let set = TrajectorySet(vec![traj(&[(3, 10.0), (4, 1200.0)])]);
        let (v, rep) = count_volumes(&set, &net, 300.0, 4).unwrap();
        assert_eq!(v.total(), 1.0);
        assert_eq!(rep.dropped_out_of_horizon, 1);
    }

    #[test]
    fn csv_round_trip_keeps_points() {
        let set = TrajectorySet(vec![traj(&[(0, 0.5), (1, 61.25)])]);
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("vehicle_id,kind,segment_id,offset_m,timestamp_s"));
        assert_eq!(TrajectorySet::read_csv(&buf[..]).unwrap(), set);
    }

    fn arb_trajectory() -> impl Strategy<Value = Trajectory> {
        prop::collection::vec((0usize..6, 1.0f64..4000.0), 1..12).prop_map(|steps| {
            let mut t = 0.0;
            let points = steps
                .into_iter()
                .map(|(s, dt)| {
                    t += dt;
                    TrajectoryPoint::entry(s, t)
                })
                .collect();
            Trajectory { vehicle_id: 7, kind: TrajectoryKind::Dense, group: VehicleGroup::Suv, points }
        })
    }

    proptest! {
        #[test]
        fn cut_is_idempotent(ts in prop::collection::vec(arb_trajectory(), 0..5)) {
            let set = TrajectorySet(ts);
            let once = cut_on_gaps(&set, 1800.0);
            prop_assert_eq!(cut_on_gaps(&once, 1800.0), once.clone());
            let total: usize = set.iter().map(|t| t.points.len()).sum();
            prop_assert_eq!(once.iter().map(|t| t.points.len()).sum::<usize>(), total);
        }

        #[test]
        fn sensor_counting_is_lossless_at_monitors(ts in prop::collection::vec(arb_trajectory(), 0..6)) {
            let net = line_network(6, &[1, 4]);
            let set = TrajectorySet(ts);
            let inc: TrajectorySet = set.iter().map(|t| downsample_to_monitors(t, &net)).collect();
            let (full, _) = count_volumes(&set, &net, 300.0, 100).unwrap();
            let (seen, _) = count_volumes(&inc, &net, 300.0, 100).unwrap();
            for &i in &[1usize, 4] {
                prop_assert_eq!(full.row(i), seen.row(i));
            }
        }

        #[test]
        fn counting_conserves_events(ts in prop::collection::vec(arb_trajectory(), 0..6)) {
            let net = line_network(6, &[]);
            let set = TrajectorySet(ts);
            let events: usize = set.iter().map(|t| t.traversals().len()).sum();
            let (v, rep) = count_volumes(&set, &net, 300.0, 1000).unwrap();
            prop_assert_eq!(v.total() as usize + rep.dropped_out_of_horizon, events);
        }
    }
}
