//! Microscopic traffic simulator used both to generate ground truth and to
//! recover incomplete trajectories.
//!
//! Each segment holds a single ordered queue; lane count only scales how
//! tightly vehicles pack (a vehicle keeps `min_gap` to the one `lanes`
//! positions ahead). Speeds follow a Krauss-style safe-speed rule.

pub mod routing;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{RoadNetwork, SegmentId, SPEED_LIMIT_MAX, SPEED_LIMIT_MIN};
use crate::trajectory::{Trajectory, TrajectoryKind, TrajectoryPoint, TrajectorySet, VehicleGroup};

pub use routing::fastest_path;

/// Group limits the recovery simulator starts from when nothing is tuned.
pub const DEFAULT_GROUP_LIMITS: [f64; 3] = [23.0, 22.0, 20.0];

const EPS: f64 = 1e-9;
/// Below this speed a vehicle counts as waiting.
const WAIT_SPEED: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("no route from segment {from} to segment {to}")]
    Unreachable { from: SegmentId, to: SegmentId },
    #[error("recovery error of an empty record list")]
    EmptyRecords,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub micro_step: f64,
    pub macro_step: f64,
    /// Desired time headway (s).
    pub headway: f64,
    pub max_accel: f64,
    pub max_decel: f64,
    /// Standstill spacing between a vehicle and its same-lane leader (m).
    pub min_gap: f64,
    /// Random deceleration as a fraction of `max_accel·dt`; 0 disables it.
    pub dawdle: f64,
    pub resync: bool,
    pub resync_grace: f64,
    pub group_limits: [f64; 3],
    pub start_time: f64,
    /// Simulation stops here; `None` runs until every vehicle is done, capped
    /// at the last observed timestamp plus grace plus one hour.
    pub end_time: Option<f64>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            micro_step: 1.0,
            macro_step: 60.0,
            headway: 1.0,
            max_accel: 2.6,
            max_decel: 4.5,
            min_gap: 7.5,
            dawdle: 0.0,
            resync: true,
            resync_grace: 300.0,
            group_limits: DEFAULT_GROUP_LIMITS,
            start_time: 0.0,
            end_time: None,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("micro_step", self.micro_step),
            ("macro_step", self.macro_step),
            ("headway", self.headway),
            ("max_accel", self.max_accel),
            ("max_decel", self.max_decel),
            ("min_gap", self.min_gap),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        let ratio = self.macro_step / self.micro_step;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(SimError::InvalidConfig(format!(
                "macro_step {} is not a multiple of micro_step {}",
                self.macro_step, self.micro_step
            )));
        }
        if !(0.0..=1.0).contains(&self.dawdle) {
            return Err(SimError::InvalidConfig(format!("dawdle must lie in [0, 1], got {}", self.dawdle)));
        }
        if !(self.resync_grace >= 0.0) {
            return Err(SimError::InvalidConfig("resync_grace must be non-negative".into()));
        }
        for (g, &l) in self.group_limits.iter().enumerate() {
            if !(SPEED_LIMIT_MIN..=SPEED_LIMIT_MAX).contains(&l) {
                return Err(SimError::InvalidConfig(format!("group {g} limit {l} outside [1, 40]")));
            }
        }
        if let Some(end) = self.end_time {
            if !(end > self.start_time) {
                return Err(SimError::InvalidConfig("end_time must exceed start_time".into()));
            }
        }
        Ok(())
    }

    fn micro_per_macro(&self) -> u64 {
        (self.macro_step / self.micro_step).round() as u64
    }
}

/// One itinerary point. `observed` is the sensor timestamp, absent for
/// ground-truth destinations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub segment: SegmentId,
    pub observed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleSpec {
    pub id: u64,
    pub group: VehicleGroup,
    /// Fraction of the group limit this driver aims for.
    pub speed_factor: f64,
    /// First waypoint is the spawn segment.
    pub waypoints: Vec<Waypoint>,
    pub depart: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleStatus {
    Pending,
    Active,
    /// Active, and the last itinerary point was reached by teleport.
    Resynced,
    ArrivedAll,
    /// Still on the road or never spawned when the simulation ended.
    TimedOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrivalRecord {
    pub vehicle_id: u64,
    pub point_index: usize,
    pub t_real: f64,
    pub t_sim: f64,
    pub resynced: bool,
    pub timed_out: bool,
}

/// Rows `vehicle_id,point_index,t_real_s,t_sim_s`.
pub fn write_records_csv<W: std::io::Write>(records: &[ArrivalRecord], w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["vehicle_id", "point_index", "t_real_s", "t_sim_s"])?;
    for r in records {
        wr.serialize((r.vehicle_id, r.point_index, r.t_real, r.t_sim))?;
    }
    wr.flush()?;
    Ok(())
}

/// Per-segment `[count, avg_traverse_s, avg_speed, avg_wait_s]`, interleaved
/// by segment (`4 * segment + feature`).
#[derive(Debug, Clone, PartialEq)]
pub struct StateFeatures(pub Vec<f64>);

impl StateFeatures {
    pub const PER_SEGMENT: usize = 4;

    pub fn segment(&self, id: SegmentId) -> &[f64] {
        &self.0[id * 4..id * 4 + 4]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub features: StateFeatures,
    pub arrivals: Vec<ArrivalRecord>,
}

/// Vehicle counts around one micro-step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MicroBalance {
    pub time: f64,
    pub before: usize,
    pub after: usize,
    pub spawns: usize,
    pub despawns: usize,
}

impl MicroBalance {
    pub fn balanced(&self) -> bool {
        self.after as i64 - self.before as i64 == self.spawns as i64 - self.despawns as i64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InitReport {
    /// `(vehicle_id, reason)` for trajectories that could not become vehicles.
    pub rejected: Vec<(u64, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleView {
    pub id: u64,
    pub segment: SegmentId,
    pub offset: f64,
    pub speed: f64,
}

#[derive(Debug, Clone)]
struct Vehicle {
    spec: VehicleSpec,
    status: VehicleStatus,
    next_wp: usize,
    route: Vec<SegmentId>,
    route_pos: usize,
    stranded: bool,
    segment: SegmentId,
    offset: f64,
    speed: f64,
    spawn_time: f64,
    entered_at: f64,
    path: Vec<(SegmentId, f64)>,
    on_network: bool,
    /// Distance covered during the current micro-step.
    step_moved: f64,
    /// `(segment, macro index)` last counted toward the distinct-vehicle tally.
    mark: Option<(SegmentId, u64)>,
}

impl Vehicle {
    fn next_segment(&self) -> Option<SegmentId> {
        self.route.get(self.route_pos + 1).copied()
    }

    fn t_obs0(&self) -> f64 {
        self.spec.waypoints[0].observed.unwrap_or(self.spec.depart)
    }

    fn push_path(&mut self, seg: SegmentId, t: f64) {
        let t = match self.path.last() {
            Some(&(_, last)) if t <= last => last + 1e-6,
            _ => t,
        };
        self.path.push((seg, t));
    }
}

#[derive(Debug, Clone)]
struct Accumulators {
    speed_sum: Vec<f64>,
    samples: Vec<u64>,
    wait_sum: Vec<f64>,
    distinct: Vec<u64>,
    trav_sum: Vec<f64>,
    trav_cnt: Vec<u64>,
}

impl Accumulators {
    fn new(m: usize) -> Self {
        Accumulators {
            speed_sum: vec![0.0; m],
            samples: vec![0; m],
            wait_sum: vec![0.0; m],
            distinct: vec![0; m],
            trav_sum: vec![0.0; m],
            trav_cnt: vec![0; m],
        }
    }
}

pub struct Simulator<'a> {
    net: &'a RoadNetwork,
    cfg: SimConfig,
    limits: [f64; 3],
    end_time: f64,
    vehicles: Vec<Vehicle>,
    /// Vehicle indices by (depart, id).
    pending: Vec<usize>,
    next_pending: usize,
    /// Due but blocked at the spawn point.
    waiting: Vec<usize>,
    /// Per segment, vehicle indices ordered front (largest offset) first.
    occupants: Vec<Vec<usize>>,
    on_network: usize,
    ticks: u64,
    macro_index: u64,
    rng: ChaCha8Rng,
    acc: Accumulators,
    records: Vec<ArrivalRecord>,
    step_records: Vec<ArrivalRecord>,
    balance_log: Option<Vec<MicroBalance>>,
    routing_failures: usize,
    finalized: bool,
}

/// Builds a recovery simulator with one vehicle per incomplete trajectory.
pub fn new_sim<'a>(
    net: &'a RoadNetwork,
    incomplete: &TrajectorySet,
    cfg: SimConfig,
) -> Result<(Simulator<'a>, InitReport), SimError> {
    let mut report = InitReport::default();
    let mut specs = Vec::with_capacity(incomplete.len());
    for traj in incomplete.iter() {
        match itinerary(traj, net) {
            Ok(spec) => specs.push(spec),
            Err(reason) => report.rejected.push((traj.vehicle_id, reason)),
        }
    }
    Ok((Simulator::from_specs(net, specs, cfg)?, report))
}

fn itinerary(traj: &Trajectory, net: &RoadNetwork) -> Result<VehicleSpec, String> {
    if traj.points.is_empty() {
        return Err("empty trajectory".into());
    }
    if !traj.is_chronological() {
        return Err("timestamps not strictly increasing".into());
    }
    let mut waypoints = Vec::with_capacity(traj.points.len());
    for p in &traj.points {
        if p.segment_id >= net.num_segments() {
            return Err(format!("unknown segment {}", p.segment_id));
        }
        if !net.is_monitored(p.segment_id) {
            return Err(format!("point on unmonitored segment {}", p.segment_id));
        }
        waypoints.push(Waypoint { segment: p.segment_id, observed: Some(p.timestamp) });
    }
    Ok(VehicleSpec {
        id: traj.vehicle_id,
        group: traj.group,
        speed_factor: 1.0,
        depart: traj.points[0].timestamp,
        waypoints,
    })
}

/// Mean absolute arrival-time difference over all records.
pub fn recovery_error(records: &[ArrivalRecord]) -> Result<f64, SimError> {
    if records.is_empty() {
        return Err(SimError::EmptyRecords);
    }
    let total: f64 = records.iter().map(|r| (r.t_sim - r.t_real).abs()).sum();
    Ok(total / records.len() as f64)
}

impl<'a> Simulator<'a> {
    pub fn from_specs(net: &'a RoadNetwork, specs: Vec<VehicleSpec>, cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let m = net.num_segments();
        for s in &specs {
            if s.waypoints.is_empty() {
                return Err(SimError::InvalidConfig(format!("vehicle {} has no waypoints", s.id)));
            }
            if let Some(w) = s.waypoints.iter().find(|w| w.segment >= m) {
                return Err(SimError::InvalidConfig(format!("vehicle {} references segment {}", s.id, w.segment)));
            }
        }
        let end_time = cfg.end_time.unwrap_or_else(|| {
            let last_obs = specs
                .iter()
                .flat_map(|s| s.waypoints.iter().filter_map(|w| w.observed).chain(std::iter::once(s.depart)))
                .fold(cfg.start_time, f64::max);
            last_obs + cfg.resync_grace + 3600.0
        });
        let vehicles: Vec<Vehicle> = specs
            .into_iter()
            .map(|spec| Vehicle {
                status: VehicleStatus::Pending,
                next_wp: 0,
                route: Vec::new(),
                route_pos: 0,
                stranded: false,
                segment: spec.waypoints[0].segment,
                offset: 0.0,
                speed: 0.0,
                spawn_time: spec.depart,
                entered_at: spec.depart,
                path: Vec::new(),
                on_network: false,
                step_moved: 0.0,
                mark: None,
                spec,
            })
            .collect();
        let mut pending: Vec<usize> = (0..vehicles.len()).collect();
        pending.sort_by(|&a, &b| {
            vehicles[a]
                .spec
                .depart
                .total_cmp(&vehicles[b].spec.depart)
                .then(vehicles[a].spec.id.cmp(&vehicles[b].spec.id))
        });
        Ok(Simulator {
            net,
            limits: cfg.group_limits,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            end_time,
            cfg,
            vehicles,
            pending,
            next_pending: 0,
            waiting: Vec::new(),
            occupants: vec![Vec::new(); m],
            on_network: 0,
            ticks: 0,
            macro_index: 0,
            acc: Accumulators::new(m),
            records: Vec::new(),
            step_records: Vec::new(),
            balance_log: None,
            routing_failures: 0,
            finalized: false,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now(&self) -> f64 {
        self.cfg.start_time + self.ticks as f64 * self.cfg.micro_step
    }

    pub fn end_time(&self) -> f64 {
        self.end_time
    }

    pub fn limits(&self) -> [f64; 3] {
        self.limits
    }

    pub fn num_vehicles(&self) -> usize {
        self.vehicles.len()
    }

    pub fn vehicles_on_network(&self) -> usize {
        self.on_network
    }

    pub fn state_dim(&self) -> usize {
        StateFeatures::PER_SEGMENT * self.net.num_segments()
    }

    pub fn routing_failures(&self) -> usize {
        self.routing_failures
    }

    pub fn records(&self) -> &[ArrivalRecord] {
        &self.records
    }

    pub fn status(&self, vehicle_id: u64) -> Option<VehicleStatus> {
        self.vehicles.iter().find(|v| v.spec.id == vehicle_id).map(|v| v.status)
    }

    pub fn set_balance_logging(&mut self, on: bool) {
        self.balance_log = if on { Some(Vec::new()) } else { None };
    }

    pub fn take_balance_log(&mut self) -> Vec<MicroBalance> {
        self.balance_log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Vehicles currently on `seg`, front first.
    pub fn occupancy(&self, seg: SegmentId) -> Vec<VehicleView> {
        self.occupants[seg]
            .iter()
            .map(|&v| {
                let veh = &self.vehicles[v];
                VehicleView { id: veh.spec.id, segment: seg, offset: veh.offset, speed: veh.speed }
            })
            .collect()
    }

    pub fn set_limits(&mut self, limits: [f64; 3]) {
        self.limits = limits.map(|l| l.clamp(SPEED_LIMIT_MIN, SPEED_LIMIT_MAX));
    }

    /// Shifts one group's limit by `delta` m/s, clamped to the global range.
    pub fn apply_action(&mut self, group: VehicleGroup, delta: i32) {
        let g = group.index();
        self.limits[g] = (self.limits[g] + delta as f64).clamp(SPEED_LIMIT_MIN, SPEED_LIMIT_MAX);
    }

    pub fn finished(&self) -> bool {
        self.finalized
            || self.now() >= self.end_time - EPS
            || (self.next_pending == self.pending.len() && self.waiting.is_empty() && self.on_network == 0)
    }

    /// Expected traversal time of `seg` for a vehicle of group `g` under the
    /// current occupancy.
    fn travel_time(&self, seg: SegmentId, g: usize) -> f64 {
        let s = &self.net.segments()[seg];
        let capacity = s.lanes as f64 * s.length / self.cfg.min_gap;
        let rho = self.occupants[seg].len() as f64 / capacity;
        let eff = s.speed_limit.min(self.limits[g]) * (1.0 - rho).max(0.05);
        s.length / eff
    }

    /// Route between two segments under current conditions, as the vehicle
    /// of group `group` would choose it.
    pub fn route(&self, group: VehicleGroup, from: SegmentId, to: SegmentId) -> Result<Vec<SegmentId>, SimError> {
        let g = group.index();
        fastest_path(self.net, from, to, |s| self.travel_time(s, g)).ok_or(SimError::Unreachable { from, to })
    }

    /// Path that leaves `from` and comes back to `to == from`.
    fn loop_route(&self, g: usize, from: SegmentId) -> Option<Vec<SegmentId>> {
        let mut best: Option<(f64, Vec<SegmentId>)> = None;
        for &s in self.net.successors(from) {
            let Some(p) = fastest_path(self.net, s, from, |x| self.travel_time(x, g)) else { continue };
            let cost: f64 = self.travel_time(from, g) + p[..p.len() - 1].iter().map(|&x| self.travel_time(x, g)).sum::<f64>();
            let better = match &best {
                None => true,
                Some((c, bp)) => cost < *c - EPS || ((cost - *c).abs() <= EPS && p.len() + 1 < bp.len()),
            };
            if better {
                let mut full = vec![from];
                full.extend(p);
                best = Some((cost, full));
            }
        }
        best.map(|(_, p)| p)
    }

    fn v_max(&self, v: &Vehicle, seg: SegmentId) -> f64 {
        let g = v.spec.group.index();
        self.net.segments()[seg].speed_limit.min(self.limits[g] * v.spec.speed_factor).max(0.0)
    }

    fn safe_speed(&self, v: f64, leader_speed: f64, gap: f64) -> f64 {
        let tau = self.cfg.headway;
        let b = self.cfg.max_decel;
        leader_speed + (gap - leader_speed * tau) / ((v + leader_speed) / (2.0 * b) + tau)
    }

    /// Highest offset a newcomer may take at the tail of `seg` (`None` when
    /// the entry is blocked).
    fn entry_room(&self, seg: SegmentId) -> Option<f64> {
        let occ = &self.occupants[seg];
        let lanes = self.net.segments()[seg].lanes as usize;
        let mut room = self.net.segments()[seg].length;
        if let Some(&last) = occ.last() {
            room = room.min(self.vehicles[last].offset);
        }
        if occ.len() >= lanes {
            room = room.min(self.vehicles[occ[occ.len() - lanes]].offset - self.cfg.min_gap);
        }
        (room >= 0.0).then_some(room)
    }

    /// Speed for a vehicle placed at the tail of `seg`.
    fn entry_speed(&self, v: &Vehicle, seg: SegmentId, offset: f64) -> f64 {
        let vmax = self.v_max(v, seg);
        let occ = &self.occupants[seg];
        let lanes = self.net.segments()[seg].lanes as usize;
        if occ.len() >= lanes {
            let leader = &self.vehicles[occ[occ.len() - lanes]];
            let gap = leader.offset - offset - self.cfg.min_gap;
            vmax.min(self.safe_speed(vmax, leader.speed, gap).max(0.0))
        } else {
            vmax
        }
    }

    fn record_arrival(&mut self, v: usize, t: f64, resynced: bool) {
        let veh = &self.vehicles[v];
        let wp = veh.spec.waypoints[veh.next_wp];
        if let Some(obs) = wp.observed {
            let rec = ArrivalRecord {
                vehicle_id: veh.spec.id,
                point_index: veh.next_wp,
                t_real: obs - veh.t_obs0(),
                t_sim: (t - veh.spawn_time).max(0.0),
                resynced,
                timed_out: false,
            };
            self.step_records.push(rec);
            self.records.push(rec);
        }
    }

    /// Registers arrival at the current waypoint and plans the next leg.
    fn arrive(&mut self, v: usize, t: f64, resynced: bool) {
        self.record_arrival(v, t, resynced);
        self.vehicles[v].next_wp += 1;
        self.plan(v, t);
    }

    fn plan(&mut self, v: usize, t: f64) {
        let cur = self.vehicles[v].segment;
        let g = self.vehicles[v].spec.group.index();
        let next = self.vehicles[v].next_wp;
        let route = match self.vehicles[v].spec.waypoints.get(next) {
            None => Some(vec![cur]),
            Some(w) if w.segment == cur => self.loop_route(g, cur),
            Some(w) => fastest_path(self.net, cur, w.segment, |s| self.travel_time(s, g)),
        };
        let veh = &mut self.vehicles[v];
        veh.route_pos = 0;
        match route {
            Some(r) => {
                veh.route = r;
                veh.stranded = false;
            }
            None => {
                log::warn!("vehicle {}: no route from segment {cur} at t={t}", veh.spec.id);
                veh.route = vec![cur];
                veh.stranded = true;
                self.routing_failures += 1;
            }
        }
    }

    fn try_spawn(&mut self, v: usize, t: f64) -> bool {
        let seg = self.vehicles[v].spec.waypoints[0].segment;
        match self.entry_room(seg) {
            Some(room) if room >= 0.0 => {
                let speed = self.entry_speed(&self.vehicles[v], seg, 0.0);
                let veh = &mut self.vehicles[v];
                veh.segment = seg;
                veh.offset = 0.0;
                veh.speed = speed;
                veh.spawn_time = t;
                veh.entered_at = t;
                veh.status = VehicleStatus::Active;
                veh.on_network = true;
                veh.push_path(seg, t);
                self.occupants[seg].push(v);
                self.on_network += 1;
                self.arrive(v, t, false);
                true
            }
            _ => false,
        }
    }

    fn try_teleport(&mut self, v: usize, t: f64) {
        let veh = &self.vehicles[v];
        let target = veh.spec.waypoints[veh.next_wp].segment;
        if self.entry_room(target).is_none() {
            return;
        }
        let speed = self.entry_speed(veh, target, 0.0);
        let from = veh.segment;
        let skipped: Vec<SegmentId> = if !veh.stranded && veh.route.last() == Some(&target) && veh.route.len() >= 2 {
            veh.route[veh.route_pos + 1..veh.route.len() - 1].to_vec()
        } else {
            Vec::new()
        };
        self.occupants[from].retain(|&x| x != v);
        let veh = &mut self.vehicles[v];
        let last = veh.path.last().map(|p| p.1).unwrap_or(t);
        let k = skipped.len() as f64 + 1.0;
        for (idx, &s) in skipped.iter().enumerate() {
            veh.push_path(s, last + (t - last) * (idx as f64 + 1.0) / k);
        }
        veh.push_path(target, t);
        veh.segment = target;
        veh.offset = 0.0;
        veh.speed = speed;
        veh.entered_at = t;
        veh.status = VehicleStatus::Resynced;
        self.occupants[target].push(v);
        self.arrive(v, t, true);
    }

    fn micro_step(&mut self) {
        let t = self.now();
        let dt = self.cfg.micro_step;
        let before = self.on_network;
        let mut spawns = 0;
        let mut despawns = 0;

        while self.next_pending < self.pending.len() && self.vehicles[self.pending[self.next_pending]].spec.depart <= t + EPS {
            self.waiting.push(self.pending[self.next_pending]);
            self.next_pending += 1;
        }
        let waiting = std::mem::take(&mut self.waiting);
        for v in waiting {
            if self.try_spawn(v, t) {
                spawns += 1;
            } else {
                self.waiting.push(v);
            }
        }

        if self.cfg.resync {
            let mut due: Vec<usize> = self
                .occupants
                .iter()
                .flatten()
                .copied()
                .filter(|&v| {
                    let veh = &self.vehicles[v];
                    veh.spec
                        .waypoints
                        .get(veh.next_wp)
                        .and_then(|w| w.observed)
                        .is_some_and(|obs| t >= obs + self.cfg.resync_grace - EPS)
                })
                .collect();
            due.sort_unstable();
            for v in due {
                self.try_teleport(v, t);
            }
        }

        // Speeds from the current configuration.
        let m = self.net.num_segments();
        let mut new_speed: Vec<(usize, f64)> = Vec::new();
        for seg in 0..m {
            let lanes = self.net.segments()[seg].lanes as usize;
            let length = self.net.segments()[seg].length;
            for (k, &v) in self.occupants[seg].iter().enumerate() {
                let veh = &self.vehicles[v];
                let vmax = self.v_max(veh, seg);
                let leader = if k >= lanes {
                    let l = &self.vehicles[self.occupants[seg][k - lanes]];
                    Some((l.speed, l.offset - veh.offset - self.cfg.min_gap))
                } else {
                    veh.next_segment().and_then(|ns| {
                        let occ_n = &self.occupants[ns];
                        let ln = self.net.segments()[ns].lanes as usize;
                        // Lane leader after the k vehicles ahead have also crossed.
                        let idx = (occ_n.len() + k).checked_sub(ln)?;
                        let l = &self.vehicles[*occ_n.get(idx)?];
                        Some((l.speed, length - veh.offset + l.offset - self.cfg.min_gap))
                    })
                };
                let mut s = (veh.speed + self.cfg.max_accel * dt).min(vmax);
                if let Some((vl, gap)) = leader {
                    s = s.min(self.safe_speed(veh.speed, vl, gap));
                }
                s = s.max(0.0);
                if self.cfg.dawdle > 0.0 {
                    let u: f64 = self.rng.random();
                    s = (s - self.cfg.dawdle * self.cfg.max_accel * dt * u).max(0.0);
                }
                new_speed.push((v, s));
            }
        }

        // Positions: no overtaking, same-lane spacing kept.
        let mut it = new_speed.iter();
        for seg in 0..m {
            let lanes = self.net.segments()[seg].lanes as usize;
            let mut offs: Vec<f64> = Vec::with_capacity(self.occupants[seg].len());
            for k in 0..self.occupants[seg].len() {
                let &(v, s) = it.next().expect("one speed per occupant");
                let old = self.vehicles[v].offset;
                let mut o = old + s * dt;
                if k >= 1 {
                    o = o.min(offs[k - 1]);
                }
                if k >= lanes {
                    o = o.min(offs[k - lanes] - self.cfg.min_gap);
                }
                o = o.max(old);
                offs.push(o);
            }
            for (k, &o) in offs.iter().enumerate() {
                let veh = &mut self.vehicles[self.occupants[seg][k]];
                veh.step_moved = o - veh.offset;
                veh.offset = o;
            }
        }

        // Hand over vehicles past the end of their segment, head first.
        for seg in 0..m {
            let length = self.net.segments()[seg].length;
            while let Some(&v) = self.occupants[seg].first() {
                if self.vehicles[v].offset < length {
                    break;
                }
                let old = self.vehicles[v].offset - self.vehicles[v].step_moved;
                let excess = self.vehicles[v].offset - length;
                match self.vehicles[v].next_segment() {
                    None => {
                        self.occupants[seg].remove(0);
                        let veh = &mut self.vehicles[v];
                        self.acc.trav_sum[seg] += t + dt - veh.entered_at;
                        self.acc.trav_cnt[seg] += 1;
                        veh.on_network = false;
                        veh.speed = veh.step_moved / dt;
                        veh.status = if veh.next_wp >= veh.spec.waypoints.len() {
                            VehicleStatus::ArrivedAll
                        } else {
                            VehicleStatus::TimedOut
                        };
                        self.on_network -= 1;
                        despawns += 1;
                    }
                    Some(ns) => {
                        let Some(room) = self.entry_room(ns) else { break };
                        let entry = excess.min(room).min(self.net.segments()[ns].length);
                        let travelled = length - old + entry;
                        let frac = if travelled > 0.0 { (length - old) / travelled } else { 1.0 };
                        let t_entry = t + dt * frac;
                        self.occupants[seg].remove(0);
                        self.acc.trav_sum[seg] += t_entry - self.vehicles[v].entered_at;
                        self.acc.trav_cnt[seg] += 1;
                        let veh = &mut self.vehicles[v];
                        veh.segment = ns;
                        veh.offset = entry;
                        veh.step_moved = travelled;
                        veh.entered_at = t_entry;
                        veh.route_pos += 1;
                        veh.push_path(ns, t_entry);
                        self.occupants[ns].push(v);
                        let at_target = !veh.stranded && veh.route_pos + 1 == veh.route.len();
                        if at_target && veh.next_wp < veh.spec.waypoints.len() {
                            self.arrive(v, t_entry, false);
                        }
                    }
                }
            }
            // Vehicles behind a blocked head stop short of the segment end.
            let lanes = self.net.segments()[seg].lanes as usize;
            for k in 0..self.occupants[seg].len() {
                let mut o = self.vehicles[self.occupants[seg][k]].offset.min(length);
                if k >= 1 {
                    o = o.min(self.vehicles[self.occupants[seg][k - 1]].offset);
                }
                if k >= lanes {
                    o = o.min(self.vehicles[self.occupants[seg][k - lanes]].offset - self.cfg.min_gap);
                }
                let veh = &mut self.vehicles[self.occupants[seg][k]];
                veh.step_moved -= veh.offset - o;
                veh.offset = o;
            }
        }

        // Realised speeds and statistics.
        for seg in 0..m {
            for &v in &self.occupants[seg] {
                let veh = &mut self.vehicles[v];
                veh.speed = veh.step_moved / dt;
                self.acc.speed_sum[seg] += veh.speed;
                self.acc.samples[seg] += 1;
                if veh.speed < WAIT_SPEED {
                    self.acc.wait_sum[seg] += dt;
                }
                if veh.mark != Some((seg, self.macro_index)) {
                    veh.mark = Some((seg, self.macro_index));
                    self.acc.distinct[seg] += 1;
                }
            }
        }

        self.ticks += 1;
        if let Some(log) = self.balance_log.as_mut() {
            log.push(MicroBalance { time: t, before, after: self.on_network, spawns, despawns });
        }
    }

    /// Advances one macro step (or less if the end time falls inside it).
    pub fn macro_step(&mut self) -> StepOutput {
        self.step_records.clear();
        for _ in 0..self.cfg.micro_per_macro() {
            if self.now() >= self.end_time - EPS {
                break;
            }
            self.micro_step();
        }
        let m = self.net.num_segments();
        let mut f = vec![0.0; 4 * m];
        for seg in 0..m {
            let a = &self.acc;
            f[4 * seg] = self.occupants[seg].len() as f64;
            if a.trav_cnt[seg] > 0 {
                f[4 * seg + 1] = a.trav_sum[seg] / a.trav_cnt[seg] as f64;
            }
            if a.samples[seg] > 0 {
                f[4 * seg + 2] = a.speed_sum[seg] / a.samples[seg] as f64;
            }
            if a.distinct[seg] > 0 {
                f[4 * seg + 3] = a.wait_sum[seg] / a.distinct[seg] as f64;
            }
        }
        self.acc = Accumulators::new(m);
        self.macro_index += 1;
        StepOutput { features: StateFeatures(f), arrivals: std::mem::take(&mut self.step_records) }
    }

    /// Emits timeout records for every itinerary point still outstanding.
    pub fn finalize(&mut self) -> Vec<ArrivalRecord> {
        if self.finalized {
            return Vec::new();
        }
        self.finalized = true;
        let end = self.now();
        let mut out = Vec::new();
        for veh in &mut self.vehicles {
            let spawned = veh.status != VehicleStatus::Pending;
            let base = if spawned { veh.spawn_time } else { veh.spec.depart };
            let t0 = veh.t_obs0();
            for j in veh.next_wp..veh.spec.waypoints.len() {
                if let Some(obs) = veh.spec.waypoints[j].observed {
                    out.push(ArrivalRecord {
                        vehicle_id: veh.spec.id,
                        point_index: j,
                        t_real: obs - t0,
                        t_sim: if j == 0 { 0.0 } else { (end - base).max(0.0) },
                        resynced: false,
                        timed_out: true,
                    });
                }
            }
            if (veh.next_wp < veh.spec.waypoints.len() || veh.on_network || !spawned) && veh.status != VehicleStatus::ArrivedAll {
                veh.status = VehicleStatus::TimedOut;
            }
        }
        self.records.extend(out.iter().copied());
        out
    }

    /// Full segment-level paths (entry timestamps) of every spawned vehicle.
    pub fn recovered(&self, kind: TrajectoryKind) -> TrajectorySet {
        let mut order: Vec<usize> = (0..self.vehicles.len()).collect();
        order.sort_by_key(|&v| self.vehicles[v].spec.id);
        order
            .into_iter()
            .filter(|&v| !self.vehicles[v].path.is_empty())
            .map(|v| {
                let veh = &self.vehicles[v];
                Trajectory {
                    vehicle_id: veh.spec.id,
                    kind,
                    group: veh.spec.group,
                    points: veh.path.iter().map(|&(s, t)| TrajectoryPoint::entry(s, t)).collect(),
                }
            })
            .collect()
    }

    /// Runs until every vehicle is done or the end time is reached.
    pub fn run_to_completion(mut self) -> (TrajectorySet, Vec<ArrivalRecord>) {
        while !self.finished() {
            self.macro_step();
        }
        self.finalize();
        let set = self.recovered(TrajectoryKind::Recovered);
        (set, self.records)
    }
}
