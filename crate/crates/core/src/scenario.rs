//! Synthetic grid scenarios: network, ground-truth traffic, sensor placement,
//! and the versioned scenario file.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{Node, RoadClass, RoadNetwork, RoadSegment, SegmentId};
use crate::seeds::{derive_seed, rng_for};
use crate::sim::{fastest_path, SimConfig, SimError, Simulator, VehicleSpec, Waypoint};
use crate::trajectory::{
    count_volumes, cut_on_gaps, downsample_to_monitors, CountReport, TrajectoryError, TrajectoryKind, TrajectorySet,
    VehicleGroup, VolumeTensor, DEFAULT_GAP_THRESHOLD_S,
};

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed scenario at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("scenario file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

impl From<serde_json::Error> for ScenarioError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            return ScenarioError::Io(e.into());
        }
        ScenarioError::Parse { line: e.line(), column: e.column(), message: e.to_string() }
    }
}

/// Time-of-day demand shape, periodic over 24 h.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemandProfile {
    /// Relative intensity 0–6 h.
    pub night_level: f64,
    /// Relative intensity 22–24 h.
    pub evening_level: f64,
    pub am_peak_hour: f64,
    pub pm_peak_hour: f64,
    pub peak_width_h: f64,
    /// Peak height relative to the daytime level.
    pub peak_height: f64,
}

impl Default for DemandProfile {
    fn default() -> Self {
        DemandProfile {
            night_level: 0.25,
            evening_level: 0.5,
            am_peak_hour: 8.0,
            pm_peak_hour: 17.5,
            peak_width_h: 1.0,
            peak_height: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TripKind {
    Random,
    /// Residential to business.
    Inbound,
    Outbound,
}

impl DemandProfile {
    /// `[random, inbound, outbound]` intensities at time `t` seconds.
    fn components(&self, t: f64) -> [f64; 3] {
        let h = (t / 3600.0).rem_euclid(24.0);
        let base = if h < 6.0 {
            self.night_level
        } else if h < 22.0 {
            1.0
        } else {
            self.evening_level
        };
        let bump = |centre: f64| {
            let d = (h - centre).abs().min(24.0 - (h - centre).abs());
            self.peak_height * (-(d * d) / (2.0 * self.peak_width_h * self.peak_width_h)).exp()
        };
        [base, bump(self.am_peak_hour), bump(self.pm_peak_hour)]
    }

    fn max_intensity(&self) -> f64 {
        self.night_level.max(self.evening_level).max(1.0) + 2.0 * self.peak_height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub rows: usize,
    pub cols: usize,
    pub spacing_m: f64,
    pub jitter_m: f64,
    pub vehicles: usize,
    pub taxi_fraction: f64,
    pub monitored_fraction: f64,
    pub interval_seconds: f64,
    pub horizon: usize,
    /// Hidden group limits that drive the ground-truth simulation.
    pub true_group_limits: [f64; 3],
    /// Sedan / SUV / truck shares.
    pub group_mix: [f64; 3],
    /// Drivers aim for `U(speed_factor_min, 1)` times their group limit.
    pub speed_factor_min: f64,
    pub dawdle: f64,
    pub business_centers: usize,
    pub demand: DemandProfile,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            rows: 5,
            cols: 5,
            spacing_m: 300.0,
            jitter_m: 30.0,
            vehicles: 24_000,
            taxi_fraction: 0.1,
            monitored_fraction: 0.25,
            interval_seconds: 300.0,
            horizon: 288,
            true_group_limits: [13.0, 12.0, 10.0],
            group_mix: [0.6, 0.3, 0.1],
            speed_factor_min: 0.85,
            dawdle: 0.1,
            business_centers: 2,
            demand: DemandProfile::default(),
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::InvalidConfig(m));
        if self.rows < 2 || self.cols < 2 {
            return bad(format!("grid {}x{} is smaller than 2x2", self.rows, self.cols));
        }
        if self.vehicles == 0 {
            return bad("vehicle count must be at least 1".into());
        }
        for (name, f) in [("taxi_fraction", self.taxi_fraction), ("monitored_fraction", self.monitored_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {f}"));
            }
        }
        if !(self.spacing_m > 0.0) || !(self.jitter_m >= 0.0) || self.jitter_m * 2.0 >= self.spacing_m {
            return bad("spacing must be positive and exceed twice the jitter".into());
        }
        if !(self.interval_seconds > 0.0) || self.horizon == 0 {
            return bad("interval and horizon must be positive".into());
        }
        if self.group_mix.iter().any(|&w| !(w >= 0.0)) || self.group_mix.iter().sum::<f64>() <= 0.0 {
            return bad("group mix must be non-negative with positive total".into());
        }
        if !(self.speed_factor_min > 0.0 && self.speed_factor_min <= 1.0) {
            return bad("speed_factor_min must lie in (0, 1]".into());
        }
        if self.business_centers == 0 {
            return bad("need at least one business center".into());
        }
        Ok(())
    }

    pub fn num_segments(&self) -> usize {
        2 * (self.rows * (self.cols - 1) + self.cols * (self.rows - 1))
    }

    /// `⌊f·m⌋`, at least one.
    pub fn num_monitored(&self) -> usize {
        ((self.monitored_fraction * self.num_segments() as f64).floor() as usize).max(1)
    }
}

/// Sensor setup plus the hidden facts the recovery stage must not see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub taxi_fraction: f64,
    pub monitored_fraction: f64,
    pub monitor_seed: u64,
    pub taxi_ids: Vec<u64>,
    pub true_group_limits: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub version: u32,
    pub network: RoadNetwork,
    /// Ground-truth segment paths of every vehicle.
    pub trajectories: TrajectorySet,
    /// Fully observed ground-truth volumes.
    pub volumes: VolumeTensor,
    pub sensor_config: SensorConfig,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenReport {
    /// Trips skipped because the destination is unreachable from the origin.
    pub infeasible: usize,
    pub count: CountReport,
}

impl Scenario {
    pub fn interval_seconds(&self) -> f64 {
        self.volumes.interval_seconds
    }

    pub fn horizon(&self) -> usize {
        self.volumes.n
    }

    pub fn num_segments(&self) -> usize {
        self.network.num_segments()
    }

    /// Taxi trajectories, cut on long gaps.
    pub fn dense_view(&self) -> TrajectorySet {
        let taxis: BTreeSet<u64> = self.sensor_config.taxi_ids.iter().copied().collect();
        let set: TrajectorySet = self.trajectories.iter().filter(|t| taxis.contains(&t.vehicle_id)).cloned().collect();
        cut_on_gaps(&set, DEFAULT_GAP_THRESHOLD_S)
    }

    /// What the monitors record of every vehicle; vehicles never seen are dropped.
    pub fn incomplete_view(&self) -> TrajectorySet {
        self.trajectories
            .iter()
            .map(|t| downsample_to_monitors(t, &self.network))
            .filter(|t| !t.points.is_empty())
            .collect()
    }

    /// Incomplete view with the `hidden` monitors switched off, together with
    /// the network carrying the reduced monitor set.
    pub fn incomplete_view_hiding(&self, hidden: &[SegmentId]) -> (RoadNetwork, TrajectorySet) {
        let monitors = self.network.monitor_points().iter().copied().filter(|i| !hidden.contains(i)).collect();
        let net = self.network.clone().with_monitors(monitors);
        let set = self
            .trajectories
            .iter()
            .map(|t| downsample_to_monitors(t, &net))
            .filter(|t| !t.points.is_empty())
            .collect();
        (net, set)
    }

    /// True when the stored volumes are exactly the counts of the stored trajectories.
    pub fn volumes_consistent(&self) -> bool {
        match count_volumes(&self.trajectories, &self.network, self.interval_seconds(), self.horizon()) {
            Ok((v, _)) => v == self.volumes,
            Err(_) => false,
        }
    }
}

/// Grid network with jittered intersections. The middle row and column are
/// major roads; U-turns are forbidden everywhere.
pub fn grid_network(cfg: &GenConfig) -> RoadNetwork {
    let mut rng = rng_for(cfg.seed, "network");
    let (rows, cols) = (cfg.rows, cfg.cols);
    let mut nodes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let jx = rng.random_range(-1.0..=1.0) * cfg.jitter_m;
            let jy = rng.random_range(-1.0..=1.0) * cfg.jitter_m;
            nodes.push(Node { id: r * cols + c, x: c as f64 * cfg.spacing_m + jx, y: r as f64 * cfg.spacing_m + jy });
        }
    }
    let mut edges: Vec<(usize, usize, bool)> = Vec::new();
    for r in 0..rows {
        for c in 0..cols - 1 {
            edges.push((r * cols + c, r * cols + c + 1, r == rows / 2));
        }
    }
    for c in 0..cols {
        for r in 0..rows - 1 {
            edges.push((r * cols + c, (r + 1) * cols + c, c == cols / 2));
        }
    }
    let mut segments = Vec::with_capacity(2 * edges.len());
    let mut uturns = BTreeSet::new();
    for (a, b, major) in edges {
        let length = ((nodes[a].x - nodes[b].x).powi(2) + (nodes[a].y - nodes[b].y).powi(2)).sqrt();
        let (class, lanes, limit) = if major {
            (RoadClass::Major, 2, 22.0 + 3.0 * rng.random::<f64>())
        } else {
            (RoadClass::Secondary, 1, 15.0)
        };
        let id = segments.len();
        for (k, (from, to)) in [(a, b), (b, a)].into_iter().enumerate() {
            segments.push(RoadSegment {
                id: id + k,
                from_node: from,
                to_node: to,
                length,
                lanes,
                road_class: class,
                speed_limit: limit,
                monitored: false,
            });
        }
        uturns.insert((id, id + 1));
        uturns.insert((id + 1, id));
    }
    let net = RoadNetwork::new(nodes, segments, uturns, BTreeSet::new());
    let k = cfg.num_monitored().min(net.num_segments() - 1);
    let mut mrng = rng_for(cfg.seed, "monitors");
    let monitors: BTreeSet<SegmentId> = sample(&mut mrng, net.num_segments(), k).into_iter().collect();
    net.with_monitors(monitors)
}

fn sample_time(profile: &DemandProfile, horizon_s: f64, rng: &mut impl Rng) -> (f64, TripKind) {
    let cap = profile.max_intensity();
    loop {
        let t = rng.random_range(0.0..horizon_s);
        let c = profile.components(t);
        let total: f64 = c.iter().sum();
        if rng.random::<f64>() * cap <= total {
            let u = rng.random::<f64>() * total;
            let kind = if u < c[0] {
                TripKind::Random
            } else if u < c[0] + c[1] {
                TripKind::Inbound
            } else {
                TripKind::Outbound
            };
            return (t, kind);
        }
    }
}

/// Generates a scenario: grid, monitors, demand, ground-truth simulation and
/// counted volumes. Deterministic in `cfg.seed`.
pub fn generate_scenario(cfg: &GenConfig) -> Result<(Scenario, GenReport), ScenarioError> {
    cfg.validate()?;
    let net = grid_network(cfg);
    let m = net.num_segments();

    let mut drng = rng_for(cfg.seed, "demand");
    let centers: Vec<(f64, f64)> = (0..cfg.business_centers)
        .map(|_| {
            let n = &net.nodes()[drng.random_range(0..net.nodes().len())];
            (n.x, n.y)
        })
        .collect();
    let reach = 1.5 * cfg.spacing_m;
    let score: Vec<f64> = (0..m)
        .map(|s| {
            let (x, y) = net.centroid(s).expect("segment ids are dense");
            centers
                .iter()
                .map(|&(cx, cy)| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * reach * reach)).exp())
                .fold(0.0, f64::max)
        })
        .collect();
    let uniform = WeightedIndex::new(vec![1.0; m]).expect("non-empty network");
    let business = WeightedIndex::new(score.iter().map(|s| s + 0.05)).expect("positive weights");
    let residential = WeightedIndex::new(score.iter().map(|s| 1.05 - s)).expect("positive weights");
    let groups = WeightedIndex::new(cfg.group_mix).expect("validated mix");

    let horizon_s = cfg.interval_seconds * cfg.horizon as f64;
    let free_time = |s: SegmentId| net.segments()[s].length / net.segments()[s].speed_limit;
    let mut report = GenReport::default();
    let mut specs = Vec::with_capacity(cfg.vehicles);
    for id in 0..cfg.vehicles as u64 {
        let (depart, kind) = sample_time(&cfg.demand, horizon_s, &mut drng);
        let (from, to) = match kind {
            TripKind::Random => (&uniform, &uniform),
            TripKind::Inbound => (&residential, &business),
            TripKind::Outbound => (&business, &residential),
        };
        let o = from.sample(&mut drng);
        let mut d = to.sample(&mut drng);
        for _ in 0..16 {
            if d != o {
                break;
            }
            d = to.sample(&mut drng);
        }
        let group = VehicleGroup::ALL[groups.sample(&mut drng)];
        let speed_factor = drng.random_range(cfg.speed_factor_min..=1.0);
        if d == o || fastest_path(&net, o, d, free_time).is_none() {
            report.infeasible += 1;
            continue;
        }
        specs.push(VehicleSpec {
            id,
            group,
            speed_factor,
            depart,
            waypoints: vec![Waypoint { segment: o, observed: None }, Waypoint { segment: d, observed: None }],
        });
    }

    let n_taxi = ((cfg.taxi_fraction * specs.len() as f64).round() as usize).min(specs.len());
    let mut trng = rng_for(cfg.seed, "taxis");
    let mut taxi_ids: Vec<u64> = sample(&mut trng, specs.len(), n_taxi).into_iter().map(|k| specs[k].id).collect();
    taxi_ids.sort_unstable();

    let sim_cfg = SimConfig {
        group_limits: cfg.true_group_limits,
        dawdle: cfg.dawdle,
        resync: false,
        seed: derive_seed(cfg.seed, "ground-truth"),
        end_time: Some(horizon_s + 3600.0),
        ..SimConfig::default()
    };
    let sim = Simulator::from_specs(&net, specs, sim_cfg)?;
    let (mut trajectories, _) = sim.run_to_completion();
    for t in &mut trajectories.0 {
        t.kind = TrajectoryKind::Dense;
    }
    let (volumes, count) = count_volumes(&trajectories, &net, cfg.interval_seconds, cfg.horizon)?;
    report.count = count;
    let scenario = Scenario {
        version: SCENARIO_VERSION,
        network: net,
        trajectories,
        volumes,
        sensor_config: SensorConfig {
            taxi_fraction: cfg.taxi_fraction,
            monitored_fraction: cfg.monitored_fraction,
            monitor_seed: derive_seed(cfg.seed, "monitors"),
            taxi_ids,
            true_group_limits: cfg.true_group_limits,
        },
    };
    Ok((scenario, report))
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

pub fn write_scenario<W: Write>(s: &Scenario, w: W) -> Result<(), ScenarioError> {
    serde_json::to_writer(w, s)?;
    Ok(())
}

pub fn read_scenario<R: Read>(mut r: R) -> Result<Scenario, ScenarioError> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let probe: VersionProbe = serde_json::from_str(&text)?;
    if probe.version != SCENARIO_VERSION {
        return Err(ScenarioError::VersionMismatch { found: probe.version, expected: SCENARIO_VERSION });
    }
    Ok(serde_json::from_str(&text)?)
}

pub fn save_scenario(s: &Scenario, path: &Path) -> Result<(), ScenarioError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_scenario(s, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    read_scenario(BufReader::new(File::open(path)?))
}
