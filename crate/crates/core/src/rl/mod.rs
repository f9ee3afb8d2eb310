//! Deep Q-learning over group speed-limit adjustments.

mod qnet;
mod replay;

use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use qnet::{Adam, Dense, Grads, LayerRecord, ModelRecord, QNetwork};
pub use replay::{ReplayMemory, Transition};

use crate::network::{RoadNetwork, SPEED_LIMIT_MAX, SPEED_LIMIT_MIN};
use crate::seeds::rng_for;
use crate::sim::{new_sim, recovery_error, ArrivalRecord, SimConfig, SimError, StateFeatures};
use crate::trajectory::{TrajectorySet, VehicleGroup};

pub const NUM_ACTIONS: usize = 9;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("state has {actual} features, network expects {expected}")]
    Shape { expected: usize, actual: usize },
    #[error("non-finite loss at batch item {index}")]
    NonFiniteLoss { index: usize },
    #[error("bad model: {0}")]
    Model(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("episode {episode}: {source}")]
    Episode { episode: usize, source: SimError },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// `(group, delta)` for every action index, group-major with deltas −1, 0, +1.
pub const ACTIONS: [(VehicleGroup, i32); NUM_ACTIONS] = [
    (VehicleGroup::Sedan, -1),
    (VehicleGroup::Sedan, 0),
    (VehicleGroup::Sedan, 1),
    (VehicleGroup::Suv, -1),
    (VehicleGroup::Suv, 0),
    (VehicleGroup::Suv, 1),
    (VehicleGroup::Truck, -1),
    (VehicleGroup::Truck, 0),
    (VehicleGroup::Truck, 1),
];

pub fn action_index(group: VehicleGroup, delta: i32) -> usize {
    group.index() * 3 + (delta + 1) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_episodes: usize,
    pub episodes: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub replay_capacity: usize,
    pub hidden: Vec<usize>,
    /// Time unit (s) of the arrival differences inside the reward exponent.
    pub reward_time_unit_s: f64,
    /// Length of the simulated window per episode; `None` replays the whole horizon.
    pub episode_window_s: Option<f64>,
    /// Greedy full-horizon evaluation every this many episodes (0 disables);
    /// the best evaluated network is returned.
    pub eval_every: usize,
    /// Divisors for `[count, traverse_s, speed, wait_s]` before they reach the network.
    pub feature_scale: [f64; 4],
    /// Exploring starts: each training episode draws every group's initial
    /// limit uniformly from this range instead of using the configured ones.
    pub initial_limit_range: Option<(f64, f64)>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.8,
            lr: 1e-4,
            batch: 128,
            eps_start: 0.5,
            eps_end: 0.01,
            eps_decay_episodes: 2000,
            episodes: 200,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            replay_capacity: 10_000,
            hidden: vec![256, 256],
            reward_time_unit_s: 60.0,
            episode_window_s: Some(7200.0),
            eval_every: 10,
            feature_scale: [10.0, 60.0, 10.0, 60.0],
            initial_limit_range: Some((SPEED_LIMIT_MIN, SPEED_LIMIT_MAX)),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::InvalidConfig(m.into()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if !(self.eps_start >= self.eps_end && self.eps_end >= 0.0 && self.eps_start <= 1.0) {
            return bad("need 1 >= eps_start >= eps_end >= 0");
        }
        if !(self.lr > 0.0) || self.replay_capacity == 0 || !(self.reward_time_unit_s > 0.0) {
            return bad("lr, replay capacity and reward time unit must be positive");
        }
        if self.feature_scale.iter().any(|&f| !(f > 0.0)) {
            return bad("feature scales must be positive");
        }
        if matches!(self.episode_window_s, Some(w) if !(w > 0.0)) {
            return bad("episode window must be positive");
        }
        if let Some((lo, hi)) = self.initial_limit_range {
            if !(SPEED_LIMIT_MIN <= lo && lo <= hi && hi <= SPEED_LIMIT_MAX) {
                return bad("initial limit range must lie within [1, 40]");
            }
        }
        Ok(())
    }

    pub fn dims(&self, state_dim: usize) -> Vec<usize> {
        let mut d = vec![state_dim];
        d.extend(&self.hidden);
        d.push(NUM_ACTIONS);
        d
    }
}

/// Linear decay from `eps_start` to `eps_end`, flat afterwards.
pub fn epsilon_at(cfg: &TrainConfig, episode: usize) -> f64 {
    if episode >= cfg.eps_decay_episodes {
        return cfg.eps_end;
    }
    cfg.eps_start + (cfg.eps_end - cfg.eps_start) * episode as f64 / cfg.eps_decay_episodes as f64
}

/// `Σ exp(−|t_sim − t_real| / unit)` over the given arrivals.
pub fn reward(arrived: &[ArrivalRecord], time_unit: f64) -> f64 {
    arrived.iter().map(|r| (-(r.t_sim - r.t_real).abs() / time_unit).exp()).sum()
}

pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = k;
        }
    }
    best
}

/// ε-greedy; ties go to the lowest index.
pub fn select_action<R: Rng>(net: &QNetwork, s: &[f64], eps: f64, rng: &mut R) -> Result<usize, RlError> {
    if eps > 0.0 && rng.random::<f64>() < eps {
        return Ok(rng.random_range(0..NUM_ACTIONS));
    }
    Ok(argmax(&net.q_values(s)?))
}

pub fn td_target(r: f64, s_next: &[f64], net: &QNetwork, terminal: bool, gamma: f64) -> Result<f64, RlError> {
    if terminal {
        return Ok(r);
    }
    let q = net.q_values(s_next)?;
    Ok(r + gamma * q.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// One Adam update on the mean squared TD error; returns the pre-update loss.
pub fn train_step(net: &mut QNetwork, adam: &mut Adam, batch: &[&Transition], gamma: f64) -> Result<f64, RlError> {
    let b = batch.len();
    let d = net.input_dim();
    let mut x = Array2::<f64>::zeros((b, d));
    let mut xn = Array2::<f64>::zeros((b, d));
    for (r, t) in batch.iter().enumerate() {
        if t.s.len() != d || t.s_next.len() != d {
            return Err(RlError::Shape { expected: d, actual: if t.s.len() != d { t.s.len() } else { t.s_next.len() } });
        }
        x.row_mut(r).assign(&ndarray::ArrayView1::from(&t.s[..]));
        xn.row_mut(r).assign(&ndarray::ArrayView1::from(&t.s_next[..]));
    }
    let qn = net.forward(xn.view());
    let mut targets = Vec::with_capacity(b);
    for (r, t) in batch.iter().enumerate() {
        let y = if t.terminal {
            t.r
        } else {
            t.r + gamma * qn.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max)
        };
        targets.push(y);
    }
    let actions: Vec<usize> = batch.iter().map(|t| t.a).collect();
    let (loss, grads) = net.loss_and_grad(x.view(), &actions, &targets);
    if !loss.is_finite() {
        let q = net.forward(x.view());
        let index = (0..b).find(|&r| !(q[[r, actions[r]]] - targets[r]).is_finite()).unwrap_or(0);
        return Err(RlError::NonFiniteLoss { index });
    }
    adam.step(net, &grads);
    Ok(loss)
}

pub fn scale_features(f: &StateFeatures, scale: &[f64; 4]) -> Vec<f64> {
    f.0.iter().enumerate().map(|(k, v)| v / scale[k % 4]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub total_reward: f64,
    pub recovery_error_s: f64,
    pub epsilon: f64,
    pub window_start_s: f64,
    pub mean_loss: f64,
    /// Macro steps taken with an action (transitions stored).
    pub steps: usize,
    pub train_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub episode: usize,
    pub recovery_error_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best network under greedy full-horizon evaluation (the last one when
    /// evaluation is off).
    pub network: QNetwork,
    pub final_network: QNetwork,
    pub log: Vec<EpisodeLog>,
    pub evals: Vec<EvalPoint>,
}

pub fn write_log_csv<W: Write>(log: &[EpisodeLog], mut w: W) -> std::io::Result<()> {
    writeln!(w, "episode,total_reward,recovery_error_s,epsilon")?;
    for e in log {
        writeln!(w, "{},{},{},{}", e.episode, e.total_reward, e.recovery_error_s, e.epsilon)?;
    }
    Ok(())
}

pub enum Policy<'n> {
    /// Keep the configured limits.
    Fixed,
    Greedy { net: &'n QNetwork, feature_scale: [f64; 4] },
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub recovered: TrajectorySet,
    pub records: Vec<ArrivalRecord>,
    pub error: f64,
    /// Group limits after every macro step.
    pub limit_trace: Vec<[f64; 3]>,
}

/// Recovers the incomplete trajectories with the simulator driven by `policy`.
pub fn rollout(
    net: &RoadNetwork,
    incomplete: &TrajectorySet,
    sim_cfg: &SimConfig,
    policy: &Policy,
) -> Result<Rollout, RlError> {
    let (mut sim, _) = new_sim(net, incomplete, sim_cfg.clone())?;
    let mut trace = Vec::new();
    let mut s = sim.macro_step().features;
    trace.push(sim.limits());
    while !sim.finished() {
        if let Policy::Greedy { net: q, feature_scale } = policy {
            let a = argmax(&q.q_values(&scale_features(&s, feature_scale))?);
            let (g, d) = ACTIONS[a];
            sim.apply_action(g, d);
        }
        s = sim.macro_step().features;
        trace.push(sim.limits());
    }
    sim.finalize();
    let recovered = sim.recovered(crate::trajectory::TrajectoryKind::Recovered);
    let records = sim.records().to_vec();
    let error = if records.is_empty() { 0.0 } else { recovery_error(&records)? };
    Ok(Rollout { recovered, records, error, limit_trace: trace })
}

/// Window starts cycling through the span of observed first timestamps.
fn windows(incomplete: &TrajectorySet, window: f64) -> Vec<f64> {
    let firsts = incomplete.iter().filter_map(|t| t.points.first().map(|p| p.timestamp));
    let (lo, hi) = firsts.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
    if !lo.is_finite() {
        return vec![0.0];
    }
    let count = (((hi - lo) / window).floor() as usize) + 1;
    (0..count).map(|k| lo + k as f64 * window).collect()
}

/// Deep Q-learning: per macro step pick an action ε-greedily, apply it,
/// advance, reward the arrivals, store the transition and train on a sampled
/// mini-batch once the memory holds a full batch.
pub fn train(
    net: &RoadNetwork,
    incomplete: &TrajectorySet,
    sim_cfg: &SimConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, RlError> {
    cfg.validate()?;
    sim_cfg.validate()?;
    let state_dim = StateFeatures::PER_SEGMENT * net.num_segments();
    let mut rng = rng_for(cfg.seed, "rl");
    let mut q = QNetwork::new(&cfg.dims(state_dim), &mut rng);
    let mut adam = Adam::new(&q, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut memory = ReplayMemory::new(cfg.replay_capacity);
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut evals = Vec::new();
    let mut best: Option<(f64, QNetwork)> = None;

    let starts = match cfg.episode_window_s {
        Some(w) => windows(incomplete, w),
        None => vec![sim_cfg.start_time],
    };
    let mut order: Vec<usize> = Vec::new();

    let mut evaluate = |q: &QNetwork, episode: usize, best: &mut Option<(f64, QNetwork)>| -> Result<(), RlError> {
        let policy = Policy::Greedy { net: q, feature_scale: cfg.feature_scale };
        let r = rollout(net, incomplete, sim_cfg, &policy)?;
        evals.push(EvalPoint { episode, recovery_error_s: r.error });
        log::info!("greedy evaluation after {episode} episodes: recovery error {:.3} s", r.error);
        if best.as_ref().is_none_or(|(e, _)| r.error < *e) {
            *best = Some((r.error, q.clone()));
        }
        Ok(())
    };

    for episode in 0..cfg.episodes {
        let eps = epsilon_at(cfg, episode);
        if order.is_empty() {
            order = (0..starts.len()).collect();
            order.shuffle(&mut rng);
        }
        let start = starts[order.pop().expect("refilled above")];
        let (subset, ep_cfg) = match cfg.episode_window_s {
            Some(w) => {
                let subset: TrajectorySet = incomplete
                    .iter()
                    .filter(|t| t.points.first().is_some_and(|p| p.timestamp >= start && p.timestamp < start + w))
                    .cloned()
                    .collect();
                (subset, SimConfig { start_time: start, end_time: Some(start + w), ..sim_cfg.clone() })
            }
            None => (incomplete.clone(), sim_cfg.clone()),
        };
        let (mut sim, _) = new_sim(net, &subset, ep_cfg).map_err(|source| RlError::Episode { episode, source })?;
        if let Some((lo, hi)) = cfg.initial_limit_range {
            sim.set_limits([(); 3].map(|_| rng.random_range(lo..=hi)));
        }
        let mut s = scale_features(&sim.macro_step().features, &cfg.feature_scale);
        let mut total_reward = 0.0;
        let mut loss_sum = 0.0;
        let mut steps = 0;
        let mut transitions = 0;
        while !sim.finished() {
            let a = select_action(&q, &s, eps, &mut rng)?;
            let (g, d) = ACTIONS[a];
            sim.apply_action(g, d);
            let out = sim.macro_step();
            // Spawn records carry no information about the limits.
            let arrived: Vec<ArrivalRecord> = out.arrivals.into_iter().filter(|r| r.point_index > 0).collect();
            let r = reward(&arrived, cfg.reward_time_unit_s);
            total_reward += r;
            let s_next = scale_features(&out.features, &cfg.feature_scale);
            let terminal = sim.finished();
            memory.push(Transition { s: std::mem::take(&mut s), a, s_next: s_next.clone(), r, terminal });
            transitions += 1;
            if memory.len() >= cfg.batch {
                let batch = memory.sample(cfg.batch, &mut rng);
                loss_sum += train_step(&mut q, &mut adam, &batch, cfg.gamma)?;
                steps += 1;
            }
            s = s_next;
        }
        sim.finalize();
        let err = if sim.records().is_empty() { 0.0 } else { recovery_error(sim.records())? };
        log.push(EpisodeLog {
            episode,
            total_reward,
            recovery_error_s: err,
            epsilon: eps,
            window_start_s: start,
            mean_loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
            steps: transitions,
            train_steps: steps,
        });
        log::debug!("episode {episode}: reward {total_reward:.2}, error {err:.2} s, eps {eps:.3}");
        if cfg.eval_every > 0 && (episode + 1) % cfg.eval_every == 0 {
            evaluate(&q, episode + 1, &mut best)?;
        }
    }
    let network = match best {
        Some((_, b)) => b,
        None => q.clone(),
    };
    Ok(TrainOutcome { network, final_network: q, log, evals })
}
