//! End-to-end orchestration: recovery, graphs, embedding, inference and
//! evaluation, plus the ablation and alpha-sweep experiments.

mod artifacts;
mod config;
mod run;

pub use artifacts::*;
pub use config::*;
pub use run::*;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{joint_train, EmbedConfig, EmbedError, EmbeddingTable};
use crate::evaluation::{
    baseline_contextual_average, baseline_graph_ssl, baseline_linear_regression, baseline_spatial_knn, evaluate_run,
    write_per_class_csv, write_per_hour_csv, EvalError, EvalSplit, MetricReport,
};
use crate::inference::{build_masked_graph, graph_from_st, solve, solve_unmasked, InferConfig, InferError};
use crate::rl::{rollout, train, Policy, RlError, TrainOutcome};
use crate::scenario::{Scenario, ScenarioError};
use crate::sim::SimConfig;
use crate::st_graph::{build, BuildReport, GraphError, STGraph};
use crate::trajectory::{TrajectorySet, VolumeTensor};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {message}")]
    Stage { stage: Stage, message: String },
    #[error("stage {stage} needs {path}, which does not exist; run the earlier stages first")]
    MissingInput { stage: Stage, path: String },
}

impl PipelineError {
    pub fn stage(stage: Stage, e: impl std::fmt::Display) -> Self {
        PipelineError::Stage { stage, message: e.to_string() }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenScenario,
    Recover,
    BuildGraphs,
    Embed,
    Infer,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::GenScenario, Stage::Recover, Stage::BuildGraphs, Stage::Embed, Stage::Infer, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenScenario => "gen-scenario",
            Stage::Recover => "recover",
            Stage::BuildGraphs => "build-graphs",
            Stage::Embed => "embed",
            Stage::Infer => "infer",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Pipeline variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// RL-tuned recovery, joint embedding, masked similarities.
    Full,
    /// Recovery with the untuned default simulator.
    Df,
    /// Embedding similarities over all cell pairs, no mask.
    Um,
    /// Propagation on ST-graph edge weights, no embedding.
    Semi,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::Df, Variant::Um, Variant::Semi];

    pub fn id(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Df => "df",
            Variant::Um => "um",
            Variant::Semi => "semi",
        }
    }
}

/// Output of trajectory recovery for one split.
#[derive(Debug, Clone)]
pub struct Recovery {
    pub recovered: TrajectorySet,
    /// Recovery error with the configured default limits.
    pub default_error: f64,
    /// Recovery error of the returned trajectories.
    pub error: f64,
    pub training: Option<TrainOutcome>,
}

/// Evaluation split of the scenario's monitors under the config's seeds.
pub fn split_for(scn: &Scenario, cfg: &PipelineConfig) -> Result<EvalSplit, PipelineError> {
    EvalSplit::new(scn.network.monitor_points(), cfg.seeds().split).map_err(|e| PipelineError::stage(Stage::Evaluate, e))
}

/// Recovers what the non-test monitors saw. With `tune` the simulator is
/// driven by a freshly trained Q network, otherwise by its default limits.
pub fn recover(scn: &Scenario, split: &EvalSplit, sim: &SimConfig, rl: &crate::rl::TrainConfig, tune: bool) -> Result<Recovery, PipelineError> {
    let (net, incomplete) = scn.incomplete_view_hiding(&split.test);
    let err = |e: RlError| PipelineError::stage(Stage::Recover, e);
    let fixed = rollout(&net, &incomplete, sim, &Policy::Fixed).map_err(err)?;
    if !tune {
        return Ok(Recovery { recovered: fixed.recovered, default_error: fixed.error, error: fixed.error, training: None });
    }
    let outcome = train(&net, &incomplete, sim, rl).map_err(err)?;
    let tuned = rollout(&net, &incomplete, sim, &Policy::Greedy { net: &outcome.network, feature_scale: rl.feature_scale }).map_err(err)?;
    log::info!("recovery error: default {:.3} s, tuned {:.3} s", fixed.error, tuned.error);
    Ok(Recovery { recovered: tuned.recovered, default_error: fixed.error, error: tuned.error, training: Some(outcome) })
}

pub fn build_graphs(scn: &Scenario, recovered: &TrajectorySet) -> Result<(STGraph, STGraph, BuildReport, BuildReport), PipelineError> {
    let err = |e: GraphError| PipelineError::stage(Stage::BuildGraphs, e);
    let (gd, rd) = build(&scn.dense_view(), &scn.network, scn.interval_seconds(), scn.horizon()).map_err(err)?;
    let (gi, ri) = build(recovered, &scn.network, scn.interval_seconds(), scn.horizon()).map_err(err)?;
    for (name, r) in [("dense", &rd), ("recovered", &ri)] {
        if r.warnings() > 0 {
            log::warn!(
                "{name} graph skipped {} transitions ({} non-adjacent, {} long spans, {} past horizon)",
                r.warnings(),
                r.non_adjacent,
                r.skipped_span,
                r.out_of_horizon
            );
        }
    }
    Ok((gd, gi, rd, ri))
}

pub fn embed(gd: &STGraph, gi: &STGraph, cfg: &EmbedConfig) -> Result<EmbeddingTable, PipelineError> {
    let (table, log) = joint_train(gd, gi, cfg).map_err(|e: EmbedError| PipelineError::stage(Stage::Embed, e))?;
    if let Some(last) = log.last() {
        log::info!("embedding: {} epochs, final mean objective {:.4}", log.len(), last.mean_objective);
    }
    Ok(table)
}

/// Masked propagation from the training rows.
pub fn infer(scn: &Scenario, split: &EvalSplit, table: &EmbeddingTable, cfg: &InferConfig) -> Result<VolumeTensor, PipelineError> {
    let err = |e: InferError| PipelineError::stage(Stage::Infer, e);
    let graph = build_masked_graph(table, &scn.network, cfg.raw_weights);
    let sol = solve(&split.observed(&scn.volumes), &graph, cfg).map_err(err)?;
    Ok(sol.volumes)
}

pub fn infer_unmasked(scn: &Scenario, split: &EvalSplit, table: &EmbeddingTable, cfg: &InferConfig) -> Result<VolumeTensor, PipelineError> {
    let sol = solve_unmasked(&split.observed(&scn.volumes), table, cfg).map_err(|e| PipelineError::stage(Stage::Infer, e))?;
    Ok(sol.volumes)
}

pub fn infer_semi(scn: &Scenario, split: &EvalSplit, gd: &STGraph, gi: &STGraph, alpha: f64, cfg: &InferConfig) -> Result<VolumeTensor, PipelineError> {
    let graph = graph_from_st(gd, gi, alpha);
    let sol = solve(&split.observed(&scn.volumes), &graph, cfg).map_err(|e| PipelineError::stage(Stage::Infer, e))?;
    Ok(sol.volumes)
}

/// Predictions of every baseline, keyed by name.
pub fn baselines(scn: &Scenario, split: &EvalSplit, knn_k: usize, infer: &InferConfig) -> Result<Vec<(String, VolumeTensor)>, PipelineError> {
    let err = |e: EvalError| PipelineError::stage(Stage::Evaluate, e);
    let (net, truth) = (&scn.network, &scn.volumes);
    Ok(vec![
        ("knn".to_string(), baseline_spatial_knn(knn_k, split, net, truth).map_err(err)?),
        ("ca".to_string(), baseline_contextual_average(split, net, truth).map_err(err)?),
        ("lr".to_string(), baseline_linear_regression(split, net, truth).map_err(err)?),
        ("graph_ssl".to_string(), baseline_graph_ssl(split, net, truth, infer).map_err(err)?),
    ])
}

pub fn score(scn: &Scenario, split: &EvalSplit, pred: &VolumeTensor) -> Result<MetricReport, PipelineError> {
    evaluate_run(pred, &scn.volumes, &scn.network, split).map_err(|e| PipelineError::stage(Stage::Evaluate, e))
}
