use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::PipelineError;
use crate::embedding::EmbedConfig;
use crate::inference::InferConfig;
use crate::rl::TrainConfig;
use crate::scenario::GenConfig;
use crate::seeds::derive_seed;
use crate::sim::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub knn_k: usize,
    /// Master seeds for repeated runs in experiments.
    pub seeds: Vec<u64>,
    /// Alpha values of the sweep.
    pub alphas: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { knn_k: 3, seeds: vec![0, 1, 2, 3, 4], alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Master seed; every component seed is derived from it.
    pub seed: u64,
    /// Existing scenario file; when absent one is generated from `gen`.
    pub scenario: Option<PathBuf>,
    pub gen: GenConfig,
    pub sim: SimConfig,
    pub rl: TrainConfig,
    pub embed: EmbedConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            scenario: None,
            gen: GenConfig::default(),
            sim: SimConfig::default(),
            rl: TrainConfig::default(),
            embed: EmbedConfig::default(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
            out_dir: PathBuf::from("run"),
        }
    }
}

/// Component seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub master: u64,
    pub scenario: u64,
    pub split: u64,
    pub sim: u64,
    pub rl: u64,
    pub embed: u64,
}

impl SeedPlan {
    pub fn new(master: u64) -> Self {
        SeedPlan {
            master,
            scenario: derive_seed(master, "scenario"),
            split: derive_seed(master, "split"),
            sim: derive_seed(master, "sim"),
            rl: derive_seed(master, "rl"),
            embed: derive_seed(master, "embed"),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let e = |x: &dyn std::fmt::Display| PipelineError::Config(x.to_string());
        self.gen.validate().map_err(|x| e(&x))?;
        self.sim.validate().map_err(|x| e(&x))?;
        self.rl.validate().map_err(|x| e(&x))?;
        self.embed.validate().map_err(|x| e(&x))?;
        self.infer.validate().map_err(|x| e(&x))?;
        if self.eval.knn_k == 0 {
            return Err(PipelineError::Config("eval.knn_k must be at least 1".into()));
        }
        if self.eval.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(PipelineError::Config("eval.alphas must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Copy with every component seed replaced by its derivation from `seed`.
    pub fn resolved(&self) -> PipelineConfig {
        self.with_seed(self.seed)
    }

    pub fn with_seed(&self, master: u64) -> PipelineConfig {
        let plan = SeedPlan::new(master);
        let mut c = self.clone();
        c.seed = master;
        c.gen.seed = plan.scenario;
        c.sim.seed = plan.sim;
        c.rl.seed = plan.rl;
        c.embed.seed = plan.embed;
        c
    }

    pub fn seeds(&self) -> SeedPlan {
        SeedPlan::new(self.seed)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `path.to.field=value`. The value is parsed as JSON, falling
    /// back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<(), PipelineError> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("override `{assignment}` is not of the form key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut doc;
        for key in path.split('.') {
            slot = match slot {
                Value::Object(map) => map.get_mut(key),
                Value::Array(items) => key.parse::<usize>().ok().and_then(move |k| items.get_mut(k)),
                _ => None,
            }
            .ok_or_else(|| PipelineError::Config(format!("unknown config key `{path}`")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| PipelineError::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }
}
