use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::*;
use crate::evaluation::aggregate;

/// What a single-seed experiment should compute besides the full pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub variants: Vec<Variant>,
    pub alphas: Vec<f64>,
    pub baselines: bool,
}

impl ExperimentPlan {
    pub fn main_only() -> Self {
        ExperimentPlan { variants: vec![Variant::Full], alphas: vec![], baselines: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub split: EvalSplit,
    pub default_recovery_error: f64,
    pub tuned_recovery_error: Option<f64>,
    /// Method name to report. Variants use their ids, sweep entries
    /// `alpha=<value>`, baselines their own names.
    pub reports: BTreeMap<String, MetricReport>,
    pub wall_s: BTreeMap<String, f64>,
}

pub fn alpha_key(alpha: f64) -> String {
    format!("alpha={alpha}")
}

/// Runs the requested methods on one scenario for one master seed. Variants
/// sharing an input (recovery, graphs, embedding) reuse it, so comparisons
/// are paired.
pub fn run_seed(scn: &Scenario, base: &PipelineConfig, master: u64, plan: &ExperimentPlan) -> Result<SeedOutcome, PipelineError> {
    let cfg = base.with_seed(master);
    cfg.validate()?;
    let split = split_for(scn, &cfg)?;
    let mut wall: BTreeMap<String, f64> = BTreeMap::new();
    let mut reports = BTreeMap::new();
    fn timed<T>(wall: &mut BTreeMap<String, f64>, name: &str, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        *wall.entry(name.to_string()).or_insert(0.0) += t0.elapsed().as_secs_f64();
        out
    }

    if plan.baselines {
        let preds = timed(&mut wall, "baselines", || baselines(scn, &split, cfg.eval.knn_k, &cfg.infer))?;
        for (name, pred) in preds {
            reports.insert(name, score(scn, &split, &pred)?);
        }
    }

    let needs_full = plan.variants.iter().any(|v| matches!(v, Variant::Full | Variant::Um | Variant::Semi)) || !plan.alphas.is_empty();
    let full = if needs_full { Some(timed(&mut wall, "recover", || recover(scn, &split, &cfg.sim, &cfg.rl, true))?) } else { None };
    let df = if plan.variants.contains(&Variant::Df) {
        Some(timed(&mut wall, "recover_df", || recover(scn, &split, &cfg.sim, &cfg.rl, false))?)
    } else {
        None
    };
    let default_recovery_error = full.as_ref().or(df.as_ref()).map_or(f64::NAN, |r| r.default_error);

    if let Some(rec) = &full {
        let (gd, gi, _, _) = timed(&mut wall, "build_graphs", || build_graphs(scn, &rec.recovered))?;
        let mut tables: Vec<(f64, EmbeddingTable)> = Vec::new();
        let mut table_for = |alpha: f64, wall: &mut BTreeMap<String, f64>| -> Result<EmbeddingTable, PipelineError> {
            if let Some((_, t)) = tables.iter().find(|(a, _)| *a == alpha) {
                return Ok(t.clone());
            }
            let key = if alpha == cfg.embed.alpha { "embed".to_string() } else { format!("embed_{}", alpha_key(alpha)) };
            let t = timed(wall, &key, || embed(&gd, &gi, &EmbedConfig { alpha, ..cfg.embed.clone() }))?;
            tables.push((alpha, t.clone()));
            Ok(t)
        };
        if plan.variants.iter().any(|v| matches!(v, Variant::Full | Variant::Um)) {
            let table = table_for(cfg.embed.alpha, &mut wall)?;
            if plan.variants.contains(&Variant::Full) {
                let pred = timed(&mut wall, "infer", || infer(scn, &split, &table, &cfg.infer))?;
                reports.insert(Variant::Full.id().to_string(), score(scn, &split, &pred)?);
            }
            if plan.variants.contains(&Variant::Um) {
                let pred = timed(&mut wall, "infer_um", || infer_unmasked(scn, &split, &table, &cfg.infer))?;
                reports.insert(Variant::Um.id().to_string(), score(scn, &split, &pred)?);
            }
        }
        if plan.variants.contains(&Variant::Semi) {
            let pred = timed(&mut wall, "infer_semi", || infer_semi(scn, &split, &gd, &gi, cfg.embed.alpha, &cfg.infer))?;
            reports.insert(Variant::Semi.id().to_string(), score(scn, &split, &pred)?);
        }
        for &alpha in &plan.alphas {
            let table = table_for(alpha, &mut wall)?;
            let pred = timed(&mut wall, "infer_sweep", || infer(scn, &split, &table, &cfg.infer))?;
            reports.insert(alpha_key(alpha), score(scn, &split, &pred)?);
        }
    }
    if let Some(rec) = &df {
        let pred = timed(&mut wall, "df", || -> Result<VolumeTensor, PipelineError> {
            let (gd, gi, _, _) = build_graphs(scn, &rec.recovered)?;
            let table = embed(&gd, &gi, &cfg.embed)?;
            infer(scn, &split, &table, &cfg.infer)
        })?;
        reports.insert(Variant::Df.id().to_string(), score(scn, &split, &pred)?);
    }
    Ok(SeedOutcome {
        seed: master,
        split,
        default_recovery_error,
        tuned_recovery_error: full.as_ref().map(|r| r.error),
        reports,
        wall_s: wall,
    })
}

/// Per-method mean over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub methods: BTreeMap<String, MetricReport>,
    pub per_seed: Vec<SeedOutcome>,
}

impl Comparison {
    pub fn from_outcomes(per_seed: Vec<SeedOutcome>) -> Result<Self, PipelineError> {
        let mut names: Vec<String> = per_seed.iter().flat_map(|o| o.reports.keys().cloned()).collect();
        names.sort();
        names.dedup();
        let mut methods = BTreeMap::new();
        for name in names {
            let rs: Vec<MetricReport> = per_seed.iter().filter_map(|o| o.reports.get(&name).cloned()).collect();
            methods.insert(name, aggregate(&rs).map_err(|e| PipelineError::stage(Stage::Evaluate, e))?);
        }
        Ok(Comparison { seeds: per_seed.iter().map(|o| o.seed).collect(), methods, per_seed })
    }

    pub fn rmse(&self, method: &str) -> Option<f64> {
        self.methods.get(method).map(|r| r.overall.rmse)
    }

    pub fn mape(&self, method: &str) -> Option<f64> {
        self.methods.get(method).and_then(|r| r.overall.mape)
    }

    /// `method,rmse,mape` rows in name order.
    pub fn table_csv(&self) -> String {
        let mut s = String::from("method,rmse,mape\n");
        for (name, r) in &self.methods {
            s.push_str(&format!("{name},{},{}\n", r.overall.rmse, r.overall.mape.map(|x| x.to_string()).unwrap_or_default()));
        }
        s
    }
}

pub fn run_experiment(scn: &Scenario, base: &PipelineConfig, seeds: &[u64], plan: &ExperimentPlan) -> Result<Comparison, PipelineError> {
    let mut outs = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let t0 = Instant::now();
        let o = run_seed(scn, base, s, plan)?;
        log::info!("seed {s} done in {:.1} s", t0.elapsed().as_secs_f64());
        outs.push(o);
    }
    Comparison::from_outcomes(outs)
}
