use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::*;
use crate::rl::write_log_csv;
use crate::scenario::{generate_scenario, load_scenario, save_scenario};

pub const MANIFEST: &str = "manifest.json";

/// File locations of every artifact a run reads or writes.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub dir: PathBuf,
    pub scenario: PathBuf,
    pub split: PathBuf,
    pub model: PathBuf,
    pub rl_log: PathBuf,
    pub recovered: PathBuf,
    pub recovery: PathBuf,
    pub gd: PathBuf,
    pub gi: PathBuf,
    pub emb: PathBuf,
    pub volumes: PathBuf,
    pub report: PathBuf,
    pub per_class: PathBuf,
    pub per_hour: PathBuf,
}

impl Artifacts {
    pub fn in_dir(dir: &Path) -> Self {
        let p = |name: &str| dir.join(name);
        Artifacts {
            dir: dir.to_path_buf(),
            scenario: p("scenario.json"),
            split: p("split.json"),
            model: p("model.json"),
            rl_log: p("rl_log.csv"),
            recovered: p("recovered.json"),
            recovery: p("recovery.json"),
            gd: p("gD.csv"),
            gi: p("gI.csv"),
            emb: p("emb.csv"),
            volumes: p("volumes.csv"),
            report: p("report.json"),
            per_class: p("per_class.csv"),
            per_hour: p("per_hour.csv"),
        }
    }

    /// Layout of one alpha-sweep entry: upstream artifacts come from `base`,
    /// embedding onwards live in `dir`.
    pub fn sweep_entry(base: &Artifacts, dir: &Path) -> Self {
        let own = Artifacts::in_dir(dir);
        Artifacts { emb: own.emb, volumes: own.volumes, report: own.report, per_class: own.per_class, per_hour: own.per_hour, dir: own.dir, ..base.clone() }
    }

    fn inputs(&self, stage: Stage) -> Vec<&Path> {
        match stage {
            Stage::GenScenario => vec![],
            Stage::Recover => vec![&self.scenario, &self.split],
            Stage::BuildGraphs => vec![&self.scenario, &self.recovered],
            Stage::Embed => vec![&self.scenario, &self.gd, &self.gi],
            Stage::Infer => vec![&self.scenario, &self.split, &self.emb],
            Stage::Evaluate => vec![&self.scenario, &self.split, &self.volumes],
        }
    }

    fn outputs(&self, stage: Stage) -> Vec<&Path> {
        match stage {
            Stage::GenScenario => vec![&self.scenario, &self.split],
            Stage::Recover => vec![&self.model, &self.rl_log, &self.recovered, &self.recovery],
            Stage::BuildGraphs => vec![&self.gd, &self.gi],
            Stage::Embed => vec![&self.emb],
            Stage::Infer => vec![&self.volumes],
            Stage::Evaluate => vec![&self.report, &self.per_class, &self.per_hour],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Hash of the config fields the stage reads.
    pub params: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_s: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub package: String,
    pub version: String,
    pub config: PipelineConfig,
    pub seeds: SeedPlan,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Option<Manifest> {
        let text = fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverySummary {
    pub default_error_s: f64,
    pub error_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub alpha: f64,
    pub jmdi: MetricReport,
    pub baselines: BTreeMap<String, MetricReport>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    /// Rerun from this stage on; earlier stages must have left their outputs.
    pub from: Option<Stage>,
    pub alpha_sweep: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub report: RunReport,
    /// `(alpha, report)` per sweep entry.
    pub sweep: Vec<(f64, RunReport)>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn sha256_json<T: Serialize>(v: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("serializable")))
}

fn params_hash(cfg: &PipelineConfig, stage: Stage) -> String {
    match stage {
        Stage::GenScenario => {
            let source = cfg.scenario.as_deref().and_then(|p| sha256_file(p).ok());
            sha256_json(&(&cfg.gen, source, cfg.seeds().split))
        }
        Stage::Recover => sha256_json(&(&cfg.sim, &cfg.rl)),
        Stage::BuildGraphs => sha256_json(&()),
        Stage::Embed => sha256_json(&cfg.embed),
        Stage::Infer => sha256_json(&cfg.infer),
        Stage::Evaluate => sha256_json(&(cfg.eval.knn_k, &cfg.infer, cfg.seed, cfg.embed.alpha)),
    }
}

fn io_err(stage: Stage, path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::stage(stage, format!("{}: {e}", path.display()))
}

fn hashes(stage: Stage, paths: &[&Path]) -> Result<BTreeMap<String, String>, PipelineError> {
    paths
        .iter()
        .map(|p| {
            if !p.exists() {
                return Err(PipelineError::MissingInput { stage, path: p.display().to_string() });
            }
            Ok((p.display().to_string(), sha256_file(p).map_err(|e| io_err(stage, p, e))?))
        })
        .collect()
}

fn create(stage: Stage, path: &Path) -> Result<BufWriter<File>, PipelineError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(stage, path, e))
}

fn write_json<T: Serialize>(stage: Stage, path: &Path, v: &T) -> Result<(), PipelineError> {
    let mut w = create(stage, path)?;
    serde_json::to_writer_pretty(&mut w, v).map_err(|e| io_err(stage, path, e))?;
    w.flush().map_err(|e| io_err(stage, path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(stage: Stage, path: &Path) -> Result<T, PipelineError> {
    let f = File::open(path).map_err(|e| io_err(stage, path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| io_err(stage, path, e))
}

fn open(stage: Stage, path: &Path) -> Result<BufReader<File>, PipelineError> {
    File::open(path).map(BufReader::new).map_err(|e| io_err(stage, path, e))
}

fn scenario_from(stage: Stage, path: &Path) -> Result<Scenario, PipelineError> {
    load_scenario(path).map_err(|e: ScenarioError| io_err(stage, path, e))
}

/// Generates or loads the scenario a config describes.
pub fn load_or_generate(cfg: &PipelineConfig) -> Result<Scenario, PipelineError> {
    match &cfg.scenario {
        Some(p) => scenario_from(Stage::GenScenario, p),
        None => {
            let (scn, report) = generate_scenario(&cfg.gen).map_err(|e| PipelineError::stage(Stage::GenScenario, e))?;
            if report.infeasible > 0 {
                log::warn!("scenario generation skipped {} infeasible trips", report.infeasible);
            }
            Ok(scn)
        }
    }
}

fn run_stage(stage: Stage, cfg: &PipelineConfig, a: &Artifacts) -> Result<(), PipelineError> {
    match stage {
        Stage::GenScenario => {
            let scn = load_or_generate(cfg)?;
            save_scenario(&scn, &a.scenario).map_err(|e| io_err(stage, &a.scenario, e))?;
            let split = split_for(&scn, cfg)?;
            write_json(stage, &a.split, &split)
        }
        Stage::Recover => {
            let scn = scenario_from(stage, &a.scenario)?;
            let split: EvalSplit = read_json(stage, &a.split)?;
            let rec = recover(&scn, &split, &cfg.sim, &cfg.rl, true)?;
            let training = rec.training.as_ref().expect("tuned recovery trains");
            write_json(stage, &a.model, &training.network)?;
            let mut w = create(stage, &a.rl_log)?;
            write_log_csv(&training.log, &mut w).map_err(|e| io_err(stage, &a.rl_log, e))?;
            w.flush().map_err(|e| io_err(stage, &a.rl_log, e))?;
            write_json(stage, &a.recovered, &rec.recovered)?;
            write_json(stage, &a.recovery, &RecoverySummary { default_error_s: rec.default_error, error_s: rec.error })
        }
        Stage::BuildGraphs => {
            let scn = scenario_from(stage, &a.scenario)?;
            let recovered: TrajectorySet = read_json(stage, &a.recovered)?;
            let (gd, gi, _, _) = build_graphs(&scn, &recovered)?;
            for (g, p) in [(&gd, &a.gd), (&gi, &a.gi)] {
                let mut w = create(stage, p)?;
                g.write_csv(&mut w).map_err(|e| io_err(stage, p, e))?;
            }
            Ok(())
        }
        Stage::Embed => {
            let scn = scenario_from(stage, &a.scenario)?;
            let dims = Some((scn.network.num_segments(), scn.horizon()));
            let gd = STGraph::read_csv(open(stage, &a.gd)?, dims).map_err(|e| io_err(stage, &a.gd, e))?;
            let gi = STGraph::read_csv(open(stage, &a.gi)?, dims).map_err(|e| io_err(stage, &a.gi, e))?;
            let table = embed(&gd, &gi, &cfg.embed)?;
            let mut w = create(stage, &a.emb)?;
            table.write_csv(&mut w).map_err(|e| io_err(stage, &a.emb, e))
        }
        Stage::Infer => {
            let scn = scenario_from(stage, &a.scenario)?;
            let split: EvalSplit = read_json(stage, &a.split)?;
            let table = EmbeddingTable::read_csv(open(stage, &a.emb)?).map_err(|e| io_err(stage, &a.emb, e))?;
            if (table.m, table.n) != (scn.network.num_segments(), scn.horizon()) {
                return Err(PipelineError::stage(stage, format!("embeddings cover {}x{} nodes, scenario has {}x{}", table.m, table.n, scn.network.num_segments(), scn.horizon())));
            }
            let pred = infer(&scn, &split, &table, &cfg.infer)?;
            let mut w = create(stage, &a.volumes)?;
            pred.write_csv(&mut w).map_err(|e| io_err(stage, &a.volumes, e))
        }
        Stage::Evaluate => {
            let scn = scenario_from(stage, &a.scenario)?;
            let split: EvalSplit = read_json(stage, &a.split)?;
            let pred = VolumeTensor::read_csv(open(stage, &a.volumes)?, scn.network.num_segments(), scn.horizon(), scn.interval_seconds())
                .map_err(|e| io_err(stage, &a.volumes, e))?;
            let jmdi = score(&scn, &split, &pred)?;
            let mut base = BTreeMap::new();
            for (name, p) in baselines(&scn, &split, cfg.eval.knn_k, &cfg.infer)? {
                base.insert(name, score(&scn, &split, &p)?);
            }
            write_json(stage, &a.report, &RunReport { seed: cfg.seed, alpha: cfg.embed.alpha, jmdi: jmdi.clone(), baselines: base })?;
            let mut w = create(stage, &a.per_class)?;
            write_per_class_csv(&jmdi, &mut w).map_err(|e| io_err(stage, &a.per_class, e))?;
            let mut w = create(stage, &a.per_hour)?;
            write_per_hour_csv(&jmdi, &mut w).map_err(|e| io_err(stage, &a.per_hour, e))
        }
    }
}

/// Executes `stages` in order, skipping those whose recorded inputs, params
/// and outputs still match. Stages before `from` are never run.
fn run_stages(cfg: &PipelineConfig, a: &Artifacts, stages: &[Stage], from: Option<Stage>) -> Result<Manifest, PipelineError> {
    fs::create_dir_all(&a.dir).map_err(|e| io_err(stages[0], &a.dir, e))?;
    let manifest_path = a.dir.join(MANIFEST);
    let previous = Manifest::load(&manifest_path);
    let mut manifest = Manifest {
        package: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        seeds: cfg.seeds(),
        stages: Vec::new(),
    };
    for &stage in stages {
        let params = params_hash(cfg, stage);
        let outputs = a.outputs(stage);
        if from.is_some_and(|f| stage < f) {
            let outs = outputs.iter().filter(|p| p.exists()).copied().collect::<Vec<_>>();
            let inputs = a.inputs(stage).into_iter().filter(|p| p.exists()).collect::<Vec<_>>();
            manifest.stages.push(StageRecord {
                stage,
                params,
                inputs: hashes(stage, &inputs)?,
                outputs: hashes(stage, &outs)?,
                wall_s: 0.0,
                skipped: true,
            });
            continue;
        }
        let inputs = hashes(stage, &a.inputs(stage))?;
        let reusable = from.is_none()
            && previous.as_ref().and_then(|m| m.record(stage)).is_some_and(|r| {
                r.params == params
                    && r.inputs == inputs
                    && outputs.iter().all(|p| p.exists())
                    && hashes(stage, &outputs).is_ok_and(|h| h == r.outputs)
            });
        let t0 = Instant::now();
        if reusable {
            log::info!("{stage}: outputs up to date, skipping");
        } else {
            log::info!("{stage}: running");
            run_stage(stage, cfg, a)?;
        }
        manifest.stages.push(StageRecord {
            stage,
            params,
            inputs,
            outputs: hashes(stage, &outputs)?,
            wall_s: t0.elapsed().as_secs_f64(),
            skipped: reusable,
        });
        write_json(stage, &manifest_path, &manifest)?;
    }
    write_json(*stages.last().expect("at least one stage"), &manifest_path, &manifest)?;
    Ok(manifest)
}

/// Full pipeline into `cfg.out_dir`, plus one embed/infer/evaluate chain per
/// sweep alpha under `alpha_<value>/` with a `sweep.csv` summary.
pub fn run_all(cfg: &PipelineConfig, opts: &RunOptions) -> Result<RunSummary, PipelineError> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    if let Some(p) = &cfg.scenario {
        if !p.exists() {
            return Err(PipelineError::Config(format!("scenario file {} does not exist", p.display())));
        }
    }
    if opts.alpha_sweep.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(PipelineError::Config("sweep alphas must lie in [0, 1]".into()));
    }
    let a = Artifacts::in_dir(&cfg.out_dir);
    let manifest = run_stages(&cfg, &a, &Stage::ALL, opts.from)?;
    let report: RunReport = read_json(Stage::Evaluate, &a.report)?;
    let mut sweep = Vec::new();
    for &alpha in &opts.alpha_sweep {
        let sub = Artifacts::sweep_entry(&a, &cfg.out_dir.join(format!("alpha_{alpha}")));
        let mut c = cfg.clone();
        c.embed.alpha = alpha;
        let from = opts.from.map(|f| f.max(Stage::Embed));
        run_stages(&c, &sub, &[Stage::Embed, Stage::Infer, Stage::Evaluate], from)?;
        sweep.push((alpha, read_json::<RunReport>(Stage::Evaluate, &sub.report)?));
    }
    if !sweep.is_empty() {
        let path = cfg.out_dir.join("sweep.csv");
        let mut w = create(Stage::Evaluate, &path)?;
        let mut text = String::from("alpha,rmse,mape\n");
        for (alpha, r) in &sweep {
            text.push_str(&format!("{alpha},{},{}\n", r.jmdi.overall.rmse, r.jmdi.overall.mape.map(|x| x.to_string()).unwrap_or_default()));
        }
        w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| io_err(Stage::Evaluate, &path, e))?;
    }
    Ok(RunSummary { dir: cfg.out_dir.clone(), manifest, report, sweep })
}

/// The ablation study over `cfg.eval.seeds`, written to `ablations.csv` and
/// `ablations.json` in `cfg.out_dir`.
pub fn ablations(cfg: &PipelineConfig) -> Result<Comparison, PipelineError> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let scn = load_or_generate(&cfg)?;
    let plan = ExperimentPlan { variants: Variant::ALL.to_vec(), alphas: vec![], baselines: false };
    let cmp = run_experiment(&scn, &cfg, &cfg.eval.seeds, &plan)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(Stage::Evaluate, &cfg.out_dir, e))?;
    let path = cfg.out_dir.join("ablations.csv");
    let mut w = create(Stage::Evaluate, &path)?;
    w.write_all(ablation_table(&cmp).as_bytes()).and_then(|_| w.flush()).map_err(|e| io_err(Stage::Evaluate, &path, e))?;
    write_json(Stage::Evaluate, &cfg.out_dir.join("ablations.json"), &cmp)?;
    Ok(cmp)
}

/// `variant,rmse,mape` rows in variant order.
pub fn ablation_table(cmp: &Comparison) -> String {
    let mut s = String::from("variant,rmse,mape\n");
    for v in Variant::ALL {
        if let Some(r) = cmp.methods.get(v.id()) {
            s.push_str(&format!("{},{},{}\n", v.id(), r.overall.rmse, r.overall.mape.map(|x| x.to_string()).unwrap_or_default()));
        }
    }
    s
}
