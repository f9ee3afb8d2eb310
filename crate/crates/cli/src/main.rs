use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use volinfer::embedding::EmbeddingTable;
use volinfer::evaluation::{write_per_class_csv, write_per_hour_csv};
use volinfer::pipeline::*;
use volinfer::rl::{rollout, write_log_csv, Policy, TrainConfig};
use volinfer::scenario::{load_scenario, save_scenario, Scenario};
use volinfer::sim::write_records_csv;
use volinfer::st_graph::{build, STGraph};
use volinfer::trajectory::{TrajectorySet, VolumeTensor};

#[derive(Parser)]
#[command(name = "volinfer", version, about = "Traffic volume inference from sparse monitors and trajectories")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON pipeline config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `embed.alpha=0.25`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; all randomness is derived from it.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario with ground truth.
    GenScenario {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "scenario.json")]
        out: PathBuf,
    },
    /// Recover all incomplete trajectories with the untuned simulator.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "recovered.json")]
        out: PathBuf,
        /// Arrival records CSV.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Train the speed-limit policy and recover trajectories with it.
    Recover {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenario: PathBuf,
        /// JSON file with the RL section alone.
        #[arg(long)]
        rl_config: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value = "model.json")]
        out: PathBuf,
        #[arg(long, default_value = "recovered.json")]
        recovered: PathBuf,
        #[arg(long, default_value = "rl_log.csv")]
        log: PathBuf,
    },
    /// Build the dense and recovered spatiotemporal graphs.
    BuildGraphs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenario: PathBuf,
        /// Dense trajectories (JSON); defaults to the scenario's taxi view.
        #[arg(long)]
        dense: Option<PathBuf>,
        #[arg(long)]
        recovered: PathBuf,
        #[arg(long, num_args = 2, value_names = ["GD", "GI"], default_values = ["gD.csv", "gI.csv"])]
        out: Vec<PathBuf>,
    },
    /// Train joint node embeddings on the two graphs.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gd: PathBuf,
        #[arg(long)]
        gi: PathBuf,
        /// Scenario used to size the node grid; otherwise the largest ids seen.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "emb.csv")]
        out: PathBuf,
    },
    /// Propagate monitored volumes over the masked similarity graph.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long, default_value = "volumes.csv")]
        out: PathBuf,
    },
    /// Score predictions on the held-out monitors, next to the baselines.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        #[arg(long, default_value = "per_class.csv")]
        per_class: PathBuf,
        #[arg(long, default_value = "per_hour.csv")]
        per_hour: PathBuf,
    },
    /// Run every stage into the output directory, resuming where possible.
    RunAll {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Rerun from this stage; earlier outputs must exist.
        #[arg(long, value_parser = parse_stage)]
        from: Option<Stage>,
        /// Comma-separated alphas, e.g. `0,0.25,0.5,0.75,1`.
        #[arg(long, value_delimiter = ',')]
        alpha_sweep: Vec<f64>,
    },
    /// Compare the full pipeline with its df, um and semi variants.
    Ablations {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    Stage::parse(s).ok_or_else(|| format!("unknown stage `{s}`; expected one of {}", Stage::ALL.map(Stage::name).join(", ")))
}

impl Common {
    fn load(&self) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        for o in &self.overrides {
            cfg.set(o)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn fail(stage: Stage, path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::stage(stage, format!("{}: {e}", path.display()))
}

fn open(stage: Stage, path: &Path) -> Result<BufReader<File>, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingInput { stage, path: path.display().to_string() });
    }
    File::open(path).map(BufReader::new).map_err(|e| fail(stage, path, e))
}

fn create(stage: Stage, path: &Path) -> Result<BufWriter<File>, PipelineError> {
    File::create(path).map(BufWriter::new).map_err(|e| fail(stage, path, e))
}

fn read_json<T: DeserializeOwned>(stage: Stage, path: &Path) -> Result<T, PipelineError> {
    serde_json::from_reader(open(stage, path)?).map_err(|e| fail(stage, path, e))
}

fn write_json<T: Serialize>(stage: Stage, path: &Path, v: &T) -> Result<(), PipelineError> {
    let mut w = create(stage, path)?;
    serde_json::to_writer_pretty(&mut w, v).map_err(|e| fail(stage, path, e))?;
    w.flush().map_err(|e| fail(stage, path, e))
}

fn scenario(stage: Stage, path: &Path) -> Result<Scenario, PipelineError> {
    open(stage, path)?;
    load_scenario(path).map_err(|e| fail(stage, path, e))
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::GenScenario { common, out } => {
            let mut cfg = common.load()?;
            cfg.scenario = None;
            let scn = load_or_generate(&cfg)?;
            save_scenario(&scn, &out).map_err(|e| fail(Stage::GenScenario, &out, e))?;
            println!(
                "{} segments, {} monitored, {} vehicles, {} intervals -> {}",
                scn.network.num_segments(),
                scn.network.monitor_points().len(),
                scn.trajectories.len(),
                scn.horizon(),
                out.display()
            );
        }
        Command::Simulate { common, scenario: path, out, records } => {
            let cfg = common.load()?;
            let stage = Stage::Recover;
            let scn = scenario(stage, &path)?;
            let r = rollout(&scn.network, &scn.incomplete_view(), &cfg.sim, &Policy::Fixed).map_err(|e| PipelineError::stage(stage, e))?;
            write_json(stage, &out, &r.recovered)?;
            if let Some(p) = records {
                write_records_csv(&r.records, create(stage, &p)?).map_err(|e| fail(stage, &p, e))?;
            }
            println!("recovered {} trajectories, recovery error {:.3} s", r.recovered.len(), r.error);
        }
        Command::Recover { common, scenario: path, rl_config, episodes, out, recovered, log } => {
            let mut cfg = common.load()?;
            let stage = Stage::Recover;
            if let Some(p) = rl_config {
                let rl: TrainConfig = read_json(stage, &p).map_err(|e| PipelineError::Config(e.to_string()))?;
                cfg.rl = TrainConfig { seed: cfg.rl.seed, ..rl };
            }
            if let Some(n) = episodes {
                cfg.rl.episodes = n;
            }
            cfg.validate()?;
            let scn = scenario(stage, &path)?;
            let split = split_for(&scn, &cfg)?;
            let rec = recover(&scn, &split, &cfg.sim, &cfg.rl, true)?;
            let training = rec.training.as_ref().expect("tuned recovery trains");
            write_json(stage, &out, &training.network)?;
            write_json(stage, &recovered, &rec.recovered)?;
            write_log_csv(&training.log, create(stage, &log)?).map_err(|e| fail(stage, &log, e))?;
            println!("recovery error: default {:.3} s, tuned {:.3} s", rec.default_error, rec.error);
        }
        Command::BuildGraphs { common, scenario: path, dense, recovered, out } => {
            common.load()?;
            let stage = Stage::BuildGraphs;
            let scn = scenario(stage, &path)?;
            let dense: TrajectorySet = match dense {
                Some(p) => read_json(stage, &p)?,
                None => scn.dense_view(),
            };
            let recovered: TrajectorySet = read_json(stage, &recovered)?;
            for (set, p) in [(&dense, &out[0]), (&recovered, &out[1])] {
                let (g, report) = build(set, &scn.network, scn.interval_seconds(), scn.horizon()).map_err(|e| PipelineError::stage(stage, e))?;
                g.write_csv(create(stage, p)?).map_err(|e| fail(stage, p, e))?;
                println!("{}: {} edges from {} transitions, {} skipped", p.display(), g.num_edges(), report.counted, report.warnings());
            }
        }
        Command::Embed { common, gd, gi, scenario: scn_path, alpha, dim, window, epochs, out } => {
            let mut cfg = common.load()?;
            let stage = Stage::Embed;
            cfg.embed.alpha = alpha.unwrap_or(cfg.embed.alpha);
            cfg.embed.dim = dim.unwrap_or(cfg.embed.dim);
            cfg.embed.window = window.unwrap_or(cfg.embed.window);
            cfg.embed.epochs = epochs.unwrap_or(cfg.embed.epochs);
            cfg.validate()?;
            let dims = match scn_path {
                Some(p) => {
                    let scn = scenario(stage, &p)?;
                    Some((scn.network.num_segments(), scn.horizon()))
                }
                None => None,
            };
            let mut graphs = Vec::new();
            for p in [&gd, &gi] {
                graphs.push(STGraph::read_csv(open(stage, p)?, dims).map_err(|e| fail(stage, p, e))?);
            }
            if dims.is_none() {
                // size both graphs to the larger of the two
                let (m, n) = graphs.iter().fold((0, 0), |(m, n), g| (m.max(g.num_segments()), n.max(g.num_layers())));
                graphs = [&gd, &gi]
                    .into_iter()
                    .map(|p| STGraph::read_csv(open(stage, p)?, Some((m, n))).map_err(|e| fail(stage, p, e)))
                    .collect::<Result<_, _>>()?;
            }
            let table = embed(&graphs[0], &graphs[1], &cfg.embed)?;
            table.write_csv(create(stage, &out)?).map_err(|e| fail(stage, &out, e))?;
            println!("{} node vectors of dimension {} -> {}", table.num_nodes(), table.dim, out.display());
        }
        Command::Infer { common, scenario: path, embeddings, tol, max_iter, out } => {
            let mut cfg = common.load()?;
            let stage = Stage::Infer;
            cfg.infer.tol = tol.unwrap_or(cfg.infer.tol);
            cfg.infer.max_iter = max_iter.unwrap_or(cfg.infer.max_iter);
            cfg.validate()?;
            let scn = scenario(stage, &path)?;
            let table = EmbeddingTable::read_csv(open(stage, &embeddings)?).map_err(|e| fail(stage, &embeddings, e))?;
            if (table.m, table.n) != (scn.network.num_segments(), scn.horizon()) {
                return Err(PipelineError::stage(stage, format!("embeddings cover {}x{} nodes, scenario has {}x{}", table.m, table.n, scn.network.num_segments(), scn.horizon())));
            }
            let split = split_for(&scn, &cfg)?;
            let pred = infer(&scn, &split, &table, &cfg.infer)?;
            pred.write_csv(create(stage, &out)?).map_err(|e| fail(stage, &out, e))?;
            println!("volumes for {} cells -> {}", pred.values.len(), out.display());
        }
        Command::Evaluate { common, predictions, scenario: path, out, per_class, per_hour } => {
            let cfg = common.load()?;
            let stage = Stage::Evaluate;
            let scn = scenario(stage, &path)?;
            let pred = VolumeTensor::read_csv(open(stage, &predictions)?, scn.network.num_segments(), scn.horizon(), scn.interval_seconds())
                .map_err(|e| fail(stage, &predictions, e))?;
            let split = split_for(&scn, &cfg)?;
            let jmdi = score(&scn, &split, &pred)?;
            let mut base = BTreeMap::new();
            for (name, p) in baselines(&scn, &split, cfg.eval.knn_k, &cfg.infer)? {
                base.insert(name, score(&scn, &split, &p)?);
            }
            let report = RunReport { seed: cfg.seed, alpha: cfg.embed.alpha, jmdi, baselines: base };
            write_json(stage, &out, &report)?;
            write_per_class_csv(&report.jmdi, create(stage, &per_class)?).map_err(|e| fail(stage, &per_class, e))?;
            write_per_hour_csv(&report.jmdi, create(stage, &per_hour)?).map_err(|e| fail(stage, &per_hour, e))?;
            print_report(&report);
        }
        Command::RunAll { common, out_dir, from, alpha_sweep } => {
            let mut cfg = common.load()?;
            if let Some(d) = out_dir {
                cfg.out_dir = d;
            }
            let summary = run_all(&cfg, &RunOptions { from, alpha_sweep })?;
            for r in &summary.manifest.stages {
                println!("{:<13} {:>9.2} s{}", r.stage.name(), r.wall_s, if r.skipped { "  (reused)" } else { "" });
            }
            print_report(&summary.report);
            for (alpha, r) in &summary.sweep {
                println!("alpha {alpha}: rmse {:.4} mape {}", r.jmdi.overall.rmse, fmt_opt(r.jmdi.overall.mape));
            }
            println!("artifacts in {}", summary.dir.display());
        }
        Command::Ablations { common, out_dir } => {
            let mut cfg = common.load()?;
            if let Some(d) = out_dir {
                cfg.out_dir = d;
            }
            let cmp = ablations(&cfg)?;
            print!("{}", ablation_table(&cmp));
        }
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn print_report(r: &RunReport) {
    println!("{:<10} {:>9} {:>9}", "method", "rmse", "mape");
    println!("{:<10} {:>9.4} {:>9}", "jmdi", r.jmdi.overall.rmse, fmt_opt(r.jmdi.overall.mape));
    for (name, m) in &r.baselines {
        println!("{:<10} {:>9.4} {:>9}", name, m.overall.rmse, fmt_opt(m.overall.mape));
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
