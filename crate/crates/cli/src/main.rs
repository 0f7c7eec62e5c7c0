mod config;
mod eval;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use zipkit::calib::Damping;
use zipkit::distill::LossWeights;
use zipkit::latency::{bench_table, BenchOptions, LatencyTable};
use zipkit::pipeline::{
    build_databases, calibrate, export, load_databases, run_search, save_databases, write_hessians, EvaluatorKind,
    SearchReport,
};
use zipkit::search::{SearchSettings, DEFAULT_MUTATION_PROB, DEFAULT_STEPS};
use zipkit::store::{load_calibration, CalibrationSet, Model};
use zipkit::{par, Error, Result};

use config::{Profile, RunConfig};

#[derive(Parser)]
#[command(name = "zipkit", version, about = "Structured pruning to inference-speedup targets")]
struct Cli {
    /// TOML run configuration; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-layer stages.
    #[arg(long, global = true, env = "ZIPKIT_THREADS")]
    threads: Option<usize>,
    /// Also print a JSON report on stdout.
    #[arg(long, global = true)]
    json_report: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Inputs {
    /// Model container directory.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Calibration container directory.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Maximum calibration samples used.
    #[arg(long)]
    sample_budget: Option<usize>,
    /// Absolute Hessian damping λ.
    #[arg(long, conflicts_with = "relative_damping")]
    damping: Option<f64>,
    /// Damping as a fraction of the mean Hessian diagonal.
    #[arg(long)]
    relative_damping: Option<f64>,
    /// Default targets and sample budget: bert or gpt2.
    #[arg(long)]
    profile: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvaluatorArg {
    Proxy,
    Chain,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightPreset {
    Glue,
    Squad,
    Gpt2,
}

#[derive(Subcommand)]
enum Command {
    /// Build and invert per-layer Hessians.
    Calibrate {
        #[command(flatten)]
        inputs: Inputs,
        /// Also write the undamped gram matrices.
        #[arg(long)]
        dump_hessians: bool,
    },
    /// Build the pruned-variant database of every prunable layer.
    PruneDb {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Time every grid level on this host and write a latency table.
    Bench {
        #[command(flatten)]
        inputs: Inputs,
        /// Table destination (default: <output>/latency.json).
        #[arg(long)]
        table_out: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value_t = 7)]
        reps: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// Time levels concurrently.
        #[arg(long)]
        parallel: bool,
        #[arg(long, default_value = "host-cpu")]
        device: String,
    },
    /// Choose per-layer levels for each speedup target.
    Search {
        #[command(flatten)]
        inputs: Inputs,
        /// Latency table file.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Benchmark a fresh table instead of loading one.
        #[arg(long, conflicts_with = "table")]
        bench: bool,
        /// Comma-separated ascending speedup targets.
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        mutation_prob: Option<f64>,
        #[arg(long, value_enum)]
        evaluator: Option<EvaluatorArg>,
        /// Require exact table entries for every level.
        #[arg(long)]
        no_interpolate: bool,
    },
    /// Write the compacted model for one or all search reports.
    Export {
        #[command(flatten)]
        inputs: Inputs,
        /// Report file to export.
        #[arg(long, conflicts_with = "target")]
        report: Option<PathBuf>,
        /// Export the report of this target from <output>/search.
        #[arg(long)]
        target: Option<f64>,
    },
    /// Distillation losses from tensor blobs.
    Eval {
        /// Evaluation manifest (JSON).
        input: PathBuf,
        #[arg(long, value_enum, default_value = "glue")]
        preset: WeightPreset,
        /// Explicit task,logit,token weights.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
}

/// Flags merged over the config file.
struct Resolved {
    cfg: RunConfig,
    inputs: Inputs,
}

impl Resolved {
    fn profile(&self) -> Result<Profile> {
        Profile::parse(
            self.inputs
                .profile
                .as_deref()
                .or(self.cfg.profile.as_deref())
                .unwrap_or("bert"),
        )
    }

    fn model_path(&self) -> Result<PathBuf> {
        self.inputs
            .model
            .clone()
            .or_else(|| self.cfg.model.clone())
            .ok_or_else(|| Error::InvalidArgument("no model given (--model)".into()))
    }

    fn output(&self) -> Result<PathBuf> {
        self.inputs
            .output
            .clone()
            .or_else(|| self.cfg.output.clone())
            .ok_or_else(|| Error::InvalidArgument("no output directory given (--output)".into()))
    }

    fn model(&self) -> Result<Model> {
        Model::load(self.model_path()?)
    }

    fn calibration(&self, model: &Model) -> Result<CalibrationSet> {
        let path = self
            .inputs
            .calibration
            .clone()
            .or_else(|| self.cfg.calibration.clone())
            .ok_or_else(|| Error::InvalidArgument("no calibration given (--calibration)".into()))?;
        let budget = match self.inputs.sample_budget.or(self.cfg.sample_budget) {
            Some(b) => b,
            None => self.profile()?.sample_budget(),
        };
        if budget == 0 {
            return Err(Error::InvalidArgument("sample budget must be at least 1".into()));
        }
        load_calibration(path, &model.manifest, Some(budget))
    }

    fn damping(&self) -> Damping {
        if let Some(l) = self.inputs.damping {
            Damping::Absolute(l)
        } else if let Some(f) = self.inputs.relative_damping {
            Damping::Relative(f)
        } else if let Some(l) = self.cfg.damping {
            Damping::Absolute(l)
        } else if let Some(f) = self.cfg.relative_damping {
            Damping::Relative(f)
        } else {
            Damping::default()
        }
    }
}

fn emit<T: Serialize>(json: bool, value: &T) -> Result<()> {
    if json {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::NonFinite(e.to_string()))?;
        println!("{text}");
    }
    Ok(())
}

#[derive(Serialize)]
struct HessianSummary {
    layer: String,
    dim: usize,
    samples: usize,
    damping: f64,
}

#[derive(Serialize)]
struct DatabaseSummary {
    layer: String,
    levels: usize,
    priors: Vec<f64>,
}

#[derive(Serialize)]
struct ExportSummary {
    target_speedup: f64,
    path: PathBuf,
    parameters_before: usize,
    parameters_after: usize,
    layers_after: usize,
}

fn report_dir(output: &Path) -> PathBuf {
    output.join("search")
}

fn search_table(
    r: &Resolved,
    model: &Model,
    output: &Path,
    table: Option<PathBuf>,
    bench: bool,
) -> Result<LatencyTable> {
    if bench {
        let t = bench_table(model, &BenchOptions::default())?;
        t.save(output.join("latency.json"))?;
        return Ok(t);
    }
    let path = table
        .or_else(|| r.cfg.table.clone())
        .unwrap_or_else(|| output.join("latency.json"));
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!(
            "latency table {} not found (use --table or --bench)",
            path.display()
        )));
    }
    LatencyTable::load(path)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    par::init_threads(cli.threads.or(cfg.threads));
    let json = cli.json_report;

    match cli.command {
        Command::Calibrate { inputs, dump_hessians } => {
            let r = Resolved { cfg, inputs };
            let model = r.model()?;
            let calib = r.calibration(&model)?;
            let states = calibrate(&model, &calib, r.damping())?;
            let dir = r.output()?.join("hessians");
            write_hessians(&dir, &states, dump_hessians)?;
            let summary: Vec<HessianSummary> = states
                .iter()
                .map(|(name, s)| HessianSummary {
                    layer: name.clone(),
                    dim: s.dim(),
                    samples: s.samples_seen(),
                    damping: s.damping().unwrap_or(0.0),
                })
                .collect();
            for s in &summary {
                log::info!(
                    "{}: {}x{} from {} samples, damping {:e}",
                    s.layer,
                    s.dim,
                    s.dim,
                    s.samples,
                    s.damping
                );
            }
            eprintln!("wrote {} inverse Hessians to {}", summary.len(), dir.display());
            emit(json, &summary)
        }
        Command::PruneDb { inputs } => {
            let r = Resolved { cfg, inputs };
            let model = r.model()?;
            let calib = r.calibration(&model)?;
            let dbs = build_databases(&model, &calib, r.damping())?;
            let dir = r.output()?.join("db");
            save_databases(&dir, &dbs)?;
            eprintln!("wrote {} layer databases to {}", dbs.len(), dir.display());
            let summary: Vec<DatabaseSummary> = dbs
                .iter()
                .map(|d| DatabaseSummary {
                    layer: d.layer.clone(),
                    levels: d.variants.len(),
                    priors: d.priors(),
                })
                .collect();
            emit(json, &summary)
        }
        Command::Bench {
            inputs,
            table_out,
            batch,
            reps,
            warmup,
            parallel,
            device,
        } => {
            let r = Resolved { cfg, inputs };
            let model = r.model()?;
            let opts = BenchOptions {
                device,
                batch,
                reps,
                warmup,
                parallel,
            };
            let table = bench_table(&model, &opts)?;
            let path = match table_out {
                Some(p) => p,
                None => r.output()?.join("latency.json"),
            };
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::Io {
                    path: parent.to_path_buf(),
                    source: e,
                })?;
            }
            table.save(&path)?;
            eprintln!(
                "dense runtime {:.4} ms; table written to {}",
                table.dense_runtime_ms,
                path.display()
            );
            emit(json, &table.kinds)
        }
        Command::Search {
            inputs,
            table,
            bench,
            targets,
            seed,
            steps,
            mutation_prob,
            evaluator,
            no_interpolate,
        } => {
            let r = Resolved { cfg, inputs };
            let model = r.model()?;
            let output = r.output()?;
            let table = search_table(&r, &model, &output, table, bench)?;
            let targets = match targets.or_else(|| r.cfg.targets.clone()) {
                Some(t) => t,
                None => r.profile()?.targets(),
            };
            let kind = match evaluator {
                Some(EvaluatorArg::Proxy) => EvaluatorKind::Proxy,
                Some(EvaluatorArg::Chain) => EvaluatorKind::Chain,
                None => match r.cfg.evaluator.as_deref() {
                    None | Some("proxy") => EvaluatorKind::Proxy,
                    Some("chain") => EvaluatorKind::Chain,
                    Some(other) => {
                        return Err(Error::InvalidArgument(format!(
                            "unknown evaluator {other:?} (proxy, chain)"
                        )))
                    }
                },
            };
            let settings = SearchSettings {
                steps: steps.or(r.cfg.steps).unwrap_or(DEFAULT_STEPS),
                mutation_prob: mutation_prob.or(r.cfg.mutation_prob).unwrap_or(DEFAULT_MUTATION_PROB),
                seed: seed.or(r.cfg.seed).unwrap_or(0),
                ..Default::default()
            };
            let interpolate = !no_interpolate && r.cfg.interpolate.unwrap_or(true);
            let dbs = load_databases(output.join("db"), &model)?;
            let calib = match kind {
                EvaluatorKind::Chain => Some(r.calibration(&model)?),
                EvaluatorKind::Proxy => None,
            };
            let reports = run_search(
                &model,
                calib.as_ref(),
                &dbs,
                &table,
                &targets,
                &settings,
                kind,
                interpolate,
            )?;
            let dir = report_dir(&output);
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let mut missed = Vec::new();
            for rep in &reports {
                rep.save(dir.join(rep.file_name()))?;
                let speedup = rep.speedup.map_or_else(|| "inf".to_string(), |s| format!("{s:.3}"));
                println!(
                    "target {:>5}x  estimated {speedup:>7}x  runtime {:.4} ms  loss {:.6e}",
                    rep.target_speedup, rep.runtime_ms, rep.loss
                );
                if !rep.meets_target() {
                    missed.push(rep.target_speedup);
                }
            }
            emit(json, &reports)?;
            if !missed.is_empty() {
                return Err(Error::Infeasible(format!("targets not met: {missed:?}")));
            }
            Ok(())
        }
        Command::Export { inputs, report, target } => {
            let r = Resolved { cfg, inputs };
            let model = r.model()?;
            let output = r.output()?;
            let dbs = load_databases(output.join("db"), &model)?;
            let paths: Vec<PathBuf> = match (report, target) {
                (Some(p), _) => vec![p],
                (None, Some(t)) => vec![report_dir(&output).join(format!("search_{t}x.json"))],
                (None, None) => {
                    let dir = report_dir(&output);
                    let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)
                        .map_err(|e| Error::Io {
                            path: dir.clone(),
                            source: e,
                        })?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.extension().is_some_and(|x| x == "json"))
                        .collect();
                    found.sort();
                    found
                }
            };
            let mut summary = Vec::new();
            for p in paths {
                let rep = SearchReport::load(&p)?;
                let exported = export(&model, &dbs, &rep)?;
                let dest = output.join("export").join(format!("{}x", rep.target_speedup));
                exported.save(&dest)?;
                println!(
                    "target {}x: {} -> {} parameters, {} layers, written to {}",
                    rep.target_speedup,
                    model.parameter_count(),
                    exported.parameter_count(),
                    exported.manifest.layers.len(),
                    dest.display()
                );
                summary.push(ExportSummary {
                    target_speedup: rep.target_speedup,
                    path: dest,
                    parameters_before: model.parameter_count(),
                    parameters_after: exported.parameter_count(),
                    layers_after: exported.manifest.layers.len(),
                });
            }
            emit(json, &summary)
        }
        Command::Eval {
            input,
            preset,
            weights,
            temperature,
        } => {
            let weights = match weights {
                Some(w) if w.len() == 3 => LossWeights::new(w[0], w[1], w[2])?,
                Some(w) => {
                    return Err(Error::InvalidArgument(format!(
                        "--weights needs task,logit,token; got {} values",
                        w.len()
                    )))
                }
                None => match preset {
                    WeightPreset::Glue => LossWeights::glue(),
                    WeightPreset::Squad => LossWeights::squad(),
                    WeightPreset::Gpt2 => LossWeights::gpt2(),
                },
            };
            let rep = eval::evaluate(&input, weights, temperature)?;
            println!("task   {:.12}", rep.task);
            println!("logit  {:.12}", rep.logit);
            println!("token  {:.12}", rep.token);
            println!("total  {:.12}", rep.combined);
            emit(json, &rep)
        }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
