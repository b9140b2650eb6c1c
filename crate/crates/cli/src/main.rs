use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::Serialize;
use slipfit::evidence::{evaluate_model, friction_estimates, ViolationCounts};
use slipfit::fitting::fit_model;
use slipfit::friction::mu_series;
use slipfit::geometry::finite_diff_velocity;
use slipfit::synth::{benchmark, generate};
use slipfit::{io, Config, Demonstration, ModelId, ModelParams, NoisePreset, ScenarioSpec};

#[derive(Parser)]
#[command(name = "slipfit", version)]
#[command(about = "Identify constraint, grasp mode and slip axis from pose and wrench recordings")]
struct Cli {
    /// TOML configuration; defaults are used for anything it omits
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline on a trajectory and report the chosen model
    Classify {
        file: PathBuf,
        /// Also write the JSON report here
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Fit a single model and print its parameters and residual statistics
    Fit {
        file: PathBuf,
        #[arg(long)]
        model: ModelId,
    },
    /// Generate a synthetic demonstration from a scenario TOML
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the generating parameters as JSON
        #[arg(long)]
        truth_out: Option<PathBuf>,
    },
    /// Classify synthetic demonstrations of every model and tabulate the confusions
    Benchmark {
        #[arg(long, default_value_t = 30)]
        n: usize,
        #[arg(long, default_value = "paper-like")]
        preset: NoisePreset,
        #[arg(long)]
        csv_out: Option<PathBuf>,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Per-sample residual channels and friction estimates of one model, as CSV
    Residuals {
        file: PathBuf,
        #[arg(long)]
        model: ModelId,
        #[arg(long)]
        out: PathBuf,
    },
}

/// An error paired with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

const USAGE: u8 = 1;
const INGEST: u8 = 2;
const UNCLASSIFIABLE: u8 = 3;

trait Code<T> {
    fn code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Code<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

#[derive(Serialize)]
struct FitOutput {
    model: ModelId,
    alpha: ModelParams,
    objective: f64,
    initial_objective: f64,
    iterations: usize,
    converged: bool,
    n_samples: usize,
    violations: ViolationCounts,
    flagged_samples: usize,
    mean_position_residual: f64,
}

fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    match path {
        Some(p) => Config::load(p).code(USAGE),
        None => Ok(Config::default()),
    }
}

fn load_demo(path: &Path, cfg: &Config) -> Result<Demonstration, Failure> {
    io::ingest(path, cfg)
        .with_context(|| format!("cannot ingest {}", path.display()))
        .code(INGEST)
}

fn evaluate(id: ModelId, demo: &Demonstration, cfg: &Config) -> Result<slipfit::evidence::ModelEvidence, Failure> {
    let fit = fit_model(id, demo, &cfg.solver)
        .with_context(|| format!("fitting {id} failed"))
        .code(UNCLASSIFIABLE)?;
    let velocities = finite_diff_velocity(&demo.poses, cfg.ingestion.smoothing_window).code(UNCLASSIFIABLE)?;
    let friction = friction_estimates(demo, &velocities, &cfg.error_model);
    Ok(evaluate_model(fit, demo, &friction, &cfg.solver, &cfg.error_model))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Classify { file, json_out } => {
            let demo = load_demo(&file, &cfg)?;
            let report = slipfit::classify(&demo, &cfg).code(UNCLASSIFIABLE)?;
            if let Some(path) = json_out {
                io::write_json(&path, &report).code(UNCLASSIFIABLE)?;
            }
            let p = &report.posteriors.combined;
            println!("{}", report.model());
            println!(
                "posterior rigid {:.3}  slip {:.3}  free {:.3}",
                p.rigid, p.slip, p.free
            );
            for s in &report.base_scores {
                println!("  {:<10} {:>5} violations", s.base.as_str(), s.violations.map_or("-".into(), |v| v.to_string()));
            }
            if report.diagnostics.kinetic_absent {
                println!(
                    "kinetic evidence absent: {}",
                    report.diagnostics.kinetic_note.as_deref().unwrap_or("no grip data")
                );
            }
            for w in &report.diagnostics.warnings {
                log::warn!("{w}");
            }
        }
        Command::Fit { file, model } => {
            let demo = load_demo(&file, &cfg)?;
            let ev = evaluate(model, &demo, &cfg)?;
            let out = FitOutput {
                model,
                alpha: ev.fit.alpha,
                objective: ev.fit.objective,
                initial_objective: ev.fit.initial_objective,
                iterations: ev.fit.iterations,
                converged: ev.fit.converged,
                n_samples: ev.series.len(),
                violations: ev.counts,
                flagged_samples: ev.series.n_flagged(),
                mean_position_residual: ev.series.mean_e_r(),
            };
            println!("{}", serde_json::to_string_pretty(&out).code(UNCLASSIFIABLE)?);
        }
        Command::Simulate { spec, out, truth_out } => {
            let text = std::fs::read_to_string(&spec)
                .with_context(|| format!("cannot read {}", spec.display()))
                .code(USAGE)?;
            let scenario: ScenarioSpec = toml::from_str(&text)
                .with_context(|| format!("invalid scenario {}", spec.display()))
                .code(USAGE)?;
            let (demo, truth) = generate(&scenario).code(USAGE)?;
            io::write_demo_csv(&out, &demo).code(USAGE)?;
            if let Some(path) = truth_out {
                io::write_json(&path, &truth).code(USAGE)?;
            }
            log::info!("wrote {} samples of {} to {}", demo.len(), truth.id, out.display());
        }
        Command::Benchmark { n, preset, csv_out, json_out } => {
            let report = benchmark(n, preset, &cfg).code(USAGE)?;
            let csv = report.confusion_csv();
            if let Some(path) = csv_out {
                io::atomic_write(&path, csv.as_bytes()).code(USAGE)?;
            }
            if let Some(path) = json_out {
                io::write_json(&path, &report).code(USAGE)?;
            }
            print!("{csv}");
            for (name, a) in [("full", &report.full), ("hierarchical", &report.hierarchical), ("flat", &report.flat)] {
                println!(
                    "{name:<13} overall {:.3}  base {:.3}  planar rigid/slip merged {:.3}",
                    a.overall, a.base, a.overall_excluding_planar_degeneracy
                );
            }
            println!("slip true-positive rate {:.3}", report.slip_true_positive_rate);
        }
        Command::Residuals { file, model, out } => {
            let demo = load_demo(&file, &cfg)?;
            let ev = evaluate(model, &demo, &cfg)?;
            let mu = match &demo.tong {
                Some(tong) => match mu_series(tong, &cfg.friction) {
                    Ok(s) => Some(s),
                    Err(e) => {
                        log::warn!("{e}");
                        None
                    }
                },
                None => None,
            };
            let bytes = io::residuals_to_csv(&demo, &ev.series, mu.as_ref()).code(UNCLASSIFIABLE)?;
            io::atomic_write(&out, &bytes).code(USAGE)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
