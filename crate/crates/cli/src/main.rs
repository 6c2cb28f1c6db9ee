//! `cpr`: equilibrium solves, protocol sweeps and error metrics for
//! continuum parallel robots.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use cpr_statics::assembly::LoadSet;
use cpr_statics::scenario::{
    compute_error_metrics, export, load_description, load_loads, load_protocol, read_record,
    rod_shapes, run_sweep, solve_at, ActuationProtocol, ExportFormat, RobotDescription,
    SweepOptions, TrajectoryRecord, TrajectorySample,
};
use cpr_statics::solver::{SolveError, SolverConfig};

#[derive(Parser, Debug)]
#[command(name = "cpr", version, about = "Forward statics of continuum parallel robots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve one equilibrium at prescribed motor angles.
    Solve {
        /// Robot description (TOML); the shipped prototype when omitted.
        #[arg(long)]
        robot: Option<PathBuf>,
        /// Motor angles in rad, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        theta: Vec<f64>,
        /// Load description (TOML).
        #[arg(long)]
        loads: Option<PathBuf>,
        /// Output file (.csv or .json).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Arc-length stations per element for rod shapes (JSON output).
        #[arg(long)]
        shapes: Option<usize>,
        #[arg(long, default_value_t = 50)]
        max_iterations: usize,
    },
    /// Solve every sample of an actuation protocol.
    Sweep {
        #[arg(long)]
        robot: Option<PathBuf>,
        /// Actuation protocol (TOML); the shipped protocol when omitted.
        #[arg(long)]
        protocol: Option<PathBuf>,
        #[arg(long)]
        loads: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        shapes: Option<usize>,
        /// Solve samples independently from the straight guess, in parallel.
        #[arg(long)]
        cold: bool,
        #[arg(long, default_value_t = 50)]
        max_iterations: usize,
    },
    /// Position errors between a simulated and a reference trajectory.
    Metrics {
        #[arg(long)]
        sim: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Check description, protocol and load files against their schemas.
    Validate {
        #[arg(long)]
        robot: Option<PathBuf>,
        #[arg(long)]
        protocol: Option<PathBuf>,
        #[arg(long)]
        loads: Option<PathBuf>,
    },
}

/// Raised when the solver gives up; maps to exit code 2.
#[derive(Debug)]
struct NotConverged(String);

impl std::fmt::Display for NotConverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NotConverged {}

fn robot(path: Option<&Path>) -> Result<RobotDescription> {
    match path {
        Some(p) => load_description(p).with_context(|| format!("loading robot {}", p.display())),
        None => Ok(RobotDescription::prototype()),
    }
}

fn loads(path: Option<&Path>, model: &cpr_statics::RobotModel) -> Result<LoadSet> {
    let Some(p) = path else {
        return Ok(LoadSet::none());
    };
    let description = load_loads(p).with_context(|| format!("loading loads {}", p.display()))?;
    Ok(description.to_load_set(model)?)
}

fn solver_config(max_iterations: usize) -> SolverConfig {
    SolverConfig {
        max_iterations,
        ..SolverConfig::default()
    }
}

fn write_or_print(record: &TrajectoryRecord, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            export(record, ExportFormat::from_path(path), path)?;
            log::info!("wrote {}", path.display());
        }
        None => {
            let motors = record.samples.first().map_or(0, |s| s.motor_angles.len());
            print!("{}", cpr_statics::scenario::to_csv_string(record, motors));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve {
            robot: robot_path,
            theta,
            loads: loads_path,
            out,
            shapes,
            max_iterations,
        } => {
            let model = robot(robot_path.as_deref())?.to_model()?;
            if theta.len() != model.motors().len() {
                bail!(
                    "--theta has {} values, robot has {} motors",
                    theta.len(),
                    model.motors().len()
                );
            }
            let loads = loads(loads_path.as_deref(), &model)?;
            let report = match solve_at(&model, &theta, &loads, &solver_config(max_iterations)) {
                Ok(r) => r,
                Err(e @ SolveError::NoConvergence(_)) => return Err(NotConverged(e.to_string()).into()),
                Err(e) => return Err(e.into()),
            };
            log::info!(
                "converged in {} iterations, residual {:e}",
                report.iterations,
                report.final_residual()
            );
            let mut record = TrajectoryRecord::default();
            record.samples.push(TrajectorySample::from_report(1, &theta, &report));
            if let Some(per) = shapes {
                record.shapes.push(rod_shapes(&model, &report.final_state, per)?);
            }
            write_or_print(&record, out.as_deref())
        }
        Command::Sweep {
            robot: robot_path,
            protocol,
            loads: loads_path,
            out,
            shapes,
            cold,
            max_iterations,
        } => {
            let model = robot(robot_path.as_deref())?.to_model()?;
            let protocol = match protocol {
                Some(p) => load_protocol(&p).with_context(|| format!("loading protocol {}", p.display()))?,
                None => ActuationProtocol::prototype(),
            };
            let loads = loads(loads_path.as_deref(), &model)?;
            let options = SweepOptions {
                shape_stations: shapes,
                warm_start: !cold,
                ..SweepOptions::default()
            };
            match run_sweep(&model, &protocol, &loads, &solver_config(max_iterations), &options) {
                Ok(record) => write_or_print(&record, out.as_deref()),
                Err(err) => {
                    if let Some(path) = out.as_deref() {
                        export(&err.partial, ExportFormat::from_path(path), path)?;
                    }
                    match err.source {
                        SolveError::NoConvergence(_) => Err(NotConverged(err.to_string()).into()),
                        _ => Err(anyhow::Error::new(err)),
                    }
                }
            }
        }
        Command::Metrics { sim, reference } => {
            let sim = read_record(&sim).with_context(|| format!("reading {}", sim.display()))?;
            let reference =
                read_record(&reference).with_context(|| format!("reading {}", reference.display()))?;
            let metrics = compute_error_metrics(&sim, &reference)?;
            for (k, e) in metrics.per_sample_mm.iter().enumerate() {
                println!("sample {:>3}  {:.6} mm", k + 1, e);
            }
            println!("mean {:.6} mm", metrics.mean_mm);
            println!("max  {:.6} mm", metrics.max_mm);
            Ok(())
        }
        Command::Validate {
            robot: robot_path,
            protocol,
            loads: loads_path,
        } => {
            if robot_path.is_none() && protocol.is_none() && loads_path.is_none() {
                bail!("nothing to validate: pass --robot, --protocol or --loads");
            }
            let model = robot(robot_path.as_deref())?.to_model()?;
            if let Some(p) = &robot_path {
                println!("{}: ok ({} motors, {} rods)", p.display(), model.motors().len(), model.rods().len());
            }
            if let Some(p) = &protocol {
                let protocol = load_protocol(p).with_context(|| format!("loading protocol {}", p.display()))?;
                println!("{}: ok ({} motors)", p.display(), protocol.motor_count());
            }
            if let Some(p) = &loads_path {
                loads(Some(p), &model)?;
                println!("{}: ok", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<NotConverged>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
