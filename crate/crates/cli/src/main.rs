//! `cma`: fit, profile, simulate and reproduce from the command line.
//!
//! Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O
//! error.

mod error;
mod io;
mod manifest;
mod reference;
mod report;
mod reproduce;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use cma_core::inference::wild_bootstrap;
use cma_core::multilevel::{cma_h_inner, fit_method, Method, H_VARIANCE_FLOOR};
use cma_core::simulate::{gen_multilevel, gen_single, Design, Estimator};
use cma_core::single_level::{fit_single, profile_loglik_curve};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use error::{CliError, Result};
use manifest::{sidecar, write_manifest, ManifestBuilder};
use report::{bootstrap_section, multi_report, single_report, MultiContext};
use reproduce::{ReproduceOptions, Target};

const CONFIG_SCHEMA: &str = include_str!("../config.schema.json");

#[derive(Parser)]
#[command(name = "cma", version, about = "Mediation analysis with correlated mediator and outcome errors")]
struct Cli {
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Base seed for simulation and bootstrap.
    #[arg(long, global = true, env = "CMA_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form single-session fit at a given delta.
    FitSingle {
        /// CSV with header z,m,r.
        input: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        delta: f64,
        /// Confidence level of the reported intervals.
        #[arg(long, default_value_t = 0.95)]
        confidence: f64,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multilevel fit.
    FitMulti {
        /// CSV with header subject,session,z,m,r.
        input: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Required for method ts.
        #[arg(long, allow_hyphen_values = true)]
        delta: Option<f64>,
        #[arg(long, default_value_t = 0.95)]
        confidence: f64,
        /// Number of wild-bootstrap replicates (at least 100).
        #[arg(long)]
        bootstrap: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Objective as a function of delta, written as CSV.
    Profile {
        input: PathBuf,
        #[arg(long, value_enum)]
        level: ProfileLevel,
        /// Grid as from:to:points.
        #[arg(long, default_value = "-0.95:0.95:39", allow_hyphen_values = true)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generates a dataset from a JSON design config.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs a simulation study and writes it beside the published values.
    Reproduce {
        #[arg(value_enum)]
        target: Target,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Subject counts for fig5/fig6.
        #[arg(long, value_delimiter = ',', default_value = "50,200,500")]
        n_grid: Vec<usize>,
        /// Session counts for fig5/fig6.
        #[arg(long, value_delimiter = ',', default_value = "4")]
        k_grid: Vec<usize>,
    },
    /// Prints the JSON schema of simulation configs.
    Schema,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum MethodArg {
    Ml,
    H,
    Ts,
    HTs,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ml => Method::Ml,
            MethodArg::H => Method::H,
            MethodArg::Ts => Method::Ts,
            MethodArg::HTs => Method::HTs,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ProfileLevel {
    Single,
    Multi,
}

fn check_delta(delta: f64) -> Result<()> {
    if delta.is_finite() && delta.abs() < 1.0 {
        Ok(())
    } else {
        Err(CliError::Validation(format!("--delta must lie in (-1, 1), got {delta}")))
    }
}

fn check_confidence(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(CliError::Validation(format!("--confidence must lie in (0, 1), got {level}")))
    }
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || CliError::Validation(format!("--grid must be from:to:points, got '{spec}'"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let from: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let to: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let points: usize = parts[2].trim().parse().map_err(|_| bad())?;
    check_delta(from)?;
    check_delta(to)?;
    if points == 0 || to < from || (points == 1 && from != to) {
        return Err(bad());
    }
    if points == 1 {
        return Ok(vec![from]);
    }
    let step = (to - from) / (points - 1) as f64;
    Ok((0..points).map(|i| if i + 1 == points { to } else { from + step * i as f64 }).collect())
}

/// Writes a JSON report to `out` with a manifest beside it, or to stdout.
fn emit<T: Serialize>(report: &T, out: Option<&Path>, manifest: ManifestBuilder) -> Result<()> {
    match out {
        Some(path) => {
            io::write_json(path, report)?;
            write_manifest(&sidecar(path), &manifest.finish(vec![path.to_path_buf()]))
        }
        None => {
            let text = serde_json::to_string_pretty(report)
                .map_err(|e| CliError::Numerical(format!("report serialization: {e}")))?;
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                    Err(CliError::io("<stdout>", e))
                }
                _ => Ok(()),
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    }
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::FitSingle {
            input,
            delta,
            confidence,
            out,
        } => {
            check_delta(delta)?;
            check_confidence(confidence)?;
            let m = ManifestBuilder::new(
                "fit-single",
                json!({ "input": input, "delta": delta, "confidence": confidence }),
                seed,
            );
            let series = io::read_single(&input)?;
            let fit = fit_single(&series, delta)?;
            emit(&single_report(&fit, confidence, seed)?, out.as_deref(), m)
        }
        Command::FitMulti {
            input,
            method,
            delta,
            confidence,
            bootstrap,
            out,
        } => {
            let method = Method::from(method);
            match (method, delta) {
                (Method::Ts, None) => {
                    return Err(CliError::Validation("method ts requires --delta".into()))
                }
                (Method::Ts, Some(d)) => check_delta(d)?,
                (_, Some(_)) => {
                    return Err(CliError::Validation(format!(
                        "--delta applies only to method ts; {} estimates delta",
                        method
                    )))
                }
                _ => {}
            }
            check_confidence(confidence)?;
            if let Some(b) = bootstrap {
                if b < cma_core::inference::MIN_INTERVAL_REPLICATES {
                    return Err(CliError::Validation(format!(
                        "--bootstrap needs at least {} replicates, got {b}",
                        cma_core::inference::MIN_INTERVAL_REPLICATES
                    )));
                }
            }
            let m = ManifestBuilder::new(
                "fit-multi",
                json!({
                    "input": input,
                    "method": method.to_string(),
                    "delta": delta,
                    "confidence": confidence,
                    "bootstrap": bootstrap,
                }),
                seed,
            );
            let data = io::read_multilevel(&input)?;
            let fit = fit_method(&data, method, delta)?;
            let boot = match bootstrap {
                Some(b) => {
                    let run = wild_bootstrap(&data, &Estimator::Multilevel { method, delta }, b, seed)?;
                    Some(bootstrap_section(&run, confidence)?)
                }
                None => None,
            };
            let ctx = MultiContext {
                seed,
                n_subjects: data.n_subjects(),
                n_sessions: data.n_sessions(),
                total_trials: data.total_trials(),
                level: confidence,
            };
            emit(&multi_report(&fit, &ctx, boot), out.as_deref(), m)
        }
        Command::Profile {
            input,
            level,
            grid,
            out,
        } => {
            let deltas = parse_grid(&grid)?;
            let m = ManifestBuilder::new(
                "profile",
                json!({ "input": input, "level": level, "grid": grid }),
                seed,
            );
            // Multilevel rows also count variance components at the floor;
            // such states are skipped by the h fit.
            let (header, rows): (Vec<&str>, Vec<Vec<String>>) = match level {
                ProfileLevel::Single => {
                    let curve = profile_loglik_curve(&io::read_single(&input)?, &deltas)?;
                    let rows = curve.iter().map(|(d, v)| vec![d.to_string(), v.to_string()]).collect();
                    (vec!["delta", "objective"], rows)
                }
                ProfileLevel::Multi => {
                    let data = io::read_multilevel(&input)?;
                    let rows = deltas
                        .par_iter()
                        .map(|&d| {
                            cma_h_inner(&data, d).map(|s| {
                                let floored = s.floored_components(H_VARIANCE_FLOOR);
                                vec![d.to_string(), s.h_value.to_string(), floored.to_string()]
                            })
                        })
                        .collect::<cma_core::Result<_>>()?;
                    (vec!["delta", "objective", "floored"], rows)
                }
            };
            let header: Vec<String> = header.into_iter().map(String::from).collect();
            io::write_rows(&out, &header, &rows)?;
            write_manifest(&sidecar(&out), &m.finish(vec![out.clone()]))
        }
        Command::Simulate { config, out } => {
            let text = io::read_to_string(&config)?;
            let mut design: Design = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", config.display())))?;
            if let Some(s) = cli.seed {
                match &mut design {
                    Design::Single(c) => c.seed = s,
                    Design::Multilevel(c) => c.seed = s,
                }
            }
            design.validate()?;
            let used_seed = match &design {
                Design::Single(c) => c.seed,
                Design::Multilevel(c) => c.seed,
            };
            let m = ManifestBuilder::new(
                "simulate",
                serde_json::to_value(&design).expect("config serializes"),
                used_seed,
            );
            match &design {
                Design::Single(c) => io::write_single(&out, &gen_single(c)?)?,
                Design::Multilevel(c) => io::write_multilevel(&out, &gen_multilevel(c)?)?,
            }
            write_manifest(&sidecar(&out), &m.finish(vec![out.clone()]))
        }
        Command::Reproduce {
            target,
            reps,
            out_dir,
            n_grid,
            k_grid,
        } => {
            let opts = ReproduceOptions {
                target,
                reps: reps.unwrap_or(target.default_reps()),
                seed,
                n_grid,
                k_grid,
            };
            if opts.reps == 0 {
                return Err(CliError::Validation("--reps must be at least 1".into()));
            }
            if opts.n_grid.iter().any(|&n| n < 2) || opts.k_grid.iter().any(|&k| k < 1) {
                return Err(CliError::Validation(
                    "--n-grid entries must be at least 2 and --k-grid entries at least 1".into(),
                ));
            }
            let m = ManifestBuilder::new(
                "reproduce",
                serde_json::to_value(&opts).expect("options serialize"),
                seed,
            );
            let path = reproduce::run(&opts, &out_dir)?;
            write_manifest(&sidecar(&path), &m.finish(vec![path.clone()]))
        }
        Command::Schema => {
            let mut stdout = std::io::stdout().lock();
            match stdout.write_all(CONFIG_SCHEMA.as_bytes()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                    Err(CliError::io("<stdout>", e))
                }
                _ => Ok(()),
            }
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
