//! `dvrlab` command line.
//!
//! Exit status: 0 on success, 1 on validation errors (bad arguments,
//! config, paths), 2 on runtime failures (non-convergence, failed runs,
//! failed verification checks).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dvrlab::dual_oracle;
use dvrlab::harness::experiment::{build_instance, run_experiment};
use dvrlab::harness::{reference_solution, ExperimentConfig};
use dvrlab::topology::{build_graph, laplacian, GraphSpec};
use dvrlab::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "dvrlab", version, about = "Decentralized variance-reduced optimization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Seed; overrides the config's seed list for `run`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for traces and summaries.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every (algorithm, seed) pair of an experiment config.
    Run { config: PathBuf },
    /// Spectral gap, eigenvalue range and Chebyshev degree of a graph
    /// (`ring:20`, `path:3`, `grid:9`, `complete:5`, `er:20:0.3`).
    Spectrum { graph: String },
    /// Dual-oracle verification suite on the default oracle instance.
    Verify,
    /// Reference solution of a config's problem.
    Solve { config: PathBuf },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    if !path.exists() {
        return Err(Failure::Validation(format!("config file not found: {}", path.display())));
    }
    Ok(ExperimentConfig::load(path)?)
}

fn cmd_run(cli: &Cli, path: &Path, out: &mut impl Write) -> Outcome {
    let mut cfg = load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    let out_dir = cli.out_dir.clone().or_else(|| cfg.output.dir.clone());
    let outcome = run_experiment(&cfg, out_dir.as_deref())?;
    let summary = &outcome.summary;
    match cli.format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(summary)?)?,
        Format::Csv => {
            writeln!(out, "algorithm,seed,ok,final_subopt,best_subopt,target_sim_time,target_n_grads,target_n_comms,wall_clock_s")?;
            for r in &summary.runs {
                let fmt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
                let t = r.reached_target.as_ref();
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{:.3}",
                    r.algorithm,
                    r.seed,
                    r.ok,
                    fmt(r.final_subopt),
                    fmt(r.best_subopt),
                    t.map(|m| m.sim_time.to_string()).unwrap_or_default(),
                    t.map(|m| m.n_grads.to_string()).unwrap_or_default(),
                    t.map(|m| m.n_comms.to_string()).unwrap_or_default(),
                    r.wall_clock_s
                )?;
            }
        }
    }
    if summary.failures > 0 {
        for r in summary.runs.iter().filter(|r| !r.ok) {
            log::error!("{} seed {}: {}", r.algorithm, r.seed, r.error.as_deref().unwrap_or(""));
        }
        return Err(Failure::Runtime(format!("{} of {} runs failed", summary.failures, summary.runs.len())));
    }
    Ok(())
}

fn cmd_spectrum(cli: &Cli, spec: &str, out: &mut impl Write) -> Outcome {
    let spec: GraphSpec = spec.parse()?;
    let graph = build_graph(&spec, cli.seed.unwrap_or(0))?;
    let report = laplacian(&graph).spectrum_report(&graph);
    match cli.format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?,
        Format::Csv => {
            writeln!(out, "n,edges,gamma,lambda_max,lambda_min_plus,chebyshev_degree,chebyshev_gamma")?;
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                report.n,
                report.edges,
                report.gamma,
                report.lambda_max,
                report.lambda_min_plus,
                report.chebyshev_degree,
                report.chebyshev_gamma
            )?;
        }
    }
    Ok(())
}

fn cmd_verify(cli: &Cli, out: &mut impl Write) -> Outcome {
    let report = dual_oracle::verify_suite(cli.seed.unwrap_or(0))?;
    match cli.format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?,
        Format::Csv => {
            writeln!(out, "check,bound,observed,pass,required")?;
            for c in &report.checks {
                writeln!(out, "{},{:e},{:e},{},{}", c.name, c.bound, c.observed, c.pass, c.required)?;
            }
        }
    }
    if let Some(dir) = &cli.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("verify.json"), serde_json::to_string_pretty(&report)?)?;
    }
    if report.all_pass {
        Ok(())
    } else {
        Err(Failure::Runtime("verification checks failed".into()))
    }
}

fn cmd_solve(cli: &Cli, path: &Path, out: &mut impl Write) -> Outcome {
    let cfg = load_config(path)?;
    let inst = build_instance(&cfg)?;
    let r = reference_solution(&inst.problem)?;
    match cli.format {
        Format::Json => {
            let v = serde_json::json!({ "problem": inst.problem.summary(), "reference": r });
            writeln!(out, "{}", serde_json::to_string_pretty(&v)?)?;
        }
        Format::Csv => {
            writeln!(out, "k,theta_star")?;
            for (k, t) in r.theta_star.iter().enumerate() {
                writeln!(out, "{k},{t:e}")?;
            }
        }
    }
    log::info!("F(theta*) = {:.16e}, |grad| = {:.3e}", r.f_star, r.grad_norm);
    if let Some(dir) = &cli.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("reference.json"), serde_json::to_string_pretty(&r)?)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let res = match &cli.command {
        Command::Run { config } => cmd_run(&cli, config, &mut out),
        Command::Spectrum { graph } => cmd_spectrum(&cli, graph, &mut out),
        Command::Verify => cmd_verify(&cli, &mut out),
        Command::Solve { config } => cmd_solve(&cli, config, &mut out),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
