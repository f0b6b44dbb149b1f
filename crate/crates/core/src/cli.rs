//! `rpem simulate | fit | report`.
//!
//! Exit codes: 0 success (fit: converged), 1 fit finished without meeting
//! the stopping rule, 2 configuration/data/usage error, 3 simulation error,
//! 4 numerical failure during the fit (degenerate likelihood, starved
//! component, GMM collapse).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::driver::{fit, FitError};
use crate::io::config::RunConfig;
use crate::io::results::{param_rows, params_from_rows, percentage_error, percentage_table, thetas_to_string};
use crate::io::{dataset, fmt_f64, parse_params, params_to_string, write_atomic, write_result};
use crate::mixture::{CovarianceForm, MixtureParams};
use crate::rng::Streams;
use crate::sim::simulate;

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_CONVERGED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SIMULATION: i32 = 3;
pub const EXIT_FIT_FAILURE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "rpem", version, about = "Randomized parametric EM for nonlinear mixed-effects mixtures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset from the [sim] section of a config.
    Simulate(SimulateArgs),
    /// Fit a mixture to a dataset.
    Fit(FitArgs),
    /// Print the parameter table of a finished fit, optionally against truth.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Suppress progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for dataset.csv, truth.csv and population.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the result files.
    #[arg(long)]
    pub out: PathBuf,
    /// Population truth in params.csv layout (e.g. population.csv from simulate).
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Results directory written by `fit`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, String> {
    match workers {
        None => Ok(f()),
        Some(0) => Err("--workers must be at least 1".into()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| e.to_string()),
    }
}

fn load_truth(path: &Path) -> Result<MixtureParams, String> {
    let rows = parse_params(path).map_err(|e| e.to_string())?;
    params_from_rows(&rows).map(|(p, _)| p).map_err(|e| format!("{}: {e}", path.display()))
}

fn cmd_simulate(args: &SimulateArgs) -> i32 {
    let cfg = match RunConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let prepared = cfg.build_model().and_then(|m| cfg.sim_spec(m.as_ref()).map(|s| (m, s)));
    let (model, spec) = match prepared {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let seed = args.common.seed.unwrap_or(cfg.seed);
    let sim = match with_workers(args.common.workers, || simulate(&spec, model.as_ref(), &Streams::new(seed))) {
        Ok(Ok(s)) => s,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            return EXIT_SIMULATION;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let names = model.parameter_names();
    let ids: Vec<String> = sim.subjects.iter().map(|s| s.id().to_string()).collect();
    let write = || -> Result<(), String> {
        std::fs::create_dir_all(&args.out).map_err(|e| format!("{}: {e}", args.out.display()))?;
        dataset::write_dataset(&args.out.join("dataset.csv"), &sim.subjects).map_err(|e| e.to_string())?;
        write_atomic(&args.out.join("truth.csv"), thetas_to_string(&ids, &sim.components, &sim.thetas, &names).as_bytes())
            .map_err(|e| e.to_string())?;
        let rows = param_rows(&spec.truth, &names, CovarianceForm::Full, None);
        write_atomic(&args.out.join("population.csv"), params_to_string(&rows).as_bytes()).map_err(|e| e.to_string())
    };
    if let Err(e) = write() {
        eprintln!("error: {e}");
        return EXIT_SIMULATION;
    }
    let obs: usize = sim.subjects.iter().map(|s| s.num_observations()).sum();
    let redraws: usize = sim.redraws.iter().sum();
    println!("subjects\t{}", sim.subjects.len());
    println!("observations\t{obs}");
    println!("redraws\t{redraws}");
    EXIT_OK
}

fn cmd_fit(args: &FitArgs) -> i32 {
    let setup = || -> Result<_, String> {
        let cfg = RunConfig::load(&args.config).map_err(|e| e.to_string())?;
        let model = cfg.build_model().map_err(|e| e.to_string())?;
        let data = dataset::parse_dataset(&args.data).map_err(|e| e.to_string())?;
        let mut fit_cfg = cfg.fit_config_for(data.len()).map_err(|e| e.to_string())?;
        if let Some(s) = args.common.seed {
            fit_cfg.seed = s;
        }
        let err = cfg.error_model().map_err(|e| e.to_string())?;
        let init = cfg.initial_params(model.as_ref()).map_err(|e| e.to_string())?;
        let truth = args.truth.as_deref().map(load_truth).transpose()?;
        Ok((model, data, fit_cfg, err, init, truth))
    };
    let (model, data, fit_cfg, err, init, truth) = match setup() {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let quiet = args.common.quiet;
    let run = with_workers(args.common.workers, || {
        fit(&data, model.as_ref(), &err, init, &fit_cfg, |rec| {
            if !quiet {
                eprintln!("{}", rec.to_line());
            }
        })
    });
    let result = match run {
        Ok(Ok(r)) => r,
        Ok(Err(e @ FitError::Config(_))) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            return EXIT_FIT_FAILURE;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Err(e) = write_result(&result, &args.out, truth.as_ref()) {
        eprintln!("error: {e}");
        return EXIT_CONFIG;
    }
    if !quiet {
        eprintln!(
            "{} after {} iterations; results in {}",
            if result.converged { "converged" } else { "NOT converged" },
            result.iterations,
            args.out.display()
        );
    }
    if result.converged {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    }
}

fn trace_summary(path: &Path) -> Result<String, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut ll = Vec::new();
    let mut acc = Vec::new();
    for (j, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| s.parse::<f64>().map_err(|_| format!("{}, line {}: bad number '{s}'", path.display(), j + 1));
        if cols.len() != 3 {
            return Err(format!("{}, line {}: expected 3 columns", path.display(), j + 1));
        }
        ll.push(parse(cols[1])?);
        acc.push(parse(cols[2])?);
    }
    let (lo, hi) = ll.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    Ok(format!(
        "iterations\t{}\nfirst_loglik\t{}\nfinal_loglik\t{}\nmin_loglik\t{}\nmax_loglik\t{}\nmean_acceptance_rate\t{}\n",
        ll.len(),
        ll.first().map(|v| fmt_f64(*v)).unwrap_or_default(),
        ll.last().map(|v| fmt_f64(*v)).unwrap_or_default(),
        fmt_f64(lo),
        fmt_f64(hi),
        fmt_f64(acc.iter().sum::<f64>() / acc.len().max(1) as f64)
    ))
}

fn cmd_report(args: &ReportArgs) -> i32 {
    let params_path = args.out.join("params.csv");
    let report = || -> Result<String, String> {
        let text = std::fs::read_to_string(&params_path).map_err(|e| format!("{}: {e}", params_path.display()))?;
        let mut out = text.clone();
        let trace = args.out.join("trace.csv");
        if trace.exists() {
            out.push('\n');
            out.push_str(&trace_summary(&trace)?);
        }
        if let Some(t) = &args.truth {
            let truth = load_truth(t)?;
            let rows = crate::io::parse_params_str(&text).map_err(|e| e.in_file(&params_path).to_string())?;
            let (est, names) = params_from_rows(&rows).map_err(|e| e.to_string())?;
            out.push('\n');
            out.push_str(&percentage_table(&percentage_error(&est, &truth, &names)));
            let gmm_path = args.out.join("gmm_params.csv");
            if gmm_path.exists() {
                let rows = parse_params(&gmm_path).map_err(|e| e.to_string())?;
                let (g, _) = params_from_rows(&rows).map_err(|e| e.to_string())?;
                out.push_str("\nRPEM-GMM\n");
                out.push_str(&percentage_table(&percentage_error(&g, &truth, &names)));
            }
        }
        Ok(out)
    };
    match report() {
        Ok(text) => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Report(a) => cmd_report(a),
    }
}
