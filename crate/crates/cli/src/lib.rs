//! Command-line front end for adaptive LQR experiments.
//!
//! The binary is a thin wrapper around [`run`], which tests can drive with
//! an in-memory stdout.

pub mod error;
pub mod persist;
pub mod svg;

use std::io::Write;
use std::path::{Path, PathBuf};

use adaptive_lqr::analysis::{self, RateEntry};
use adaptive_lqr::config::generate_system;
use adaptive_lqr::sim::{run_algorithm_observed, StepTrace};
use adaptive_lqr::sweep::MAX_FAILURE_FRACTION;
use adaptive_lqr::{linalg, run_sweep, ExperimentConfig, NoiseStreams, RateReport, RunOptions};
use clap::{Parser, Subcommand};
use serde::Serialize;

pub use error::{exit, CliError, CliResult};
use persist::ResultsManifest;

/// Overrides the config's base seed when set.
pub const SEED_ENV: &str = "ADAPTIVE_LQR_SEED";

#[derive(Debug, Parser)]
#[command(name = "adaptive-lqr", version, about = "Adaptive LQR experiments")]
pub struct Cli {
    /// Experiment config (JSON). Defaults to the built-in scalar benchmark.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Machine-readable JSON output.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads for `sweep`.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    pub jobs: usize,
    /// Output file (or directory for `sweep`).
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the Riccati equation of the configured system.
    Dare,
    /// Simulate one trajectory of the adaptive controller as CSV.
    Simulate {
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to the largest horizon of the sweep grid.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Run every (replicate, horizon) pair and write record files.
    Sweep,
    /// Fit log-log rates to the records of a results directory.
    Rates { dir: Option<PathBuf> },
    /// Draw log-log rate charts as SVG.
    Plot { dir: Option<PathBuf> },
    /// Sample a random system stabilized by `K0 = 0`.
    GenSystem {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long = "spectral-radius")]
        spectral_radius: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn run(cli: &Cli, stdout: &mut dyn Write) -> CliResult<()> {
    match &cli.command {
        Command::Dare => cmd_dare(cli, stdout),
        Command::Simulate { seed, horizon } => cmd_simulate(cli, *seed, *horizon, stdout),
        Command::Sweep => cmd_sweep(cli, stdout),
        Command::Rates { dir } => cmd_rates(cli, dir.as_deref(), stdout),
        Command::Plot { dir } => cmd_plot(cli, dir.as_deref(), stdout),
        Command::GenSystem {
            n,
            d,
            spectral_radius,
            seed,
        } => cmd_gen_system(cli, *n, *d, *spectral_radius, *seed, stdout),
    }
}

fn read_config_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(&path.display().to_string(), e))
}

/// Fully validated config, with the seed environment override applied.
pub fn load_config(path: Option<&Path>) -> CliResult<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_json_str(&read_config_text(p)?)?,
        None => ExperimentConfig::scalar_benchmark(),
    };
    if let Some(seed) = env_seed()? {
        cfg.sweep.seed = seed;
    }
    Ok(cfg)
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            CliError::new(
                exit::INVALID_CONFIG,
                format!("{SEED_ENV} must be a non-negative integer, got {v:?}"),
            )
        }),
        Err(_) => Ok(None),
    }
}

fn write_json<T: Serialize>(value: &T, out: &mut dyn Write) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io("writing stdout", e))
}

fn write_text(text: &str, out: &mut dyn Write) -> CliResult<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io("writing stdout", e))
}

#[derive(Debug, Serialize)]
struct DareOutput {
    n: usize,
    d: usize,
    /// Row major.
    #[serde(rename = "P")]
    p: Vec<f64>,
    #[serde(rename = "K")]
    k: Vec<f64>,
    residual: f64,
    closed_loop_radius: f64,
    iterations: usize,
}

fn format_matrix(name: &str, m: &nalgebra::DMatrix<f64>) -> String {
    let mut s = format!("{name} =\n");
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:>16.10}", m[(i, j)])).collect();
        s.push_str(&format!("  [{} ]\n", row.join("")));
    }
    s
}

fn cmd_dare(cli: &Cli, stdout: &mut dyn Write) -> CliResult<()> {
    // K0 plays no part here, so an unstabilizable system reaches the solver
    // and is reported as a numeric failure.
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_json_str_unchecked(&read_config_text(p)?)?,
        None => ExperimentConfig::scalar_benchmark(),
    };
    let spec = cfg.system_spec()?;
    let sol = adaptive_lqr::control::solve_dare(
        &spec.a,
        &spec.b,
        &spec.q,
        &spec.r,
        cfg.algo.dare_tol,
        cfg.algo.dare_max_iters,
    )?;
    if cli.json {
        write_json(
            &DareOutput {
                n: spec.n,
                d: spec.d,
                p: linalg::to_row_major(&sol.p),
                k: linalg::to_row_major(&sol.k),
                residual: sol.residual,
                closed_loop_radius: sol.closed_loop_radius,
                iterations: sol.iterations,
            },
            stdout,
        )
    } else {
        let mut text = format_matrix("P", &sol.p);
        text.push_str(&format_matrix("K", &sol.k));
        text.push_str(&format!("residual = {:.3e}\n", sol.residual));
        text.push_str(&format!("rho(A+BK) = {:.10}\n", sol.closed_loop_radius));
        text.push_str(&format!("iterations = {}\n", sol.iterations));
        write_text(&text, stdout)
    }
}

/// CSV header for a trajectory of an `n`-state, `d`-input system.
pub fn trajectory_header(n: usize, d: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..n).map(|i| format!("x{i}")));
    h.extend((0..d).map(|i| format!("u{i}")));
    h.extend((0..d).map(|i| format!("eta{i}")));
    h.push("cost".into());
    h.push("reset".into());
    h
}

fn cmd_simulate(
    cli: &Cli,
    seed: Option<u64>,
    horizon: Option<usize>,
    stdout: &mut dyn Write,
) -> CliResult<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let seed = seed.unwrap_or(cfg.sweep.seed);
    let horizon = horizon.unwrap_or_else(|| *cfg.sweep.t_grid.last().expect("validated grid"));
    let spec = cfg.system_spec()?;
    let algo = cfg.algo_config()?;

    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut csv_err: Option<csv::Error> = None;
    writer
        .write_record(trajectory_header(spec.n, spec.d))
        .map_err(|e| CliError::new(exit::IO, e.to_string()))?;
    let mut observer = |s: &StepTrace| {
        let mut row = Vec::with_capacity(3 + spec.n + 2 * spec.d);
        row.push(s.t.to_string());
        row.extend(s.x.iter().map(f64::to_string));
        row.extend(s.u.iter().map(f64::to_string));
        row.extend(s.eta.iter().map(f64::to_string));
        row.push(s.cost_increment.to_string());
        row.push(s.reset_reason.as_str().to_string());
        if let Err(e) = writer.write_record(&row) {
            csv_err.get_or_insert(e);
        }
    };
    let mut streams = NoiseStreams::new(seed, 0);
    run_algorithm_observed(
        &spec,
        &algo,
        &mut streams,
        horizon,
        &[],
        &RunOptions::default(),
        &mut observer,
    )?;
    if let Some(e) = csv_err {
        return Err(CliError::new(exit::IO, e.to_string()));
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| CliError::new(exit::IO, e.to_string()))?;
    persist::write_output(cli.out.as_deref(), &bytes, stdout)
}

#[derive(Debug, Serialize)]
struct SweepSummary {
    output_dir: String,
    records: usize,
    replicates: usize,
    failed_replicates: usize,
    config_hash: String,
}

fn cmd_sweep(cli: &Cli, stdout: &mut dyn Write) -> CliResult<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let dir = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let output = run_sweep(&cfg, cli.jobs)?;
    let files = persist::write_records(&dir, &output.records)?;
    let manifest = ResultsManifest {
        config_hash: cfg.config_hash(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        records: files,
        created_at: chrono::Utc::now().to_rfc3339(),
        replicates: output.replicates,
        failed_replicates: output.failed_replicates,
        config: cfg,
    };
    persist::write_manifest(&dir, &manifest)?;
    let summary = SweepSummary {
        output_dir: dir.display().to_string(),
        records: output.records.len(),
        replicates: output.replicates,
        failed_replicates: output.failed_replicates,
        config_hash: manifest.config_hash.clone(),
    };
    if cli.json {
        write_json(&summary, stdout)?;
    } else {
        write_text(
            &format!(
                "wrote {} records ({} replicates, {} failed) to {}\n",
                summary.records, summary.replicates, summary.failed_replicates, summary.output_dir
            ),
            stdout,
        )?;
    }
    if output.failure_fraction() > MAX_FAILURE_FRACTION {
        return Err(CliError::new(
            exit::NUMERIC_FAILURE,
            format!(
                "{} of {} replicates diverged",
                output.failed_replicates, output.replicates
            ),
        ));
    }
    Ok(())
}

fn results_dir(cli: &Cli, dir: Option<&Path>) -> CliResult<PathBuf> {
    if let Some(d) = dir {
        return Ok(d.to_path_buf());
    }
    Ok(PathBuf::from(load_config(cli.config.as_deref())?.output_dir))
}

/// Rate report over every record of a results directory.
pub fn report_for_dir(dir: &Path) -> CliResult<RateReport> {
    let records = persist::load_records(dir)?;
    Ok(analysis::rate_report(&records)?)
}

fn format_entry(e: &RateEntry) -> String {
    let (slope, stderr, r2) = match &e.fit {
        Some(f) => (
            format!("{:.4}", f.slope),
            f.stderr.map_or("-".into(), |e| format!("{e:.4}")),
            format!("{:.4}", f.r_squared),
        ),
        None => ("-".into(), "-".into(), "-".into()),
    };
    let band = match e.band.lo {
        Some(lo) => format!("[{lo}, {}]", e.band.hi),
        None => format!("<= {}", e.band.hi),
    };
    format!(
        "{:<16} {:>9} {:>9} {:>8}  {:<14} {}\n",
        e.metric,
        slope,
        stderr,
        r2,
        band,
        if e.pass { "PASS" } else { "FAIL" }
    )
}

/// Plain-text rendering of a rate report.
pub fn format_report(report: &RateReport) -> String {
    let mut s = format!(
        "horizons: {}\nreplicates per horizon: {}\nfailed records: {}\n\n",
        report
            .horizons
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" "),
        report
            .replicates_per_horizon
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(" "),
        report.failed_records
    );
    s.push_str(&format!(
        "{:<16} {:>9} {:>9} {:>8}  {:<14} {}\n",
        "metric", "slope", "stderr", "r2", "band", "result"
    ));
    for e in &report.entries {
        s.push_str(&format_entry(e));
    }
    s
}

fn cmd_rates(cli: &Cli, dir: Option<&Path>, stdout: &mut dyn Write) -> CliResult<()> {
    let report = report_for_dir(&results_dir(cli, dir)?)?;
    if let Some(path) = &cli.out {
        let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
        json.push(b'\n');
        persist::write_output(Some(path), &json, stdout)?;
    }
    if cli.json {
        write_json(&report, stdout)
    } else {
        write_text(&format_report(&report), stdout)
    }
}

fn series(report: &RateReport, metric: &str, color: &'static str) -> svg::Series {
    let entry = report.entry(metric).expect("report covers every metric");
    svg::Series {
        label: metric.to_string(),
        color,
        points: entry.medians.iter().map(|&(t, v)| (t as f64, v)).collect(),
        fit: entry.fit.clone(),
    }
}

/// SVG with a regret panel and an estimation-error panel.
pub fn plot_report(report: &RateReport) -> String {
    svg::render(&[
        svg::Panel {
            title: "median regret".into(),
            y_label: "regret".into(),
            series: vec![series(report, "regret", "#1f77b4")],
        },
        svg::Panel {
            title: "median estimation error".into(),
            y_label: "spectral norm error".into(),
            series: vec![
                series(report, "est_err_theta", "#d62728"),
                series(report, "est_err_K", "#2ca02c"),
            ],
        },
    ])
}

fn cmd_plot(cli: &Cli, dir: Option<&Path>, stdout: &mut dyn Write) -> CliResult<()> {
    let report = report_for_dir(&results_dir(cli, dir)?)?;
    persist::write_output(cli.out.as_deref(), plot_report(&report).as_bytes(), stdout)
}

fn cmd_gen_system(
    cli: &Cli,
    n: usize,
    d: usize,
    radius: f64,
    seed: u64,
    stdout: &mut dyn Write,
) -> CliResult<()> {
    let cfg = generate_system(n, d, radius, seed)?;
    let mut json = cfg.to_json_pretty();
    json.push('\n');
    persist::write_output(cli.out.as_deref(), json.as_bytes(), stdout)
}
