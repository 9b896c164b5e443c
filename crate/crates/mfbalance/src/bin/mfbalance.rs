//! Command-line front end: trace generation, series analysis, single
//! simulations, grid sweeps, and report rendering.
//!
//! Exit codes: 0 success, 2 config/input error, 3 calibration failure,
//! 4 degenerate data, 5 total sweep failure. `MFBALANCE_LOG` sets the
//! log level (error, warn, info, debug).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use mfbalance::engine::{self, MethodSel, RuleSetConfig, ScenarioGrid, SimConfig};
use mfbalance::error::Error;
use mfbalance::fractal::{mfdfa, QGrid, ScalePlan};
use mfbalance::report;
use mfbalance::traffic::{synthesize_trace, CalibrationPolicy, Series, TrafficSpec};

#[derive(Parser)]
#[command(name = "mfbalance", version, about = "Self-similar NIDS load-balancing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a calibrated multifractal packet trace (CSV).
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Estimate h(q), H and dh from a one-column numeric series file.
    Analyze {
        /// Input series file, one value per line.
        input: PathBuf,
        /// Comma-separated q grid, e.g. "-5,-3,-1,1,2,3,5".
        #[arg(long)]
        qgrid: Option<String>,
        /// Scale plan "min:count:order", e.g. "16:12:2".
        #[arg(long)]
        scales: Option<String>,
    },
    /// Run one simulation from a JSON config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        method: Option<String>,
    },
    /// Run a scenario grid and render the paired SM/PM table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Re-render the side-by-side table from a sweep CSV.
    Report {
        /// Sweep CSV produced by the sweep subcommand.
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("MFBALANCE_LOG", "warn"),
    )
    .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Calibration { .. } => 3,
        Error::DegenerateInput(_) => 4,
        _ => 2,
    }
}

#[derive(Deserialize)]
struct GenerateConfig {
    traffic: TrafficSpec,
    #[serde(default)]
    rules: Option<RuleSetConfig>,
    #[serde(default)]
    calibration: Option<CalibrationPolicy>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn dispatch(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Generate { config, out, seed } => cmd_generate(&config, &out, seed),
        Command::Analyze {
            input,
            qgrid,
            scales,
        } => cmd_analyze(&input, qgrid.as_deref(), scales.as_deref()),
        Command::Simulate {
            config,
            out,
            seed,
            method,
        } => cmd_simulate(&config, &out, seed, method.as_deref()),
        Command::Sweep {
            config,
            grid,
            out,
            jobs,
        } => cmd_sweep(&config, &grid, &out, jobs),
        Command::Report { input } => cmd_report(&input),
    }
}

fn cmd_generate(config: &Path, out: &Path, seed: u64) -> Result<ExitCode, Error> {
    let cfg: GenerateConfig = read_json(config)?;
    cfg.traffic.validate().map_err(reclassify_config)?;
    let class_ids: Vec<u8> = cfg.traffic.class_mix.iter().map(|s| s.class.id).collect();
    let rules = cfg
        .rules
        .unwrap_or(RuleSetConfig::Uniform {
            permit_per_class: 4,
            prohibit_per_class: 2,
            cost: 1.0,
            total_block_prob: 0.1,
        })
        .build(&class_ids)?;
    let calib = cfg.calibration.unwrap_or_default();
    let trace = synthesize_trace(&cfg.traffic, &rules, &calib, seed)?;
    std::fs::write(out, report::trace_csv(&trace.packets))?;
    println!("H={:.6} dh={:.6}", trace.achieved_h, trace.achieved_dh);
    log::info!(
        "trace: {} packets over {} slots -> {}",
        trace.packets.len(),
        cfg.traffic.n_slots,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Validation problems in user-supplied configs are config errors for
/// exit-code purposes.
fn reclassify_config(e: Error) -> Error {
    match e {
        Error::Parameter { name, reason } => Error::Config(format!("{name}: {reason}")),
        other => other,
    }
}

fn cmd_analyze(input: &Path, qgrid: Option<&str>, scales: Option<&str>) -> Result<ExitCode, Error> {
    let text = std::fs::read_to_string(input)
        .map_err(|e| Error::Config(format!("{}: {e}", input.display())))?;
    let values = report::parse_series_file(&text)?;
    let grid = match qgrid {
        Some(spec) => {
            let qs: Result<Vec<f64>, _> = spec.split(',').map(|s| s.trim().parse()).collect();
            QGrid::new(qs.map_err(|e| Error::Config(format!("qgrid: {e}")))?)
                .map_err(reclassify_config)?
        }
        None => QGrid::default_grid(),
    };
    let plan = match scales {
        Some(spec) => {
            let parts: Vec<&str> = spec.split(':').collect();
            if parts.len() != 3 {
                return Err(Error::Config("scales spec must be min:count:order".into()));
            }
            let parse =
                |s: &str| -> Result<usize, Error> { s.parse().map_err(|e| Error::Config(format!("scales: {e}"))) };
            ScalePlan::for_length_with(values.len(), parse(parts[0])?, parse(parts[1])?, parse(parts[2])?)
                .map_err(reclassify_config)?
        }
        None => ScalePlan::for_length(values.len()).map_err(reclassify_config)?,
    };
    let series = Series::new(values);
    let est = match mfdfa(&series, &grid, &plan) {
        // short input is an input problem, not a degenerate series
        Err(Error::Parameter { name, reason }) => {
            return Err(Error::Config(format!("{name}: {reason}")))
        }
        other => other?,
    };
    print!("{}", report::analyze_output(&est));
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    method: Option<&str>,
) -> Result<ExitCode, Error> {
    let mut cfg: SimConfig = read_json(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(m) = method {
        cfg.method = parse_method(m)?;
    }
    cfg.validate().map_err(reclassify_config)?;
    let output = engine::run(&cfg)?;
    let mut csv = String::from(report::REPORT_CSV_HEADER);
    csv.push('\n');
    for r in &output.reports {
        csv.push_str(&report::report_csv_row(r));
        csv.push('\n');
    }
    std::fs::write(out, csv)?;
    let audit_path = out.with_extension("rules.jsonl");
    std::fs::write(&audit_path, report::audit_jsonl(&output.audit)?)?;
    for r in &output.reports {
        println!(
            "{}: loss={:.4}% imb={:.6} not_analyzed={:.4}%",
            r.method.as_str(),
            r.loss_pct,
            r.imb_tot,
            r.not_analyzed_pct
        );
    }
    log::info!("report -> {}, audit -> {}", out.display(), audit_path.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_method(s: &str) -> Result<MethodSel, Error> {
    match s.to_ascii_lowercase().as_str() {
        "sm" => Ok(MethodSel::Sm),
        "pm" => Ok(MethodSel::Pm),
        "both" => Ok(MethodSel::Both),
        other => Err(Error::Config(format!("unknown method `{other}`"))),
    }
}

#[derive(Deserialize)]
struct GridAxes {
    #[serde(rename = "H_values")]
    h_values: Vec<f64>,
    dh_values: Vec<f64>,
    lambda_values: Vec<f64>,
    seeds: Vec<u64>,
}

fn cmd_sweep(config: &Path, grid: &Path, out: &Path, jobs: usize) -> Result<ExitCode, Error> {
    let base: SimConfig = read_json(config)?;
    let axes: GridAxes = read_json(grid)?;
    let grid = ScenarioGrid {
        h_values: axes.h_values,
        dh_values: axes.dh_values,
        lambda_values: axes.lambda_values,
        seeds: axes.seeds,
        base,
    };
    grid.validate().map_err(reclassify_config)?;
    let rows = engine::sweep(&grid, jobs.max(1))?;
    std::fs::write(out, report::sweep_csv(&rows))?;
    print!("{}", report::render_table(&rows));
    let failures: Vec<&engine::SweepRow> =
        rows.iter().filter(|r| r.outcome.is_err()).collect();
    if !failures.is_empty() {
        println!("\n{} of {} runs failed:", failures.len(), rows.len());
        for row in &failures {
            println!(
                "  H={:.2} dh={:.1} lambda={:.3} seed={}: {}",
                row.target_h,
                row.target_dh,
                row.lambda,
                row.seed,
                row.outcome.as_ref().unwrap_err()
            );
        }
    }
    if failures.len() == rows.len() {
        return Ok(ExitCode::from(5));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(input: &Path) -> Result<ExitCode, Error> {
    let text = std::fs::read_to_string(input)
        .map_err(|e| Error::Config(format!("{}: {e}", input.display())))?;
    let rows = parse_sweep_csv(&text)?;
    print!("{}", report::render_table(&rows));
    Ok(ExitCode::SUCCESS)
}

/// Rebuilds sweep rows from the report CSV for re-rendering.
fn parse_sweep_csv(text: &str) -> Result<Vec<engine::SweepRow>, Error> {
    use mfbalance::metrics::{CounterSummary, Method, RunReport, ScenarioInfo};
    let mut rows: Vec<engine::SweepRow> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != report::REPORT_CSV_HEADER {
                return Err(Error::Config("not a sweep CSV (bad header)".into()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(Error::Config(format!("line {}: want 10 fields", lineno + 1)));
        }
        let num = |s: &str| -> Result<f64, Error> {
            s.parse().map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))
        };
        let scenario = ScenarioInfo {
            target_h: num(f[0])?,
            target_dh: num(f[1])?,
            achieved_h: num(f[2])?,
            achieved_dh: num(f[3])?,
            lambda: num(f[4])?,
            seed: f[9]
                .parse()
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?,
        };
        let method = match f[5] {
            "SM" => Method::Sm,
            "PM" => Method::Pm,
            other => return Err(Error::Config(format!("line {}: method {other}", lineno + 1))),
        };
        let report = RunReport {
            scenario,
            method,
            loss_pct: num(f[6])?,
            imb_tot: num(f[7])?,
            not_analyzed_pct: num(f[8])?,
            per_epoch: Vec::new(),
            counters: CounterSummary {
                offered: 0,
                dropped: 0,
                not_analyzed: 0,
                blocked: 0,
                permitted: 0,
                in_flight: 0,
            },
        };
        rows.push(engine::SweepRow {
            target_h: scenario.target_h,
            target_dh: scenario.target_dh,
            lambda: scenario.lambda,
            seed: scenario.seed,
            outcome: Ok(vec![report]),
        });
    }
    Ok(rows)
}
