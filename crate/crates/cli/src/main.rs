//! `vpon`: run split-DBA scenarios and compare scheduling modes.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid config or arguments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use vpon_core::codec::PcapWriter;
use vpon_core::config::{load_config, LoadError, LoadedConfig};
use vpon_core::metrics::{export_samples_csv, export_summary_csv, Summary};
use vpon_core::sim::{self, ComparisonReport, SchedulingMode, SimError};

#[derive(Parser)]
#[command(name = "vpon", version, about = "Split DBA simulator for virtual PONs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and print its latency summary.
    Run {
        #[command(flatten)]
        common: Common,
        /// Write departing downstream frames and DBRus to a PCAP file.
        #[arg(long)]
        pcap: Option<PathBuf>,
    },
    /// Run the scenario under Standard, FastIntercept and FixedAllocation.
    Compare {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    config: PathBuf,
    /// Override a config field, e.g. `--set delays.prop_delay_ns=50000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    duration_ns: Option<u64>,
}

enum Failure {
    Config(String),
    Io(String),
}

impl Failure {
    fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Failure::Io(format!("{}: {err}", path.display()))
    }
}

impl From<LoadError> for Failure {
    fn from(err: LoadError) -> Self {
        match err {
            LoadError::Io { .. } => Failure::Io(err.to_string()),
            LoadError::Config(e) => Failure::Config(format!("invalid config: {e}")),
        }
    }
}

fn load(common: &Common) -> Result<LoadedConfig, Failure> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(d) = common.duration_ns {
        overrides.push(format!("duration_ns={d}"));
    }
    Ok(load_config(&common.config, &overrides)?)
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> Result<String, Failure> {
    let text = serde_json::to_string_pretty(value).expect("report types serialize");
    if let Some(path) = path {
        fs::write(path, &text).map_err(|e| Failure::io(path, e))?;
    }
    Ok(text)
}

fn cmd_run(common: &Common, pcap: Option<&Path>) -> Result<(), Failure> {
    let cfg = load(common)?;
    let pcap_path = pcap.or(cfg.output.pcap_path.as_deref());
    let report = match pcap_path {
        Some(path) => {
            let mut writer = PcapWriter::create(path).map_err(|e| Failure::io(path, e))?;
            let report = sim::run_with_sink(&cfg.scenario, &mut writer).map_err(|e| match e {
                SimError::Config(c) => Failure::Config(format!("invalid config: {c}")),
                SimError::Io(io) => Failure::io(path, io),
            })?;
            writer.flush().map_err(|e| Failure::io(path, e))?;
            report
        }
        None => sim::run(&cfg.scenario).map_err(|e| Failure::Config(format!("invalid config: {e}")))?,
    };
    let summary = report.summary();
    let json = write_json(cfg.output.json_path.as_deref(), &summary)?;
    if let Some(path) = cfg.output.csv_path.as_deref() {
        export_summary_csv(&summary, path).map_err(|e| Failure::io(path, e))?;
    }
    if let Some(path) = cfg.output.samples_path.as_deref() {
        export_samples_csv(&report.samples, path).map_err(|e| Failure::io(path, e))?;
    }
    let stats = write_json(None, &report.stats)?;
    print!("{}", render_run(&json, &stats));
    Ok(())
}

fn cmd_compare(common: &Common) -> Result<(), Failure> {
    let cfg = load(common)?;
    let scenarios: Vec<_> = SchedulingMode::ALL.iter().map(|m| cfg.scenario.with_mode(*m)).collect();
    let report = sim::compare(&scenarios).map_err(|e| Failure::Config(format!("invalid config: {e}")))?;
    let json = write_json(cfg.output.json_path.as_deref(), &report)?;
    print!("{}", render_compare(&json));
    Ok(())
}

fn us(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |ns| format!("{:.1}", ns / 1000.0))
}

fn us_int(v: Option<u64>) -> String {
    us(v.map(|ns| ns as f64))
}

fn summary_rows(out: &mut String, label: &str, summary: &Summary) {
    for g in &summary.groups {
        let path = g.path.map_or("all".to_string(), |p| format!("{p:?}"));
        let s = &g.grant_latency;
        let _ = writeln!(
            out,
            "{label:<16} {:<11} {path:<7} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9} {:>11}",
            g.class.to_string(),
            g.count,
            us(s.mean_ns),
            us_int(s.p50_ns),
            us_int(s.p95_ns),
            us_int(s.p99_ns),
            us_int(s.max_ns),
            us(g.service_latency.mean_ns),
        );
    }
}

fn header(out: &mut String) {
    let _ = writeln!(
        out,
        "{:<16} {:<11} {:<7} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9} {:>11}",
        "mode", "class", "path", "count", "mean_us", "p50_us", "p95_us", "p99_us", "max_us", "service_us"
    );
}

/// Renders the exported summary and run counters.
fn render_run(summary_json: &str, stats_json: &str) -> String {
    let summary: Summary = serde_json::from_str(summary_json).expect("summary JSON written by this program");
    let stats: Value = serde_json::from_str(stats_json).expect("stats JSON written by this program");
    let mut out = String::new();
    let mode = stats["mode"].as_str().unwrap_or("?");
    let _ = writeln!(out, "grant latency (report created -> grant at ONU)");
    header(&mut out);
    summary_rows(&mut out, mode, &summary);
    let _ = writeln!(
        out,
        "frames {}  dbrus {}  requests {}/{} completed  fast drops {}  host slips {}  trace {:016x}",
        stats["frames_emitted"],
        stats["dbru_on_arrival"].as_u64().unwrap_or(0) + stats["dbru_solicited"].as_u64().unwrap_or(0),
        stats["requests_completed"],
        stats["requests_created"],
        stats["drops"],
        stats["host_slips"],
        stats["trace_hash"].as_u64().unwrap_or(0),
    );
    out
}

/// Renders the exported comparison report.
fn render_compare(json: &str) -> String {
    let report: ComparisonReport = serde_json::from_str(json).expect("comparison JSON written by this program");
    let mut out = String::new();
    let _ = writeln!(out, "grant latency (report created -> grant at ONU)");
    header(&mut out);
    for run in &report.runs {
        summary_rows(&mut out, &run.mode.to_string(), &run.summary);
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<16} {:<11} {:>12} {:>12} {:>20}",
        "mode", "class", "mean_us", "base_us", "faster_than_base_us"
    );
    for d in &report.deltas {
        let _ = writeln!(
            out,
            "{:<16} {:<11} {:>12} {:>12} {:>20}",
            d.mode.to_string(),
            d.class.to_string(),
            us(d.mean_ns),
            us(d.baseline_mean_ns),
            us(d.delta_mean_ns),
        );
    }
    let _ = writeln!(out, "baseline: {}", report.baseline);
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { common, pcap } => cmd_run(common, pcap.as_deref()),
        Command::Compare { common } => cmd_compare(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
