//! Thin CLI over the workload harness. See `examples/` for library use.

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

use farmem::harness::{emit_report, run_workload, Generator, ReportFormat, SizeSpec, WorkloadSpec};
use farmem::{FmError, LatencyMode, LatencyModel, PathPolicy};

/// Far-memory workload driver: run a generated or replayed access stream
/// against the hybrid runtime or a single-path baseline and report
/// transfer metrics.
#[derive(Parser, Debug)]
#[command(name = "farmem", version, about)]
struct Args {
    /// Workload: uniform | zipfian[:theta[:churn]] | seq_scan[:passes] |
    /// two_phase[:passes] | trace:<path>
    #[arg(long, default_value = "uniform")]
    workload: String,
    /// Number of objects.
    #[arg(long, default_value_t = 100_000)]
    objects: usize,
    /// Object size in bytes, fixed (`64`) or uniform range (`32:128`).
    #[arg(long, default_value = "64")]
    object_size: String,
    /// Access operations after the build phase.
    #[arg(long, default_value_t = 500_000)]
    ops: u64,
    /// Application worker threads.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Fraction of the working set that fits in local memory, (0, 1].
    #[arg(long, default_value_t = 0.25)]
    local_ratio: f64,
    /// hybrid | paging_only | object_only
    #[arg(long, default_value = "hybrid")]
    mode: String,
    /// Card-access-rate threshold for flipping a page to the paging path.
    #[arg(long, default_value_t = 0.80)]
    car_threshold: f64,
    /// Garbage ratio that makes a segment an evacuation candidate.
    #[arg(long, default_value_t = 0.5)]
    garbage_threshold: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// account_only | sleep
    #[arg(long, default_value = "account_only")]
    latency_mode: String,
    /// json | csv
    #[arg(long, default_value = "json")]
    format: String,
    /// Output path (stdout when omitted).
    #[arg(long)]
    out: Option<std::path::PathBuf>,
}

fn build_spec(args: &Args) -> Result<WorkloadSpec, FmError> {
    let latency = LatencyModel {
        mode: match args.latency_mode.as_str() {
            "account_only" | "account" => LatencyMode::AccountOnly,
            "sleep" => LatencyMode::Sleep,
            other => {
                return Err(FmError::Config(format!("unknown latency mode {other:?}")));
            }
        },
        ..LatencyModel::default()
    };
    Ok(WorkloadSpec {
        generator: Generator::parse(&args.workload)?,
        object_count: args.objects,
        object_size: SizeSpec::parse(&args.object_size)?,
        op_count: args.ops,
        worker_count: args.workers,
        local_ratio: args.local_ratio,
        mode: args.mode.parse::<PathPolicy>()?,
        seed: args.seed,
        car_threshold: args.car_threshold,
        garbage_threshold: args.garbage_threshold,
        latency,
        ..WorkloadSpec::default()
    })
}

fn main() -> ExitCode {
    let args = Args::parse();
    let format = match args.format.parse::<ReportFormat>() {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let spec = match build_spec(&args) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let report = match run_workload(&spec) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(match e {
                FmError::Config(_) => 2,
                FmError::Parse { .. } => 3,
                _ => 1,
            });
        }
    };
    let text = emit_report(&report, format);
    match &args.out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, text) {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            if stdout.write_all(text.as_bytes()).is_err() {
                return ExitCode::from(1);
            }
            let _ = stdout.write_all(b"\n");
        }
    }
    if report.has_violations() {
        eprintln!(
            "invariant audit failed: {:?}, checksum mismatches: {}",
            report.audit, report.checksum_mismatches
        );
        return ExitCode::from(4);
    }
    ExitCode::SUCCESS
}
