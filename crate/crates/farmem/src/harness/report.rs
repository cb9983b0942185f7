//! Run reports: ledger snapshots, amplification, path-selector time
//! series, per-phase breakdowns, and the JSON/CSV emitters.

use serde::{Deserialize, Serialize};

use crate::audit::AuditSummary;
use crate::config::PathPolicy;
use crate::error::{FmError, Result};
use crate::runtime::FlipSnapshot;
use crate::store::LedgerSnapshot;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsfSample {
    pub op_index: u64,
    pub phase: String,
    /// Fraction of resident pages whose path selector is Paging.
    pub paging_fraction: f64,
    pub resident_pages: usize,
    pub ledger: LedgerSnapshot,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseReport {
    pub name: String,
    pub ops: u64,
    /// Ledger delta over the phase.
    pub ledger: LedgerSnapshot,
    pub io_amplification: f64,
    pub psf_paging_fraction_end: f64,
    pub mean_psf_paging_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: PathPolicy,
    pub generator: String,
    pub object_count: usize,
    pub op_count: u64,
    pub worker_count: usize,
    pub local_ratio: f64,
    pub pool_capacity_pages: usize,
    pub working_set_pages: usize,
    pub seed: u64,
    pub car_threshold: f64,
    pub garbage_threshold: f64,
    pub ledger: LedgerSnapshot,
    /// bytes_in / useful_bytes (0 when nothing was fetched).
    pub io_amplification: f64,
    /// evict_work_units / bytes_out (0 when nothing was evicted).
    pub evict_work_per_evicted_byte: f64,
    pub flips: FlipSnapshot,
    pub final_psf_paging_fraction: f64,
    pub psf_series: Vec<PsfSample>,
    pub phases: Vec<PhaseReport>,
    pub simulated_time_ns: u64,
    pub wall_time_ms: u64,
    pub audit: AuditSummary,
    pub checksum_mismatches: u64,
}

impl RunReport {
    pub fn phase(&self, name: &str) -> Option<&PhaseReport> {
        self.phases.iter().find(|p| p.name == name)
    }

    /// Sum of ledger deltas over phases whose name passes the filter.
    pub fn ledger_over_phases(&self, mut filter: impl FnMut(&str) -> bool) -> LedgerSnapshot {
        let mut acc = LedgerSnapshot::default();
        for p in &self.phases {
            if filter(&p.name) {
                acc.pages_in += p.ledger.pages_in;
                acc.pages_out += p.ledger.pages_out;
                acc.objects_in += p.ledger.objects_in;
                acc.bytes_in += p.ledger.bytes_in;
                acc.bytes_out += p.ledger.bytes_out;
                acc.useful_bytes += p.ledger.useful_bytes;
                acc.evict_work_units += p.ledger.evict_work_units;
            }
        }
        acc
    }

    pub fn has_violations(&self) -> bool {
        self.audit.total() > 0 || self.checksum_mismatches > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = FmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(FmError::Config(format!("unknown format {other:?}"))),
        }
    }
}

/// Render a report. JSON carries the whole structure; CSV is one header
/// row plus one row per sample tick of the path-selector series.
pub fn emit_report(report: &RunReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(report).expect("report serializes")
        }
        ReportFormat::Csv => {
            let mut out = String::from(
                "op_index,phase,paging_fraction,resident_pages,pages_in,pages_out,objects_in,bytes_in,bytes_out,useful_bytes,evict_work_units\n",
            );
            for s in &report.psf_series {
                out.push_str(&format!(
                    "{},{},{:.6},{},{},{},{},{},{},{},{}\n",
                    s.op_index,
                    s.phase,
                    s.paging_fraction,
                    s.resident_pages,
                    s.ledger.pages_in,
                    s.ledger.pages_out,
                    s.ledger.objects_in,
                    s.ledger.bytes_in,
                    s.ledger.bytes_out,
                    s.ledger.useful_bytes,
                    s.ledger.evict_work_units,
                ));
            }
            out
        }
    }
}
