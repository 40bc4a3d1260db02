//! Report serialization: a fixed-layout CSV and a full-fidelity JSON dump.

use std::fs;
use std::path::Path;

use super::metrics::MetricsReport;
use super::HarnessError;

pub const CSV_HEADER: &str =
    "scheme,f,block_mb,tx_count,tsr,tps,lat_mean,lat_p50,lat_p99,conflicts,retries";

/// Fixed-precision row format keeps re-exports byte-identical.
pub fn csv_row(r: &MetricsReport) -> String {
    format!(
        "{},{:.1},{},{},{:.4},{:.4},{:.2},{:.2},{:.2},{},{}",
        r.scheme,
        r.skewness,
        r.block_size_mb,
        r.tx_count,
        r.tsr,
        r.tps,
        r.latency.mean_ms,
        r.latency.p50_ms,
        r.latency.p99_ms,
        r.mvcc_conflicts,
        r.retries,
    )
}

pub fn csv_string(reports: &[MetricsReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

pub fn export_csv(reports: &[MetricsReport], path: &Path) -> Result<(), HarnessError> {
    fs::write(path, csv_string(reports))?;
    Ok(())
}

pub fn json_string(reports: &[MetricsReport]) -> Result<String, HarnessError> {
    let mut s = serde_json::to_string_pretty(reports)
        .map_err(|e| HarnessError::ConfigInvalid(format!("report serialization: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn export_json(reports: &[MetricsReport], path: &Path) -> Result<(), HarnessError> {
    fs::write(path, json_string(reports)?)?;
    Ok(())
}
