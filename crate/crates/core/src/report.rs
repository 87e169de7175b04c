//! Metrics documents: JSON for full detail, CSV for one row per run.

use crate::error::{Error, Result};
use crate::harness::RunResult;

/// Column order of the CSV export. Stable across releases; new columns are
/// only ever appended.
pub const CSV_HEADER: [&str; 26] = [
    "workload",
    "mode",
    "elide",
    "pair_alloc",
    "policy",
    "seed",
    "ops",
    "clients",
    "object_flushes",
    "log_flushes",
    "marker_flushes",
    "checksum_flushes",
    "reclaim_flushes",
    "total_flushes",
    "total_barriers",
    "object_blocks_skipped",
    "skipped_fraction",
    "average_dirtiness",
    "writebacks_by_eviction",
    "txns_started",
    "physically_committed",
    "read_only",
    "aborted",
    "tracker_hits",
    "tracker_misses",
    "tracker_evictions",
];

fn row(r: &RunResult) -> Vec<String> {
    let c = &r.runtime;
    vec![
        r.workload.clone(),
        r.mode.to_string(),
        r.elide.to_string(),
        r.pair_alloc.to_string(),
        r.policy.to_string(),
        r.seed.to_string(),
        r.ops.to_string(),
        r.clients.to_string(),
        c.object_flushes.to_string(),
        c.log_flushes.to_string(),
        c.marker_flushes.to_string(),
        c.checksum_flushes.to_string(),
        c.reclaim_flushes.to_string(),
        c.total_flushes().to_string(),
        c.total_barriers().to_string(),
        c.object_blocks_skipped.to_string(),
        format!("{:.6}", r.skipped_fraction),
        format!("{:.6}", r.average_dirtiness),
        r.flush.writebacks_by_eviction.to_string(),
        r.txns.started.to_string(),
        r.txns.physically_committed.to_string(),
        r.txns.read_only.to_string(),
        r.txns.aborted.to_string(),
        r.tracker.hits.to_string(),
        r.tracker.misses.to_string(),
        r.tracker.evictions.to_string(),
    ]
}

/// CSV with [`CSV_HEADER`] followed by one row per result. An empty slice
/// yields the header alone.
pub fn to_csv(results: &[RunResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in results {
        w.write_record(row(r)).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Pretty JSON array. Wall-clock fields are not serialized, so equal runs
/// produce identical documents.
pub fn to_json(results: &[RunResult]) -> Result<String> {
    Ok(serde_json::to_string_pretty(results)?)
}

/// Accepts a single result object or an array of them.
pub fn parse_results(text: &str) -> Result<Vec<RunResult>> {
    let v: serde_json::Value = serde_json::from_str(text)?;
    Ok(if v.is_array() {
        serde_json::from_value(v)?
    } else {
        vec![serde_json::from_value(v)?]
    })
}
