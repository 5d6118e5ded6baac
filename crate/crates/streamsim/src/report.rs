//! CSV export of run results and oracle reports.
//!
//! One header row, then `stat,<scope>,<stream>,<type>,<outcome>,<count>`
//! rows for every nonzero cell and `ktime,<stream>,<uid>,<start>,<end>`
//! rows. Scopes are `L1_total` and `L2`. Fail cells use the fail outcome
//! name in the outcome column.

use std::path::Path;

use streamsim_core::oracle::OracleReport;
use streamsim_core::stats::LEGACY_STREAM_KEY;
use streamsim_core::{AccessType, SimResults, StatKey, StatsMode};

pub const CSV_HEADER: [&str; 6] = ["kind", "scope", "stream", "type", "outcome", "count"];
pub const SCOPE_L1: &str = "L1_total";
pub const SCOPE_L2: &str = "L2";

/// What the oracle CSV reports per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    /// `ACCESSES` rows from the coalescing count.
    Counts,
    /// `HIT` and `MISS` rows from the LRU replay.
    Replay,
}

struct Sheet(csv::Writer<Vec<u8>>);

impl Sheet {
    fn new() -> Self {
        let mut w = csv::WriterBuilder::new()
            .flexible(true)
            .from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        Sheet(w)
    }

    fn stat(&mut self, scope: &str, stream: &str, ty: AccessType, outcome: &str, n: u64) {
        self.0
            .write_record(["stat", scope, stream, ty.name(), outcome, &n.to_string()])
            .expect("in-memory write");
    }

    fn ktime(&mut self, stream: u64, uid: u64, start: u64, end: u64) {
        self.0
            .write_record([
                "ktime".to_string(),
                stream.to_string(),
                uid.to_string(),
                start.to_string(),
                end.to_string(),
            ])
            .expect("in-memory write");
    }

    fn finish(self) -> String {
        String::from_utf8(self.0.into_inner().expect("in-memory flush")).expect("ascii rows")
    }
}

/// The CSV view of a run. It carries the same cells as the log's final
/// summary: per stream, or the `all` aggregate in legacy mode.
pub fn results_csv(r: &SimResults) -> String {
    let mut sheet = Sheet::new();
    for (scope, per_stream, legacy) in [
        (SCOPE_L1, &r.l1_total, &r.l1_legacy),
        (SCOPE_L2, &r.l2, &r.l2_legacy),
    ] {
        match r.stats_mode {
            StatsMode::PerStream => {
                for s in per_stream.streams() {
                    for (ty, key, n) in per_stream.cells(s) {
                        sheet.stat(scope, &s.to_string(), ty, key.name(), n);
                    }
                }
            }
            StatsMode::Legacy => {
                for (ty, key, n) in legacy.cells() {
                    sheet.stat(scope, LEGACY_STREAM_KEY, ty, key.name(), n);
                }
            }
        }
    }
    for (s, uid, t) in r.times.entries() {
        if let Some(end) = t.end_cycle {
            sheet.ktime(s.0, uid.0, t.start_cycle, end);
        }
    }
    sheet.finish()
}

pub fn oracle_csv(report: &OracleReport, mode: OracleMode) -> String {
    let mut sheet = Sheet::new();
    for scope in [SCOPE_L1, SCOPE_L2] {
        for (s, sr) in &report.streams {
            let level = if scope == SCOPE_L1 { &sr.l1 } else { &sr.l2 };
            for ty in AccessType::ALL {
                let cells = match mode {
                    OracleMode::Counts => vec![("ACCESSES", Some(level.accesses(ty)))],
                    OracleMode::Replay => {
                        vec![("HIT", level.hits(ty)), ("MISS", level.misses(ty))]
                    }
                };
                for (name, n) in cells {
                    if let Some(n) = n.filter(|&n| n != 0) {
                        sheet.stat(scope, &s.to_string(), ty, name, n);
                    }
                }
            }
        }
    }
    sheet.finish()
}

pub fn write_csv(path: &Path, text: &str) -> std::io::Result<()> {
    std::fs::write(path, text)
}

/// Parses a `stat` cell key back out of its outcome name.
pub fn stat_key(name: &str) -> Option<StatKey> {
    streamsim_core::AccessOutcome::from_name(name)
        .map(StatKey::Outcome)
        .or_else(|| streamsim_core::FailOutcome::from_name(name).map(StatKey::Fail))
}
