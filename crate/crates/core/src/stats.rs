//! Stream-keyed cache statistics and kernel timing tables.
//!
//! Every counter is addressed by `(StreamId, AccessType, AccessOutcome)` (or
//! `FailOutcome` for the fail matrix). Absent rows read as zero. Alongside the
//! per-stream tables, [`LegacyStats`] keeps the stream-oblivious aggregate in
//! which same-cycle increments of one cell from different streams collapse
//! into a single count.

use alloc::collections::BTreeMap;
use core::fmt;

use crate::cache::{AccessOutcome, AccessType, FailOutcome};
use crate::ids::{Cycle, KernelUid, StreamId};

pub const L1_TOTAL_NAME: &str = "Total_core_cache_stats_breakdown";
pub const L2_NAME: &str = "L2_cache_stats_breakdown";

/// Stream key printed for the legacy (stream-oblivious) aggregate.
pub const LEGACY_STREAM_KEY: &str = "all";

pub type OutcomeMatrix = [[u64; AccessOutcome::COUNT]; AccessType::COUNT];
pub type FailMatrix = [[u64; FailOutcome::COUNT]; AccessType::COUNT];

/// Either side of the stats table: a regular outcome or a fail outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StatKey {
    Outcome(AccessOutcome),
    Fail(FailOutcome),
}

impl StatKey {
    pub fn name(self) -> &'static str {
        match self {
            StatKey::Outcome(o) => o.name(),
            StatKey::Fail(f) => f.name(),
        }
    }

    pub fn is_fail(self) -> bool {
        matches!(self, StatKey::Fail(_))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PerStreamCacheStats {
    stats: BTreeMap<StreamId, OutcomeMatrix>,
    stats_pw: BTreeMap<StreamId, OutcomeMatrix>,
    fail_stats: BTreeMap<StreamId, FailMatrix>,
}

impl PerStreamCacheStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn inc_stat(&mut self, stream: StreamId, ty: AccessType, outcome: AccessOutcome) {
        self.stats.entry(stream).or_default()[ty.index()][outcome.index()] += 1;
    }

    pub fn inc_stat_pw(&mut self, stream: StreamId, ty: AccessType, outcome: AccessOutcome) {
        self.stats_pw.entry(stream).or_default()[ty.index()][outcome.index()] += 1;
    }

    pub fn inc_fail_stat(&mut self, stream: StreamId, ty: AccessType, fail: FailOutcome) {
        self.fail_stats.entry(stream).or_default()[ty.index()][fail.index()] += 1;
    }

    pub fn get(&self, stream: StreamId, ty: AccessType, outcome: AccessOutcome) -> u64 {
        self.stats
            .get(&stream)
            .map_or(0, |m| m[ty.index()][outcome.index()])
    }

    pub fn get_pw(&self, stream: StreamId, ty: AccessType, outcome: AccessOutcome) -> u64 {
        self.stats_pw
            .get(&stream)
            .map_or(0, |m| m[ty.index()][outcome.index()])
    }

    pub fn get_fail(&self, stream: StreamId, ty: AccessType, fail: FailOutcome) -> u64 {
        self.fail_stats
            .get(&stream)
            .map_or(0, |m| m[ty.index()][fail.index()])
    }

    /// Reads either matrix; `StatKey::Fail` selects the fail table.
    pub fn lookup(&self, stream: StreamId, ty: AccessType, key: StatKey) -> u64 {
        match key {
            StatKey::Outcome(o) => self.get(stream, ty, o),
            StatKey::Fail(f) => self.get_fail(stream, ty, f),
        }
    }

    /// Streams with at least one row in any table, ascending.
    pub fn streams(&self) -> impl Iterator<Item = StreamId> + '_ {
        let mut all: alloc::vec::Vec<StreamId> = self
            .stats
            .keys()
            .chain(self.fail_stats.keys())
            .chain(self.stats_pw.keys())
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        all.into_iter()
    }

    /// Sum of all outcomes of one stream over both access types.
    pub fn total(&self, stream: StreamId) -> u64 {
        self.stats
            .get(&stream)
            .map_or(0, |m| m.iter().flatten().sum())
    }

    /// Sum of all outcomes of one stream and access type.
    pub fn total_of(&self, stream: StreamId, ty: AccessType) -> u64 {
        self.stats
            .get(&stream)
            .map_or(0, |m| m[ty.index()].iter().sum())
    }

    pub fn fail_total(&self, stream: StreamId) -> u64 {
        self.fail_stats
            .get(&stream)
            .map_or(0, |m| m.iter().flatten().sum())
    }

    /// Cell-wise addition of `source` into `self`, keeping stream keys.
    pub fn merge(&mut self, source: &PerStreamCacheStats) {
        fn add_rows<const N: usize>(
            dst: &mut BTreeMap<StreamId, [[u64; N]; AccessType::COUNT]>,
            src: &BTreeMap<StreamId, [[u64; N]; AccessType::COUNT]>,
        ) {
            for (stream, m) in src {
                let row = dst.entry(*stream).or_insert([[0; N]; AccessType::COUNT]);
                for (d, s) in row.iter_mut().flatten().zip(m.iter().flatten()) {
                    *d += *s;
                }
            }
        }
        add_rows(&mut self.stats, &source.stats);
        add_rows(&mut self.stats_pw, &source.stats_pw);
        add_rows(&mut self.fail_stats, &source.fail_stats);
    }

    pub fn clear_pw(&mut self, stream: StreamId) {
        self.stats_pw.remove(&stream);
    }

    /// Nonzero cells of one stream, types outer and outcomes inner, then the
    /// fail cells in the same order.
    pub fn cells(&self, stream: StreamId) -> impl Iterator<Item = (AccessType, StatKey, u64)> + '_ {
        let outcomes = AccessType::ALL.into_iter().flat_map(move |ty| {
            AccessOutcome::ALL
                .into_iter()
                .map(move |o| (ty, StatKey::Outcome(o), self.get(stream, ty, o)))
        });
        let fails = AccessType::ALL.into_iter().flat_map(move |ty| {
            FailOutcome::ALL
                .into_iter()
                .map(move |f| (ty, StatKey::Fail(f), self.get_fail(stream, ty, f)))
        });
        outcomes.chain(fails).filter(|&(_, _, n)| n != 0)
    }

    /// Prints the cumulative breakdown of `stream` only, followed by its fail
    /// breakdown under `<cache_name>_fail`.
    pub fn print_breakdown<W: fmt::Write>(
        &self,
        sink: &mut W,
        stream: StreamId,
        cache_name: &str,
    ) -> fmt::Result {
        for (ty, key, n) in self.cells(stream) {
            write_stat_line(sink, cache_name, &stream, ty, key, n)?;
        }
        Ok(())
    }

    pub fn print_breakdown_pw<W: fmt::Write>(
        &self,
        sink: &mut W,
        stream: StreamId,
        cache_name: &str,
    ) -> fmt::Result {
        for ty in AccessType::ALL {
            for o in AccessOutcome::ALL {
                let n = self.get_pw(stream, ty, o);
                if n != 0 {
                    write_stat_line(sink, cache_name, &stream, ty, StatKey::Outcome(o), n)?;
                }
            }
        }
        Ok(())
    }
}

/// Writes one `<name>[stream=<sid>][<TYPE>][<OUTCOME>] = <count>` line. Fail
/// keys get the `_fail` suffix on the cache name.
pub fn write_stat_line<W: fmt::Write>(
    sink: &mut W,
    cache_name: &str,
    stream: &dyn fmt::Display,
    ty: AccessType,
    key: StatKey,
    count: u64,
) -> fmt::Result {
    let suffix = if key.is_fail() { "_fail" } else { "" };
    writeln!(
        sink,
        "{cache_name}{suffix}[stream={stream}][{}][{}] = {count}",
        ty.name(),
        key.name()
    )
}

/// Stream-oblivious aggregate counters reproducing the under-count of
/// per-cycle collapsed updates.
///
/// A cell remembers the cycle and stream of its last accepted increment. An
/// increment from a *different* stream in that same cycle is dropped; repeat
/// increments from the same stream are kept.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LegacyStats {
    counts: OutcomeMatrix,
    fail_counts: FailMatrix,
    last: [[Option<(Cycle, StreamId)>; AccessOutcome::COUNT]; AccessType::COUNT],
    last_fail: [[Option<(Cycle, StreamId)>; FailOutcome::COUNT]; AccessType::COUNT],
}

fn collapse_inc(
    slot: &mut Option<(Cycle, StreamId)>,
    count: &mut u64,
    cycle: Cycle,
    stream: StreamId,
) -> bool {
    if let Some((c, s)) = *slot {
        if c == cycle && s != stream {
            return false;
        }
    }
    *slot = Some((cycle, stream));
    *count += 1;
    true
}

impl LegacyStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns whether the aggregate was incremented.
    pub fn legacy_inc(
        &mut self,
        cycle: Cycle,
        stream: StreamId,
        ty: AccessType,
        outcome: AccessOutcome,
    ) -> bool {
        let (t, o) = (ty.index(), outcome.index());
        collapse_inc(&mut self.last[t][o], &mut self.counts[t][o], cycle, stream)
    }

    pub fn legacy_inc_fail(
        &mut self,
        cycle: Cycle,
        stream: StreamId,
        ty: AccessType,
        fail: FailOutcome,
    ) -> bool {
        let (t, f) = (ty.index(), fail.index());
        collapse_inc(
            &mut self.last_fail[t][f],
            &mut self.fail_counts[t][f],
            cycle,
            stream,
        )
    }

    pub fn get(&self, ty: AccessType, outcome: AccessOutcome) -> u64 {
        self.counts[ty.index()][outcome.index()]
    }

    pub fn get_fail(&self, ty: AccessType, fail: FailOutcome) -> u64 {
        self.fail_counts[ty.index()][fail.index()]
    }

    pub fn lookup(&self, ty: AccessType, key: StatKey) -> u64 {
        match key {
            StatKey::Outcome(o) => self.get(ty, o),
            StatKey::Fail(f) => self.get_fail(ty, f),
        }
    }

    /// Adds counts only; collapse state is per cache instance and not merged.
    pub fn merge_counts(&mut self, source: &LegacyStats) {
        for (d, s) in self
            .counts
            .iter_mut()
            .flatten()
            .zip(source.counts.iter().flatten())
        {
            *d += *s;
        }
        for (d, s) in self
            .fail_counts
            .iter_mut()
            .flatten()
            .zip(source.fail_counts.iter().flatten())
        {
            *d += *s;
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = (AccessType, StatKey, u64)> + '_ {
        let outcomes = AccessType::ALL.into_iter().flat_map(move |ty| {
            AccessOutcome::ALL
                .into_iter()
                .map(move |o| (ty, StatKey::Outcome(o), self.get(ty, o)))
        });
        let fails = AccessType::ALL.into_iter().flat_map(move |ty| {
            FailOutcome::ALL
                .into_iter()
                .map(move |f| (ty, StatKey::Fail(f), self.get_fail(ty, f)))
        });
        outcomes.chain(fails).filter(|&(_, _, n)| n != 0)
    }

    pub fn print_breakdown<W: fmt::Write>(&self, sink: &mut W, cache_name: &str) -> fmt::Result {
        for (ty, key, n) in self.cells() {
            write_stat_line(sink, cache_name, &LEGACY_STREAM_KEY, ty, key, n)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelTime {
    pub start_cycle: Cycle,
    pub end_cycle: Option<Cycle>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TimeTableError {
    #[error("kernel uid {uid} on stream {stream} launched twice")]
    DuplicateLaunch { stream: StreamId, uid: KernelUid },
    #[error("kernel uid {uid} on stream {stream} finished without a recorded launch")]
    DoneWithoutLaunch { stream: StreamId, uid: KernelUid },
    #[error("kernel uid {uid} on stream {stream} finished twice")]
    AlreadyDone { stream: StreamId, uid: KernelUid },
    #[error("kernel uid {uid} on stream {stream} ends at {end} but started at {start}")]
    EmptyInterval {
        stream: StreamId,
        uid: KernelUid,
        start: Cycle,
        end: Cycle,
    },
}

/// Launch and exit cycles of every kernel, keyed by stream then uid.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KernelTimeTable {
    times: BTreeMap<StreamId, BTreeMap<KernelUid, KernelTime>>,
    last_stream: Option<StreamId>,
    last_uid: Option<KernelUid>,
}

impl KernelTimeTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_launch(
        &mut self,
        stream: StreamId,
        uid: KernelUid,
        cycle: Cycle,
    ) -> Result<(), TimeTableError> {
        let inner = self.times.entry(stream).or_default();
        if inner.contains_key(&uid) {
            return Err(TimeTableError::DuplicateLaunch { stream, uid });
        }
        inner.insert(
            uid,
            KernelTime {
                start_cycle: cycle,
                end_cycle: None,
            },
        );
        Ok(())
    }

    pub fn record_done(
        &mut self,
        stream: StreamId,
        uid: KernelUid,
        cycle: Cycle,
    ) -> Result<(), TimeTableError> {
        let entry = self
            .times
            .get_mut(&stream)
            .and_then(|m| m.get_mut(&uid))
            .ok_or(TimeTableError::DoneWithoutLaunch { stream, uid })?;
        if entry.end_cycle.is_some() {
            return Err(TimeTableError::AlreadyDone { stream, uid });
        }
        if cycle <= entry.start_cycle {
            return Err(TimeTableError::EmptyInterval {
                stream,
                uid,
                start: entry.start_cycle,
                end: cycle,
            });
        }
        entry.end_cycle = Some(cycle);
        self.last_stream = Some(stream);
        self.last_uid = Some(uid);
        Ok(())
    }

    pub fn get(&self, stream: StreamId, uid: KernelUid) -> Option<KernelTime> {
        self.times.get(&stream).and_then(|m| m.get(&uid)).copied()
    }

    /// Stream of the most recently completed kernel.
    pub fn last_stream_id(&self) -> Option<StreamId> {
        self.last_stream
    }

    pub fn last_uid(&self) -> Option<KernelUid> {
        self.last_uid
    }

    /// All entries in ascending (stream, uid) order.
    pub fn entries(&self) -> impl Iterator<Item = (StreamId, KernelUid, KernelTime)> + '_ {
        self.times
            .iter()
            .flat_map(|(s, m)| m.iter().map(move |(u, t)| (*s, *u, *t)))
    }

    pub fn stream_entries(
        &self,
        stream: StreamId,
    ) -> impl Iterator<Item = (KernelUid, KernelTime)> + '_ {
        self.times
            .get(&stream)
            .into_iter()
            .flat_map(|m| m.iter().map(|(u, t)| (*u, *t)))
    }

    pub fn print_entry<W: fmt::Write>(
        &self,
        sink: &mut W,
        stream: StreamId,
        uid: KernelUid,
    ) -> fmt::Result {
        if let Some(t) = self.get(stream, uid) {
            write_time_line(sink, stream, uid, t)?;
        }
        Ok(())
    }

    pub fn print_all<W: fmt::Write>(&self, sink: &mut W) -> fmt::Result {
        for (s, u, t) in self.entries() {
            write_time_line(sink, s, u, t)?;
        }
        Ok(())
    }
}

fn write_time_line<W: fmt::Write>(
    sink: &mut W,
    stream: StreamId,
    uid: KernelUid,
    t: KernelTime,
) -> fmt::Result {
    match t.end_cycle {
        Some(end) => writeln!(
            sink,
            "gpu_kernel_time[stream={stream}][uid={uid}] = {}:{end}",
            t.start_cycle
        ),
        None => Ok(()),
    }
}
