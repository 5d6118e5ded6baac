//! Set-associative caches with line reservation, MSHRs and a miss queue.
//!
//! Every call to [`Cache::access`] classifies into exactly one
//! [`AccessOutcome`] and records it against the fetch's stream. Structural
//! stalls are outcomes (`RESERVATION_FAIL` plus a [`FailOutcome`]), never
//! errors; the caller retries them.
//!
//! Lines are not sectored, so there is no sector-miss outcome.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec::Vec;

use crate::ids::{Addr, Cycle, KernelUid, StreamId};
use crate::stats::{LegacyStats, PerStreamCacheStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AccessType {
    GlobalR,
    GlobalW,
}

impl AccessType {
    pub const COUNT: usize = 2;
    pub const ALL: [AccessType; 2] = [AccessType::GlobalR, AccessType::GlobalW];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            AccessType::GlobalR => "GLOBAL_R",
            AccessType::GlobalW => "GLOBAL_W",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn is_write(self) -> bool {
        self == AccessType::GlobalW
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AccessOutcome {
    Hit,
    HitReserved,
    Miss,
    ReservationFail,
    MshrHit,
}

impl AccessOutcome {
    pub const COUNT: usize = 5;
    pub const ALL: [AccessOutcome; 5] = [
        AccessOutcome::Hit,
        AccessOutcome::HitReserved,
        AccessOutcome::Miss,
        AccessOutcome::ReservationFail,
        AccessOutcome::MshrHit,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            AccessOutcome::Hit => "HIT",
            AccessOutcome::HitReserved => "HIT_RESERVED",
            AccessOutcome::Miss => "MISS",
            AccessOutcome::ReservationFail => "RESERVATION_FAIL",
            AccessOutcome::MshrHit => "MSHR_HIT",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }

    /// Outcomes that an instant, structure-free LRU model would call a hit.
    pub fn is_hit_like(self) -> bool {
        matches!(
            self,
            AccessOutcome::Hit | AccessOutcome::HitReserved | AccessOutcome::MshrHit
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FailOutcome {
    LineAllocFail,
    MshrEntryFail,
    MshrMergeFail,
    MissQueueFull,
}

impl FailOutcome {
    pub const COUNT: usize = 4;
    pub const ALL: [FailOutcome; 4] = [
        FailOutcome::LineAllocFail,
        FailOutcome::MshrEntryFail,
        FailOutcome::MshrMergeFail,
        FailOutcome::MissQueueFull,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            FailOutcome::LineAllocFail => "LINE_ALLOC_FAIL",
            FailOutcome::MshrEntryFail => "MSHR_ENTRY_FAIL",
            FailOutcome::MshrMergeFail => "MSHR_MERGE_FAIL",
            FailOutcome::MissQueueFull => "MISS_QUEUE_FULL",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WritePolicy {
    /// Write hits update the line, misses are forwarded without allocating.
    /// All writes travel downstream.
    WriteThroughNoAllocate,
    /// Writes allocate on miss and mark the line dirty; dirty evictions are silent.
    WriteBackWriteAllocate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheConfig {
    pub num_sets: usize,
    pub num_ways: usize,
    pub line_size: u64,
    pub mshr_entries: usize,
    pub mshr_max_merge: usize,
    pub miss_queue_depth: usize,
    pub hit_latency: Cycle,
    pub write_policy: WritePolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CacheError {
    #[error("invalid cache config: {0}")]
    Config(&'static str),
    #[error("fill for line {0:#x} which is not reserved")]
    FillNotReserved(Addr),
}

impl CacheConfig {
    pub fn l1_default() -> Self {
        CacheConfig {
            num_sets: 64,
            num_ways: 4,
            line_size: 128,
            mshr_entries: 32,
            mshr_max_merge: 8,
            miss_queue_depth: 8,
            hit_latency: 30,
            write_policy: WritePolicy::WriteThroughNoAllocate,
        }
    }

    pub fn l2_default() -> Self {
        CacheConfig {
            num_sets: 512,
            num_ways: 16,
            line_size: 128,
            mshr_entries: 128,
            mshr_max_merge: 8,
            miss_queue_depth: 32,
            hit_latency: 100,
            write_policy: WritePolicy::WriteBackWriteAllocate,
        }
    }

    /// Same geometry, but with ways, MSHRs, merges and queue depth made large
    /// enough that no reservation fail or eviction can occur at desk scale.
    pub fn unbounded(self) -> Self {
        CacheConfig {
            num_ways: 1 << 20,
            mshr_entries: usize::MAX,
            mshr_max_merge: usize::MAX,
            miss_queue_depth: usize::MAX,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), CacheError> {
        if self.num_sets == 0 || !self.num_sets.is_power_of_two() {
            return Err(CacheError::Config("num_sets must be a power of two"));
        }
        if self.line_size == 0 || !self.line_size.is_power_of_two() {
            return Err(CacheError::Config("line_size must be a power of two"));
        }
        if self.num_ways == 0
            || self.mshr_entries == 0
            || self.mshr_max_merge == 0
            || self.miss_queue_depth == 0
        {
            return Err(CacheError::Config(
                "ways, MSHRs, merges and miss queue must be >= 1",
            ));
        }
        Ok(())
    }

    pub fn line_of(&self, addr: Addr) -> Addr {
        addr & !(self.line_size - 1)
    }

    pub fn set_of(&self, line_addr: Addr) -> usize {
        ((line_addr / self.line_size) % self.num_sets as u64) as usize
    }
}

/// One coalesced memory request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemFetch {
    pub line_addr: Addr,
    pub access_type: AccessType,
    pub stream_id: StreamId,
    pub kernel_uid: KernelUid,
    pub sm_id: Option<usize>,
    pub l1_bypass: bool,
    pub issue_cycle: Cycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessResult {
    pub outcome: AccessOutcome,
    pub fail: Option<FailOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineState {
    Valid,
    Reserved,
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Forward<W> {
    /// Line fill request for an allocated miss; the MSHR holds the waiters.
    Fill,
    /// Write-through traffic; the writer waits for the downstream ack.
    WriteThrough(W),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outgoing<W> {
    pub fetch: MemFetch,
    pub forward: Forward<W>,
}

#[derive(Debug, Clone)]
struct Line {
    line_addr: Addr,
    reserved: bool,
    dirty: bool,
    last_use: u64,
}

#[derive(Debug, Clone)]
struct Mshr<W> {
    waiters: Vec<W>,
    merges: usize,
}

/// A cache instance. `W` identifies whoever waits on a pending fill.
#[derive(Debug, Clone)]
pub struct Cache<W> {
    config: CacheConfig,
    // ways are materialized on first allocation, so very wide sets cost nothing
    sets: Vec<Vec<Line>>,
    use_clock: u64,
    mshrs: BTreeMap<Addr, Mshr<W>>,
    miss_queue: VecDeque<Outgoing<W>>,
    stats: PerStreamCacheStats,
    legacy: LegacyStats,
}

impl<W: Copy> Cache<W> {
    pub fn new(config: CacheConfig) -> Result<Self, CacheError> {
        config.validate()?;
        Ok(Cache {
            config,
            sets: (0..config.num_sets).map(|_| Vec::new()).collect(),
            use_clock: 0,
            mshrs: BTreeMap::new(),
            miss_queue: VecDeque::new(),
            stats: PerStreamCacheStats::new(),
            legacy: LegacyStats::new(),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn stats(&self) -> &PerStreamCacheStats {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut PerStreamCacheStats {
        &mut self.stats
    }

    pub fn legacy(&self) -> &LegacyStats {
        &self.legacy
    }

    pub fn live_mshrs(&self) -> usize {
        self.mshrs.len()
    }

    pub fn max_merges_in_flight(&self) -> usize {
        self.mshrs.values().map(|m| m.merges).max().unwrap_or(0)
    }

    pub fn probe(&self, line_addr: Addr) -> LineState {
        let line_addr = self.config.line_of(line_addr);
        match self.sets[self.config.set_of(line_addr)]
            .iter()
            .find(|l| l.line_addr == line_addr)
        {
            Some(l) if l.reserved => LineState::Reserved,
            Some(_) => LineState::Valid,
            None => LineState::Absent,
        }
    }

    /// Classifies one access and records it. `waiter` is stored when the
    /// access merges into or allocates an MSHR, or rides along with a
    /// write-through forward.
    pub fn access(&mut self, fetch: &MemFetch, cycle: Cycle, waiter: W) -> AccessResult {
        let result = self.classify(fetch, waiter);
        let stream = fetch.stream_id;
        let ty = fetch.access_type;
        self.stats.inc_stat(stream, ty, result.outcome);
        self.stats.inc_stat_pw(stream, ty, result.outcome);
        self.legacy.legacy_inc(cycle, stream, ty, result.outcome);
        if let Some(fail) = result.fail {
            self.stats.inc_fail_stat(stream, ty, fail);
            self.legacy.legacy_inc_fail(cycle, stream, ty, fail);
        }
        result
    }

    fn classify(&mut self, fetch: &MemFetch, waiter: W) -> AccessResult {
        let line_addr = self.config.line_of(fetch.line_addr);
        let set_idx = self.config.set_of(line_addr);
        let hit_way = self.sets[set_idx]
            .iter()
            .position(|l| l.line_addr == line_addr);

        if fetch.access_type.is_write()
            && self.config.write_policy == WritePolicy::WriteThroughNoAllocate
        {
            if self.miss_queue.len() >= self.config.miss_queue_depth {
                return fail(FailOutcome::MissQueueFull);
            }
            let outcome = match hit_way {
                Some(w) if self.sets[set_idx][w].reserved => AccessOutcome::HitReserved,
                Some(w) => {
                    self.use_clock += 1;
                    self.sets[set_idx][w].last_use = self.use_clock;
                    AccessOutcome::Hit
                }
                None => AccessOutcome::Miss,
            };
            self.miss_queue.push_back(Outgoing {
                fetch: MemFetch {
                    line_addr,
                    ..*fetch
                },
                forward: Forward::WriteThrough(waiter),
            });
            return ok(outcome);
        }

        if let Some(w) = hit_way {
            let line = &mut self.sets[set_idx][w];
            if !line.reserved {
                self.use_clock += 1;
                line.last_use = self.use_clock;
                line.dirty |= fetch.access_type.is_write();
                return ok(AccessOutcome::Hit);
            }
            let mshr = self
                .mshrs
                .get_mut(&line_addr)
                .expect("reserved line without MSHR entry");
            if mshr.merges >= self.config.mshr_max_merge {
                return fail(FailOutcome::MshrMergeFail);
            }
            mshr.merges += 1;
            mshr.waiters.push(waiter);
            line.dirty |= fetch.access_type.is_write();
            return ok(AccessOutcome::MshrHit);
        }

        let set = &self.sets[set_idx];
        let victim = if set.len() < self.config.num_ways {
            None
        } else {
            match set
                .iter()
                .enumerate()
                .filter(|(_, l)| !l.reserved)
                .min_by_key(|(_, l)| l.last_use)
            {
                Some((i, _)) => Some(i),
                None => return fail(FailOutcome::LineAllocFail),
            }
        };
        if self.mshrs.len() >= self.config.mshr_entries {
            return fail(FailOutcome::MshrEntryFail);
        }
        if self.miss_queue.len() >= self.config.miss_queue_depth {
            return fail(FailOutcome::MissQueueFull);
        }

        self.use_clock += 1;
        let line = Line {
            line_addr,
            reserved: true,
            dirty: fetch.access_type.is_write(),
            last_use: self.use_clock,
        };
        match victim {
            Some(i) => self.sets[set_idx][i] = line,
            None => self.sets[set_idx].push(line),
        }
        self.mshrs.insert(
            line_addr,
            Mshr {
                waiters: alloc::vec![waiter],
                merges: 0,
            },
        );
        self.miss_queue.push_back(Outgoing {
            fetch: MemFetch {
                line_addr,
                access_type: AccessType::GlobalR,
                ..*fetch
            },
            forward: Forward::Fill,
        });
        ok(AccessOutcome::Miss)
    }

    /// Completes a pending fill: the reserved line becomes valid and every
    /// merged waiter is returned in arrival order.
    pub fn fill(&mut self, line_addr: Addr) -> Result<Vec<W>, CacheError> {
        let line_addr = self.config.line_of(line_addr);
        let set_idx = self.config.set_of(line_addr);
        let line = self.sets[set_idx]
            .iter_mut()
            .find(|l| l.line_addr == line_addr && l.reserved)
            .ok_or(CacheError::FillNotReserved(line_addr))?;
        let mshr = self
            .mshrs
            .remove(&line_addr)
            .ok_or(CacheError::FillNotReserved(line_addr))?;
        line.reserved = false;
        Ok(mshr.waiters)
    }

    /// Requesters waiting on the pending fill of `line_addr`, oldest first.
    pub fn mshr_waiters(&self, line_addr: Addr) -> Option<&[W]> {
        self.mshrs
            .get(&self.config.line_of(line_addr))
            .map(|m| m.waiters.as_slice())
    }

    pub fn miss_queue_len(&self) -> usize {
        self.miss_queue.len()
    }

    pub fn peek_miss_queue(&self) -> Option<&Outgoing<W>> {
        self.miss_queue.front()
    }

    pub fn pop_miss_queue(&mut self) -> Option<Outgoing<W>> {
        self.miss_queue.pop_front()
    }

    pub fn is_idle(&self) -> bool {
        self.mshrs.is_empty() && self.miss_queue.is_empty()
    }
}

fn ok(outcome: AccessOutcome) -> AccessResult {
    AccessResult {
        outcome,
        fail: None,
    }
}

fn fail(f: FailOutcome) -> AccessResult {
    AccessResult {
        outcome: AccessOutcome::ReservationFail,
        fail: Some(f),
    }
}
