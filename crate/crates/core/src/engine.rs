//! Cycle engine: stream-aware launch window, block scheduling, in-order warp
//! issue and the L1/L2 request flow.
//!
//! Per cycle, in order:
//! 1. launch window (cycle 0 and the cycle after any kernel exit),
//! 2. block scheduling,
//! 3. events due this cycle (fills, responses, warp completions),
//! 4. warp issue into each SM's L1 (bypassing loads go to the L2 port),
//! 5. L2 port: one L1 miss-queue head per SM plus bypassing loads, served
//!    in (sm, warp) order; the L2 miss queue then drains to memory,
//! 6. retirement of finished blocks and kernels.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::cache::{
    AccessOutcome, AccessResult, AccessType, Cache, CacheConfig, CacheError, Forward, MemFetch,
    WritePolicy,
};
use crate::ids::{Addr, Cycle, KernelUid, StreamId};
use crate::stats::{
    KernelTimeTable, LegacyStats, PerStreamCacheStats, TimeTableError, L1_TOTAL_NAME, L2_NAME,
};
use crate::trace::{Command, KernelTrace, MemOp, TraceInstr, Workload, WARP_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StatsMode {
    #[default]
    PerStream,
    /// Report the stream-oblivious aggregate instead.
    Legacy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimConfig {
    pub concurrent_kernel_sm: bool,
    pub serialize_streams: bool,
    pub stats_mode: StatsMode,
    pub num_sms: usize,
    pub max_blocks_per_sm: usize,
    pub issue_width: usize,
    pub l1: CacheConfig,
    pub l2: CacheConfig,
    pub l2_miss_latency: Cycle,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            concurrent_kernel_sm: true,
            serialize_streams: false,
            stats_mode: StatsMode::PerStream,
            num_sms: 4,
            max_blocks_per_sm: 8,
            issue_width: 1,
            l1: CacheConfig::l1_default(),
            l2: CacheConfig::l2_default(),
            l2_miss_latency: 200,
        }
    }
}

impl SimConfig {
    /// One kernel at a time, either requested directly or because kernels
    /// may not share SMs.
    pub fn serialized(&self) -> bool {
        self.serialize_streams || !self.concurrent_kernel_sm
    }

    /// Both cache levels with structural limits lifted.
    pub fn unbounded(self) -> Self {
        SimConfig {
            l1: self.l1.unbounded(),
            l2: self.l2.unbounded(),
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.num_sms == 0 {
            return Err(SimError::Config("num_sms must be >= 1"));
        }
        if self.issue_width == 0 {
            return Err(SimError::Config("issue_width must be >= 1"));
        }
        if self.max_blocks_per_sm == 0 {
            return Err(SimError::Config("max_blocks_per_sm must be >= 1"));
        }
        if self.l1.line_size != self.l2.line_size {
            return Err(SimError::Config("l1 and l2 line sizes must match"));
        }
        self.l1.validate()?;
        self.l2.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    TimeTable(#[from] TimeTableError),
    #[error("workload has {commands} kernel commands but {traces} traces")]
    WorkloadMismatch { commands: usize, traces: usize },
    #[error("internal invariant violated: {0}")]
    Invariant(&'static str),
    #[error("no forward progress possible at cycle {0}")]
    Deadlock(Cycle),
}

/// Warp-global index within an SM: block order, then warp order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WarpKey {
    pub uid: KernelUid,
    pub block: u32,
    pub warp: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct WarpRef {
    pub sm: usize,
    pub key: WarpKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheSite {
    L1(usize),
    L2,
}

/// Instrumentation callbacks. All methods default to no-ops.
pub trait Observer {
    /// A fetch was produced by coalescing an instruction of a kernel whose
    /// trace declares `trace_stream`.
    fn on_fetch(&mut self, _fetch: &MemFetch, _trace_stream: StreamId) {}
    /// Every cache `access()` call, including retries.
    fn on_access(
        &mut self,
        _site: CacheSite,
        _fetch: &MemFetch,
        _result: AccessResult,
        _cycle: Cycle,
    ) {
    }
    /// A warp starts a new instruction; `outstanding` is its number of
    /// in-flight fetches at that moment.
    fn on_instr_issue(&mut self, _warp: WarpRef, _outstanding: u32) {}
    fn on_block_assign(&mut self, _kernel_pos: usize, _uid: KernelUid, _block: usize, _sm: usize) {}
}

impl Observer for () {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelState {
    Pending,
    Running,
    Done,
}

#[derive(Debug, Clone)]
pub struct KernelInstance {
    pub uid: Option<KernelUid>,
    pub name: String,
    pub stream_id: StreamId,
    pub trace: KernelTrace,
    pub state: KernelState,
    pub blocks_remaining: usize,
    next_block: usize,
    start_cycle: Cycle,
}

/// Streams that currently own a running kernel.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BusyStreams(Vec<StreamId>);

impl BusyStreams {
    pub fn contains(&self, s: StreamId) -> bool {
        self.0.contains(&s)
    }

    pub fn insert(&mut self, s: StreamId) -> Result<(), SimError> {
        if self.contains(s) {
            return Err(SimError::Invariant("stream already busy"));
        }
        self.0.push(s);
        Ok(())
    }

    pub fn remove(&mut self, s: StreamId) -> Result<(), SimError> {
        let pos = self
            .0
            .iter()
            .position(|&x| x == s)
            .ok_or(SimError::Invariant("stream was not busy"))?;
        self.0.remove(pos);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Coalesces one warp instruction into one fetch per touched line, in
/// ascending line order.
pub fn coalesce(
    instr: &TraceInstr,
    line_size: u64,
    stream_id: StreamId,
    kernel_uid: KernelUid,
    sm_id: Option<usize>,
    issue_cycle: Cycle,
) -> Vec<MemFetch> {
    let mask = !(line_size - 1);
    let mut lines: Vec<Addr> = Vec::with_capacity(WARP_SIZE as usize);
    for lane in 0..WARP_SIZE {
        if instr.active_mask & (1 << lane) == 0 {
            continue;
        }
        let first = instr.lane_addr(lane);
        let last = first.wrapping_add(instr.access_size as u64 - 1);
        lines.push(first & mask);
        lines.push(last & mask);
    }
    lines.sort_unstable();
    lines.dedup();
    let access_type = if instr.op.is_store() {
        AccessType::GlobalW
    } else {
        AccessType::GlobalR
    };
    lines
        .into_iter()
        .map(|line_addr| MemFetch {
            line_addr,
            access_type,
            stream_id,
            kernel_uid,
            sm_id,
            l1_bypass: instr.op == MemOp::LdgCg,
            issue_cycle,
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Warp {
    kernel_idx: usize,
    block_idx: usize,
    warp_pos: usize,
    stream_id: StreamId,
    uid: KernelUid,
    cursor: usize,
    pending: VecDeque<MemFetch>,
    outstanding: u32,
    completion_cycle: Option<Cycle>,
}

#[derive(Debug, Clone)]
struct ResidentBlock {
    kernel_idx: usize,
    live_warps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum L2Waiter {
    Warp(WarpRef),
    L1Fill { sm: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    WarpFetchDone(WarpRef),
    L2Fill(Addr),
    L2Response(L2Waiter, Addr),
}

#[derive(Debug, Clone)]
struct Sm {
    l1: Cache<WarpRef>,
    blocks: BTreeMap<(KernelUid, u32), ResidentBlock>,
    warps: BTreeMap<WarpKey, Warp>,
    ready: BTreeSet<WarpKey>,
}

#[derive(Debug, Clone, Copy)]
enum PortSource {
    Bypass(WarpRef),
    MissQueue,
}

#[derive(Debug, Clone, Copy)]
struct PortRequest {
    sm: usize,
    order: WarpKey,
    seq: u32,
    fetch: MemFetch,
    source: PortSource,
}

/// Per-kernel summary after a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelRecord {
    pub kernel_pos: usize,
    pub uid: KernelUid,
    pub name: String,
    pub stream_id: StreamId,
    pub start_cycle: Cycle,
    pub end_cycle: Cycle,
}

#[derive(Debug, Clone)]
pub struct SimResults {
    pub cycles: Cycle,
    pub l1_per_sm: Vec<PerStreamCacheStats>,
    pub l1_total: PerStreamCacheStats,
    pub l2: PerStreamCacheStats,
    pub l1_legacy: LegacyStats,
    pub l2_legacy: LegacyStats,
    pub times: KernelTimeTable,
    pub kernels: Vec<KernelRecord>,
    /// (kernel position in the command list, block index) -> SM.
    pub placement: BTreeMap<(usize, usize), usize>,
    pub stats_mode: StatsMode,
    pub log: String,
}

impl SimResults {
    /// Kernel positions in launch (uid) order.
    pub fn execution_order(&self) -> Vec<usize> {
        let mut ks: Vec<&KernelRecord> = self.kernels.iter().collect();
        ks.sort_by_key(|k| k.uid);
        ks.into_iter().map(|k| k.kernel_pos).collect()
    }
}

pub struct Simulator<O: Observer = ()> {
    config: SimConfig,
    cycle: Cycle,
    kernels: Vec<KernelInstance>,
    running: BTreeMap<KernelUid, usize>,
    busy: BusyStreams,
    next_uid: u64,
    window_dirty: bool,
    rr_cursor: usize,
    sms: Vec<Sm>,
    l2: Cache<L2Waiter>,
    events: BTreeMap<Cycle, Vec<Event>>,
    port: Vec<PortRequest>,
    times: KernelTimeTable,
    placement: BTreeMap<(usize, usize), usize>,
    records: Vec<KernelRecord>,
    log: String,
    observer: O,
}

fn emit(log: &mut String, args: core::fmt::Arguments<'_>) {
    log.write_fmt(args)
        .expect("writing to a String cannot fail");
}

impl Simulator<()> {
    pub fn new(config: SimConfig, workload: &Workload) -> Result<Self, SimError> {
        Simulator::with_observer(config, workload, ())
    }
}

impl<O: Observer> Simulator<O> {
    pub fn with_observer(
        config: SimConfig,
        workload: &Workload,
        observer: O,
    ) -> Result<Self, SimError> {
        config.validate()?;
        let launches = workload
            .commands
            .iter()
            .filter(|c| matches!(c, Command::KernelLaunch { .. }))
            .count();
        if launches != workload.kernels.len() {
            return Err(SimError::WorkloadMismatch {
                commands: launches,
                traces: workload.kernels.len(),
            });
        }
        let mut log = String::new();
        for c in &workload.commands {
            if let Command::MemcpyH2D {
                dest_addr,
                size_bytes,
            } = c
            {
                emit(
                    &mut log,
                    format_args!("memcpy HtoD dest={dest_addr:#x} size={size_bytes}\n"),
                );
            }
        }
        let kernels = workload
            .kernels
            .iter()
            .map(|t| KernelInstance {
                uid: None,
                name: t.name.clone(),
                stream_id: t.cuda_stream_id,
                trace: t.clone(),
                state: KernelState::Pending,
                blocks_remaining: t.blocks.len(),
                next_block: 0,
                start_cycle: 0,
            })
            .collect();
        let sms = (0..config.num_sms)
            .map(|_| {
                Ok(Sm {
                    l1: Cache::new(config.l1)?,
                    blocks: BTreeMap::new(),
                    warps: BTreeMap::new(),
                    ready: BTreeSet::new(),
                })
            })
            .collect::<Result<Vec<_>, CacheError>>()?;
        Ok(Simulator {
            config,
            cycle: 0,
            kernels,
            running: BTreeMap::new(),
            busy: BusyStreams::default(),
            next_uid: 1,
            window_dirty: true,
            rr_cursor: 0,
            sms,
            l2: Cache::new(config.l2)?,
            events: BTreeMap::new(),
            port: Vec::new(),
            times: KernelTimeTable::new(),
            placement: BTreeMap::new(),
            records: Vec::new(),
            log,
            observer,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn current_cycle(&self) -> Cycle {
        self.cycle
    }

    pub fn observer(&self) -> &O {
        &self.observer
    }

    pub fn into_observer(self) -> O {
        self.observer
    }

    pub fn busy_streams(&self) -> &BusyStreams {
        &self.busy
    }

    pub fn kernels(&self) -> &[KernelInstance] {
        &self.kernels
    }

    pub fn times(&self) -> &KernelTimeTable {
        &self.times
    }

    /// (kernel position, block index) -> SM for every block placed so far.
    pub fn placement(&self) -> &BTreeMap<(usize, usize), usize> {
        &self.placement
    }

    pub fn log(&self) -> &str {
        &self.log
    }

    pub fn l1_stats(&self, sm: usize) -> &PerStreamCacheStats {
        self.sms[sm].l1.stats()
    }

    pub fn l2_stats(&self) -> &PerStreamCacheStats {
        self.l2.stats()
    }

    pub fn l1_live_mshrs(&self, sm: usize) -> usize {
        self.sms[sm].l1.live_mshrs()
    }

    pub fn l2_live_mshrs(&self) -> usize {
        self.l2.live_mshrs()
    }

    pub fn finished(&self) -> bool {
        self.kernels.iter().all(|k| k.state == KernelState::Done)
    }

    fn schedule(&mut self, at: Cycle, ev: Event) {
        self.events.entry(at).or_default().push(ev);
    }

    /// Launches every eligible pending kernel in command order. In
    /// serialized mode a kernel launches only into an idle machine.
    pub fn process_launch_window(&mut self) -> Result<usize, SimError> {
        let serialized = self.config.serialized();
        let mut launched = 0;
        for idx in 0..self.kernels.len() {
            if self.kernels[idx].state != KernelState::Pending {
                continue;
            }
            if serialized && !self.busy.is_empty() {
                break;
            }
            let stream = self.kernels[idx].stream_id;
            if self.busy.contains(stream) {
                continue;
            }
            let uid = KernelUid(self.next_uid);
            self.next_uid += 1;
            let k = &mut self.kernels[idx];
            k.uid = Some(uid);
            k.state = KernelState::Running;
            k.start_cycle = self.cycle;
            self.busy.insert(stream)?;
            self.running.insert(uid, idx);
            self.times.record_launch(stream, uid, self.cycle)?;
            emit(
                &mut self.log,
                format_args!(
                    "launching kernel name: {} uid: {} stream: {} cycle: {}\n",
                    k.name, uid, stream, self.cycle
                ),
            );
            launched += 1;
        }
        Ok(launched)
    }

    /// Places unassigned blocks round-robin over SMs with a free slot,
    /// kernels by ascending uid, blocks in trace order.
    pub fn schedule_blocks(&mut self) -> usize {
        let mut placed = 0;
        let n = self.config.num_sms;
        let running: Vec<usize> = self.running.values().copied().collect();
        for kidx in running {
            while self.kernels[kidx].next_block < self.kernels[kidx].trace.blocks.len() {
                let Some(sm) = (0..n)
                    .map(|i| (self.rr_cursor + i) % n)
                    .find(|&s| self.sms[s].blocks.len() < self.config.max_blocks_per_sm)
                else {
                    return placed;
                };
                self.rr_cursor = (sm + 1) % n;
                let block_idx = self.kernels[kidx].next_block;
                self.kernels[kidx].next_block += 1;
                self.assign_block(kidx, block_idx, sm);
                placed += 1;
            }
        }
        placed
    }

    fn assign_block(&mut self, kidx: usize, block_idx: usize, sm_id: usize) {
        let k = &self.kernels[kidx];
        let uid = k.uid.expect("running kernel has a uid");
        let stream_id = k.stream_id;
        let block = &k.trace.blocks[block_idx];
        let sm = &mut self.sms[sm_id];
        let mut live = 0;
        for (warp_pos, w) in block.warps.iter().enumerate() {
            let key = WarpKey {
                uid,
                block: block_idx as u32,
                warp: warp_pos as u32,
            };
            let done = w.instrs.is_empty();
            sm.warps.insert(
                key,
                Warp {
                    kernel_idx: kidx,
                    block_idx,
                    warp_pos,
                    stream_id,
                    uid,
                    cursor: 0,
                    pending: VecDeque::new(),
                    outstanding: 0,
                    completion_cycle: done.then_some(self.cycle),
                },
            );
            if !done {
                live += 1;
                sm.ready.insert(key);
            }
        }
        sm.blocks.insert(
            (uid, block_idx as u32),
            ResidentBlock {
                kernel_idx: kidx,
                live_warps: live,
            },
        );
        self.placement.insert((kidx, block_idx), sm_id);
        self.observer.on_block_assign(kidx, uid, block_idx, sm_id);
    }

    fn warp_has_work(&self, w: &Warp) -> bool {
        !w.pending.is_empty()
            || w.cursor
                < self.kernels[w.kernel_idx].trace.blocks[w.block_idx].warps[w.warp_pos]
                    .instrs
                    .len()
    }

    /// Re-evaluates readiness and completion of a warp after a state change.
    fn refresh_warp(&mut self, wref: WarpRef) {
        let Some(w) = self.sms[wref.sm].warps.get(&wref.key) else {
            return;
        };
        if w.outstanding > 0 || w.completion_cycle.is_some() {
            self.sms[wref.sm].ready.remove(&wref.key);
            return;
        }
        if self.warp_has_work(w) {
            self.sms[wref.sm].ready.insert(wref.key);
            return;
        }
        let sm = &mut self.sms[wref.sm];
        sm.ready.remove(&wref.key);
        let w = sm.warps.get_mut(&wref.key).expect("warp exists");
        w.completion_cycle = Some(self.cycle);
        if let Some(b) = sm.blocks.get_mut(&(wref.key.uid, wref.key.block)) {
            b.live_warps -= 1;
        }
    }

    fn fetch_done(&mut self, wref: WarpRef) -> Result<(), SimError> {
        let w = self.sms[wref.sm]
            .warps
            .get_mut(&wref.key)
            .ok_or(SimError::Invariant("completion for an unknown warp"))?;
        w.outstanding = w.outstanding.checked_sub(1).ok_or(SimError::Invariant(
            "completion without an outstanding fetch",
        ))?;
        self.refresh_warp(wref);
        Ok(())
    }

    fn process_events(&mut self) -> Result<(), SimError> {
        let Some(evs) = self.events.remove(&self.cycle) else {
            return Ok(());
        };
        for ev in evs {
            match ev {
                Event::WarpFetchDone(w) => self.fetch_done(w)?,
                Event::L2Fill(line) => {
                    let lat = self.config.l2.hit_latency;
                    for waiter in self.l2.fill(line)? {
                        self.schedule(self.cycle + lat, Event::L2Response(waiter, line));
                    }
                }
                Event::L2Response(waiter, line) => self.l2_respond(waiter, line)?,
            }
        }
        Ok(())
    }

    fn l2_respond(&mut self, waiter: L2Waiter, line: Addr) -> Result<(), SimError> {
        match waiter {
            L2Waiter::Warp(w) => self.fetch_done(w),
            L2Waiter::L1Fill { sm } => {
                let lat = self.config.l1.hit_latency;
                for w in self.sms[sm].l1.fill(line)? {
                    self.schedule(self.cycle + lat, Event::WarpFetchDone(w));
                }
                Ok(())
            }
        }
    }

    fn issue(&mut self) -> Result<(), SimError> {
        for sm_id in 0..self.sms.len() {
            let picks: Vec<WarpKey> = self.sms[sm_id]
                .ready
                .iter()
                .take(self.config.issue_width)
                .copied()
                .collect();
            for key in picks {
                self.issue_warp(WarpRef { sm: sm_id, key })?;
            }
        }
        Ok(())
    }

    fn issue_warp(&mut self, wref: WarpRef) -> Result<(), SimError> {
        let cycle = self.cycle;
        let line_size = self.config.l1.line_size;
        let l1_hit = self.config.l1.hit_latency;
        let l1_forwards_writes = self.config.l1.write_policy == WritePolicy::WriteThroughNoAllocate;

        let sm = &mut self.sms[wref.sm];
        let w = sm
            .warps
            .get_mut(&wref.key)
            .ok_or(SimError::Invariant("issue for an unknown warp"))?;
        if w.outstanding != 0 {
            return Err(SimError::Invariant("warp issued with fetches in flight"));
        }
        if w.pending.is_empty() {
            let k = &self.kernels[w.kernel_idx];
            let instr = k.trace.blocks[w.block_idx].warps[w.warp_pos].instrs[w.cursor];
            w.cursor += 1;
            self.observer.on_instr_issue(wref, w.outstanding);
            for f in coalesce(&instr, line_size, w.stream_id, w.uid, Some(wref.sm), cycle) {
                self.observer.on_fetch(&f, k.trace.cuda_stream_id);
                w.pending.push_back(f);
            }
        }

        let mut seq = 0u32;
        while let Some(&fetch) = w.pending.front() {
            if fetch.l1_bypass {
                w.pending.pop_front();
                w.outstanding += 1;
                self.port.push(PortRequest {
                    sm: wref.sm,
                    order: wref.key,
                    seq,
                    fetch,
                    source: PortSource::Bypass(wref),
                });
                seq += 1;
                continue;
            }
            let r = sm.l1.access(&fetch, cycle, wref);
            self.observer
                .on_access(CacheSite::L1(wref.sm), &fetch, r, cycle);
            if r.outcome == AccessOutcome::ReservationFail {
                break;
            }
            w.pending.pop_front();
            w.outstanding += 1;
            let forwarded = fetch.access_type.is_write() && l1_forwards_writes;
            if r.outcome == AccessOutcome::Hit && !forwarded {
                self.events
                    .entry(cycle + l1_hit)
                    .or_default()
                    .push(Event::WarpFetchDone(wref));
            }
        }
        self.refresh_warp(wref);
        Ok(())
    }

    fn l2_phase(&mut self) -> Result<(), SimError> {
        let cycle = self.cycle;
        let mut reqs = core::mem::take(&mut self.port);
        for (sm_id, sm) in self.sms.iter().enumerate() {
            if let Some(head) = sm.l1.peek_miss_queue() {
                let order = match head.forward {
                    Forward::WriteThrough(w) => w.key,
                    Forward::Fill => sm
                        .l1
                        .mshr_waiters(head.fetch.line_addr)
                        .and_then(|ws| ws.first())
                        .map(|w| w.key)
                        .ok_or(SimError::Invariant("queued fill without an MSHR entry"))?,
                };
                reqs.push(PortRequest {
                    sm: sm_id,
                    order,
                    seq: 0,
                    fetch: head.fetch,
                    source: PortSource::MissQueue,
                });
            }
        }
        reqs.sort_by_key(|r| (r.sm, r.order, r.seq));

        let l2_hit = self.config.l2.hit_latency;
        let l2_forwards_writes = self.config.l2.write_policy == WritePolicy::WriteThroughNoAllocate;
        let mut bounced: Vec<(WarpRef, MemFetch)> = Vec::new();
        for req in reqs {
            let waiter = match req.source {
                PortSource::Bypass(w) => L2Waiter::Warp(w),
                PortSource::MissQueue => {
                    match self.sms[req.sm].l1.peek_miss_queue().map(|o| o.forward) {
                        Some(Forward::WriteThrough(w)) => L2Waiter::Warp(w),
                        Some(Forward::Fill) => L2Waiter::L1Fill { sm: req.sm },
                        None => {
                            return Err(SimError::Invariant("miss queue emptied under the port"))
                        }
                    }
                }
            };
            let r = self.l2.access(&req.fetch, cycle, waiter);
            self.observer.on_access(CacheSite::L2, &req.fetch, r, cycle);
            if r.outcome == AccessOutcome::ReservationFail {
                if let PortSource::Bypass(w) = req.source {
                    bounced.push((w, req.fetch));
                }
                continue;
            }
            if let PortSource::MissQueue = req.source {
                self.sms[req.sm].l1.pop_miss_queue();
            }
            let forwarded = req.fetch.access_type.is_write() && l2_forwards_writes;
            if r.outcome == AccessOutcome::Hit && !forwarded {
                self.schedule(
                    cycle + l2_hit,
                    Event::L2Response(waiter, req.fetch.line_addr),
                );
            }
        }
        for (w, fetch) in bounced {
            let warp = self.sms[w.sm]
                .warps
                .get_mut(&w.key)
                .ok_or(SimError::Invariant("bounced fetch for an unknown warp"))?;
            warp.outstanding -= 1;
            warp.pending.push_back(fetch);
            self.refresh_warp(w);
        }

        let mem_lat = self.config.l2_miss_latency;
        while let Some(out) = self.l2.pop_miss_queue() {
            let at = cycle + mem_lat;
            match out.forward {
                Forward::Fill => self.schedule(at, Event::L2Fill(out.fetch.line_addr)),
                Forward::WriteThrough(w) => {
                    self.schedule(at, Event::L2Response(w, out.fetch.line_addr))
                }
            }
        }
        Ok(())
    }

    fn retire(&mut self) -> Result<(), SimError> {
        for sm in &mut self.sms {
            let done: Vec<(KernelUid, u32)> = sm
                .blocks
                .iter()
                .filter(|(_, b)| b.live_warps == 0)
                .map(|(k, _)| *k)
                .collect();
            for key in done {
                let b = sm.blocks.remove(&key).expect("block listed above");
                sm.warps
                    .retain(|wk, _| !(wk.uid == key.0 && wk.block == key.1));
                let k = &mut self.kernels[b.kernel_idx];
                k.blocks_remaining = k
                    .blocks_remaining
                    .checked_sub(1)
                    .ok_or(SimError::Invariant("block retired twice"))?;
            }
        }
        let finished: Vec<usize> = self
            .running
            .values()
            .copied()
            .filter(|&i| {
                let k = &self.kernels[i];
                k.blocks_remaining == 0 && k.start_cycle < self.cycle
            })
            .collect();
        for idx in finished {
            self.set_kernel_done(idx)?;
        }
        Ok(())
    }

    /// Completes a kernel: frees its stream, records its end cycle and
    /// prints the statistics of its stream only.
    fn set_kernel_done(&mut self, idx: usize) -> Result<(), SimError> {
        let cycle = self.cycle;
        let k = &mut self.kernels[idx];
        if k.state != KernelState::Running || k.blocks_remaining != 0 {
            return Err(SimError::Invariant("kernel completed twice or early"));
        }
        let uid = k.uid.expect("running kernel has a uid");
        let stream = k.stream_id;
        k.state = KernelState::Done;
        self.running.remove(&uid);
        self.busy.remove(stream)?;
        self.times.record_done(stream, uid, cycle)?;
        let k = &self.kernels[idx];
        self.records.push(KernelRecord {
            kernel_pos: idx,
            uid,
            name: k.name.clone(),
            stream_id: stream,
            start_cycle: k.start_cycle,
            end_cycle: cycle,
        });
        emit(
            &mut self.log,
            format_args!(
                "kernel finished: name={} uid={} stream={} start_cycle={} end_cycle={}\n",
                k.name, uid, stream, k.start_cycle, cycle
            ),
        );
        self.print_exit_stats(stream, uid);
        for sm in &mut self.sms {
            sm.l1.stats_mut().clear_pw(stream);
        }
        self.l2.stats_mut().clear_pw(stream);
        self.window_dirty = true;
        Ok(())
    }

    fn merged_l1(&self) -> PerStreamCacheStats {
        let mut total = PerStreamCacheStats::new();
        for sm in &self.sms {
            total.merge(sm.l1.stats());
        }
        total
    }

    fn merged_l1_legacy(&self) -> LegacyStats {
        let mut total = LegacyStats::new();
        for sm in &self.sms {
            total.merge_counts(sm.l1.legacy());
        }
        total
    }

    fn print_exit_stats(&mut self, stream: StreamId, uid: KernelUid) {
        let mut out = String::new();
        match self.config.stats_mode {
            StatsMode::PerStream => {
                let l1 = self.merged_l1();
                l1.print_breakdown(&mut out, stream, L1_TOTAL_NAME)
                    .and_then(|_| self.l2.stats().print_breakdown(&mut out, stream, L2_NAME))
                    .expect("writing to a String cannot fail");
            }
            StatsMode::Legacy => {
                self.merged_l1_legacy()
                    .print_breakdown(&mut out, L1_TOTAL_NAME)
                    .and_then(|_| self.l2.legacy().print_breakdown(&mut out, L2_NAME))
                    .expect("writing to a String cannot fail");
            }
        }
        self.times
            .print_entry(&mut out, stream, uid)
            .expect("writing to a String cannot fail");
        self.log.push_str(&out);
    }

    fn is_stuck(&self) -> bool {
        self.events.is_empty()
            && self.port.is_empty()
            && self.l2.miss_queue_len() == 0
            && self
                .sms
                .iter()
                .all(|s| s.ready.is_empty() && s.l1.miss_queue_len() == 0)
            && self.running.values().all(|&i| {
                let k = &self.kernels[i];
                k.start_cycle < self.cycle && k.next_block == k.trace.blocks.len()
            })
            && self
                .sms
                .iter()
                .all(|s| s.blocks.values().all(|b| b.live_warps > 0))
    }

    /// Advances the machine by one cycle.
    pub fn cycle(&mut self) -> Result<(), SimError> {
        if self.window_dirty {
            self.window_dirty = false;
            self.process_launch_window()?;
        }
        self.schedule_blocks();
        self.process_events()?;
        self.issue()?;
        self.l2_phase()?;
        self.retire()?;
        if !self.running.is_empty() && !self.window_dirty && self.is_stuck() {
            return Err(SimError::Deadlock(self.cycle));
        }
        self.cycle += 1;
        Ok(())
    }

    /// Runs the whole command list; its end is a full device sync.
    pub fn run(mut self) -> Result<(SimResults, O), SimError> {
        while !self.finished() {
            self.cycle()?;
        }
        Ok(self.finish())
    }

    fn finish(mut self) -> (SimResults, O) {
        let l1_total = self.merged_l1();
        let l1_legacy = self.merged_l1_legacy();
        let mut out = String::new();
        writeln!(out, "final_summary").unwrap();
        writeln!(out, "gpu_tot_sim_cycle = {}", self.cycle).unwrap();
        match self.config.stats_mode {
            StatsMode::PerStream => {
                for s in l1_total.streams() {
                    l1_total
                        .print_breakdown(&mut out, s, L1_TOTAL_NAME)
                        .unwrap();
                }
                for s in self.l2.stats().streams() {
                    self.l2
                        .stats()
                        .print_breakdown(&mut out, s, L2_NAME)
                        .unwrap();
                }
            }
            StatsMode::Legacy => {
                l1_legacy.print_breakdown(&mut out, L1_TOTAL_NAME).unwrap();
                self.l2.legacy().print_breakdown(&mut out, L2_NAME).unwrap();
            }
        }
        self.times.print_all(&mut out).unwrap();
        self.log.push_str(&out);

        let results = SimResults {
            cycles: self.cycle,
            l1_per_sm: self.sms.iter().map(|s| s.l1.stats().clone()).collect(),
            l1_total,
            l2: self.l2.stats().clone(),
            l1_legacy,
            l2_legacy: self.l2.legacy().clone(),
            times: self.times,
            kernels: self.records,
            placement: self.placement,
            stats_mode: self.config.stats_mode,
            log: self.log,
        };
        (results, self.observer)
    }
}

/// Convenience wrapper: simulate `workload` without instrumentation.
pub fn simulate(config: SimConfig, workload: &Workload) -> Result<SimResults, SimError> {
    Simulator::new(config, workload)?.run().map(|(r, _)| r)
}
