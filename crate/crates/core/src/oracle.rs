//! Latency-free reference interpreter used as ground truth for the
//! simulator.
//!
//! [`count_accesses`] tallies fetches straight from the traces and is
//! independent of scheduling and cache contents. [`replay_lru`] runs a
//! serialized execution through plain LRU lists (no MSHRs, no reservation,
//! no fails) and classifies every access as hit or miss.
//!
//! Neither shares code with the engine: coalescing is reimplemented here
//! from the trace definition.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::cache::{AccessType, CacheConfig, WritePolicy};
use crate::ids::{Addr, StreamId};
use crate::trace::{KernelTrace, MemOp, TraceInstr, Workload};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LevelCounts {
    /// Indexed by `AccessType::index()`.
    pub accesses: [u64; 2],
    pub hits: Option<[u64; 2]>,
    pub misses: Option<[u64; 2]>,
}

impl LevelCounts {
    pub fn accesses(&self, ty: AccessType) -> u64 {
        self.accesses[ty.index()]
    }

    pub fn hits(&self, ty: AccessType) -> Option<u64> {
        self.hits.map(|h| h[ty.index()])
    }

    pub fn misses(&self, ty: AccessType) -> Option<u64> {
        self.misses.map(|m| m[ty.index()])
    }

    fn record(&mut self, ty: AccessType, hit: Option<bool>) {
        let t = ty.index();
        self.accesses[t] += 1;
        if let Some(hit) = hit {
            let slot = if hit {
                &mut self.hits
            } else {
                &mut self.misses
            };
            slot.get_or_insert([0; 2])[t] += 1;
            let other = if hit {
                &mut self.misses
            } else {
                &mut self.hits
            };
            other.get_or_insert([0; 2]);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StreamReport {
    pub l1: LevelCounts,
    /// From [`count_accesses`]: only L2 traffic that does not depend on L1
    /// contents (L1-bypassing loads and write-through stores). From
    /// [`replay_lru`]: all L2 traffic, including L1 read-miss refills.
    pub l2: LevelCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OracleReport {
    pub streams: BTreeMap<StreamId, StreamReport>,
}

impl OracleReport {
    pub fn stream(&self, s: StreamId) -> StreamReport {
        self.streams.get(&s).copied().unwrap_or_default()
    }
}

/// Distinct line numbers (address / line size) touched by the active lanes.
fn touched_lines(instr: &TraceInstr, line_size: u64) -> BTreeSet<u64> {
    let mut lines = BTreeSet::new();
    let mut mask = instr.active_mask;
    let mut lane: i64 = 0;
    while mask != 0 {
        if mask & 1 == 1 {
            let start = (instr.base_addr as i128 + lane as i128 * instr.stride as i128) as u64;
            let end = start.wrapping_add(instr.access_size as u64 - 1);
            let (a, b) = (start / line_size, end / line_size);
            lines.insert(a);
            lines.insert(b);
        }
        mask >>= 1;
        lane += 1;
    }
    lines
}

fn kernel_instrs(k: &KernelTrace) -> impl Iterator<Item = (usize, &TraceInstr)> {
    k.blocks.iter().enumerate().flat_map(|(b, blk)| {
        blk.warps
            .iter()
            .flat_map(move |w| w.instrs.iter().map(move |i| (b, i)))
    })
}

/// Per-stream fetch totals at each level, order- and content-independent.
pub fn count_accesses(workload: &Workload, line_size: u64) -> OracleReport {
    let mut report = OracleReport::default();
    for k in &workload.kernels {
        let entry = report.streams.entry(k.cuda_stream_id).or_default();
        for (_, instr) in kernel_instrs(k) {
            let n = touched_lines(instr, line_size).len() as u64;
            match instr.op {
                MemOp::Ldg => entry.l1.accesses[AccessType::GlobalR.index()] += n,
                MemOp::Stg => {
                    entry.l1.accesses[AccessType::GlobalW.index()] += n;
                    entry.l2.accesses[AccessType::GlobalW.index()] += n;
                }
                MemOp::LdgCg => entry.l2.accesses[AccessType::GlobalR.index()] += n,
            }
        }
    }
    report
}

/// Block-to-SM mapping used for the private L1s.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Placement {
    /// The n-th block scheduled over the whole run lands on SM `n mod num_sms`.
    /// Exact whenever per-SM block capacity never binds.
    RoundRobin { num_sms: usize },
    /// (kernel position in the command list, block index) -> SM.
    Explicit(BTreeMap<(usize, usize), usize>),
}

/// Plain LRU list per set, most recent at the back.
struct LruCache {
    sets: Vec<Vec<u64>>,
    ways: usize,
    write_policy: WritePolicy,
}

impl LruCache {
    fn new(cfg: &CacheConfig) -> Self {
        LruCache {
            sets: (0..cfg.num_sets).map(|_| Vec::new()).collect(),
            ways: cfg.num_ways,
            write_policy: cfg.write_policy,
        }
    }

    /// Returns whether the line was present. Allocates on read misses, and on
    /// write misses only under write-allocate.
    fn access(&mut self, line: u64, write: bool) -> bool {
        let idx = (line % self.sets.len() as u64) as usize;
        let set = &mut self.sets[idx];
        if let Some(pos) = set.iter().position(|&l| l == line) {
            let l = set.remove(pos);
            set.push(l);
            return true;
        }
        let allocate = !write || self.write_policy == WritePolicy::WriteBackWriteAllocate;
        if allocate {
            if set.len() >= self.ways {
                set.remove(0);
            }
            set.push(line);
        }
        false
    }
}

/// Replays kernels one at a time in `execution_order` (positions into
/// `workload.kernels`). Within a kernel, blocks, warps and instructions run
/// in trace order.
pub fn replay_lru(
    workload: &Workload,
    execution_order: &[usize],
    placement: &Placement,
    l1_config: &CacheConfig,
    l2_config: &CacheConfig,
) -> OracleReport {
    let line_size = l1_config.line_size;
    let num_l1 = match placement {
        Placement::RoundRobin { num_sms } => *num_sms,
        Placement::Explicit(m) => m.values().copied().max().map_or(1, |m| m + 1),
    };
    let mut l1s: Vec<LruCache> = (0..num_l1.max(1))
        .map(|_| LruCache::new(l1_config))
        .collect();
    let mut l2 = LruCache::new(l2_config);
    let mut report = OracleReport::default();
    let mut next_rr = 0usize;

    for &pos in execution_order {
        let k = &workload.kernels[pos];
        let stream = k.cuda_stream_id;
        let sm_of: Vec<usize> = (0..k.blocks.len())
            .map(|b| match placement {
                Placement::RoundRobin { num_sms } => {
                    let sm = next_rr % num_sms;
                    next_rr += 1;
                    sm
                }
                Placement::Explicit(m) => m.get(&(pos, b)).copied().unwrap_or(0),
            })
            .collect();
        let entry = report.streams.entry(stream).or_default();
        for (b, instr) in kernel_instrs(k) {
            let l1 = &mut l1s[sm_of[b]];
            for line in touched_lines(instr, line_size) {
                match instr.op {
                    MemOp::Ldg => {
                        let hit = l1.access(line, false);
                        entry.l1.record(AccessType::GlobalR, Some(hit));
                        if !hit {
                            let h2 = l2.access(line, false);
                            entry.l2.record(AccessType::GlobalR, Some(h2));
                        }
                    }
                    MemOp::Stg => {
                        let hit = l1.access(line, true);
                        entry.l1.record(AccessType::GlobalW, Some(hit));
                        match l1_config.write_policy {
                            WritePolicy::WriteThroughNoAllocate => {
                                let h2 = l2.access(line, true);
                                entry.l2.record(AccessType::GlobalW, Some(h2));
                            }
                            // an allocating write miss refills the line like a read
                            WritePolicy::WriteBackWriteAllocate if !hit => {
                                let h2 = l2.access(line, false);
                                entry.l2.record(AccessType::GlobalR, Some(h2));
                            }
                            WritePolicy::WriteBackWriteAllocate => {}
                        }
                    }
                    MemOp::LdgCg => {
                        let h2 = l2.access(line, false);
                        entry.l2.record(AccessType::GlobalR, Some(h2));
                    }
                }
            }
        }
    }
    report
}

/// Line address for a line number, for callers mixing both views.
pub fn line_addr(line: u64, line_size: u64) -> Addr {
    line * line_size
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{gen_bench, gen_l2lat, BenchParams, BenchVariant, L2LatParams};
    use crate::trace::{ThreadBlockTrace, WarpTrace};
    use AccessType::*;

    #[test]
    fn l2lat_totals() {
        let g = gen_l2lat(&L2LatParams::default()).unwrap();
        let r = count_accesses(&g.workload, 128);
        assert_eq!(r.streams.len(), 4);
        for s in 1..=4 {
            let sr = r.stream(StreamId(s));
            assert_eq!(sr.l2.accesses(GlobalR), 1);
            assert_eq!(sr.l2.accesses(GlobalW), 1);
            assert_eq!(sr.l1.accesses(GlobalW), 1);
            assert_eq!(sr.l1.accesses(GlobalR), 0);
        }
    }

    #[test]
    fn bench1_stream1_totals() {
        // 4096 threads = 128 full warps; each saxpy warp loads x and z (one
        // line each) and stores z.
        let g = gen_bench(&BenchParams::new(BenchVariant::Bench1, 4096)).unwrap();
        let r = count_accesses(&g.workload, 128);
        let s1 = r.stream(StreamId(1));
        assert_eq!(s1.l1.accesses(GlobalR), 256);
        assert_eq!(s1.l1.accesses(GlobalW), 128);
        assert_eq!(s1.l2.accesses(GlobalW), 128);
        assert_eq!(s1.l2.accesses(GlobalR), 0);
        // stream 0: saxpy 256 R + 128 W, scale 128 R + 128 W, add 64+128 R + 128 W
        let s0 = r.stream(StreamId(0));
        assert_eq!(s0.l1.accesses(GlobalR), 256 + 128 + 192);
        assert_eq!(s0.l1.accesses(GlobalW), 384);
    }

    #[test]
    fn empty_workload() {
        assert!(count_accesses(&Workload::default(), 128).streams.is_empty());
    }

    #[test]
    fn l2lat_serialized_replay() {
        let g = gen_l2lat(&L2LatParams::default()).unwrap();
        let r = replay_lru(
            &g.workload,
            &[0, 1, 2, 3],
            &Placement::RoundRobin { num_sms: 4 },
            &CacheConfig::l1_default(),
            &CacheConfig::l2_default(),
        );
        let s1 = r.stream(StreamId(1));
        assert_eq!(s1.l2.misses(GlobalW), Some(1));
        assert_eq!(s1.l2.hits(GlobalR), Some(1));
        assert_eq!(s1.l2.hits(GlobalW), Some(0));
        for s in 2..=4 {
            let sr = r.stream(StreamId(s));
            assert_eq!(sr.l2.hits(GlobalW), Some(1));
            assert_eq!(sr.l2.hits(GlobalR), Some(1));
            assert_eq!(sr.l2.misses(GlobalW), Some(0));
            assert_eq!(sr.l2.misses(GlobalR), Some(0));
            // write-through, no-allocate L1: the store always misses
            assert_eq!(sr.l1.misses(GlobalW), Some(1));
        }
    }

    fn one_load_kernel(stream: u64, addr: Addr) -> KernelTrace {
        KernelTrace {
            name: "ld".into(),
            kernel_id: stream as u32,
            grid_dim: (1, 1, 1),
            block_dim: (1, 1, 1),
            cuda_stream_id: StreamId(stream),
            blocks: alloc::vec![ThreadBlockTrace {
                block_coord: (0, 0, 0),
                warps: alloc::vec![WarpTrace {
                    warp_id: 0,
                    instrs: alloc::vec![TraceInstr {
                        pc: 0,
                        active_mask: 1,
                        op: MemOp::LdgCg,
                        access_size: 8,
                        base_addr: addr,
                        stride: 0,
                    }],
                }],
            }],
        }
    }

    #[test]
    fn capacity_one_thrash() {
        let w = Workload {
            commands: Vec::new(),
            kernels: alloc::vec![one_load_kernel(1, 0), one_load_kernel(2, 128)],
        };
        let l2 = CacheConfig {
            num_sets: 1,
            num_ways: 1,
            ..CacheConfig::l2_default()
        };
        let r = replay_lru(
            &w,
            &[0, 1, 0, 1],
            &Placement::RoundRobin { num_sms: 1 },
            &CacheConfig::l1_default(),
            &l2,
        );
        assert_eq!(r.stream(StreamId(1)).l2.misses(GlobalR), Some(2));
        assert_eq!(r.stream(StreamId(2)).l2.misses(GlobalR), Some(2));
        assert_eq!(r.stream(StreamId(1)).l2.hits(GlobalR), Some(0));
    }

    #[test]
    fn replay_twice_all_hits() {
        let w = Workload {
            commands: Vec::new(),
            kernels: alloc::vec![one_load_kernel(1, 0x4000)],
        };
        let r = replay_lru(
            &w,
            &[0, 0],
            &Placement::RoundRobin { num_sms: 1 },
            &CacheConfig::l1_default(),
            &CacheConfig::l2_default(),
        );
        let s = r.stream(StreamId(1));
        assert_eq!(s.l2.misses(GlobalR), Some(1));
        assert_eq!(s.l2.hits(GlobalR), Some(1));
    }

    #[test]
    fn straddling_lane_touches_two_lines() {
        let i = TraceInstr {
            pc: 0,
            active_mask: 1,
            op: MemOp::Ldg,
            access_size: 8,
            base_addr: 124,
            stride: 0,
        };
        assert_eq!(touched_lines(&i, 128).len(), 2);
    }
}
