//! Trace generators for the validation microbenchmarks.
//!
//! * `l2_lat`: N copies of the single-block pointer-chase kernel, one per
//!   stream, all sharing one chase array. Only the initialization stores
//!   and the chase loads are emitted; the clock and sink accesses of the
//!   original benchmark are not modelled.
//! * `bench1` / `bench3`: saxpy, scale, saxpy, add on the default stream
//!   (id 0) except the third kernel, which runs on stream 1.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::ids::{Addr, StreamId};
use crate::trace::{
    Command, KernelTrace, MemOp, ThreadBlockTrace, TraceInstr, WarpTrace, Workload, WARP_SIZE,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GenError {
    #[error("precondition violated: {0}")]
    Precondition(String),
}

fn precondition(msg: impl Into<String>) -> GenError {
    GenError::Precondition(msg.into())
}

/// A generated workload plus the file name each kernel trace should be
/// written under (matching the `kernel,` lines of the command list).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedWorkload {
    pub workload: Workload,
    pub trace_files: Vec<String>,
}

fn trace_file_name(kernel_id: u32) -> String {
    format!("kernel-{kernel_id}.traceg")
}

impl GeneratedWorkload {
    fn new(memcpys: Vec<Command>, kernels: Vec<KernelTrace>) -> Self {
        let mut commands = memcpys;
        let mut trace_files = Vec::new();
        for k in &kernels {
            let f = trace_file_name(k.kernel_id);
            commands.push(Command::KernelLaunch {
                trace_path: f.clone(),
            });
            trace_files.push(f);
        }
        GeneratedWorkload {
            workload: Workload { commands, kernels },
            trace_files,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct L2LatParams {
    pub streams: u32,
    pub threads_num: u32,
    pub iters: u32,
    pub array_size: u32,
    pub base_addr: Addr,
}

impl Default for L2LatParams {
    fn default() -> Self {
        L2LatParams {
            streams: 4,
            threads_num: 1,
            iters: 1,
            array_size: 1,
            base_addr: 0x1000_0000,
        }
    }
}

const PC_INIT_LOOP: u32 = 0x0020;
const PC_INIT_TAIL: u32 = 0x0040;
const PC_CHASE: u32 = 0x0080;

/// Multi-stream `l2_lat`: stream ids `1..=streams`, kernel ids in the same
/// order.
///
/// Per kernel, lane 0 stores `array_size - 1` links and then the wrap-around
/// link, after which the first `threads_num` lanes do `iters` L1-bypassing
/// 8-byte loads. Iteration `k` reads element `k mod array_size` for lane 0;
/// lane `t` reads `t` elements further on.
pub fn gen_l2lat(p: &L2LatParams) -> Result<GeneratedWorkload, GenError> {
    if p.streams == 0 {
        return Err(precondition("streams must be >= 1"));
    }
    if p.array_size == 0 {
        return Err(precondition("array_size must be >= 1"));
    }
    if p.threads_num == 0 || p.threads_num > WARP_SIZE {
        return Err(precondition("threads_num must be in 1..=32"));
    }
    if !p.base_addr.is_multiple_of(8) {
        return Err(precondition("base_addr must be 8-byte aligned"));
    }

    let mut instrs = Vec::new();
    for i in 0..p.array_size as u64 - 1 {
        instrs.push(TraceInstr {
            pc: PC_INIT_LOOP,
            active_mask: 0x1,
            op: MemOp::Stg,
            access_size: 8,
            base_addr: p.base_addr + 8 * i,
            stride: 0,
        });
    }
    instrs.push(TraceInstr {
        pc: PC_INIT_TAIL,
        active_mask: 0x1,
        op: MemOp::Stg,
        access_size: 8,
        base_addr: p.base_addr + 8 * (p.array_size as u64 - 1),
        stride: 0,
    });
    let chase_mask = if p.threads_num == 32 {
        u32::MAX
    } else {
        (1u32 << p.threads_num) - 1
    };
    for k in 0..p.iters {
        instrs.push(TraceInstr {
            pc: PC_CHASE,
            active_mask: chase_mask,
            op: MemOp::LdgCg,
            access_size: 8,
            base_addr: p.base_addr + 8 * (k % p.array_size) as u64,
            stride: 8,
        });
    }

    let kernels = (1..=p.streams)
        .map(|s| KernelTrace {
            name: String::from("l2_lat"),
            kernel_id: s,
            grid_dim: (1, 1, 1),
            block_dim: (p.threads_num, 1, 1),
            cuda_stream_id: StreamId(s as u64),
            blocks: alloc::vec![ThreadBlockTrace {
                block_coord: (0, 0, 0),
                warps: alloc::vec![WarpTrace {
                    warp_id: 0,
                    instrs: instrs.clone(),
                }],
            }],
        })
        .collect();

    let memcpy = Command::MemcpyH2D {
        dest_addr: p.base_addr,
        size_bytes: 8 * p.array_size as u64,
    };
    Ok(GeneratedWorkload::new(alloc::vec![memcpy], kernels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchVariant {
    Bench1,
    Bench3,
}

impl BenchVariant {
    pub fn default_block_size(self) -> u32 {
        match self {
            BenchVariant::Bench1 => 256,
            BenchVariant::Bench3 => 1024,
        }
    }
}

/// Base addresses of the four arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchLayout {
    pub x: Addr,
    pub y: Addr,
    pub z: Addr,
    pub a: Addr,
}

pub const DEFAULT_BENCH_BASE: Addr = 0x1000_0000;
const LAYOUT_ALIGN: u64 = 128;

impl BenchLayout {
    /// Disjoint line-aligned regions `x < y < z < a`, each `n * 4` bytes,
    /// separated by at least one 128-byte line.
    pub fn packed(n: u32, base: Addr) -> Self {
        let region = (n as u64 * 4).div_ceil(LAYOUT_ALIGN) * LAYOUT_ALIGN + LAYOUT_ALIGN;
        let x = base.div_ceil(LAYOUT_ALIGN) * LAYOUT_ALIGN;
        BenchLayout {
            x,
            y: x + region,
            z: x + 2 * region,
            a: x + 3 * region,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchParams {
    pub variant: BenchVariant,
    pub n: u32,
    pub block_size: u32,
    pub layout: BenchLayout,
}

impl BenchParams {
    pub fn new(variant: BenchVariant, n: u32) -> Self {
        BenchParams {
            variant,
            n,
            block_size: variant.default_block_size(),
            layout: BenchLayout::packed(n, DEFAULT_BENCH_BASE),
        }
    }
}

#[derive(Clone, Copy)]
enum BenchKernel {
    Saxpy { x: Addr, y: Addr },
    Scale { a: Addr },
    Add { a: Addr, b: Addr },
}

fn lane_mask(first_thread: u64, limit: u64) -> u32 {
    (0..WARP_SIZE)
        .filter(|&l| first_thread + (l as u64) < limit)
        .fold(0u32, |m, l| m | (1 << l))
}

fn ld4(pc: u32, mask: u32, addr: Addr) -> TraceInstr {
    TraceInstr {
        pc,
        active_mask: mask,
        op: MemOp::Ldg,
        access_size: 4,
        base_addr: addr,
        stride: 4,
    }
}

fn st4(pc: u32, mask: u32, addr: Addr) -> TraceInstr {
    TraceInstr {
        op: MemOp::Stg,
        ..ld4(pc, mask, addr)
    }
}

fn warp_instrs(kernel: BenchKernel, n: u64, first: u64) -> Vec<TraceInstr> {
    let all = lane_mask(first, n);
    if all == 0 {
        return Vec::new();
    }
    let off = 4 * first;
    match kernel {
        BenchKernel::Saxpy { x, y } => alloc::vec![
            ld4(0x0010, all, x + off),
            ld4(0x0020, all, y + off),
            st4(0x0030, all, y + off),
        ],
        BenchKernel::Scale { a } => {
            alloc::vec![ld4(0x0010, all, a + off), st4(0x0020, all, a + off)]
        }
        BenchKernel::Add { a, b } => {
            let mut v = Vec::new();
            let low = lane_mask(first, n / 2);
            if low != 0 {
                v.push(ld4(0x0010, low, a + off));
            }
            v.push(ld4(0x0020, all, b + off));
            v.push(st4(0x0030, all, b + off));
            v
        }
    }
}

fn bench_kernel(
    name: &str,
    kernel_id: u32,
    stream: u64,
    kernel: BenchKernel,
    n: u32,
    block_size: u32,
) -> KernelTrace {
    let grid = n.div_ceil(block_size);
    let warps = block_size.div_ceil(WARP_SIZE);
    let blocks = (0..grid)
        .map(|b| ThreadBlockTrace {
            block_coord: (b, 0, 0),
            warps: (0..warps)
                .map(|w| WarpTrace {
                    warp_id: w,
                    instrs: warp_instrs(
                        kernel,
                        n as u64,
                        b as u64 * block_size as u64 + (w * WARP_SIZE) as u64,
                    ),
                })
                .collect(),
        })
        .collect();
    KernelTrace {
        name: String::from(name),
        kernel_id,
        grid_dim: (grid, 1, 1),
        block_dim: (block_size, 1, 1),
        cuda_stream_id: StreamId(stream),
        blocks,
    }
}

/// The four-kernel multi-stream benchmark. Threads with `i >= n` are idle in
/// every kernel.
pub fn gen_bench(p: &BenchParams) -> Result<GeneratedWorkload, GenError> {
    if p.block_size != 256 && p.block_size != 1024 {
        return Err(precondition("block_size must be 256 or 1024"));
    }
    if p.n == 0 || !p.n.is_multiple_of(WARP_SIZE) {
        return Err(precondition("n must be a positive multiple of 32"));
    }
    let BenchLayout { x, y, z, a } = p.layout;
    let bytes = p.n as u64 * 4;
    let mut regions = [x, y, z, a];
    regions.sort_unstable();
    if regions.windows(2).any(|w| w[0] + bytes > w[1]) {
        return Err(precondition("array regions overlap"));
    }
    if regions.iter().any(|r| r % 4 != 0) {
        return Err(precondition("array bases must be 4-byte aligned"));
    }

    let (n, bs) = (p.n, p.block_size);
    let kernels = alloc::vec![
        bench_kernel("saxpy", 1, 0, BenchKernel::Saxpy { x, y }, n, bs),
        bench_kernel("scale", 2, 0, BenchKernel::Scale { a: y }, n, bs),
        bench_kernel("saxpy", 3, 1, BenchKernel::Saxpy { x, y: z }, n, bs),
        bench_kernel("add", 4, 0, BenchKernel::Add { a: y, b: a }, n, bs),
    ];
    Ok(GeneratedWorkload::new(Vec::new(), kernels))
}
