//! Command-list and kernel-trace formats.
//!
//! Command list, one command per line:
//!
//! ```text
//! MemcpyHtoD,0x<hex-addr>,<decimal-bytes>
//! kernel,<relative-path>
//! # comment
//! ```
//!
//! Kernel trace: five `-key = value` header lines, then `#BEGIN_TB` ..
//! `#END_TB` sections holding `-thread block`, `-warp` and instruction lines
//! `<pc-hex> <mask-hex> <LDG|STG|LDG_CG>.<4|8> 0x<base-hex> <stride>`.
//!
//! Parsing works on `&str`; resolving `kernel,` paths to files is left to the
//! caller.

use alloc::borrow::ToOwned;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::ids::{Addr, StreamId};

pub const WARP_SIZE: u32 = 32;
pub const MAX_THREADS_PER_BLOCK: u64 = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    MemcpyH2D { dest_addr: Addr, size_bytes: u64 },
    KernelLaunch { trace_path: String },
}

pub type CommandList = Vec<Command>;

/// A command list with every `kernel,` entry resolved to its parsed trace.
/// `kernels[i]` belongs to the i-th `KernelLaunch` command.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Workload {
    pub commands: CommandList,
    pub kernels: Vec<KernelTrace>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MemOp {
    Ldg,
    Stg,
    /// Global load cached at L2 only.
    LdgCg,
}

impl MemOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            MemOp::Ldg => "LDG",
            MemOp::Stg => "STG",
            MemOp::LdgCg => "LDG_CG",
        }
    }

    pub fn is_store(self) -> bool {
        self == MemOp::Stg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceInstr {
    pub pc: u32,
    pub active_mask: u32,
    pub op: MemOp,
    /// Bytes per lane, 4 or 8.
    pub access_size: u8,
    pub base_addr: Addr,
    /// Lane `i` accesses `base_addr + i * stride`.
    pub stride: i64,
}

impl TraceInstr {
    /// Byte address touched by `lane`, wrapping on overflow.
    pub fn lane_addr(&self, lane: u32) -> Addr {
        self.base_addr
            .wrapping_add((lane as i64).wrapping_mul(self.stride) as u64)
    }
}

impl fmt::Display for TraceInstr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:04x} {:08x} {}.{} {:#x} {}",
            self.pc,
            self.active_mask,
            self.op.mnemonic(),
            self.access_size,
            self.base_addr,
            self.stride
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarpTrace {
    pub warp_id: u32,
    pub instrs: Vec<TraceInstr>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadBlockTrace {
    pub block_coord: (u32, u32, u32),
    pub warps: Vec<WarpTrace>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelTrace {
    pub name: String,
    pub kernel_id: u32,
    pub grid_dim: (u32, u32, u32),
    pub block_dim: (u32, u32, u32),
    pub cuda_stream_id: StreamId,
    pub blocks: Vec<ThreadBlockTrace>,
}

fn product(d: (u32, u32, u32)) -> u64 {
    d.0 as u64 * d.1 as u64 * d.2 as u64
}

impl KernelTrace {
    pub fn threads_per_block(&self) -> u64 {
        product(self.block_dim)
    }

    pub fn warps_per_block(&self) -> u64 {
        self.threads_per_block().div_ceil(WARP_SIZE as u64)
    }

    pub fn grid_size(&self) -> u64 {
        product(self.grid_dim)
    }

    pub fn instr_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| &b.warps)
            .map(|w| w.instrs.len())
            .sum()
    }

    /// Checks the structural invariants of a trace.
    ///
    /// Warps may have empty instruction lists: a warp whose threads all fail
    /// the kernel's bounds guard still exists in the block.
    pub fn validate(&self) -> Result<(), TraceError> {
        let tpb = self.threads_per_block();
        if tpb == 0 || tpb > MAX_THREADS_PER_BLOCK {
            return Err(TraceError::Invariant(
                "block_dim must describe 1..=1024 threads",
            ));
        }
        if self.grid_size() != self.blocks.len() as u64 {
            return Err(TraceError::BlockCountMismatch {
                declared: self.grid_size(),
                found: self.blocks.len() as u64,
            });
        }
        let expected_warps = self.warps_per_block();
        for b in &self.blocks {
            if b.warps.len() as u64 != expected_warps {
                return Err(TraceError::Invariant(
                    "warp count per block must equal ceil(threads_per_block / 32)",
                ));
            }
            if b.warps.windows(2).any(|w| w[0].warp_id >= w[1].warp_id) {
                return Err(TraceError::Invariant(
                    "warp ids must be strictly increasing within a block",
                ));
            }
            for i in b.warps.iter().flat_map(|w| &w.instrs) {
                if i.active_mask == 0 {
                    return Err(TraceError::Invariant("active_mask must be nonzero"));
                }
                if i.access_size != 4 && i.access_size != 8 {
                    return Err(TraceError::Invariant("access size must be 4 or 8"));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for KernelTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (gx, gy, gz) = self.grid_dim;
        let (bx, by, bz) = self.block_dim;
        writeln!(f, "-kernel name = {}", self.name)?;
        writeln!(f, "-kernel id = {}", self.kernel_id)?;
        writeln!(f, "-grid dim = ({gx},{gy},{gz})")?;
        writeln!(f, "-block dim = ({bx},{by},{bz})")?;
        writeln!(f, "-cuda stream id = {}", self.cuda_stream_id)?;
        for b in &self.blocks {
            let (x, y, z) = b.block_coord;
            writeln!(f)?;
            writeln!(f, "#BEGIN_TB")?;
            writeln!(f, "-thread block = {x},{y},{z}")?;
            for w in &b.warps {
                writeln!(f, "-warp = {}", w.warp_id)?;
                for i in &w.instrs {
                    writeln!(f, "{i}")?;
                }
            }
            writeln!(f, "#END_TB")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceError {
    #[error("line {line}: Undefined Command: {text}")]
    UnknownCommand { line: usize, text: String },
    #[error("line {line}: malformed field: {detail}")]
    MalformedField { line: usize, detail: String },
    #[error("missing header field `{0}`")]
    MissingHeaderField(&'static str),
    #[error("grid declares {declared} blocks but trace has {found}")]
    BlockCountMismatch { declared: u64, found: u64 },
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("trace invariant violated: {0}")]
    Invariant(&'static str),
}

fn malformed(line: usize, detail: impl Into<String>) -> TraceError {
    TraceError::MalformedField {
        line,
        detail: detail.into(),
    }
}

fn syntax(line: usize, msg: impl Into<String>) -> TraceError {
    TraceError::Syntax {
        line,
        msg: msg.into(),
    }
}

fn parse_hex(s: &str) -> Option<u64> {
    let digits = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X"))?;
    u64::from_str_radix(digits, 16).ok()
}

/// Parses a command list. Line numbers in errors are 1-based.
pub fn parse_commandlist(text: &str) -> Result<CommandList, TraceError> {
    let mut cmds = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        match fields.next() {
            Some("MemcpyHtoD") => {
                let (Some(addr), Some(size), None) = (fields.next(), fields.next(), fields.next())
                else {
                    return Err(malformed(line_no, "MemcpyHtoD expects `0x<addr>,<bytes>`"));
                };
                let dest_addr = parse_hex(addr).ok_or_else(|| {
                    malformed(line_no, alloc::format!("bad hex address `{addr}`"))
                })?;
                let size_bytes: u64 = size
                    .parse()
                    .map_err(|_| malformed(line_no, alloc::format!("bad byte count `{size}`")))?;
                if size_bytes == 0 {
                    return Err(malformed(line_no, "MemcpyHtoD size must be > 0"));
                }
                if dest_addr % 4 != 0 {
                    return Err(malformed(
                        line_no,
                        "MemcpyHtoD address must be 4-byte aligned",
                    ));
                }
                cmds.push(Command::MemcpyH2D {
                    dest_addr,
                    size_bytes,
                });
            }
            Some("kernel") => {
                let (Some(path), None) = (fields.next(), fields.next()) else {
                    return Err(malformed(line_no, "kernel expects `<relative-path>`"));
                };
                if path.is_empty() {
                    return Err(malformed(line_no, "empty kernel trace path"));
                }
                cmds.push(Command::KernelLaunch {
                    trace_path: path.to_owned(),
                });
            }
            _ => {
                return Err(TraceError::UnknownCommand {
                    line: line_no,
                    text: line.to_owned(),
                })
            }
        }
    }
    Ok(cmds)
}

/// Renders a command list in the grammar accepted by [`parse_commandlist`].
pub fn render_commandlist(cmds: &[Command]) -> String {
    use fmt::Write;
    let mut out = String::new();
    for c in cmds {
        match c {
            Command::MemcpyH2D {
                dest_addr,
                size_bytes,
            } => writeln!(out, "MemcpyHtoD,{dest_addr:#x},{size_bytes}"),
            Command::KernelLaunch { trace_path } => writeln!(out, "kernel,{trace_path}"),
        }
        .expect("writing to a String cannot fail");
    }
    out
}

fn parse_triple(s: &str, line: usize) -> Result<(u32, u32, u32), TraceError> {
    let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(malformed(
            line,
            alloc::format!("expected x,y,z triple, got `{s}`"),
        ));
    }
    let p = |v: &str| {
        v.parse::<u32>()
            .map_err(|_| malformed(line, alloc::format!("bad integer `{v}`")))
    };
    Ok((p(parts[0])?, p(parts[1])?, p(parts[2])?))
}

fn header_value<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let rest = line.strip_prefix(key)?;
    rest.trim_start().strip_prefix('=').map(str::trim)
}

fn parse_instr(line: &str, line_no: usize) -> Result<TraceInstr, TraceError> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 5 {
        return Err(syntax(line_no, "instruction needs 5 fields"));
    }
    let pc = u32::from_str_radix(toks[0], 16)
        .map_err(|_| malformed(line_no, alloc::format!("bad pc `{}`", toks[0])))?;
    if toks[1].len() != 8 {
        return Err(malformed(line_no, "active mask must be 8 hex digits"));
    }
    let active_mask = u32::from_str_radix(toks[1], 16)
        .map_err(|_| malformed(line_no, alloc::format!("bad mask `{}`", toks[1])))?;
    let (mnemonic, size) = toks[2]
        .rsplit_once('.')
        .ok_or_else(|| syntax(line_no, "opcode must be <OP>.<size>"))?;
    let op = match mnemonic {
        "LDG" => MemOp::Ldg,
        "STG" => MemOp::Stg,
        "LDG_CG" => MemOp::LdgCg,
        other => return Err(syntax(line_no, alloc::format!("unknown opcode `{other}`"))),
    };
    let access_size = match size {
        "4" => 4,
        "8" => 8,
        other => {
            return Err(malformed(
                line_no,
                alloc::format!("bad access size `{other}`"),
            ))
        }
    };
    let base_addr = parse_hex(toks[3])
        .ok_or_else(|| malformed(line_no, alloc::format!("bad address `{}`", toks[3])))?;
    let stride: i64 = toks[4]
        .parse()
        .map_err(|_| malformed(line_no, alloc::format!("bad stride `{}`", toks[4])))?;
    if active_mask == 0 {
        return Err(malformed(line_no, "active mask must be nonzero"));
    }
    Ok(TraceInstr {
        pc,
        active_mask,
        op,
        access_size,
        base_addr,
        stride,
    })
}

const HEADER_KEYS: [&str; 5] = [
    "-kernel name",
    "-kernel id",
    "-grid dim",
    "-block dim",
    "-cuda stream id",
];

/// Parses one kernel trace and checks its invariants.
pub fn parse_kernel_trace(text: &str) -> Result<KernelTrace, TraceError> {
    let mut name: Option<String> = None;
    let mut kernel_id: Option<u32> = None;
    let mut grid_dim = None;
    let mut block_dim = None;
    let mut stream: Option<u64> = None;

    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut first_block_line = None;

    for (no, line) in lines.by_ref() {
        if line.is_empty() {
            continue;
        }
        if line == "#BEGIN_TB" {
            first_block_line = Some(no);
            break;
        }
        if let Some(v) = header_value(line, "-kernel name") {
            if v.is_empty() {
                return Err(malformed(no, "empty kernel name"));
            }
            name = Some(v.to_owned());
        } else if let Some(v) = header_value(line, "-kernel id") {
            kernel_id = Some(v.parse().map_err(|_| malformed(no, "bad kernel id"))?);
        } else if let Some(v) = header_value(line, "-grid dim") {
            grid_dim = Some(parse_triple(v, no)?);
        } else if let Some(v) = header_value(line, "-block dim") {
            block_dim = Some(parse_triple(v, no)?);
        } else if let Some(v) = header_value(line, "-cuda stream id") {
            stream = Some(v.parse().map_err(|_| malformed(no, "bad cuda stream id"))?);
        } else {
            return Err(syntax(
                no,
                alloc::format!("unexpected header line `{line}`"),
            ));
        }
    }

    let name = name.ok_or(TraceError::MissingHeaderField(HEADER_KEYS[0]))?;
    let kernel_id = kernel_id.ok_or(TraceError::MissingHeaderField(HEADER_KEYS[1]))?;
    let grid_dim = grid_dim.ok_or(TraceError::MissingHeaderField(HEADER_KEYS[2]))?;
    let block_dim = block_dim.ok_or(TraceError::MissingHeaderField(HEADER_KEYS[3]))?;
    let stream = stream.ok_or(TraceError::MissingHeaderField(HEADER_KEYS[4]))?;

    let mut blocks = Vec::new();
    let mut current: Option<ThreadBlockTrace> = None;
    let mut in_block = first_block_line.is_some();
    let mut coord_seen = false;
    if in_block {
        current = Some(ThreadBlockTrace {
            block_coord: (0, 0, 0),
            warps: Vec::new(),
        });
    }

    for (no, line) in lines {
        if line.is_empty() {
            continue;
        }
        if !in_block {
            if line == "#BEGIN_TB" {
                in_block = true;
                coord_seen = false;
                current = Some(ThreadBlockTrace {
                    block_coord: (0, 0, 0),
                    warps: Vec::new(),
                });
                continue;
            }
            return Err(syntax(no, "expected #BEGIN_TB"));
        }
        let block = current.as_mut().expect("inside a block");
        if line == "#END_TB" {
            if !coord_seen {
                return Err(syntax(no, "block without `-thread block` line"));
            }
            blocks.push(current.take().expect("inside a block"));
            in_block = false;
        } else if line == "#BEGIN_TB" {
            return Err(syntax(no, "nested #BEGIN_TB"));
        } else if let Some(v) = header_value(line, "-thread block") {
            if coord_seen {
                return Err(syntax(no, "duplicate `-thread block` line"));
            }
            block.block_coord = parse_triple(v, no)?;
            coord_seen = true;
        } else if let Some(v) = header_value(line, "-warp") {
            if !coord_seen {
                return Err(syntax(no, "`-warp` before `-thread block`"));
            }
            let warp_id = v.parse().map_err(|_| malformed(no, "bad warp id"))?;
            block.warps.push(WarpTrace {
                warp_id,
                instrs: Vec::new(),
            });
        } else {
            let instr = parse_instr(line, no)?;
            match block.warps.last_mut() {
                Some(w) => w.instrs.push(instr),
                None => return Err(syntax(no, "instruction before `-warp`")),
            }
        }
    }
    if in_block {
        return Err(syntax(
            text.lines().count(),
            "unterminated block, missing #END_TB",
        ));
    }

    let trace = KernelTrace {
        name,
        kernel_id,
        grid_dim,
        block_dim,
        cuda_stream_id: StreamId(stream),
        blocks,
    };
    trace.validate()?;
    Ok(trace)
}
