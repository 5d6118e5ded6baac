//! Trace-driven simulation of a multi-stream GPU memory hierarchy with
//! cache statistics kept per CUDA stream.
//!
//! The crate is `no_std` (it needs `alloc`): parsing works on string slices,
//! reports are written to any [`core::fmt::Write`] sink, and the simulator
//! keeps its log in memory. File handling lives in the `streamsim` crate.
#![no_std]

extern crate alloc;

pub mod cache;
pub mod engine;
pub mod gen;
pub mod ids;
pub mod oracle;
pub mod stats;
pub mod trace;

pub use cache::{
    AccessOutcome, AccessType, Cache, CacheConfig, FailOutcome, MemFetch, WritePolicy,
};
pub use engine::{simulate, SimConfig, SimError, SimResults, Simulator, StatsMode};
pub use ids::{Addr, Cycle, KernelUid, StreamId};
pub use stats::{KernelTimeTable, LegacyStats, PerStreamCacheStats, StatKey};
pub use trace::{Command, CommandList, KernelTrace, TraceError, Workload};
