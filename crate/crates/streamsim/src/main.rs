use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use streamsim::report::{oracle_csv, results_csv, write_csv, OracleMode};
use streamsim::{load_config, load_workload, write_generated};
use streamsim_core::gen::{
    gen_bench, gen_l2lat, BenchLayout, BenchParams, BenchVariant, L2LatParams,
};
use streamsim_core::oracle::{count_accesses, replay_lru, Placement};
use streamsim_core::{simulate, SimError, StatsMode};

#[derive(Parser)]
#[command(
    name = "streamsim",
    version,
    about = "Multi-stream GPU cache hierarchy simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a command list.
    Run(RunArgs),
    /// Report oracle counts for a command list in the CSV schema.
    Oracle(OracleArgs),
    /// Write a synthetic workload to a directory.
    #[command(subcommand)]
    Gen(GenCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    PerStream,
    Legacy,
}

#[derive(Args)]
struct RunArgs {
    /// Command list file.
    #[arg(long)]
    trace: PathBuf,
    /// Config file; later files override earlier ones.
    #[arg(long)]
    config: Vec<PathBuf>,
    #[arg(long, value_enum)]
    stats_mode: Option<Mode>,
    #[arg(long)]
    serialize_streams: bool,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Log destination, standard output when absent.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    config: Vec<PathBuf>,
    /// Access counts only instead of an LRU replay in command order.
    #[arg(long)]
    counts: bool,
    /// Output file, standard output when absent.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum GenCmd {
    L2lat {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        streams: u32,
        #[arg(long, default_value_t = 1)]
        threads: u32,
        #[arg(long, default_value_t = 1)]
        iters: u32,
        #[arg(long, default_value_t = 1)]
        array_size: u32,
    },
    Bench1(BenchArgs),
    Bench3(BenchArgs),
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    out: PathBuf,
    /// Elements per array.
    #[arg(long, default_value_t = 1 << 18)]
    n: u32,
    #[arg(long)]
    block_size: Option<u32>,
    #[arg(long, value_parser = parse_hex)]
    base: Option<u64>,
}

fn parse_hex(s: &str) -> Result<u64, String> {
    let digits = s.strip_prefix("0x").unwrap_or(s);
    u64::from_str_radix(digits, 16).map_err(|e| e.to_string())
}

fn emit(path: Option<&PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_csv(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(m) = a.stats_mode {
        cfg.stats_mode = match m {
            Mode::PerStream => StatsMode::PerStream,
            Mode::Legacy => StatsMode::Legacy,
        };
    }
    cfg.serialize_streams |= a.serialize_streams;
    let workload = load_workload(&a.trace)?;
    let results = simulate(cfg, &workload)?;
    emit(a.log.as_ref(), &results.log)?;
    if let Some(p) = &a.csv {
        emit(Some(p), &results_csv(&results))?;
    }
    Ok(())
}

fn oracle(a: OracleArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let workload = load_workload(&a.trace)?;
    let text = if a.counts {
        oracle_csv(
            &count_accesses(&workload, cfg.l1.line_size),
            OracleMode::Counts,
        )
    } else {
        let order: Vec<usize> = (0..workload.kernels.len()).collect();
        let placement = Placement::RoundRobin {
            num_sms: cfg.num_sms,
        };
        let report = replay_lru(&workload, &order, &placement, &cfg.l1, &cfg.l2);
        oracle_csv(&report, OracleMode::Replay)
    };
    emit(a.csv.as_ref(), &text)
}

fn bench(variant: BenchVariant, a: BenchArgs) -> Result<()> {
    let mut p = BenchParams::new(variant, a.n);
    if let Some(b) = a.block_size {
        p.block_size = b;
    }
    if let Some(base) = a.base {
        p.layout = BenchLayout::packed(a.n, base);
    }
    let list = write_generated(&a.out, &gen_bench(&p)?)?;
    println!("{}", list.display());
    Ok(())
}

fn gen(cmd: GenCmd) -> Result<()> {
    match cmd {
        GenCmd::L2lat {
            out,
            streams,
            threads,
            iters,
            array_size,
        } => {
            let p = L2LatParams {
                streams,
                threads_num: threads,
                iters,
                array_size,
                ..L2LatParams::default()
            };
            fs::create_dir_all(&out)?;
            let list = write_generated(&out, &gen_l2lat(&p)?)?;
            println!("{}", list.display());
            Ok(())
        }
        GenCmd::Bench1(a) => bench(BenchVariant::Bench1, a),
        GenCmd::Bench3(a) => bench(BenchVariant::Bench3, a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<SimError>() {
        Some(SimError::Config(_) | SimError::WorkloadMismatch { .. }) | None => 1,
        Some(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(a) => run(a),
        Cmd::Oracle(a) => oracle(a),
        Cmd::Gen(g) => gen(g),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
