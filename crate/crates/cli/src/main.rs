use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vparcel::{CompletionMode, LockMode, ProgressStrategy, TransportKind};
use vparcel_cli::{emit_csv, run, BenchConfig, BenchmarkKind};

/// Messaging runtime benchmarks: multithreaded ping-pong, flood, and an
/// attentiveness workload, over in-process or socket transports.
#[derive(Parser)]
#[command(name = "vparcel-bench", version, about)]
struct Cli {
    #[command(subcommand)]
    benchmark: Benchmark,

    /// Worker threads per rank.
    #[arg(long, default_value_t = 1, global = true)]
    threads: usize,

    /// Communication channels per rank.
    #[arg(long, default_value_t = 1, global = true)]
    channels: usize,

    /// Per-thread iterations, warmup included.
    #[arg(long = "iters", default_value_t = 1000, global = true)]
    iterations: usize,

    /// Warmup iterations excluded from metrics (default 10% of iters).
    #[arg(long, global = true)]
    warmup: Option<usize>,

    /// NZC payload size in bytes (>= 8).
    #[arg(long = "size", default_value_t = 8, global = true)]
    msg_size: usize,

    /// ZC chunks per parcel.
    #[arg(long = "zc", default_value_t = 0, global = true)]
    zc_chunks: usize,

    /// Bytes per ZC chunk.
    #[arg(long = "zc-size", default_value_t = 16384, global = true)]
    zc_chunk_size: usize,

    /// Which channel a thread polls in background work.
    #[arg(long, value_enum, default_value_t = StrategyArg::Local, global = true)]
    strategy: StrategyArg,

    /// How completed operations are observed.
    #[arg(long, value_enum, default_value_t = CompletionArg::Pool, global = true)]
    completion: CompletionArg,

    /// Guard acquisition behavior of progress calls.
    #[arg(long = "lock-mode", value_enum, default_value_t = LockArg::Try, global = true)]
    lock_mode: LockArg,

    /// Sweep all channels every N local progress calls; 0 disables.
    #[arg(long = "global-progress-interval", default_value_t = 0, global = true)]
    global_progress_interval: u64,

    /// Piggyback NZC chunks up to this many bytes in the header.
    #[arg(long = "eager", default_value_t = 8192, global = true)]
    eager_threshold: usize,

    /// Frame transport.
    #[arg(long, value_enum, default_value_t = TransportArg::Loopback, global = true)]
    transport: TransportArg,

    /// Per-rank address as `RANK=HOST:PORT`; repeat per rank. Socket
    /// transport only; `VPARCEL_ADDR_<rank>` variables are the fallback.
    #[arg(long = "addr", global = true)]
    addresses: Vec<String>,

    /// Run only this rank in this process (socket transport);
    /// omit to host both ranks here.
    #[arg(long, global = true)]
    rank: Option<usize>,

    /// RNG seed for payloads and the random strategy.
    #[arg(long, default_value_t = 1, global = true)]
    seed: u64,

    /// Busy-task length in milliseconds (attentiveness).
    #[arg(long = "task-duration", default_value_t = 10, global = true)]
    task_duration_ms: u64,

    /// Probability a loop slice runs the busy task (attentiveness).
    #[arg(long = "task-fraction", default_value_t = 0.5, global = true)]
    task_fraction: f64,

    /// Write the CSV report here instead of stdout.
    #[arg(long, global = true)]
    csv: Option<std::path::PathBuf>,
}

#[derive(Subcommand)]
enum Benchmark {
    /// Paired threads exchange round trips; reports rate and latency.
    Pingpong,
    /// Rank 0 floods rank 1; reports throughput and verifies delivery.
    Flood,
    /// Threads alternate busy tasks with polling; reports tail latency.
    Attentiveness,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Local,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum CompletionArg {
    Pool,
    Cont,
}

#[derive(Clone, Copy, ValueEnum)]
enum LockArg {
    Try,
    Blocking,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Loopback,
    Socket,
}

fn resolve_addresses(args: &[String]) -> Result<Vec<String>, String> {
    let mut addresses = vec![String::new(), String::new()];
    let mut supplied = 0;
    for entry in args {
        let (rank, addr) = entry
            .split_once('=')
            .ok_or_else(|| format!("--addr `{entry}` is not RANK=HOST:PORT"))?;
        let rank: usize = rank
            .trim()
            .parse()
            .map_err(|_| format!("--addr `{entry}` has a non-numeric rank"))?;
        if rank > 1 {
            return Err(format!(
                "--addr rank {rank} out of range; two ranks supported"
            ));
        }
        addresses[rank] = addr.trim().to_string();
        supplied += 1;
    }
    if supplied == 0 {
        for (rank, slot) in addresses.iter_mut().enumerate() {
            if let Ok(addr) = std::env::var(format!("VPARCEL_ADDR_{rank}")) {
                *slot = addr;
                supplied += 1;
            }
        }
    }
    if supplied == 0 {
        return Ok(Vec::new()); // in-process socket runs pick free ports
    }
    if addresses.iter().any(String::is_empty) {
        return Err("socket transport needs an address for each of ranks 0 and 1".into());
    }
    Ok(addresses)
}

fn build_config(cli: &Cli) -> Result<BenchConfig, String> {
    let addresses = match cli.transport {
        TransportArg::Socket => resolve_addresses(&cli.addresses)?,
        TransportArg::Loopback => Vec::new(),
    };
    let cfg = BenchConfig {
        benchmark: match cli.benchmark {
            Benchmark::Pingpong => BenchmarkKind::Pingpong,
            Benchmark::Flood => BenchmarkKind::Flood,
            Benchmark::Attentiveness => BenchmarkKind::Attentiveness,
        },
        threads: cli.threads,
        channels: cli.channels,
        iterations: cli.iterations,
        warmup: cli.warmup,
        msg_size: cli.msg_size,
        zc_chunks: cli.zc_chunks,
        zc_chunk_size: cli.zc_chunk_size,
        strategy: match cli.strategy {
            StrategyArg::Local => ProgressStrategy::Local,
            StrategyArg::Random => ProgressStrategy::Random,
        },
        completion_mode: match cli.completion {
            CompletionArg::Pool => CompletionMode::Pool,
            CompletionArg::Cont => CompletionMode::Continuation,
        },
        lock_mode: match cli.lock_mode {
            LockArg::Try => LockMode::Try,
            LockArg::Blocking => LockMode::Blocking,
        },
        global_progress_interval: cli.global_progress_interval,
        eager_threshold: cli.eager_threshold,
        seed: cli.seed,
        transport: match cli.transport {
            TransportArg::Loopback => TransportKind::Loopback,
            TransportArg::Socket => TransportKind::Socket,
        },
        addresses,
        local_rank: cli.rank,
        task_duration_ms: cli.task_duration_ms,
        task_fraction: cli.task_fraction,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(&cli) {
        Ok(cfg) => cfg,
        Err(message) => {
            eprintln!("vparcel-bench: {message}");
            return ExitCode::from(2);
        }
    };

    match run(&cfg) {
        Ok(record) => {
            let text = emit_csv(std::slice::from_ref(&record));
            match &cli.csv {
                Some(path) => {
                    if let Err(err) = std::fs::write(path, &text) {
                        eprintln!("vparcel-bench: writing {}: {err}", path.display());
                        return ExitCode::FAILURE;
                    }
                }
                None => print!("{text}"),
            }
            eprintln!(
                "{}: rate {:.0} msg/s, p50 {:.1} us, p99 {:.1} us, max {:.1} us",
                cfg.benchmark.name(),
                record.result.message_rate,
                record.result.p50_us,
                record.result.p99_us,
                record.result.max_us,
            );
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("vparcel-bench: {err}");
            ExitCode::FAILURE
        }
    }
}
