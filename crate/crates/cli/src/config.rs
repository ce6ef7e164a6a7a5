//! Benchmark configuration shared by the CLI and the harness library.

use vparcel::{CompletionMode, LockMode, ProgressStrategy, TransportKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkKind {
    Pingpong,
    Flood,
    Attentiveness,
}

impl BenchmarkKind {
    pub fn name(self) -> &'static str {
        match self {
            BenchmarkKind::Pingpong => "pingpong",
            BenchmarkKind::Flood => "flood",
            BenchmarkKind::Attentiveness => "attentiveness",
        }
    }
}

/// Full description of one benchmark run.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub benchmark: BenchmarkKind,
    pub threads: usize,
    pub channels: usize,
    /// Per-thread iterations, warmup included.
    pub iterations: usize,
    /// Iterations excluded from rates and latencies; defaults to 10%.
    pub warmup: Option<usize>,
    /// NZC payload bytes per parcel (>= 8 for the harness header).
    pub msg_size: usize,
    pub zc_chunks: usize,
    pub zc_chunk_size: usize,
    pub strategy: ProgressStrategy,
    pub completion_mode: CompletionMode,
    pub lock_mode: LockMode,
    pub global_progress_interval: u64,
    pub eager_threshold: usize,
    pub seed: u64,
    pub transport: TransportKind,
    /// Per-rank socket addresses; empty picks ephemeral localhost ports
    /// for in-process runs.
    pub addresses: Vec<String>,
    /// Socket two-process mode: the rank this process plays. `None`
    /// hosts both ranks in this process.
    pub local_rank: Option<usize>,
    pub task_duration_ms: u64,
    pub task_fraction: f64,
}

impl Default for BenchConfig {
    fn default() -> BenchConfig {
        BenchConfig {
            benchmark: BenchmarkKind::Pingpong,
            threads: 1,
            channels: 1,
            iterations: 1000,
            warmup: None,
            msg_size: 8,
            zc_chunks: 0,
            zc_chunk_size: 16384,
            strategy: ProgressStrategy::Local,
            completion_mode: CompletionMode::Pool,
            lock_mode: LockMode::Try,
            global_progress_interval: 0,
            eager_threshold: 8192,
            seed: 1,
            transport: TransportKind::Loopback,
            addresses: Vec::new(),
            local_rank: None,
            task_duration_ms: 10,
            task_fraction: 0.5,
        }
    }
}

impl BenchConfig {
    pub fn warmup_iterations(&self) -> usize {
        self.warmup.unwrap_or(self.iterations / 10)
    }

    pub fn measured_iterations(&self) -> usize {
        self.iterations - self.warmup_iterations()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.threads == 0 || self.channels == 0 {
            return Err("threads and channels must be >= 1".into());
        }
        if self.iterations == 0 {
            return Err("iterations must be >= 1".into());
        }
        if self.warmup_iterations() >= self.iterations {
            return Err(format!(
                "warmup ({}) must be smaller than iterations ({})",
                self.warmup_iterations(),
                self.iterations
            ));
        }
        if self.msg_size < 8 {
            return Err("msg_size must be >= 8 (harness payload header)".into());
        }
        if self.zc_chunks > 0 && self.zc_chunk_size == 0 {
            return Err("zc_chunk_size must be >= 1 when zc_chunks > 0".into());
        }
        if !(0.0..=1.0).contains(&self.task_fraction) {
            return Err(format!(
                "task_fraction {} outside [0, 1]",
                self.task_fraction
            ));
        }
        if self.benchmark == BenchmarkKind::Attentiveness && self.task_duration_ms == 0 {
            return Err("task_duration must be > 0 for attentiveness".into());
        }
        if let Some(rank) = self.local_rank {
            if rank > 1 {
                return Err(format!(
                    "local rank {rank} out of range; two ranks supported"
                ));
            }
            if self.transport != TransportKind::Socket {
                return Err("--rank requires the socket transport".into());
            }
            if self.addresses.len() != 2 {
                return Err("socket two-process mode needs two --addr entries".into());
            }
        }
        Ok(())
    }

    pub fn strategy_name(&self) -> &'static str {
        match self.strategy {
            ProgressStrategy::Local => "local",
            ProgressStrategy::Random => "random",
        }
    }

    pub fn completion_name(&self) -> &'static str {
        match self.completion_mode {
            CompletionMode::Pool => "pool",
            CompletionMode::Continuation => "cont",
        }
    }

    pub fn lock_mode_name(&self) -> &'static str {
        match self.lock_mode {
            LockMode::Try => "try",
            LockMode::Blocking => "blocking",
        }
    }

    pub fn transport_name(&self) -> &'static str {
        match self.transport {
            TransportKind::Loopback => "loopback",
            TransportKind::Socket => "socket",
        }
    }
}

/// Metrics from one run.
#[derive(Debug, Clone, Default)]
pub struct BenchResult {
    /// Parcels per second over the measured window.
    pub message_rate: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
    pub elapsed_s: f64,
    pub parcels_sent: u64,
    pub parcels_received: u64,
    /// Frames this rank pushed into the transport during the data phase.
    pub frames_total: u64,
    pub progress_per_channel: Vec<u64>,
    pub busy_per_channel: Vec<u64>,
    pub blocked_per_channel: Vec<u64>,
}

impl BenchResult {
    pub fn progress_calls(&self) -> u64 {
        self.progress_per_channel.iter().sum()
    }

    pub fn busy_returns(&self) -> u64 {
        self.busy_per_channel.iter().sum()
    }

    pub fn guard_blocked(&self) -> u64 {
        self.blocked_per_channel.iter().sum()
    }
}

/// One finished run: the configuration plus its metrics.
#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub config: BenchConfig,
    pub result: BenchResult,
}
