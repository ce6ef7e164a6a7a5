//! Two-rank benchmark execution: port setup over either transport,
//! origin and responder worker loops, and the three workloads.
//!
//! Rank 0 originates traffic and reports metrics; rank 1 responds
//! (echoes pings, counts flood parcels) until rank 0 sends a stop
//! parcel. Both ranks normally live in this process; with the socket
//! transport a run can instead span two processes, one rank each.
//!
//! Every harness parcel starts with an 8-byte header in the NZC chunk:
//! kind, padding, a 16-bit origin thread id, and a 32-bit sequence
//! number. Flood completion crosses ranks as a `Done` parcel carrying
//! count / xor / sum accumulators over the per-parcel content hashes, so
//! delivery can be verified without shipping every hash.

use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU64, Ordering};
use std::sync::{Arc, Barrier, Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use vparcel::parcelport::{Parcel, Parcelport, PortConfig, PortError};
use vparcel::transport::{self, TransportConfig, TransportError, TransportKind};

use crate::config::{BenchConfig, BenchRecord, BenchResult, BenchmarkKind};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("worker thread panicked: {0}")]
    WorkerPanic(String),
    #[error(transparent)]
    Port(#[from] PortError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

const KIND_PING: u8 = 0;
const KIND_PONG: u8 = 1;
const KIND_FLOOD: u8 = 2;
const KIND_STOP: u8 = 3;
const KIND_DONE: u8 = 4;

const SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

/// FNV-1a over chunk lengths and bytes; the delivery oracle.
pub fn parcel_hash(nzc: &[u8], zc: &[Vec<u8>]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
        }
    };
    eat(&(nzc.len() as u64).to_le_bytes());
    eat(nzc);
    for chunk in zc {
        eat(&(chunk.len() as u64).to_le_bytes());
        eat(chunk);
    }
    hash
}

fn encode_payload(kind: u8, tid: u16, seq: u32, size: usize, rng: &mut SmallRng) -> Vec<u8> {
    let mut nzc = vec![0u8; size.max(8)];
    nzc[0] = kind;
    nzc[2..4].copy_from_slice(&tid.to_le_bytes());
    nzc[4..8].copy_from_slice(&seq.to_le_bytes());
    rng.fill(&mut nzc[8..]);
    nzc
}

fn decode_payload(nzc: &[u8]) -> (u8, u16, u32) {
    let kind = nzc[0];
    let tid = u16::from_le_bytes([nzc[2], nzc[3]]);
    let seq = u32::from_le_bytes([nzc[4], nzc[5], nzc[6], nzc[7]]);
    (kind, tid, seq)
}

fn zc_chunks(cfg: &BenchConfig, rng: &mut SmallRng) -> Vec<Vec<u8>> {
    (0..cfg.zc_chunks)
        .map(|_| {
            let mut chunk = vec![0u8; cfg.zc_chunk_size];
            rng.fill(chunk.as_mut_slice());
            chunk
        })
        .collect()
}

fn port_config(cfg: &BenchConfig) -> PortConfig {
    PortConfig {
        num_channels: cfg.channels,
        num_threads: cfg.threads,
        strategy: cfg.strategy,
        completion_mode: cfg.completion_mode,
        lock_mode: cfg.lock_mode,
        global_progress_interval: cfg.global_progress_interval,
        eager_threshold: cfg.eager_threshold,
        drain_budget: 16,
        seed: cfg.seed,
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn check_deadline(deadline: Instant, what: &str) {
    assert!(Instant::now() <= deadline, "{what} timed out");
}

/// Order-independent accumulator for flood content verification.
#[derive(Default)]
struct HashAccumulator {
    count: AtomicU64,
    xor: AtomicU64,
    sum: AtomicU64,
}

impl HashAccumulator {
    fn add(&self, hash: u64) -> u64 {
        self.xor.fetch_xor(hash, Ordering::Relaxed);
        self.sum.fetch_add(hash, Ordering::Relaxed);
        self.count.fetch_add(1, Ordering::Relaxed) + 1
    }

    fn snapshot(&self) -> (u64, u64, u64) {
        (
            self.count.load(Ordering::Relaxed),
            self.xor.load(Ordering::Relaxed),
            self.sum.load(Ordering::Relaxed),
        )
    }
}

/// Shared state the origin side watches.
struct OriginShared {
    /// Last pong sequence observed per origin thread; -1 = none.
    pong_seq: Vec<AtomicI64>,
    /// Set when the responder's Done parcel arrives (flood).
    flood_done: AtomicBool,
    /// Responder-reported (count, xor, sum).
    flood_report: Mutex<Option<(u64, u64, u64)>>,
    sent_hashes: HashAccumulator,
}

/// Shared state the responder side maintains.
struct ResponderShared {
    port: OnceLock<Arc<Parcelport>>,
    stop: AtomicBool,
    received_hashes: HashAccumulator,
    strict_hashes: Mutex<Vec<u64>>,
    expected_flood: u64,
    done_sent: AtomicBool,
}

/// Ports for the ranks this process hosts: `(rank0, rank1)`.
type PortPair = (Option<Arc<Parcelport>>, Option<Arc<Parcelport>>);

fn build_ports(cfg: &BenchConfig) -> Result<PortPair, HarnessError> {
    match cfg.transport {
        TransportKind::Loopback => {
            let fabric = transport::LoopbackFabric::new(2, cfg.channels, 1024, 1 << 20);
            let port0 = Parcelport::new(port_config(cfg), fabric.endpoints(0))?;
            let port1 = Parcelport::new(port_config(cfg), fabric.endpoints(1))?;
            Ok((Some(port0), Some(port1)))
        }
        TransportKind::Socket => {
            let addresses = if cfg.addresses.is_empty() {
                free_addresses(2)?
            } else {
                cfg.addresses.clone()
            };
            match cfg.local_rank {
                None => {
                    // Both ranks in-process: connect concurrently.
                    let cfg1 = TransportConfig::socket(addresses.clone(), 1);
                    let channels = cfg.channels;
                    let joiner = thread::spawn(move || transport::connect(&cfg1, 2, channels));
                    let cfg0 = TransportConfig::socket(addresses, 0);
                    let mut m0 = transport::connect(&cfg0, 2, cfg.channels)?;
                    let mut m1 = joiner
                        .join()
                        .map_err(|_| HarnessError::WorkerPanic("socket connect".into()))??;
                    let port0 = Parcelport::new(port_config(cfg), m0.remove(0))?;
                    let port1 = Parcelport::new(port_config(cfg), m1.remove(0))?;
                    Ok((Some(port0), Some(port1)))
                }
                Some(rank) => {
                    let tcfg = TransportConfig::socket(addresses, rank);
                    let mut matrices = transport::connect(&tcfg, 2, cfg.channels)?;
                    let port = Parcelport::new(port_config(cfg), matrices.remove(0))?;
                    if rank == 0 {
                        Ok((Some(port), None))
                    } else {
                        Ok((None, Some(port)))
                    }
                }
            }
        }
    }
}

fn free_addresses(n: usize) -> Result<Vec<String>, std::io::Error> {
    (0..n)
        .map(|_| {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            Ok(listener.local_addr()?.to_string())
        })
        .collect()
}

fn install_origin_handler(
    port: &Arc<Parcelport>,
    shared: &Arc<OriginShared>,
) -> Result<(), PortError> {
    let state = Arc::clone(shared);
    port.register_handler(Box::new(move |parcel: Parcel, _source| {
        let (kind, tid, seq) = decode_payload(&parcel.nzc);
        match kind {
            KIND_PONG => {
                state.pong_seq[tid as usize].store(i64::from(seq), Ordering::Release);
            }
            KIND_DONE => {
                let count = u64::from_le_bytes(parcel.nzc[8..16].try_into().unwrap());
                let xor = u64::from_le_bytes(parcel.nzc[16..24].try_into().unwrap());
                let sum = u64::from_le_bytes(parcel.nzc[24..32].try_into().unwrap());
                *state.flood_report.lock().unwrap() = Some((count, xor, sum));
                state.flood_done.store(true, Ordering::Release);
            }
            other => panic!("origin received unexpected parcel kind {other}"),
        }
    }))?;
    port.register_zc_allocator(Box::new(|sizes| {
        sizes
            .iter()
            .map(|&s| Vec::with_capacity(s as usize))
            .collect()
    }))
}

fn install_responder_handler(
    port: &Arc<Parcelport>,
    shared: &Arc<ResponderShared>,
) -> Result<(), PortError> {
    let state = Arc::clone(shared);
    port.register_handler(Box::new(move |parcel: Parcel, source| {
        let (kind, tid, seq) = decode_payload(&parcel.nzc);
        match kind {
            KIND_PING => {
                let mut nzc = parcel.nzc;
                nzc[0] = KIND_PONG;
                let pong = Parcel::new(source, nzc, parcel.zc);
                let port = state.port.get().expect("responder port not wired");
                port.send_parcel(pong, Box::new(|r| r.expect("pong send failed")))
                    .expect("pong post failed");
            }
            KIND_FLOOD => {
                let hash = parcel_hash(&parcel.nzc, &parcel.zc);
                state.strict_hashes.lock().unwrap().push(hash);
                let seen = state.received_hashes.add(hash);
                if seen == state.expected_flood && !state.done_sent.swap(true, Ordering::AcqRel) {
                    let (count, xor, sum) = state.received_hashes.snapshot();
                    let mut nzc = vec![0u8; 32];
                    nzc[0] = KIND_DONE;
                    nzc[2..4].copy_from_slice(&tid.to_le_bytes());
                    nzc[4..8].copy_from_slice(&seq.to_le_bytes());
                    nzc[8..16].copy_from_slice(&count.to_le_bytes());
                    nzc[16..24].copy_from_slice(&xor.to_le_bytes());
                    nzc[24..32].copy_from_slice(&sum.to_le_bytes());
                    let port = state.port.get().expect("responder port not wired");
                    port.send_parcel(
                        Parcel::new(source, nzc, vec![]),
                        Box::new(|r| r.expect("done send failed")),
                    )
                    .expect("done post failed");
                }
            }
            KIND_STOP => state.stop.store(true, Ordering::Release),
            other => panic!("responder received unexpected parcel kind {other}"),
        }
    }))?;
    port.register_zc_allocator(Box::new(|sizes| {
        sizes
            .iter()
            .map(|&s| Vec::with_capacity(s as usize))
            .collect()
    }))
}

fn channel_stats(port: &Parcelport) -> (Vec<u64>, Vec<u64>, Vec<u64>) {
    let mut progress = Vec::new();
    let mut busy = Vec::new();
    let mut blocked = Vec::new();
    for channel in port.channels() {
        let snap = channel.stats_snapshot();
        progress.push(snap.progress_calls);
        busy.push(snap.busy_returns);
        blocked.push(snap.guard_blocked);
    }
    (progress, busy, blocked)
}

/// Runs one benchmark to completion and checks its in-run invariants.
pub fn run(cfg: &BenchConfig) -> Result<BenchRecord, HarnessError> {
    cfg.validate().map_err(HarnessError::Config)?;
    let (port0, port1) = build_ports(cfg)?;

    let origin = Arc::new(OriginShared {
        pong_seq: (0..cfg.threads).map(|_| AtomicI64::new(-1)).collect(),
        flood_done: AtomicBool::new(false),
        flood_report: Mutex::new(None),
        sent_hashes: HashAccumulator::default(),
    });
    let responder = Arc::new(ResponderShared {
        port: OnceLock::new(),
        stop: AtomicBool::new(false),
        received_hashes: HashAccumulator::default(),
        strict_hashes: Mutex::new(Vec::new()),
        expected_flood: (cfg.threads * cfg.iterations) as u64,
        done_sent: AtomicBool::new(false),
    });

    if let Some(port) = &port0 {
        install_origin_handler(port, &origin)?;
    }
    if let Some(port) = &port1 {
        responder.port.set(Arc::clone(port)).ok();
        install_responder_handler(port, &responder)?;
    }

    let result = thread::scope(|scope| -> Result<BenchResult, HarnessError> {
        // Responder workers.
        let mut responder_handles = Vec::new();
        if let Some(port) = &port1 {
            for t in 0..cfg.threads {
                let port = Arc::clone(port);
                let shared = Arc::clone(&responder);
                responder_handles.push(scope.spawn(move || -> Result<(), PortError> {
                    port.bind_worker(t)?;
                    while !shared.stop.load(Ordering::Acquire) {
                        if !port.background_work(t)? {
                            thread::yield_now();
                        }
                    }
                    // Flush any pending pongs and the final acks.
                    for _ in 0..64 {
                        port.background_work(t)?;
                    }
                    Ok(())
                }));
            }
        }

        // Origin workers plus measurement. On any origin failure the
        // responder must still be released before joining it.
        let outcome = match &port0 {
            Some(port) => {
                let result = run_origin(cfg, port, &origin, &responder, scope);
                if result.is_err() {
                    responder.stop.store(true, Ordering::Release);
                }
                Some(result)
            }
            None => None,
        };

        // Rank-1-only process: wait for the stop parcel.
        for handle in responder_handles {
            handle
                .join()
                .map_err(|_| HarnessError::WorkerPanic("responder".into()))?
                .map_err(HarnessError::Port)?;
        }

        match outcome {
            Some(result) => {
                let mut result = result?;
                // In-process runs report both ranks' channels: rank 0's
                // C entries first, then rank 1's.
                if let Some(port) = &port1 {
                    let (progress, busy, blocked) = channel_stats(port);
                    result.progress_per_channel.extend(progress);
                    result.busy_per_channel.extend(busy);
                    result.blocked_per_channel.extend(blocked);
                }
                Ok(result)
            }
            None => {
                // Responder-side record: counts only.
                let port = port1.as_ref().expect("rank 1 without a port");
                let (progress, busy, blocked) = channel_stats(port);
                Ok(BenchResult {
                    parcels_received: port.parcels_delivered(),
                    parcels_sent: port.parcels_sent(),
                    frames_total: port.frame_counts().0,
                    progress_per_channel: progress,
                    busy_per_channel: busy,
                    blocked_per_channel: blocked,
                    ..BenchResult::default()
                })
            }
        }
    })?;

    verify_invariants(
        cfg,
        &origin,
        &responder,
        port0.as_deref(),
        port1.as_deref(),
        &result,
    )?;
    Ok(BenchRecord {
        config: cfg.clone(),
        result,
    })
}

/// Origin-side execution: spawns one worker per thread, runs the
/// workload, stops the responder, and assembles metrics.
fn run_origin<'scope>(
    cfg: &'scope BenchConfig,
    port: &Arc<Parcelport>,
    origin: &Arc<OriginShared>,
    responder: &Arc<ResponderShared>,
    scope: &'scope thread::Scope<'scope, '_>,
) -> Result<BenchResult, HarnessError> {
    let barrier = Arc::new(Barrier::new(cfg.threads));
    let window = Arc::new(Mutex::new((Instant::now(), Duration::ZERO)));

    let mut handles = Vec::new();
    for t in 0..cfg.threads {
        let port = Arc::clone(port);
        let origin = Arc::clone(origin);
        let barrier = Arc::clone(&barrier);
        let window = Arc::clone(&window);
        handles.push(scope.spawn(move || -> Result<Vec<f64>, PortError> {
            port.bind_worker(t)?;
            match cfg.benchmark {
                BenchmarkKind::Pingpong => {
                    pingpong_thread(cfg, &port, &origin, t, &barrier, &window)
                }
                BenchmarkKind::Flood => flood_thread(cfg, &port, &origin, t, &barrier, &window),
                BenchmarkKind::Attentiveness => {
                    attentiveness_thread(cfg, &port, &origin, t, &barrier, &window)
                }
            }
        }));
    }

    let mut latencies = Vec::new();
    for handle in handles {
        let thread_latencies = handle
            .join()
            .map_err(|_| HarnessError::WorkerPanic("origin".into()))?
            .map_err(HarnessError::Port)?;
        latencies.extend(thread_latencies);
    }

    // Frame counts before the stop parcel muddies them.
    let frames_total = port.frame_counts().0;
    let (progress, busy, blocked) = channel_stats(port);

    // Wind the responder down (also reaches a remote rank 1).
    let mut stopper = SmallRng::seed_from_u64(cfg.seed);
    let stop = Parcel::new(1, encode_payload(KIND_STOP, 0, 0, 8, &mut stopper), vec![]);
    let stop_sent = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop_sent);
    port.send_parcel_from(
        0,
        stop,
        Box::new(move |r| {
            r.expect("stop send failed");
            flag.store(true, Ordering::Release);
        }),
    )?;
    let deadline = Instant::now() + Duration::from_secs(30);
    while !stop_sent.load(Ordering::Acquire) && Instant::now() < deadline {
        if !port.background_work(0)? {
            thread::yield_now();
        }
    }
    match cfg.local_rank {
        None => {
            while !responder.stop.load(Ordering::Acquire) && Instant::now() < deadline {
                if !port.background_work(0)? {
                    thread::yield_now();
                }
            }
        }
        Some(_) => {
            // Remote responder: the stop frame may still sit in the
            // endpoint's output buffer after the send completion fires;
            // pump until the transport stays quiet before tearing down.
            let mut quiet = 0;
            while quiet < 16 && Instant::now() < deadline {
                if port.background_work(0)? {
                    quiet = 0;
                } else {
                    quiet += 1;
                    thread::yield_now();
                }
            }
        }
    }

    let elapsed = window.lock().unwrap().1;
    let elapsed_s = elapsed.as_secs_f64().max(f64::MIN_POSITIVE);
    let measured = (cfg.threads * cfg.measured_iterations()) as u64;
    let parcels_for_rate = match cfg.benchmark {
        BenchmarkKind::Flood => measured,
        _ => measured * 2,
    };

    latencies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(BenchResult {
        message_rate: parcels_for_rate as f64 / elapsed_s,
        p50_us: percentile(&latencies, 0.50),
        p99_us: percentile(&latencies, 0.99),
        max_us: latencies.last().copied().unwrap_or(0.0),
        elapsed_s,
        parcels_sent: port.parcels_sent(),
        parcels_received: port.parcels_delivered(),
        frames_total,
        progress_per_channel: progress,
        busy_per_channel: busy,
        blocked_per_channel: blocked,
    })
}

fn pingpong_thread(
    cfg: &BenchConfig,
    port: &Arc<Parcelport>,
    origin: &Arc<OriginShared>,
    t: usize,
    barrier: &Barrier,
    window: &Mutex<(Instant, Duration)>,
) -> Result<Vec<f64>, PortError> {
    let mut rng = SmallRng::seed_from_u64(cfg.seed ^ (t as u64).wrapping_mul(SEED_MIX));
    let warmup = cfg.warmup_iterations();
    let mut latencies = Vec::with_capacity(cfg.measured_iterations());

    for i in 0..cfg.iterations {
        if i == warmup {
            barrier.wait();
            if t == 0 {
                window.lock().unwrap().0 = Instant::now();
            }
            barrier.wait();
        }
        let begin = Instant::now();
        let deadline = begin + Duration::from_secs(120);
        let nzc = encode_payload(KIND_PING, t as u16, i as u32, cfg.msg_size, &mut rng);
        let zc = zc_chunks(cfg, &mut rng);
        port.send_parcel_from(
            t,
            Parcel::new(1, nzc, zc),
            Box::new(|r| r.expect("ping failed")),
        )?;
        while origin.pong_seq[t].load(Ordering::Acquire) < i as i64 {
            if !port.background_work(t)? {
                thread::yield_now();
            }
            check_deadline(deadline, "ping-pong round trip");
        }
        if i >= warmup {
            latencies.push(begin.elapsed().as_secs_f64() * 1e6);
        }
    }

    barrier.wait();
    if t == 0 {
        let mut guard = window.lock().unwrap();
        guard.1 = guard.0.elapsed();
    }
    Ok(latencies)
}

fn flood_thread(
    cfg: &BenchConfig,
    port: &Arc<Parcelport>,
    origin: &Arc<OriginShared>,
    t: usize,
    barrier: &Barrier,
    window: &Mutex<(Instant, Duration)>,
) -> Result<Vec<f64>, PortError> {
    let mut rng = SmallRng::seed_from_u64(cfg.seed ^ (t as u64).wrapping_mul(SEED_MIX));
    let warmup = cfg.warmup_iterations();
    let credits = Arc::new(AtomicI64::new(64));

    for i in 0..cfg.iterations {
        if i == warmup {
            barrier.wait();
            if t == 0 {
                window.lock().unwrap().0 = Instant::now();
            }
            barrier.wait();
        }
        let deadline = Instant::now() + Duration::from_secs(120);
        while credits.load(Ordering::Acquire) <= 0 {
            if !port.background_work(t)? {
                thread::yield_now();
            }
            check_deadline(deadline, "flood credit refill");
        }
        credits.fetch_sub(1, Ordering::AcqRel);
        let nzc = encode_payload(KIND_FLOOD, t as u16, i as u32, cfg.msg_size, &mut rng);
        let zc = zc_chunks(cfg, &mut rng);
        origin.sent_hashes.add(parcel_hash(&nzc, &zc));
        let refill = Arc::clone(&credits);
        port.send_parcel_from(
            t,
            Parcel::new(1, nzc, zc),
            Box::new(move |r| {
                r.expect("flood send failed");
                refill.fetch_add(1, Ordering::AcqRel);
            }),
        )?;
        port.background_work(t)?;
    }

    // Keep driving until the responder confirms full delivery.
    let deadline = Instant::now() + Duration::from_secs(300);
    while !origin.flood_done.load(Ordering::Acquire) {
        if !port.background_work(t)? {
            thread::yield_now();
        }
        check_deadline(deadline, "flood completion report");
    }
    barrier.wait();
    if t == 0 {
        let mut guard = window.lock().unwrap();
        guard.1 = guard.0.elapsed();
    }
    Ok(Vec::new())
}

fn attentiveness_thread(
    cfg: &BenchConfig,
    port: &Arc<Parcelport>,
    origin: &Arc<OriginShared>,
    t: usize,
    barrier: &Barrier,
    window: &Mutex<(Instant, Duration)>,
) -> Result<Vec<f64>, PortError> {
    let mut rng = SmallRng::seed_from_u64(cfg.seed ^ (t as u64).wrapping_mul(SEED_MIX));
    let mut coin = SmallRng::seed_from_u64(cfg.seed ^ (t as u64).wrapping_mul(SEED_MIX) ^ 0x51ED);
    let warmup = cfg.warmup_iterations();
    let task = Duration::from_millis(cfg.task_duration_ms);
    let mut latencies = Vec::with_capacity(cfg.measured_iterations());

    for i in 0..cfg.iterations {
        if i == warmup {
            barrier.wait();
            if t == 0 {
                window.lock().unwrap().0 = Instant::now();
            }
            barrier.wait();
        }
        let begin = Instant::now();
        let deadline = begin + Duration::from_secs(120);
        let nzc = encode_payload(KIND_PING, t as u16, i as u32, cfg.msg_size, &mut rng);
        let zc = zc_chunks(cfg, &mut rng);
        port.send_parcel_from(
            t,
            Parcel::new(1, nzc, zc),
            Box::new(|r| r.expect("probe failed")),
        )?;
        // task_fraction weights wall time: each slice lasts one task
        // duration and is either a long-running task, during which this
        // thread does not poll at all, or continuous polling. The task
        // occupies the thread without pinning a core, so hosts with
        // fewer cores than workers still schedule the attentive threads
        // the way dedicated cores would.
        while origin.pong_seq[t].load(Ordering::Acquire) < i as i64 {
            check_deadline(deadline, "attentiveness probe");
            if coin.random::<f64>() < cfg.task_fraction {
                thread::sleep(task);
            } else {
                // An attentive slice: continuous polling, no yielding.
                let slice_end = Instant::now() + task;
                while Instant::now() < slice_end
                    && origin.pong_seq[t].load(Ordering::Acquire) < i as i64
                {
                    port.background_work(t)?;
                }
            }
        }
        if i >= warmup {
            latencies.push(begin.elapsed().as_secs_f64() * 1e6);
        }
    }

    barrier.wait();
    if t == 0 {
        let mut guard = window.lock().unwrap();
        guard.1 = guard.0.elapsed();
    }
    Ok(latencies)
}

fn verify_invariants(
    cfg: &BenchConfig,
    origin: &OriginShared,
    responder: &ResponderShared,
    port0: Option<&Parcelport>,
    port1: Option<&Parcelport>,
    result: &BenchResult,
) -> Result<(), HarnessError> {
    if !(result.p50_us <= result.p99_us && result.p99_us <= result.max_us) {
        return Err(HarnessError::Invariant(format!(
            "latency ordering broken: p50 {} p99 {} max {}",
            result.p50_us, result.p99_us, result.max_us
        )));
    }

    let total = (cfg.threads * cfg.iterations) as u64;
    match cfg.benchmark {
        BenchmarkKind::Flood => {
            if port0.is_some() {
                let (sent_count, sent_xor, sent_sum) = origin.sent_hashes.snapshot();
                let (count, xor, sum) = origin.flood_report.lock().unwrap().ok_or_else(|| {
                    HarnessError::Invariant("flood finished without a Done report".into())
                })?;
                if (count, xor, sum) != (sent_count, sent_xor, sent_sum) {
                    return Err(HarnessError::Invariant(format!(
                        "flood content mismatch: sent ({sent_count}, {sent_xor:#x}, {sent_sum:#x}) \
                         vs delivered ({count}, {xor:#x}, {sum:#x})"
                    )));
                }
                if count != total {
                    return Err(HarnessError::Invariant(format!(
                        "flood delivered {count} of {total} parcels"
                    )));
                }
            }
            if port1.is_some() {
                let strict = responder.strict_hashes.lock().unwrap();
                if strict.len() as u64 != total {
                    return Err(HarnessError::Invariant(format!(
                        "responder saw {} of {total} flood parcels",
                        strict.len()
                    )));
                }
            }
        }
        BenchmarkKind::Pingpong | BenchmarkKind::Attentiveness => {
            if let Some(port) = port0 {
                // Every ping came back: sends == pongs delivered back here.
                if port.parcels_delivered() != total {
                    return Err(HarnessError::Invariant(format!(
                        "origin got {} pongs for {total} pings",
                        port.parcels_delivered()
                    )));
                }
            }
        }
    }

    for port in [port0, port1].into_iter().flatten() {
        if port.parcels_aborted() != 0 {
            return Err(HarnessError::Invariant(format!(
                "{} parcels aborted",
                port.parcels_aborted()
            )));
        }
    }
    Ok(())
}

/// Runs a multithreaded ping-pong benchmark.
pub fn run_pingpong(cfg: &BenchConfig) -> Result<BenchRecord, HarnessError> {
    expect_kind(cfg, BenchmarkKind::Pingpong)?;
    run(cfg)
}

/// Runs a one-way flood benchmark.
pub fn run_flood(cfg: &BenchConfig) -> Result<BenchRecord, HarnessError> {
    expect_kind(cfg, BenchmarkKind::Flood)?;
    run(cfg)
}

/// Runs the attentiveness workload.
pub fn run_attentiveness(cfg: &BenchConfig) -> Result<BenchRecord, HarnessError> {
    expect_kind(cfg, BenchmarkKind::Attentiveness)?;
    run(cfg)
}

fn expect_kind(cfg: &BenchConfig, kind: BenchmarkKind) -> Result<(), HarnessError> {
    if cfg.benchmark != kind {
        return Err(HarnessError::Config(format!(
            "configuration names benchmark {:?}, not {:?}",
            cfg.benchmark, kind
        )));
    }
    Ok(())
}

/// Runs a config `n` times and returns the records; helper for
/// median-of-n trend comparisons.
pub fn run_many(cfg: &BenchConfig, n: usize) -> Result<Vec<BenchRecord>, HarnessError> {
    (0..n)
        .map(|i| {
            let mut cfg = cfg.clone();
            cfg.seed = cfg.seed.wrapping_add(i as u64);
            run(&cfg)
        })
        .collect()
}

/// Median of a metric over several runs.
pub fn median(mut values: Vec<f64>) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}
