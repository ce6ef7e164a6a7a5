//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its measured numbers (visible with `--nocapture`).
//!
//! Run with `cargo test -p vparcel-cli --test acceptance`.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use vparcel::channel::{Channel, ChannelConfig, Completion, ProgressMode, ProgressOutcome};
use vparcel::completion::{
    continuation_counter_ops, start_continuation_request, test_continuation_request,
    CompletionDescriptor, CompletionKind, CompletionQueue, ContinuationRequest, TestOutcome,
};
use vparcel::parcelport::{Parcel, Parcelport, PortConfig};
use vparcel::transport::{self, transport_ops_on_this_thread, LoopbackFabric, TransportConfig};
use vparcel::wire::{FrameKind, Header, Tag, TAG_SPACE, WIRE_VERSION};
use vparcel::{CompletionMode, EndpointMatrix, LockMode, ProgressStrategy, TransportKind};

use vparcel_cli::{median, parcel_hash, run_many, BenchConfig, BenchmarkKind};

/// Criteria run one at a time so the timing-sensitive ones see a quiet
/// machine even if the test runner is parallel.
static SUITE_GATE: Mutex<()> = Mutex::new(());

fn gate() -> std::sync::MutexGuard<'static, ()> {
    SUITE_GATE.lock().unwrap_or_else(|p| p.into_inner())
}

fn random_header(rng: &mut SmallRng) -> Header {
    let piggybacked = rng.random_bool(0.5);
    let payload: Option<Vec<u8>> = piggybacked.then(|| {
        let len = rng.random_range(0..4096);
        (0..len).map(|_| rng.random()).collect()
    });
    let nzc_size = match &payload {
        Some(p) => p.len() as u32,
        None => rng.random_range(8193..1_000_000),
    };
    Header {
        version: WIRE_VERSION,
        channel_index: rng.random(),
        followup_tag: Tag::data(rng.random_range(1..TAG_SPACE)).unwrap(),
        nzc_size,
        zc_sizes: (0..rng.random_range(0..8))
            .map(|_| rng.random_range(1..1_000_000))
            .collect(),
        payload,
    }
}

#[test]
fn criterion_1_wire_roundtrip() {
    let _gate = gate();
    let started = Instant::now();

    // Golden vectors, byte-exact.
    let empty = Header {
        version: WIRE_VERSION,
        channel_index: 0,
        followup_tag: Tag::data(1).unwrap(),
        nzc_size: 0,
        zc_sizes: vec![],
        payload: Some(vec![]),
    };
    assert_eq!(
        empty.encode().unwrap(),
        [0x01, 0x01, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00]
    );
    let piggy = Header {
        version: WIRE_VERSION,
        channel_index: 1,
        followup_tag: Tag::data(5).unwrap(),
        nzc_size: 8,
        zc_sizes: vec![],
        payload: Some(b"ABCDEFGH".to_vec()),
    };
    assert_eq!(
        piggy.encode().unwrap(),
        [
            0x01, 0x01, 0x01, 0x00, 0x05, 0x00, 0x00, 0x00, 0x08, 0x00, 0x00, 0x00, 0x00, 0x00,
            0x41, 0x42, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48
        ]
    );

    let mut rng = SmallRng::seed_from_u64(0xACCE97);
    for i in 0..10_000 {
        let header = random_header(&mut rng);
        let bytes = header.encode().unwrap();
        let decoded = Header::decode(&bytes).unwrap_or_else(|e| panic!("header {i}: {e}"));
        assert_eq!(decoded, header, "roundtrip identity failed at header {i}");
    }

    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(5),
        "took {elapsed:?}, budget 5 s"
    );
    println!(
        "ACCEPTANCE 1 wire roundtrip: PASS - 10000 headers identity + 2 golden vectors in {:.2?}",
        elapsed
    );
}

struct FloodCombo {
    completion: CompletionMode,
    strategy: ProgressStrategy,
    transport: TransportKind,
}

fn connect_pair(kind: TransportKind, channels: usize) -> (EndpointMatrix, EndpointMatrix) {
    match kind {
        TransportKind::Loopback => {
            let fabric = LoopbackFabric::new(2, channels, 1024, 1 << 20);
            (fabric.endpoints(0), fabric.endpoints(1))
        }
        TransportKind::Socket => {
            let addresses: Vec<String> = (0..2)
                .map(|_| {
                    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
                    listener.local_addr().unwrap().to_string()
                })
                .collect();
            let cfg1 = TransportConfig::socket(addresses.clone(), 1);
            let joiner = thread::spawn(move || transport::connect(&cfg1, 2, channels).unwrap());
            let cfg0 = TransportConfig::socket(addresses, 0);
            let mut m0 = transport::connect(&cfg0, 2, channels).unwrap();
            let mut m1 = joiner.join().unwrap();
            (m0.remove(0), m1.remove(0))
        }
    }
}

fn flood_once(combo: &FloodCombo) -> Duration {
    const THREADS: usize = 8;
    const CHANNELS: usize = 4;
    const TOTAL: usize = 10_000;
    const PER_THREAD: usize = TOTAL / THREADS;

    let started = Instant::now();
    let (m0, m1) = connect_pair(combo.transport, CHANNELS);
    let config = PortConfig {
        num_channels: CHANNELS,
        num_threads: THREADS,
        strategy: combo.strategy,
        completion_mode: combo.completion,
        lock_mode: LockMode::Try,
        global_progress_interval: 0,
        eager_threshold: 8192,
        drain_budget: 16,
        seed: 0xF100D,
    };
    let port0 = Parcelport::new(config.clone(), m0).unwrap();
    let port1 = Parcelport::new(config, m1).unwrap();

    let received: Arc<Mutex<Vec<u64>>> = Arc::default();
    let sink = Arc::clone(&received);
    port1
        .register_handler(Box::new(move |parcel: Parcel, _source| {
            sink.lock()
                .unwrap()
                .push(parcel_hash(&parcel.nzc, &parcel.zc));
        }))
        .unwrap();
    port1
        .register_zc_allocator(Box::new(|sizes| {
            sizes
                .iter()
                .map(|&s| Vec::with_capacity(s as usize))
                .collect()
        }))
        .unwrap();

    let stop = Arc::new(AtomicBool::new(false));
    let sent: Arc<Mutex<Vec<u64>>> = Arc::default();

    thread::scope(|scope| {
        for t in 0..THREADS {
            let port = Arc::clone(&port1);
            let stop = Arc::clone(&stop);
            scope.spawn(move || {
                port.bind_worker(t).unwrap();
                while !stop.load(Ordering::Acquire) {
                    if !port.background_work(t).unwrap() {
                        thread::yield_now();
                    }
                }
            });
        }

        let mut senders = Vec::new();
        for t in 0..THREADS {
            let port = Arc::clone(&port0);
            let sent = Arc::clone(&sent);
            let stop = Arc::clone(&stop);
            senders.push(scope.spawn(move || {
                port.bind_worker(t).unwrap();
                let mut rng = SmallRng::seed_from_u64(0x5EED ^ (t as u64) << 8);
                let credits = Arc::new(AtomicUsize::new(32));
                let mut hashes = Vec::with_capacity(PER_THREAD);
                for _ in 0..PER_THREAD {
                    while credits.load(Ordering::Acquire) == 0 {
                        if !port.background_work(t).unwrap() {
                            thread::yield_now();
                        }
                    }
                    credits.fetch_sub(1, Ordering::AcqRel);
                    let nzc: Vec<u8> = (0..rng.random_range(0..=65536))
                        .map(|_| rng.random())
                        .collect();
                    let zc: Vec<Vec<u8>> = (0..rng.random_range(0..=4usize))
                        .map(|_| {
                            (0..rng.random_range(1..=16384))
                                .map(|_| rng.random())
                                .collect()
                        })
                        .collect();
                    hashes.push(parcel_hash(&nzc, &zc));
                    let refill = Arc::clone(&credits);
                    port.send_parcel(
                        Parcel::new(1, nzc, zc),
                        Box::new(move |r| {
                            r.unwrap();
                            refill.fetch_add(1, Ordering::AcqRel);
                        }),
                    )
                    .unwrap();
                    port.background_work(t).unwrap();
                }
                sent.lock().unwrap().extend(hashes);
                // Keep flushing until every parcel is delivered.
                while !stop.load(Ordering::Acquire) {
                    if !port.background_work(t).unwrap() {
                        thread::yield_now();
                    }
                }
            }));
        }

        let deadline = Instant::now() + Duration::from_secs(115);
        while port1.parcels_delivered() < TOTAL as u64 {
            assert!(
                Instant::now() < deadline,
                "flood stalled: {} of {TOTAL} delivered",
                port1.parcels_delivered()
            );
            thread::yield_now();
        }
        stop.store(true, Ordering::Release);
    });

    let mut sent = sent.lock().unwrap().clone();
    let mut received = received.lock().unwrap().clone();
    sent.sort_unstable();
    received.sort_unstable();
    assert_eq!(sent.len(), TOTAL);
    assert_eq!(sent, received, "delivered multiset differs from sent");
    assert_eq!(port0.parcels_sent(), TOTAL as u64);
    assert_eq!(port1.parcels_delivered(), TOTAL as u64);
    assert_eq!(port0.parcels_aborted() + port1.parcels_aborted(), 0);

    // Steady state never queues more than one unmatched header per peer.
    for channel in port1.channels() {
        let high_water = channel
            .stats()
            .unexpected_header_high_water
            .load(Ordering::Relaxed);
        assert!(high_water <= 1, "unexpected header watermark {high_water}");
    }

    started.elapsed()
}

#[test]
fn criterion_2_delivery_correctness() {
    let _gate = gate();
    for transport in [TransportKind::Loopback, TransportKind::Socket] {
        for completion in [CompletionMode::Pool, CompletionMode::Continuation] {
            for strategy in [ProgressStrategy::Local, ProgressStrategy::Random] {
                let combo = FloodCombo {
                    completion,
                    strategy,
                    transport,
                };
                let elapsed = flood_once(&combo);
                assert!(
                    elapsed < Duration::from_secs(120),
                    "{transport:?}/{completion:?}/{strategy:?} took {elapsed:?}, budget 120 s"
                );
                println!(
                    "ACCEPTANCE 2 delivery correctness: PASS - 10000 parcels byte-identical \
                     exactly once ({transport:?}/{completion:?}/{strategy:?}, {:.2?})",
                    elapsed
                );
            }
        }
    }
}

#[test]
fn criterion_3_frame_count_law() {
    let _gate = gate();
    for (size, frames_per_parcel) in [(8usize, 1u64), (16384, 2)] {
        const N: usize = 500;
        let fabric = LoopbackFabric::new(2, 1, 1024, 1 << 20);
        let port0 = Parcelport::new(PortConfig::default(), fabric.endpoints(0)).unwrap();
        let port1 = Parcelport::new(PortConfig::default(), fabric.endpoints(1)).unwrap();
        port1.register_handler(Box::new(|_, _| {})).unwrap();
        port1
            .register_zc_allocator(Box::new(|sizes| {
                sizes
                    .iter()
                    .map(|&s| Vec::with_capacity(s as usize))
                    .collect()
            }))
            .unwrap();

        for i in 0..N {
            port0
                .send_parcel_from(
                    0,
                    Parcel::new(1, vec![i as u8; size], vec![]),
                    Box::new(|r| r.unwrap()),
                )
                .unwrap();
            port0.background_work(0).unwrap();
            port1.background_work(0).unwrap();
        }
        let mut spins = 0;
        while port1.parcels_delivered() < N as u64 {
            port0.background_work(0).unwrap();
            port1.background_work(0).unwrap();
            spins += 1;
            assert!(spins < 1_000_000, "frame-law flood stalled");
        }
        assert_eq!(
            port0.frame_counts().0,
            frames_per_parcel * N as u64,
            "{size}-byte parcels must cost exactly {frames_per_parcel} frame(s)"
        );
    }
    println!(
        "ACCEPTANCE 3 frame-count law: PASS - 8 B parcels = 1 frame, 16 KiB parcels = 2 frames \
         (zero tolerance)"
    );
}

#[test]
fn criterion_4_completion_queue_conservation() {
    let _gate = gate();
    const PRODUCERS: usize = 8;
    const PER_PRODUCER: u64 = 100_000;
    const CONSUMERS: usize = 4;
    let total = PRODUCERS as u64 * PER_PRODUCER;

    let started = Instant::now();
    let queue = Arc::new(CompletionQueue::new(4096));
    let popped = Arc::new(AtomicU64::new(0));

    let hauls: Vec<Vec<(u64, u64)>> = thread::scope(|scope| {
        for producer in 0..PRODUCERS {
            let queue = Arc::clone(&queue);
            scope.spawn(move || {
                for seq in 0..PER_PRODUCER {
                    queue.push(CompletionDescriptor {
                        op_id: seq,
                        kind: CompletionKind::DataSent,
                        parcel_id: producer as u64,
                        channel: 0,
                        source: None,
                        context: seq,
                    });
                }
            });
        }
        let consumers: Vec<_> = (0..CONSUMERS)
            .map(|_| {
                let queue = Arc::clone(&queue);
                let popped = Arc::clone(&popped);
                scope.spawn(move || {
                    let mut haul = Vec::new();
                    while popped.load(Ordering::Relaxed) < total {
                        match queue.poll() {
                            Some(d) => {
                                popped.fetch_add(1, Ordering::Relaxed);
                                haul.push((d.parcel_id, d.context));
                            }
                            None => thread::yield_now(),
                        }
                    }
                    haul
                })
            })
            .collect();
        consumers.into_iter().map(|c| c.join().unwrap()).collect()
    });

    // Per-producer FIFO within each consumer's haul.
    let mut per_producer: Vec<Vec<u64>> = (0..PRODUCERS).map(|_| Vec::new()).collect();
    for haul in &hauls {
        let mut last = [None::<u64>; PRODUCERS];
        for &(producer, seq) in haul {
            let p = producer as usize;
            if let Some(prev) = last[p] {
                assert!(seq > prev, "producer {p} reordered: {seq} after {prev}");
            }
            last[p] = Some(seq);
            per_producer[p].push(seq);
        }
    }
    // Multiset equality: every pushed descriptor popped exactly once.
    for (p, seqs) in per_producer.iter_mut().enumerate() {
        seqs.sort_unstable();
        assert_eq!(seqs.len() as u64, PER_PRODUCER, "producer {p} count");
        for (expected, &seq) in seqs.iter().enumerate() {
            assert_eq!(
                seq, expected as u64,
                "producer {p} lost or duplicated {expected}"
            );
        }
    }
    assert_eq!(queue.pushed(), total);
    assert_eq!(queue.popped(), total);

    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(30),
        "took {elapsed:?}, budget 30 s"
    );
    println!(
        "ACCEPTANCE 4 completion-queue conservation: PASS - {total} descriptors, multiset equal, \
         per-producer FIFO, {:.2?}",
        elapsed
    );
}

#[test]
fn criterion_5_continuation_request_lifecycle() {
    let _gate = gate();
    const CHANNELS: usize = 4;
    const N: usize = 1000;

    let fabric = LoopbackFabric::new(2, CHANNELS, 1024, 1 << 20);
    let mut rank0 = fabric.endpoints(0);
    let channels: Vec<Arc<Channel>> = (0..CHANNELS)
        .map(|i| {
            Arc::new(Channel::new(
                i,
                0,
                rank0.take_channel(i),
                ChannelConfig::default(),
            ))
        })
        .collect();

    // Null-request path first: zero shared-counter operations.
    let before = continuation_counter_ops();
    let null_ran = Arc::new(AtomicUsize::new(0));
    for i in 0..200 {
        let observed = Arc::clone(&null_ran);
        channels[i % CHANNELS]
            .post_send(
                1,
                FrameKind::Data,
                Tag::data(1 + i as u32).unwrap(),
                vec![0; 8],
                0,
                Completion::Callback {
                    callback: Box::new(move |_| {
                        observed.fetch_add(1, Ordering::Relaxed);
                    }),
                    request: None,
                },
            )
            .unwrap();
    }
    for channel in &channels {
        channel.progress(ProgressMode::Try);
    }
    assert_eq!(null_ran.load(Ordering::Relaxed), 200);
    assert_eq!(
        continuation_counter_ops() - before,
        0,
        "null-request path must execute zero shared-counter operations"
    );

    // The counted batch: N continuations across the channels.
    let cr = ContinuationRequest::new(CHANNELS);
    start_continuation_request(&cr).unwrap();
    let executed = Arc::new(AtomicUsize::new(0));
    for i in 0..N {
        let observed = Arc::clone(&executed);
        channels[i % CHANNELS]
            .post_send(
                1,
                FrameKind::Data,
                Tag::data(2000 + i as u32).unwrap(),
                vec![0; 8],
                0,
                Completion::Callback {
                    callback: Box::new(move |_| {
                        observed.fetch_add(1, Ordering::Relaxed);
                    }),
                    request: Some(Arc::clone(&cr)),
                },
            )
            .unwrap();
    }
    assert_eq!(cr.registered_total(), N as u64);

    let mut tests = 0;
    loop {
        tests += 1;
        assert!(tests < 10_000, "continuation request never completed");
        match test_continuation_request(&cr, &channels).unwrap() {
            TestOutcome::Complete => {
                assert_eq!(
                    executed.load(Ordering::Relaxed),
                    N,
                    "complete reported before every continuation executed"
                );
                break;
            }
            TestOutcome::Pending => {
                assert!(
                    executed.load(Ordering::Relaxed) < N,
                    "pending after all executed"
                );
            }
        }
    }

    // Restart re-arms continuations deferred while complete.
    let deferred = Arc::new(AtomicUsize::new(0));
    for i in 0..50 {
        let observed = Arc::clone(&deferred);
        channels[i % CHANNELS]
            .post_send(
                1,
                FrameKind::Data,
                Tag::data(4000 + i as u32).unwrap(),
                vec![0; 8],
                0,
                Completion::Callback {
                    callback: Box::new(move |_| {
                        observed.fetch_add(1, Ordering::Relaxed);
                    }),
                    request: Some(Arc::clone(&cr)),
                },
            )
            .unwrap();
    }
    for channel in &channels {
        channel.progress(ProgressMode::Try);
    }
    assert_eq!(deferred.load(Ordering::Relaxed), 0, "held until restart");
    start_continuation_request(&cr).unwrap();
    assert_eq!(deferred.load(Ordering::Relaxed), 50, "released by start");
    assert_eq!(
        test_continuation_request(&cr, &channels).unwrap(),
        TestOutcome::Complete
    );

    println!(
        "ACCEPTANCE 5 continuation-request lifecycle: PASS - {N} continuations completed, \
         restart re-armed 50 deferred, null path touched 0 shared counters"
    );
}

#[test]
fn criterion_6_global_progress_liveness() {
    let _gate = gate();

    // Interval disabled: a deferred send on the unpolled channel stalls
    // for a million progress calls elsewhere.
    let fabric = LoopbackFabric::new(2, 2, 1024, 1 << 20);
    let mut rank0 = fabric.endpoints(0);
    let disabled = ChannelConfig {
        global_progress_interval: 0,
        ..ChannelConfig::default()
    };
    let a = Arc::new(Channel::new(0, 0, rank0.take_channel(0), disabled.clone()));
    let b = Arc::new(Channel::new(1, 0, rank0.take_channel(1), disabled));
    let all = [Arc::clone(&a), Arc::clone(&b)];
    let stalled = b
        .post_send(
            1,
            FrameKind::Data,
            Tag::data(7).unwrap(),
            vec![1; 8],
            0,
            Completion::Detached,
        )
        .unwrap();
    for _ in 0..1_000_000 {
        a.progress(ProgressMode::Try);
        a.maybe_global_progress(&all);
    }
    assert!(
        !stalled.is_complete(),
        "operation completed without anyone progressing its channel"
    );

    // Interval 256: the hybrid sweep completes it within 256 calls.
    let fabric = LoopbackFabric::new(2, 2, 1024, 1 << 20);
    let mut rank0 = fabric.endpoints(0);
    let enabled = ChannelConfig {
        global_progress_interval: 256,
        ..ChannelConfig::default()
    };
    let a = Arc::new(Channel::new(0, 0, rank0.take_channel(0), enabled.clone()));
    let b = Arc::new(Channel::new(1, 0, rank0.take_channel(1), enabled));
    let all = [Arc::clone(&a), Arc::clone(&b)];
    let pending = b
        .post_send(
            1,
            FrameKind::Data,
            Tag::data(7).unwrap(),
            vec![1; 8],
            0,
            Completion::Detached,
        )
        .unwrap();
    let mut calls = 0;
    while !pending.is_complete() {
        calls += 1;
        assert!(calls <= 256, "liveness bound exceeded: {calls} calls");
        a.progress(ProgressMode::Try);
        a.maybe_global_progress(&all);
    }
    assert_eq!(calls, 256, "sweep must run exactly at the interval");

    println!(
        "ACCEPTANCE 6 global-progress liveness: PASS - stalled through 1000000 calls when \
         disabled, completed at call 256 with interval 256"
    );
}

fn pingpong_config(channels: usize) -> BenchConfig {
    BenchConfig {
        benchmark: BenchmarkKind::Pingpong,
        threads: 8,
        channels,
        iterations: 1200,
        warmup: Some(200),
        msg_size: 8,
        strategy: ProgressStrategy::Local,
        completion_mode: CompletionMode::Pool,
        lock_mode: LockMode::Try,
        transport: TransportKind::Loopback,
        seed: 11,
        ..BenchConfig::default()
    }
}

#[test]
fn criterion_7_contention_trend() {
    let _gate = gate();
    let started = Instant::now();

    let rates = |channels: usize| -> Vec<f64> {
        run_many(&pingpong_config(channels), 5)
            .unwrap()
            .iter()
            .map(|r| r.result.message_rate)
            .collect()
    };
    let replicated = median(rates(8));
    let shared = median(rates(1));
    let ratio = replicated / shared;
    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(120),
        "took {elapsed:?}, budget 120 s"
    );

    let cores = thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    if cores >= 4 {
        assert!(
            ratio >= 1.2,
            "8 channels {replicated:.0} msg/s vs 1 channel {shared:.0} msg/s (x{ratio:.2}, need >= 1.2)"
        );
        println!(
            "ACCEPTANCE 7 contention trend: PASS - C=8 {replicated:.0} msg/s >= 1.2x C=1 \
             {shared:.0} msg/s (x{ratio:.2}, median of 5, {elapsed:.2?})"
        );
    } else {
        println!(
            "ACCEPTANCE 7 contention trend: SKIP - criterion applies to >=4-core hosts; this \
             host has {cores}. Measured anyway: C=8 {replicated:.0} msg/s vs C=1 {shared:.0} \
             msg/s (x{ratio:.2})"
        );
    }
}

// The socket transport keeps guard critical sections long enough (they
// contain the transport syscalls) that guard contention is observable
// even on hosts with few cores.
fn attentiveness_config(strategy: ProgressStrategy, lock_mode: LockMode) -> BenchConfig {
    BenchConfig {
        benchmark: BenchmarkKind::Attentiveness,
        threads: 8,
        channels: 8,
        iterations: 24,
        warmup: Some(4),
        msg_size: 8,
        strategy,
        completion_mode: CompletionMode::Pool,
        lock_mode,
        transport: TransportKind::Socket,
        seed: 23,
        task_duration_ms: 10,
        task_fraction: 0.5,
        ..BenchConfig::default()
    }
}

#[test]
fn criterion_8_attentiveness_reproduction() {
    let _gate = gate();
    let started = Instant::now();

    let p99s = |strategy: ProgressStrategy| -> Vec<f64> {
        run_many(&attentiveness_config(strategy, LockMode::Try), 5)
            .unwrap()
            .iter()
            .map(|r| r.result.p99_us)
            .collect()
    };
    let local_p99 = median(p99s(ProgressStrategy::Local));
    let random_p99 = median(p99s(ProgressStrategy::Random));
    let ratio = local_p99 / random_p99;
    assert!(
        local_p99 >= 2.0 * random_p99,
        "p99 local {local_p99:.0} us vs random {random_p99:.0} us (x{ratio:.2}, need >= 2)"
    );

    // Blocking locks suffer under the random strategy: strictly more
    // guard-blocked events than try mode sees.
    let blocked = |lock_mode: LockMode| -> Vec<f64> {
        run_many(
            &attentiveness_config(ProgressStrategy::Random, lock_mode),
            5,
        )
        .unwrap()
        .iter()
        .map(|r| r.result.guard_blocked() as f64)
        .collect()
    };
    let blocking_events = median(blocked(LockMode::Blocking));
    let try_events = median(blocked(LockMode::Try));
    assert!(
        blocking_events > try_events,
        "blocking lock mode saw {blocking_events} guard waits vs try mode {try_events}"
    );

    let elapsed = started.elapsed();
    println!(
        "ACCEPTANCE 8 attentiveness: PASS - p99 local {local_p99:.0} us >= 2x random \
         {random_p99:.0} us (x{ratio:.2}); blocking/random {blocking_events} guard waits > \
         try/random {try_events} ({elapsed:.2?})"
    );
}

#[test]
fn criterion_9_try_mode_purity() {
    let _gate = gate();
    let fabric = LoopbackFabric::new(2, 1, 64, 1 << 20);
    let channel = Arc::new(Channel::new(
        0,
        0,
        fabric.endpoints(0).take_channel(0),
        ChannelConfig::default(),
    ));

    // Give the channel real work so a non-busy progress call would
    // certainly touch the transport.
    channel
        .post_send(
            1,
            FrameKind::Data,
            Tag::data(5).unwrap(),
            vec![1; 64],
            0,
            Completion::Detached,
        )
        .unwrap();

    let probes = 1000;
    let inner = Arc::clone(&channel);
    channel.inspect(move |_view| {
        let handle = thread::spawn(move || {
            let before = transport_ops_on_this_thread();
            for _ in 0..probes {
                assert_eq!(inner.progress(ProgressMode::Try), ProgressOutcome::Busy);
            }
            transport_ops_on_this_thread() - before
        });
        let ops = handle.join().unwrap();
        assert_eq!(
            ops, 0,
            "busy progress calls executed {ops} transport operations"
        );
    });
    assert_eq!(channel.stats_snapshot().busy_returns, probes);

    println!(
        "ACCEPTANCE 9 try-mode purity: PASS - {probes} busy returns executed 0 transport \
         operations (zero tolerance)"
    );
}
