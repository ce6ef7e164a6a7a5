use std::hint::black_box;
use std::sync::atomic::AtomicU64;
use std::sync::Arc;
use std::thread;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use vparcel::channel::{Completion, ProgressMode};
use vparcel::completion::{CompletionDescriptor, CompletionKind, CompletionQueue};
use vparcel::wire::{allocate_tag, FrameKind, Header, Tag};

use vparcel_benches::{loopback_channel_pair, sample_header};

fn bench_wire(c: &mut Criterion) {
    let mut group = c.benchmark_group("wire");
    for payload in [8usize, 1024, 8192] {
        let header = sample_header(payload);
        let bytes = header.encode().unwrap();
        group.throughput(Throughput::Bytes(bytes.len() as u64));
        group.bench_with_input(BenchmarkId::new("encode", payload), &header, |b, h| {
            b.iter(|| black_box(h.encode().unwrap()));
        });
        group.bench_with_input(BenchmarkId::new("decode", payload), &bytes, |b, bytes| {
            b.iter(|| black_box(Header::decode(bytes).unwrap()));
        });
    }
    group.finish();

    c.bench_function("wire/allocate_tag", |b| {
        let counter = AtomicU64::new(0);
        b.iter(|| black_box(allocate_tag(&counter)));
    });
}

fn bench_completion_queue(c: &mut Criterion) {
    let descriptor = CompletionDescriptor {
        op_id: 1,
        kind: CompletionKind::DataSent,
        parcel_id: 7,
        channel: 0,
        source: None,
        context: 7,
    };

    c.bench_function("completion_queue/push_pop", |b| {
        let queue = CompletionQueue::new(1024);
        b.iter(|| {
            queue.push(descriptor.clone());
            black_box(queue.poll().unwrap());
        });
    });

    c.bench_function("completion_queue/contended_push_pop", |b| {
        let queue = Arc::new(CompletionQueue::new(1024));
        b.iter_custom(|iters| {
            let start = std::time::Instant::now();
            thread::scope(|scope| {
                for _ in 0..2 {
                    let queue = Arc::clone(&queue);
                    let descriptor = descriptor.clone();
                    scope.spawn(move || {
                        for _ in 0..iters {
                            queue.push(descriptor.clone());
                        }
                    });
                }
                let queue = Arc::clone(&queue);
                scope.spawn(move || {
                    let mut seen = 0;
                    while seen < 2 * iters {
                        if queue.poll().is_some() {
                            seen += 1;
                        }
                    }
                });
            });
            start.elapsed()
        });
    });
}

fn bench_channel_roundtrip(c: &mut Criterion) {
    c.bench_function("channel/loopback_roundtrip", |b| {
        let (ch0, ch1) = loopback_channel_pair();
        let mut tag_value = 0u32;
        b.iter(|| {
            tag_value = tag_value % 1_000_000 + 1;
            let tag = Tag::data(tag_value).unwrap();
            ch0.post_send(
                1,
                FrameKind::Data,
                tag,
                vec![0u8; 64],
                0,
                Completion::Detached,
            )
            .unwrap();
            ch0.progress(ProgressMode::Try);
            let recv = ch1
                .post_recv(
                    Some(0),
                    tag,
                    Vec::with_capacity(64),
                    0,
                    Completion::Detached,
                )
                .unwrap();
            while !recv.is_complete() {
                ch1.progress(ProgressMode::Try);
            }
            black_box(recv.take_outcome());
        });
    });
}

criterion_group!(
    benches,
    bench_wire,
    bench_completion_queue,
    bench_channel_roundtrip
);
criterion_main!(benches);
