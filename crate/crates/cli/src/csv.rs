//! CSV emission with a stable, documented column order.

use crate::config::BenchRecord;

/// Column order is part of the output contract; append-only.
pub const CSV_COLUMNS: [&str; 31] = [
    "benchmark",
    "transport",
    "threads",
    "channels",
    "iterations",
    "warmup",
    "msg_size",
    "zc_chunks",
    "zc_chunk_size",
    "strategy",
    "completion",
    "lock_mode",
    "global_progress_interval",
    "eager_threshold",
    "seed",
    "task_duration_ms",
    "task_fraction",
    "parcels_sent",
    "parcels_received",
    "frames_total",
    "elapsed_s",
    "message_rate",
    "p50_us",
    "p99_us",
    "max_us",
    "progress_calls",
    "busy_returns",
    "guard_blocked",
    "progress_per_channel",
    "busy_per_channel",
    "blocked_per_channel",
];

fn join_counts(counts: &[u64]) -> String {
    counts
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

/// Renders records as CSV: a header row, then one row per run.
pub fn emit_csv(records: &[BenchRecord]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for record in records {
        let cfg = &record.config;
        let res = &record.result;
        let row = [
            cfg.benchmark.name().to_string(),
            cfg.transport_name().to_string(),
            cfg.threads.to_string(),
            cfg.channels.to_string(),
            cfg.iterations.to_string(),
            cfg.warmup_iterations().to_string(),
            cfg.msg_size.to_string(),
            cfg.zc_chunks.to_string(),
            cfg.zc_chunk_size.to_string(),
            cfg.strategy_name().to_string(),
            cfg.completion_name().to_string(),
            cfg.lock_mode_name().to_string(),
            cfg.global_progress_interval.to_string(),
            cfg.eager_threshold.to_string(),
            cfg.seed.to_string(),
            cfg.task_duration_ms.to_string(),
            format!("{:.3}", cfg.task_fraction),
            res.parcels_sent.to_string(),
            res.parcels_received.to_string(),
            res.frames_total.to_string(),
            format!("{:.6}", res.elapsed_s),
            format!("{:.1}", res.message_rate),
            format!("{:.2}", res.p50_us),
            format!("{:.2}", res.p99_us),
            format!("{:.2}", res.max_us),
            res.progress_calls().to_string(),
            res.busy_returns().to_string(),
            res.guard_blocked().to_string(),
            join_counts(&res.progress_per_channel),
            join_counts(&res.busy_per_channel),
            join_counts(&res.blocked_per_channel),
        ];
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{BenchConfig, BenchResult};

    #[test]
    fn header_schema_is_stable() {
        let golden = "benchmark,transport,threads,channels,iterations,warmup,msg_size,\
                      zc_chunks,zc_chunk_size,strategy,completion,lock_mode,\
                      global_progress_interval,eager_threshold,seed,task_duration_ms,\
                      task_fraction,parcels_sent,parcels_received,frames_total,elapsed_s,\
                      message_rate,p50_us,p99_us,max_us,progress_calls,busy_returns,\
                      guard_blocked,progress_per_channel,busy_per_channel,blocked_per_channel";
        assert_eq!(emit_csv(&[]).trim_end(), golden);
    }

    #[test]
    fn one_record_renders_one_data_row() {
        let record = BenchRecord {
            config: BenchConfig::default(),
            result: BenchResult {
                message_rate: 1234.5,
                parcels_sent: 10,
                parcels_received: 10,
                progress_per_channel: vec![3, 4],
                busy_per_channel: vec![0, 1],
                blocked_per_channel: vec![0, 0],
                ..BenchResult::default()
            },
        };
        let text = emit_csv(&[record]);
        let lines: Vec<&str> = text.trim_end().lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("pingpong,loopback,1,1,1000,100,8,"));
        assert!(lines[1].contains("3;4"));
    }
}
