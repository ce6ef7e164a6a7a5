//! Shared fixtures for the criterion microbenchmarks.

use std::sync::Arc;

use vparcel::channel::{Channel, ChannelConfig};
use vparcel::transport::LoopbackFabric;
use vparcel::wire::{Header, Tag, WIRE_VERSION};

/// A representative piggybacked header.
pub fn sample_header(payload_len: usize) -> Header {
    Header {
        version: WIRE_VERSION,
        channel_index: 3,
        followup_tag: Tag::data(1234).unwrap(),
        nzc_size: payload_len as u32,
        zc_sizes: vec![4096, 8192],
        payload: Some(vec![0xA5; payload_len]),
    }
}

/// Two connected single-channel loopback endpoints wrapped in channels.
pub fn loopback_channel_pair() -> (Arc<Channel>, Arc<Channel>) {
    let fabric = LoopbackFabric::new(2, 1, 4096, 1 << 20);
    let make = |rank: usize| {
        Arc::new(Channel::new(
            0,
            rank,
            fabric.endpoints(rank).take_channel(0),
            ChannelConfig::default(),
        ))
    };
    (make(0), make(1))
}
