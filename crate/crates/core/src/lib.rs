//! vparcel: a multithreaded asynchronous messaging runtime built around
//! replicated virtual communication channels.
//!
//! The runtime moves *parcels* — one metadata chunk plus optional bulk
//! chunks — between ranks over a pluggable frame transport. Internal
//! communication resources (endpoints, matching engine, request pools,
//! progress state) are replicated per channel so threads mapped to
//! different channels never contend; completion is observed either by
//! polling request pools or through continuation callbacks feeding a
//! shared lock-free completion queue.
//!
//! Layering, bottom up:
//!
//! * [`wire`] — the bit-exact header format and the tag namespace.
//! * [`transport`] — non-blocking frame endpoints: in-process loopback
//!   and one-TCP-stream-per-channel sockets.
//! * [`channel`] — the virtual communication interface: guard, tag
//!   matching, unexpected queue, request pools, progress engine.
//! * [`completion`] — continuation callbacks, the shared completion
//!   queue, and restartable continuation requests.
//! * [`parcelport`] — parcel send/receive state machines, the static
//!   thread-to-channel mapping, and `background_work`.

pub mod channel;
pub mod completion;
pub mod parcelport;
pub mod transport;
pub mod wire;

/// Process ordinal within a job.
pub type Rank = usize;

pub use channel::{
    Channel, ChannelConfig, ChannelError, ChannelStatsSnapshot, Completion, GlobalProgressOutcome,
    LockMode, OpCompletion, OpId, OpKind, OpRequest, OpStatus, ProgressMode, ProgressOutcome,
};
pub use completion::{
    start_continuation_request, test_continuation_request, CompletionDescriptor, CompletionError,
    CompletionKind, CompletionQueue, ContinuationRequest, ContinuationState, TestOutcome,
};
pub use parcelport::{
    map_thread_to_channel, CompletionMode, Parcel, Parcelport, PortConfig, PortError,
    ProgressStrategy,
};
pub use transport::{
    connect, Endpoint, EndpointMatrix, LoopbackFabric, SendOutcome, TransportConfig,
    TransportError, TransportKind,
};
pub use wire::{Frame, FrameKind, Header, Tag, WireError};
