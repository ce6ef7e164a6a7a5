//! Pluggable non-blocking byte-frame transports.
//!
//! A transport provides one [`Endpoint`] per (channel, rank-pair), so
//! replicating channels replicates the underlying communication
//! resources instead of multiplexing them over a shared stream. Frames
//! sent on an endpoint arrive only at the peer endpoint with the same
//! channel index, in FIFO order, exactly once.
//!
//! Two kinds are provided: an in-process loopback fabric backed by
//! bounded lock-free queues, and a socket transport that opens one TCP
//! stream per channel pair with length-prefixed framing.

use std::cell::Cell;
use std::io;
use std::time::Duration;

use thiserror::Error;

use crate::wire::Frame;
use crate::Rank;

pub mod loopback;
pub mod socket;

pub use loopback::LoopbackFabric;

/// Result of a non-blocking send attempt.
#[derive(Debug, PartialEq, Eq)]
pub enum SendOutcome {
    /// The frame was accepted and will be delivered to the peer exactly
    /// once, in FIFO order relative to other accepted frames.
    Accepted,
    /// No buffer space; the frame is handed back untouched and the
    /// caller retries later.
    WouldBlock(Frame),
}

/// Errors surfaced by transports.
#[derive(Debug, Error)]
pub enum TransportError {
    #[error("failed to parse address `{0}`")]
    AddressParse(String),
    #[error("connect to {addr} failed: {source}")]
    Connect { addr: String, source: io::Error },
    #[error("timed out connecting to {0}")]
    ConnectTimeout(String),
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("frame body of {size} bytes exceeds max_frame {max}")]
    FrameTooLarge { size: usize, max: usize },
    #[error("peer rank {0} disconnected")]
    PeerDisconnected(Rank),
    #[error("malformed frame on the wire: {0}")]
    MalformedFrame(String),
    #[error("{supplied} addresses supplied for {ranks} ranks")]
    AddressCount { supplied: usize, ranks: usize },
    #[error("rank {rank} out of range for {ranks} ranks")]
    RankOutOfRange { rank: Rank, ranks: usize },
    #[error("transport i/o: {0}")]
    Io(#[from] io::Error),
}

/// Transport selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Loopback,
    Socket,
}

/// Transport configuration shared by both kinds.
#[derive(Debug, Clone)]
pub struct TransportConfig {
    pub kind: TransportKind,
    /// Per-rank network addresses; socket kind only.
    pub addresses: Vec<String>,
    /// Rank of the calling process; socket kind only.
    pub local_rank: Rank,
    /// Largest frame body a single send may carry.
    pub max_frame: usize,
    /// Frames buffered per directed loopback queue before senders see
    /// `WouldBlock`.
    pub loopback_queue_capacity: usize,
    /// Deadline for establishing socket connections.
    pub connect_timeout: Duration,
}

pub const DEFAULT_MAX_FRAME: usize = 1 << 20;
pub const DEFAULT_LOOPBACK_CAPACITY: usize = 1024;

impl TransportConfig {
    pub fn loopback() -> TransportConfig {
        TransportConfig {
            kind: TransportKind::Loopback,
            addresses: Vec::new(),
            local_rank: 0,
            max_frame: DEFAULT_MAX_FRAME,
            loopback_queue_capacity: DEFAULT_LOOPBACK_CAPACITY,
            connect_timeout: Duration::from_secs(10),
        }
    }

    pub fn socket(addresses: Vec<String>, local_rank: Rank) -> TransportConfig {
        TransportConfig {
            kind: TransportKind::Socket,
            addresses,
            local_rank,
            max_frame: DEFAULT_MAX_FRAME,
            loopback_queue_capacity: DEFAULT_LOOPBACK_CAPACITY,
            connect_timeout: Duration::from_secs(10),
        }
    }
}

/// One side of a (channel, rank-pair) connection.
///
/// An endpoint supports one concurrent sender and one concurrent
/// receiver; the channel guard above serializes access. Endpoints may
/// move between threads.
pub trait Endpoint: Send {
    fn local_rank(&self) -> Rank;
    fn peer_rank(&self) -> Rank;
    fn channel_index(&self) -> usize;

    /// Attempts to hand a frame to the transport without blocking.
    fn try_send(&mut self, frame: Frame) -> Result<SendOutcome, TransportError>;

    /// Returns the next frame in FIFO order, if one is available.
    /// `source_rank` is stamped with the true sender.
    fn try_recv(&mut self) -> Result<Option<Frame>, TransportError>;

    /// Flushes any internally buffered output. Returns true if bytes
    /// moved.
    fn pump(&mut self) -> Result<bool, TransportError>;

    fn frames_sent(&self) -> u64;
    fn frames_received(&self) -> u64;
}

/// All endpoints connecting one rank to its peers, indexed by
/// `[channel][peer_rank]`. The slot for the local rank is `None`.
pub struct EndpointMatrix {
    local_rank: Rank,
    num_ranks: usize,
    channels: Vec<Vec<Option<Box<dyn Endpoint>>>>,
}

impl EndpointMatrix {
    pub(crate) fn new(
        local_rank: Rank,
        num_ranks: usize,
        channels: Vec<Vec<Option<Box<dyn Endpoint>>>>,
    ) -> EndpointMatrix {
        EndpointMatrix {
            local_rank,
            num_ranks,
            channels,
        }
    }

    pub fn local_rank(&self) -> Rank {
        self.local_rank
    }

    pub fn num_ranks(&self) -> usize {
        self.num_ranks
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Removes the endpoint for `(channel, peer)`, if still present.
    pub fn take(&mut self, channel: usize, peer: Rank) -> Option<Box<dyn Endpoint>> {
        self.channels.get_mut(channel)?.get_mut(peer)?.take()
    }

    /// Removes the whole per-peer endpoint row for one channel.
    pub fn take_channel(&mut self, channel: usize) -> Vec<Option<Box<dyn Endpoint>>> {
        std::mem::take(&mut self.channels[channel])
    }

    /// Number of endpoints still held.
    pub fn endpoint_count(&self) -> usize {
        self.channels
            .iter()
            .flatten()
            .filter(|slot| slot.is_some())
            .count()
    }
}

/// Establishes endpoints for every (channel, peer) pair.
///
/// Loopback returns one matrix per rank, all living in this process.
/// Socket returns a single matrix for `cfg.local_rank`; every process
/// participating in the job calls `connect` with the same address list.
pub fn connect(
    cfg: &TransportConfig,
    ranks: usize,
    channels: usize,
) -> Result<Vec<EndpointMatrix>, TransportError> {
    match cfg.kind {
        TransportKind::Loopback => {
            let fabric =
                LoopbackFabric::new(ranks, channels, cfg.loopback_queue_capacity, cfg.max_frame);
            Ok((0..ranks).map(|rank| fabric.endpoints(rank)).collect())
        }
        TransportKind::Socket => Ok(vec![socket::connect(cfg, ranks, channels)?]),
    }
}


thread_local! {
    static TRANSPORT_OPS: Cell<u64> = const { Cell::new(0) };
}

/// Transport operations (endpoint method invocations) executed by the
/// calling thread since it started. Used to assert that a `busy`
/// progress return touched the transport zero times.
pub fn transport_ops_on_this_thread() -> u64 {
    TRANSPORT_OPS.with(|c| c.get())
}

pub(crate) fn note_transport_op() {
    TRANSPORT_OPS.with(|c| c.set(c.get() + 1));
}
