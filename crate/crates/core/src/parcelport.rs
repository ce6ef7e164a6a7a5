//! The parcelport: client-facing send/receive of parcels over the
//! channel layer.
//!
//! A parcel is one non-zero-copy (NZC) chunk plus optional zero-copy
//! (ZC) chunks. Sending translates it into a header frame — carrying the
//! NZC chunk piggybacked when it fits the eager threshold — followed by
//! one data frame per remaining chunk, all on the channel statically
//! mapped to the sending worker thread. Each parcel keeps at most one
//! operation in flight at a time; whichever thread observes a completion
//! advances that parcel's state machine, so no two threads ever race on
//! one parcel.
//!
//! Worker threads drive everything through [`Parcelport::background_work`]:
//! it progresses one channel (its own under the `local` strategy, a
//! uniformly random one under `random`), processes arrived headers,
//! drains completed operations, and occasionally sweeps all channels
//! when hybrid global progress is enabled.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::channel::{
    Channel, ChannelConfig, Completion, LockMode, OpCompletion, OpId, OpKind, OpRequest, OpStatus,
    ProgressMode, ProgressOutcome,
};
use crate::completion::{CallbackScope, CompletionDescriptor, CompletionKind, CompletionQueue};
use crate::transport::EndpointMatrix;
use crate::wire::{Header, Tag, WireError, WIRE_VERSION};
use crate::{channel::ChannelError, Rank};

static NEXT_PARCEL_ID: AtomicU64 = AtomicU64::new(1);
static NEXT_PORT_ID: AtomicU64 = AtomicU64::new(1);

/// The unit clients send and receive: one NZC chunk (possibly empty)
/// plus zero or more non-empty ZC chunks.
#[derive(Debug)]
pub struct Parcel {
    pub parcel_id: u64,
    pub dest: Rank,
    pub nzc: Vec<u8>,
    pub zc: Vec<Vec<u8>>,
}

impl Parcel {
    pub fn new(dest: Rank, nzc: Vec<u8>, zc: Vec<Vec<u8>>) -> Parcel {
        Parcel {
            parcel_id: NEXT_PARCEL_ID.fetch_add(1, Ordering::Relaxed),
            dest,
            nzc,
            zc,
        }
    }

    pub fn total_bytes(&self) -> usize {
        self.nzc.len() + self.zc.iter().map(Vec::len).sum::<usize>()
    }
}

/// Which channel a polling thread selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProgressStrategy {
    /// Poll the channel statically mapped to the thread.
    Local,
    /// Poll a uniformly random channel; seeded per thread for
    /// reproducible runs.
    Random,
}

/// How completed operations are observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionMode {
    /// Request pools polled round-robin.
    Pool,
    /// Continuation callbacks feeding the shared completion queue.
    Continuation,
}

/// Parcelport configuration; every field is mirrored by a CLI flag in
/// the benchmark harness.
///
/// `num_channels` normally stays at or below `num_threads`; more
/// channels than threads is allowed, but channels past the mapped range
/// only see traffic through the random strategy or global sweeps.
#[derive(Debug, Clone)]
pub struct PortConfig {
    pub num_channels: usize,
    pub num_threads: usize,
    pub strategy: ProgressStrategy,
    pub completion_mode: CompletionMode,
    pub lock_mode: LockMode,
    /// Sweep all channels every N local progress calls; 0 disables.
    pub global_progress_interval: u64,
    /// NZC chunks up to this many bytes piggyback inside the header.
    /// Must agree across ranks.
    pub eager_threshold: usize,
    /// Completions processed per background_work call.
    pub drain_budget: usize,
    pub seed: u64,
}

impl Default for PortConfig {
    fn default() -> PortConfig {
        PortConfig {
            num_channels: 1,
            num_threads: 1,
            strategy: ProgressStrategy::Local,
            completion_mode: CompletionMode::Pool,
            lock_mode: LockMode::Try,
            global_progress_interval: 256,
            eager_threshold: 8192,
            drain_budget: 16,
            seed: 0,
        }
    }
}

/// Errors surfaced by the parcelport API.
#[derive(Debug, Error)]
pub enum PortError {
    #[error("destination rank {dest} out of range (local rank {local}, {ranks} ranks)")]
    DestinationOutOfRange {
        dest: Rank,
        local: Rank,
        ranks: usize,
    },
    #[error("calling thread is not bound to this parcelport")]
    UnboundThread,
    #[error("thread ordinal {thread} out of range for {threads} worker threads")]
    ThreadOutOfRange { thread: usize, threads: usize },
    #[error("parcel handler already registered")]
    HandlerAlreadyRegistered,
    #[error("ZC allocator already registered")]
    AllocatorAlreadyRegistered,
    #[error("incoming parcel but no handler registered")]
    HandlerMissing,
    #[error("incoming parcel carries ZC chunks but no allocator registered")]
    AllocatorMissing,
    #[error("allocator returned {got} buffers for {expected} ZC chunks")]
    AllocatorChunkCount { expected: usize, got: usize },
    #[error("header arrived on channel {endpoint_channel} but names channel {header_channel}")]
    ChannelIndexMismatch {
        header_channel: usize,
        endpoint_channel: usize,
    },
    #[error("incoming data frame overflowed its buffer ({received} bytes into {capacity})")]
    DataTruncated { received: usize, capacity: usize },
    #[error("invalid parcel: {0}")]
    InvalidParcel(String),
    #[error("configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Maps worker thread `t` of `threads` onto one of `channels` channels,
/// block-contiguously so adjacent threads share a channel. Surjective
/// whenever `channels <= threads`.
pub fn map_thread_to_channel(t: usize, threads: usize, channels: usize) -> usize {
    assert!(threads >= 1 && channels >= 1 && t < threads);
    t * channels / threads
}

pub type ParcelHandler = Box<dyn Fn(Parcel, Rank) + Send + Sync>;
pub type ZcAllocator = Box<dyn Fn(&[u32]) -> Vec<Vec<u8>> + Send + Sync>;
pub type SendCallback = Box<dyn FnOnce(Result<(), PortError>) + Send>;

enum SendStage {
    Header,
    Nzc,
    Zc(usize),
}

/// Sender-side state machine; owns the parcel until the last chunk is
/// on the wire. At most one operation is pending per state.
struct SendState {
    parcel: Parcel,
    channel: usize,
    tag: Tag,
    piggybacked: bool,
    stage: SendStage,
    on_complete: Option<SendCallback>,
}

enum RecvStage {
    Nzc,
    Zc(usize),
}

/// Receiver-side state machine, keyed on (source, tag, channel) via a
/// local identifier. Buffers for ZC chunks come from the client
/// allocator and flow back to the handler untouched.
struct RecvState {
    parcel_id: u64,
    source: Rank,
    channel: usize,
    tag: Tag,
    nzc: Option<Vec<u8>>,
    zc_filled: Vec<Vec<u8>>,
    zc_pending: VecDeque<Vec<u8>>,
    stage: RecvStage,
}

#[derive(Default)]
struct PortStats {
    parcels_sent: AtomicU64,
    parcels_delivered: AtomicU64,
    parcels_aborted: AtomicU64,
}

/// A messaging runtime instance for one rank.
pub struct Parcelport {
    id: u64,
    local_rank: Rank,
    num_ranks: usize,
    config: PortConfig,
    channels: Vec<Arc<Channel>>,
    queue: Arc<CompletionQueue>,
    handler: OnceLock<ParcelHandler>,
    zc_allocator: OnceLock<ZcAllocator>,
    sends: Vec<Mutex<HashMap<u64, SendState>>>,
    recvs: Vec<Mutex<HashMap<u64, RecvState>>>,
    /// Preposted wildcard header receive per channel (pool mode).
    header_slots: Vec<Mutex<Option<OpRequest>>>,
    /// Completed-operation payloads awaiting their descriptor
    /// (continuation mode), sharded per channel.
    outcome_stash: Vec<Arc<Mutex<HashMap<OpId, OpCompletion>>>>,
    next_recv_id: AtomicU64,
    stats: PortStats,
}

thread_local! {
    static BOUND_WORKER: std::cell::Cell<Option<(u64, usize)>> =
        const { std::cell::Cell::new(None) };
    static WORKER_RNG: std::cell::RefCell<HashMap<u64, SmallRng>> =
        std::cell::RefCell::new(HashMap::new());
}

impl Parcelport {
    /// Builds a port over connected endpoints and preposts the wildcard
    /// header receive on every channel.
    pub fn new(
        config: PortConfig,
        mut endpoints: EndpointMatrix,
    ) -> Result<Arc<Parcelport>, PortError> {
        if config.num_channels == 0 || config.num_channels > u16::MAX as usize {
            return Err(PortError::InvalidConfig(format!(
                "num_channels {} outside [1, 65535]",
                config.num_channels
            )));
        }
        if config.num_threads == 0 {
            return Err(PortError::InvalidConfig("num_threads must be >= 1".into()));
        }
        if endpoints.num_channels() != config.num_channels {
            return Err(PortError::InvalidConfig(format!(
                "endpoint matrix has {} channels, config wants {}",
                endpoints.num_channels(),
                config.num_channels
            )));
        }

        let local_rank = endpoints.local_rank();
        let num_ranks = endpoints.num_ranks();
        let channel_config = ChannelConfig {
            lock_mode: config.lock_mode,
            global_progress_interval: config.global_progress_interval,
            peers: num_ranks,
        };
        let channels: Vec<Arc<Channel>> = (0..config.num_channels)
            .map(|i| {
                Arc::new(Channel::new(
                    i,
                    local_rank,
                    endpoints.take_channel(i),
                    channel_config.clone(),
                ))
            })
            .collect();

        let num_channels = config.num_channels;
        let port = Arc::new(Parcelport {
            id: NEXT_PORT_ID.fetch_add(1, Ordering::Relaxed),
            local_rank,
            num_ranks,
            config,
            channels,
            queue: Arc::new(CompletionQueue::new(4096)),
            handler: OnceLock::new(),
            zc_allocator: OnceLock::new(),
            sends: (0..num_channels)
                .map(|_| Mutex::new(HashMap::new()))
                .collect(),
            recvs: (0..num_channels)
                .map(|_| Mutex::new(HashMap::new()))
                .collect(),
            header_slots: (0..num_channels).map(|_| Mutex::new(None)).collect(),
            outcome_stash: (0..num_channels)
                .map(|_| Arc::new(Mutex::new(HashMap::new())))
                .collect(),
            next_recv_id: AtomicU64::new(1),
            stats: PortStats::default(),
        });
        for channel in 0..num_channels {
            port.repost_header(channel)?;
        }
        Ok(port)
    }

    pub fn local_rank(&self) -> Rank {
        self.local_rank
    }

    pub fn num_ranks(&self) -> usize {
        self.num_ranks
    }

    pub fn config(&self) -> &PortConfig {
        &self.config
    }

    pub fn channels(&self) -> &[Arc<Channel>] {
        &self.channels
    }

    pub fn completion_queue(&self) -> &Arc<CompletionQueue> {
        &self.queue
    }

    pub fn parcels_sent(&self) -> u64 {
        self.stats.parcels_sent.load(Ordering::Relaxed)
    }

    pub fn parcels_delivered(&self) -> u64 {
        self.stats.parcels_delivered.load(Ordering::Relaxed)
    }

    pub fn parcels_aborted(&self) -> u64 {
        self.stats.parcels_aborted.load(Ordering::Relaxed)
    }

    /// Total frames this rank pushed into / pulled out of the transport,
    /// summed over channels. Takes each channel guard briefly.
    pub fn frame_counts(&self) -> (u64, u64) {
        self.channels
            .iter()
            .map(|ch| ch.inspect(|v| (v.frames_sent(), v.frames_received())))
            .fold((0, 0), |(s, r), (cs, cr)| (s + cs, r + cr))
    }

    /// Registers the upper-layer parcel handler; exactly once.
    pub fn register_handler(&self, handler: ParcelHandler) -> Result<(), PortError> {
        self.handler
            .set(handler)
            .map_err(|_| PortError::HandlerAlreadyRegistered)
    }

    /// Registers the ZC buffer allocator; exactly once.
    pub fn register_zc_allocator(&self, allocator: ZcAllocator) -> Result<(), PortError> {
        self.zc_allocator
            .set(allocator)
            .map_err(|_| PortError::AllocatorAlreadyRegistered)
    }

    /// Binds the calling thread to worker ordinal `t` of this port.
    /// `send_parcel` uses the binding to select the thread's channel.
    pub fn bind_worker(&self, t: usize) -> Result<(), PortError> {
        if t >= self.config.num_threads {
            return Err(PortError::ThreadOutOfRange {
                thread: t,
                threads: self.config.num_threads,
            });
        }
        BOUND_WORKER.with(|cell| cell.set(Some((self.id, t))));
        let mix = (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        WORKER_RNG.with(|map| {
            map.borrow_mut()
                .insert(self.id, SmallRng::seed_from_u64(self.config.seed ^ mix));
        });
        Ok(())
    }

    fn bound_worker(&self) -> Result<usize, PortError> {
        match BOUND_WORKER.with(|cell| cell.get()) {
            Some((port, t)) if port == self.id => Ok(t),
            _ => Err(PortError::UnboundThread),
        }
    }

    fn completion_for(&self, channel: usize) -> Completion {
        match self.config.completion_mode {
            CompletionMode::Pool => Completion::Pool,
            CompletionMode::Continuation => {
                let queue = Arc::clone(&self.queue);
                let stash = Arc::clone(&self.outcome_stash[channel]);
                Completion::Callback {
                    callback: Box::new(move |outcome: OpCompletion| {
                        let descriptor = CompletionDescriptor {
                            op_id: outcome.op_id,
                            kind: CompletionKind::from(outcome.kind),
                            parcel_id: outcome.context,
                            channel: outcome.channel,
                            source: outcome.source,
                            context: outcome.context,
                        };
                        stash.lock().unwrap().insert(outcome.op_id, outcome);
                        queue.push(descriptor);
                    }),
                    request: None,
                }
            }
        }
    }

    /// Capacity of the wildcard header receive buffer: enough for the
    /// largest header the port itself would emit.
    fn header_capacity(&self) -> usize {
        crate::wire::HEADER_PREFIX_LEN + 4 * 4096 + self.config.eager_threshold
    }

    fn repost_header(&self, channel: usize) -> Result<(), PortError> {
        let buffer = Vec::with_capacity(self.header_capacity());
        let completion = match self.config.completion_mode {
            CompletionMode::Pool => Completion::Detached,
            CompletionMode::Continuation => self.completion_for(channel),
        };
        let op = self.channels[channel].post_recv(None, Tag::HEADER, buffer, 0, completion)?;
        if self.config.completion_mode == CompletionMode::Pool {
            *self.header_slots[channel].lock().unwrap() = Some(op);
        }
        Ok(())
    }

    /// Sends a parcel from the bound worker thread. Returns immediately;
    /// frames move during subsequent background work, and `on_complete`
    /// fires exactly once after the final chunk is accepted by the
    /// transport (or on the first transport failure).
    pub fn send_parcel(&self, parcel: Parcel, on_complete: SendCallback) -> Result<(), PortError> {
        let t = self.bound_worker()?;
        self.send_parcel_from(t, parcel, on_complete)
    }

    /// `send_parcel` with an explicit worker ordinal.
    pub fn send_parcel_from(
        &self,
        t: usize,
        parcel: Parcel,
        on_complete: SendCallback,
    ) -> Result<(), PortError> {
        if t >= self.config.num_threads {
            return Err(PortError::ThreadOutOfRange {
                thread: t,
                threads: self.config.num_threads,
            });
        }
        if parcel.dest >= self.num_ranks || parcel.dest == self.local_rank {
            return Err(PortError::DestinationOutOfRange {
                dest: parcel.dest,
                local: self.local_rank,
                ranks: self.num_ranks,
            });
        }
        if parcel.zc.iter().any(Vec::is_empty) {
            return Err(PortError::InvalidParcel("empty ZC chunk".into()));
        }
        if parcel.zc.len() > 4096 {
            return Err(PortError::InvalidParcel(format!(
                "{} ZC chunks exceed the port limit of 4096",
                parcel.zc.len()
            )));
        }

        let channel_index =
            map_thread_to_channel(t, self.config.num_threads, self.config.num_channels);
        let channel = &self.channels[channel_index];
        let tag = channel.allocate_tag();
        let piggybacked = parcel.nzc.len() <= self.config.eager_threshold;
        let header = Header {
            version: WIRE_VERSION,
            channel_index: channel_index as u16,
            followup_tag: tag,
            nzc_size: parcel.nzc.len() as u32,
            zc_sizes: parcel.zc.iter().map(|c| c.len() as u32).collect(),
            payload: piggybacked.then(|| parcel.nzc.clone()),
        };
        let header_bytes = header.encode()?;

        let parcel_id = parcel.parcel_id;
        let dest = parcel.dest;
        let state = SendState {
            parcel,
            channel: channel_index,
            tag,
            piggybacked,
            stage: SendStage::Header,
            on_complete: Some(on_complete),
        };
        // Registered before posting: a concurrent progress call may
        // complete the operation immediately.
        self.sends[channel_index]
            .lock()
            .unwrap()
            .insert(parcel_id, state);
        self.stats.parcels_sent.fetch_add(1, Ordering::Relaxed);

        if let Err(err) = channel.post_send(
            dest,
            crate::wire::FrameKind::Header,
            Tag::HEADER,
            header_bytes,
            parcel_id,
            self.completion_for(channel_index),
        ) {
            self.sends[channel_index].lock().unwrap().remove(&parcel_id);
            self.stats.parcels_sent.fetch_sub(1, Ordering::Relaxed);
            return Err(err.into());
        }
        Ok(())
    }

    /// One scheduler slice of communication work for worker `t`:
    /// progress a channel chosen by the strategy, service arrived
    /// headers, drain up to `drain_budget` completions, then maybe run
    /// hybrid global progress. Returns whether anything advanced.
    pub fn background_work(&self, t: usize) -> Result<bool, PortError> {
        crate::completion::assert_not_reentrant("background_work");
        if t >= self.config.num_threads {
            return Err(PortError::ThreadOutOfRange {
                thread: t,
                threads: self.config.num_threads,
            });
        }

        let channel_index = match self.config.strategy {
            ProgressStrategy::Local => {
                map_thread_to_channel(t, self.config.num_threads, self.config.num_channels)
            }
            ProgressStrategy::Random => self.random_channel(t),
        };
        let channel = &self.channels[channel_index];

        let mode = match self.config.lock_mode {
            LockMode::Blocking => ProgressMode::Blocking,
            LockMode::Try => ProgressMode::Try,
        };
        let mut progressed = channel.progress(mode) == ProgressOutcome::Progressed;

        if self.config.completion_mode == CompletionMode::Pool {
            for _ in 0..self.config.drain_budget {
                match self.take_completed_header(channel_index) {
                    Some(outcome) => {
                        progressed = true;
                        self.handle_header(channel_index, outcome)?;
                    }
                    None => break,
                }
            }
        }

        match self.config.completion_mode {
            CompletionMode::Pool => {
                for op in channel.poll_pools(self.config.drain_budget) {
                    progressed = true;
                    let outcome = op
                        .take_outcome()
                        .expect("pooled operation completed without an outcome");
                    self.dispatch(outcome)?;
                }
            }
            CompletionMode::Continuation => {
                for _ in 0..self.config.drain_budget {
                    match self.queue.poll() {
                        Some(descriptor) => {
                            progressed = true;
                            self.dispatch_descriptor(descriptor)?;
                        }
                        None => break,
                    }
                }
            }
        }

        channel.maybe_global_progress(&self.channels);
        Ok(progressed)
    }

    fn random_channel(&self, t: usize) -> usize {
        let channels = self.config.num_channels;
        let port = self.id;
        let seed = self.config.seed;
        WORKER_RNG.with(|map| {
            let mut map = map.borrow_mut();
            let rng = map.entry(port).or_insert_with(|| {
                let mix = (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                SmallRng::seed_from_u64(seed ^ mix)
            });
            rng.random_range(0..channels)
        })
    }

    fn take_completed_header(&self, channel: usize) -> Option<OpCompletion> {
        let mut slot = self.header_slots[channel].lock().unwrap();
        let outcome = slot.as_ref()?.take_outcome()?;
        *slot = None;
        Some(outcome)
    }

    fn dispatch_descriptor(&self, descriptor: CompletionDescriptor) -> Result<(), PortError> {
        let outcome = self.outcome_stash[descriptor.channel]
            .lock()
            .unwrap()
            .remove(&descriptor.op_id)
            .expect("descriptor without a stashed outcome");
        match descriptor.kind {
            CompletionKind::HeaderReceived => self.handle_header(descriptor.channel, outcome),
            _ => self.dispatch(outcome),
        }
    }

    fn dispatch(&self, outcome: OpCompletion) -> Result<(), PortError> {
        match outcome.kind {
            OpKind::SendHeader | OpKind::SendData => self.advance_send(outcome),
            OpKind::RecvData => self.advance_recv(outcome),
            OpKind::RecvHeaderPreposted => self.handle_header(outcome.channel, outcome),
        }
    }

    /// Starts a receive state machine for an arrived header. The
    /// wildcard receive is reposted before any processing so header
    /// availability never lapses.
    fn handle_header(&self, channel: usize, outcome: OpCompletion) -> Result<(), PortError> {
        self.repost_header(channel)?;

        let source = outcome.source.expect("header receive without source rank");
        if let OpStatus::Truncated { received, capacity } = outcome.status {
            self.stats.parcels_aborted.fetch_add(1, Ordering::Relaxed);
            return Err(PortError::DataTruncated { received, capacity });
        }
        if outcome.status == OpStatus::TransportFailed {
            return Ok(());
        }
        let bytes = outcome.data.expect("header receive without data");
        let header = match Header::decode(&bytes) {
            Ok(header) => header,
            Err(err) => {
                self.stats.parcels_aborted.fetch_add(1, Ordering::Relaxed);
                return Err(err.into());
            }
        };
        if header.channel_index as usize != channel {
            self.stats.parcels_aborted.fetch_add(1, Ordering::Relaxed);
            return Err(PortError::ChannelIndexMismatch {
                header_channel: header.channel_index as usize,
                endpoint_channel: channel,
            });
        }
        if self.handler.get().is_none() {
            self.stats.parcels_aborted.fetch_add(1, Ordering::Relaxed);
            return Err(PortError::HandlerMissing);
        }

        let zc_buffers: VecDeque<Vec<u8>> = if header.zc_sizes.is_empty() {
            VecDeque::new()
        } else {
            let allocator = self.zc_allocator.get().ok_or_else(|| {
                self.stats.parcels_aborted.fetch_add(1, Ordering::Relaxed);
                PortError::AllocatorMissing
            })?;
            let buffers = {
                let _scope = CallbackScope::enter();
                allocator(&header.zc_sizes)
            };
            if buffers.len() != header.zc_sizes.len() {
                self.stats.parcels_aborted.fetch_add(1, Ordering::Relaxed);
                return Err(PortError::AllocatorChunkCount {
                    expected: header.zc_sizes.len(),
                    got: buffers.len(),
                });
            }
            buffers.into()
        };

        let tag = header.followup_tag;
        let mut state = RecvState {
            parcel_id: NEXT_PARCEL_ID.fetch_add(1, Ordering::Relaxed),
            source,
            channel,
            tag,
            nzc: None,
            zc_filled: Vec::new(),
            zc_pending: zc_buffers,
            stage: RecvStage::Nzc,
        };

        match header.payload {
            Some(nzc) => {
                state.nzc = Some(nzc);
                match state.zc_pending.pop_front() {
                    Some(buffer) => {
                        state.stage = RecvStage::Zc(0);
                        self.post_data_recv(state, buffer)
                    }
                    None => self.deliver(state),
                }
            }
            None => {
                let buffer = Vec::with_capacity(header.nzc_size as usize);
                state.stage = RecvStage::Nzc;
                self.post_data_recv(state, buffer)
            }
        }
    }

    fn post_data_recv(&self, state: RecvState, buffer: Vec<u8>) -> Result<(), PortError> {
        let channel = state.channel;
        let recv_id = self.next_recv_id.fetch_add(1, Ordering::Relaxed);
        let source = state.source;
        let tag = state.tag;
        // Registered before posting; the matching frame may already sit
        // in the unexpected queue and complete inline.
        self.recvs[channel].lock().unwrap().insert(recv_id, state);
        if let Err(err) = self.channels[channel].post_recv(
            Some(source),
            tag,
            buffer,
            recv_id,
            self.completion_for(channel),
        ) {
            self.recvs[channel].lock().unwrap().remove(&recv_id);
            self.stats.parcels_aborted.fetch_add(1, Ordering::Relaxed);
            return Err(err.into());
        }
        Ok(())
    }

    fn advance_recv(&self, outcome: OpCompletion) -> Result<(), PortError> {
        let mut state = self.recvs[outcome.channel]
            .lock()
            .unwrap()
            .remove(&outcome.context)
            .expect("completion for unknown receive state");

        match outcome.status {
            OpStatus::Ok => {}
            OpStatus::Truncated { received, capacity } => {
                self.stats.parcels_aborted.fetch_add(1, Ordering::Relaxed);
                return Err(PortError::DataTruncated { received, capacity });
            }
            OpStatus::TransportFailed => {
                self.stats.parcels_aborted.fetch_add(1, Ordering::Relaxed);
                return Ok(());
            }
        }

        let data = outcome.data.expect("data receive without buffer");
        match state.stage {
            RecvStage::Nzc => state.nzc = Some(data),
            RecvStage::Zc(k) => {
                debug_assert_eq!(k, state.zc_filled.len(), "ZC chunks filled out of order");
                state.zc_filled.push(data);
            }
        }

        match state.zc_pending.pop_front() {
            Some(buffer) => {
                state.stage = RecvStage::Zc(state.zc_filled.len());
                self.post_data_recv(state, buffer)
            }
            None => self.deliver(state),
        }
    }

    fn deliver(&self, state: RecvState) -> Result<(), PortError> {
        let handler = self.handler.get().ok_or(PortError::HandlerMissing)?;
        let parcel = Parcel {
            parcel_id: state.parcel_id,
            dest: self.local_rank,
            nzc: state.nzc.unwrap_or_default(),
            zc: state.zc_filled,
        };
        self.stats.parcels_delivered.fetch_add(1, Ordering::Relaxed);
        let _scope = CallbackScope::enter();
        handler(parcel, state.source);
        Ok(())
    }

    fn advance_send(&self, outcome: OpCompletion) -> Result<(), PortError> {
        let parcel_id = outcome.context;
        let mut state = self.sends[outcome.channel]
            .lock()
            .unwrap()
            .remove(&parcel_id)
            .expect("completion for unknown send state");

        if outcome.status != OpStatus::Ok {
            if let Some(cb) = state.on_complete.take() {
                let _scope = CallbackScope::enter();
                cb(Err(PortError::InvalidParcel("transport failure".into())));
            }
            self.stats.parcels_aborted.fetch_add(1, Ordering::Relaxed);
            return Ok(());
        }

        let next = match state.stage {
            SendStage::Header => {
                if !state.piggybacked {
                    Some((SendStage::Nzc, state.parcel.nzc.clone()))
                } else if !state.parcel.zc.is_empty() {
                    Some((SendStage::Zc(0), state.parcel.zc[0].clone()))
                } else {
                    None
                }
            }
            SendStage::Nzc => {
                if state.parcel.zc.is_empty() {
                    None
                } else {
                    Some((SendStage::Zc(0), state.parcel.zc[0].clone()))
                }
            }
            SendStage::Zc(k) => {
                let next = k + 1;
                if next < state.parcel.zc.len() {
                    Some((SendStage::Zc(next), state.parcel.zc[next].clone()))
                } else {
                    None
                }
            }
        };

        match next {
            Some((stage, body)) => {
                state.stage = stage;
                let channel_index = state.channel;
                let dest = state.parcel.dest;
                let tag = state.tag;
                self.sends[channel_index]
                    .lock()
                    .unwrap()
                    .insert(parcel_id, state);
                if let Err(err) = self.channels[channel_index].post_send(
                    dest,
                    crate::wire::FrameKind::Data,
                    tag,
                    body,
                    parcel_id,
                    self.completion_for(channel_index),
                ) {
                    self.sends[channel_index].lock().unwrap().remove(&parcel_id);
                    self.stats.parcels_aborted.fetch_add(1, Ordering::Relaxed);
                    return Err(err.into());
                }
                Ok(())
            }
            None => {
                if let Some(cb) = state.on_complete.take() {
                    let _scope = CallbackScope::enter();
                    cb(Ok(()));
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapping_is_block_contiguous() {
        let got: Vec<usize> = (0..8).map(|t| map_thread_to_channel(t, 8, 4)).collect();
        assert_eq!(got, [0, 0, 1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn mapping_is_identity_when_counts_match() {
        for t in 0..16 {
            assert_eq!(map_thread_to_channel(t, 16, 16), t);
        }
    }

    #[test]
    fn mapping_balances_uneven_counts() {
        let mut histogram = vec![0usize; 16];
        for t in 0..63 {
            histogram[map_thread_to_channel(t, 63, 16)] += 1;
        }
        assert_eq!(histogram.iter().sum::<usize>(), 63);
        assert!(histogram.iter().all(|&n| n == 3 || n == 4), "{histogram:?}");
    }
}
