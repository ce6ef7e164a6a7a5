//! Virtual communication channels.
//!
//! A [`Channel`] owns a replicated slice of communication resources: one
//! transport endpoint per peer, a tag-matching engine with an
//! unexpected-frame queue, send/receive request pools, and a guard that
//! serializes all mutation. Threads working on different channels never
//! contend; threads sharing a channel serialize on its guard, either by
//! waiting (`blocking`) or by backing off (`try`).
//!
//! Operations are posted from any thread and complete during later
//! [`Channel::progress`] calls. Completion is observed either by polling
//! the request pools ([`Channel::poll_pools`]) or through a continuation
//! callback attached to the operation.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, TryLockError};

use thiserror::Error;

use crate::completion::{self, ContinuationRequest};
use crate::transport::{Endpoint, SendOutcome, TransportError};
use crate::wire::{self, Frame, FrameKind, Tag};
use crate::Rank;

/// Unique operation identifier, monotonically assigned process-wide.
pub type OpId = u64;

static NEXT_OP_ID: AtomicU64 = AtomicU64::new(1);

/// What the operation does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    SendHeader,
    SendData,
    RecvData,
    RecvHeaderPreposted,
}

/// Terminal status of a completed operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpStatus {
    Ok,
    /// The matched frame did not fit the posted buffer; the prefix that
    /// fit was delivered.
    Truncated {
        received: usize,
        capacity: usize,
    },
    /// The peer disconnected or the transport failed underneath the
    /// operation.
    TransportFailed,
}

/// Everything a completed operation reports.
#[derive(Debug)]
pub struct OpCompletion {
    pub op_id: OpId,
    pub kind: OpKind,
    pub channel: usize,
    /// Opaque token supplied at post time.
    pub context: u64,
    pub status: OpStatus,
    /// True sender, for receives.
    pub source: Option<Rank>,
    pub tag: Tag,
    /// The posted buffer, filled, for receives.
    pub data: Option<Vec<u8>>,
}

/// Continuation callback invoked exactly once on completion.
pub type CompletionCallback = Box<dyn FnOnce(OpCompletion) + Send>;

/// Completion mode chosen when posting an operation.
pub enum Completion {
    /// Park the request in the channel's pool; discover completion via
    /// [`Channel::poll_pools`].
    Pool,
    /// Invoke `callback` when the operation completes, optionally
    /// registered with a continuation request. A `None` request skips
    /// all shared-counter traffic.
    Callback {
        callback: CompletionCallback,
        request: Option<Arc<ContinuationRequest>>,
    },
    /// No completion mode yet; attach a continuation later or test the
    /// returned handle directly.
    Detached,
}

const STATE_PENDING: u8 = 0;
const STATE_COMPLETE: u8 = 1;

pub(crate) struct OpShared {
    op_id: OpId,
    kind: OpKind,
    channel: usize,
    context: u64,
    state: AtomicU8,
    slot: Mutex<ModeSlot>,
}

#[derive(Default)]
struct ModeSlot {
    attached: bool,
    pooled: bool,
    continuation: Option<(CompletionCallback, Option<Arc<ContinuationRequest>>)>,
    outcome: Option<OpCompletion>,
}

impl OpShared {
    fn new(kind: OpKind, channel: usize, context: u64) -> Arc<OpShared> {
        Arc::new(OpShared {
            op_id: NEXT_OP_ID.fetch_add(1, Ordering::Relaxed),
            kind,
            channel,
            context,
            state: AtomicU8::new(STATE_PENDING),
            slot: Mutex::new(ModeSlot::default()),
        })
    }

    /// Marks the op complete and either stashes the outcome or hands the
    /// attached continuation to the caller for firing outside the guard.
    fn complete(self: &Arc<OpShared>, outcome: OpCompletion, fired: &mut Vec<FiredContinuation>) {
        let prev = self.state.swap(STATE_COMPLETE, Ordering::AcqRel);
        debug_assert_eq!(prev, STATE_PENDING, "operation completed twice");
        let mut slot = self.slot.lock().unwrap();
        match slot.continuation.take() {
            Some((callback, request)) => fired.push(FiredContinuation {
                callback,
                request,
                outcome,
            }),
            None => slot.outcome = Some(outcome),
        }
    }
}

/// A continuation ready to run, collected under the guard and fired
/// after it is released.
pub(crate) struct FiredContinuation {
    pub(crate) callback: CompletionCallback,
    pub(crate) request: Option<Arc<ContinuationRequest>>,
    pub(crate) outcome: OpCompletion,
}

pub(crate) fn fire_all(fired: Vec<FiredContinuation>) {
    for f in fired {
        completion::deliver(f.callback, f.request, f.outcome);
    }
}

/// Cheap cloneable handle to a posted operation.
#[derive(Clone)]
pub struct OpRequest {
    shared: Arc<OpShared>,
}

impl std::fmt::Debug for OpRequest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpRequest")
            .field("op_id", &self.shared.op_id)
            .field("kind", &self.shared.kind)
            .field("channel", &self.shared.channel)
            .field("complete", &self.is_complete())
            .finish()
    }
}

impl OpRequest {
    pub fn op_id(&self) -> OpId {
        self.shared.op_id
    }

    pub fn kind(&self) -> OpKind {
        self.shared.kind
    }

    pub fn channel(&self) -> usize {
        self.shared.channel
    }

    pub fn context(&self) -> u64 {
        self.shared.context
    }

    pub fn is_complete(&self) -> bool {
        self.shared.state.load(Ordering::Acquire) == STATE_COMPLETE
    }

    /// Takes the stashed outcome of a completed pool/detached operation.
    /// Returns `Some` exactly once.
    pub fn take_outcome(&self) -> Option<OpCompletion> {
        if !self.is_complete() {
            return None;
        }
        self.shared.slot.lock().unwrap().outcome.take()
    }

    /// Attaches a continuation to an operation posted detached.
    ///
    /// If the operation already completed, the callback runs immediately
    /// on the calling thread (subject to the continuation request's
    /// active state). Attaching twice is an error.
    pub fn attach_continuation(
        &self,
        callback: CompletionCallback,
        request: Option<Arc<ContinuationRequest>>,
    ) -> Result<(), completion::CompletionError> {
        let mut slot = self.shared.slot.lock().unwrap();
        if slot.attached {
            return Err(completion::CompletionError::AlreadyAttached(self.op_id()));
        }
        slot.attached = true;
        if let Some(cr) = &request {
            cr.register(self.channel());
        }
        match slot.outcome.take() {
            Some(outcome) => {
                drop(slot);
                completion::deliver(callback, request, outcome);
            }
            // Still pending, or a completer is mid-flight waiting on this
            // lock; either way it will fire the stored continuation.
            None => slot.continuation = Some((callback, request)),
        }
        Ok(())
    }
}

/// How a thread acquires a channel guard when it must not fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockMode {
    Blocking,
    Try,
}

/// Guard acquisition behavior of a single progress call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProgressMode {
    Blocking,
    Try,
}

/// What a progress call accomplished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProgressOutcome {
    /// Some channel state changed.
    Progressed,
    /// Nothing to do.
    Idle,
    /// Try-mode acquisition failed; no side effects occurred.
    Busy,
}

/// Whether a hybrid global-progress check swept the other channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlobalProgressOutcome {
    Ran,
    Skipped,
}

/// Per-channel configuration.
#[derive(Debug, Clone)]
pub struct ChannelConfig {
    pub lock_mode: LockMode,
    /// Run a global sweep every N local progress calls; 0 disables.
    pub global_progress_interval: u64,
    pub peers: usize,
}

impl Default for ChannelConfig {
    fn default() -> ChannelConfig {
        ChannelConfig {
            lock_mode: LockMode::Try,
            global_progress_interval: 256,
            peers: 2,
        }
    }
}

/// Contention and progress counters, readable without the guard.
#[derive(Default)]
pub struct ChannelStats {
    pub progress_calls: AtomicU64,
    pub busy_returns: AtomicU64,
    /// Times a blocking-mode progress call waited for the guard.
    pub guard_blocked: AtomicU64,
    /// Times a posting or polling call waited for the guard.
    pub post_waits: AtomicU64,
    pub local_progress_count: AtomicU64,
    pub global_sweeps: AtomicU64,
    pub unexpected_header_high_water: AtomicU64,
}

/// Point-in-time copy of the counters, for reporting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStatsSnapshot {
    pub progress_calls: u64,
    pub busy_returns: u64,
    pub guard_blocked: u64,
    pub post_waits: u64,
    pub local_progress_count: u64,
    pub global_sweeps: u64,
}

/// Errors raised when posting operations.
#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("peer rank {peer} out of range (local rank {local}, {ranks} ranks)")]
    PeerOutOfRange {
        peer: Rank,
        local: Rank,
        ranks: usize,
    },
    #[error("tag {tag} does not match declared frame class {kind:?}")]
    TagClassMismatch { kind: FrameKind, tag: u32 },
    #[error("wildcard-source receives are limited to header-class tags")]
    WildcardDataReceive,
}

struct PostedRecv {
    op: Arc<OpShared>,
    source: Option<Rank>,
    tag: Tag,
    buffer: Vec<u8>,
}

struct DeferredSend {
    op: Arc<OpShared>,
    frame: Frame,
}

struct ChannelState {
    endpoints: Vec<Option<Box<dyn Endpoint>>>,
    posted_recvs: VecDeque<PostedRecv>,
    unexpected: VecDeque<Frame>,
    /// Unmatched header-class frames currently queued, per source peer.
    /// While nonzero for a peer, that endpoint is not drained further,
    /// which bounds unexpected header growth to one per peer.
    unexpected_headers_by_peer: Vec<u64>,
    deferred_sends: Vec<VecDeque<DeferredSend>>,
    send_pool: VecDeque<OpRequest>,
    recv_pool: VecDeque<OpRequest>,
    poll_send_side: bool,
    peer_dead: Vec<bool>,
}

/// A virtual communication interface.
pub struct Channel {
    index: usize,
    local_rank: Rank,
    num_ranks: usize,
    config: ChannelConfig,
    state: Mutex<ChannelState>,
    tag_counter: AtomicU64,
    stats: ChannelStats,
}

impl Channel {
    pub fn new(
        index: usize,
        local_rank: Rank,
        endpoints: Vec<Option<Box<dyn Endpoint>>>,
        config: ChannelConfig,
    ) -> Channel {
        let num_ranks = endpoints.len();
        Channel {
            index,
            local_rank,
            num_ranks,
            config,
            state: Mutex::new(ChannelState {
                endpoints,
                posted_recvs: VecDeque::new(),
                unexpected: VecDeque::new(),
                unexpected_headers_by_peer: vec![0; num_ranks],
                deferred_sends: (0..num_ranks).map(|_| VecDeque::new()).collect(),
                send_pool: VecDeque::new(),
                recv_pool: VecDeque::new(),
                poll_send_side: true,
                peer_dead: vec![false; num_ranks],
            }),
            tag_counter: AtomicU64::new(0),
            stats: ChannelStats::default(),
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn local_rank(&self) -> Rank {
        self.local_rank
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    pub fn stats_snapshot(&self) -> ChannelStatsSnapshot {
        ChannelStatsSnapshot {
            progress_calls: self.stats.progress_calls.load(Ordering::Relaxed),
            busy_returns: self.stats.busy_returns.load(Ordering::Relaxed),
            guard_blocked: self.stats.guard_blocked.load(Ordering::Relaxed),
            post_waits: self.stats.post_waits.load(Ordering::Relaxed),
            local_progress_count: self.stats.local_progress_count.load(Ordering::Relaxed),
            global_sweeps: self.stats.global_sweeps.load(Ordering::Relaxed),
        }
    }

    /// Allocates the next follow-up tag on this channel.
    pub fn allocate_tag(&self) -> Tag {
        wire::allocate_tag(&self.tag_counter)
    }

    fn lock_wait(&self) -> MutexGuard<'_, ChannelState> {
        match self.state.try_lock() {
            Ok(guard) => guard,
            Err(TryLockError::WouldBlock) => {
                self.stats.post_waits.fetch_add(1, Ordering::Relaxed);
                self.state.lock().unwrap()
            }
            Err(TryLockError::Poisoned(p)) => panic!("channel guard poisoned: {p}"),
        }
    }

    fn check_peer(&self, peer: Rank) -> Result<(), ChannelError> {
        if peer >= self.num_ranks || peer == self.local_rank {
            return Err(ChannelError::PeerOutOfRange {
                peer,
                local: self.local_rank,
                ranks: self.num_ranks,
            });
        }
        Ok(())
    }

    /// Posts a non-blocking send. The frame goes out during subsequent
    /// progress calls; the request completes once the transport accepts
    /// it.
    pub fn post_send(
        &self,
        peer: Rank,
        kind: FrameKind,
        tag: Tag,
        body: Vec<u8>,
        context: u64,
        completion: Completion,
    ) -> Result<OpRequest, ChannelError> {
        if (kind == FrameKind::Header) != tag.is_header_class() {
            return Err(ChannelError::TagClassMismatch {
                kind,
                tag: tag.value(),
            });
        }
        self.check_peer(peer)?;

        let op_kind = match kind {
            FrameKind::Header => OpKind::SendHeader,
            FrameKind::Data => OpKind::SendData,
        };
        let op = OpShared::new(op_kind, self.index, context);
        let handle = OpRequest {
            shared: Arc::clone(&op),
        };
        install_completion(&op, completion);

        let frame = Frame {
            kind,
            source_rank: self.local_rank,
            tag,
            body,
        };
        let mut state = self.lock_wait();
        state.deferred_sends[peer].push_back(DeferredSend { op, frame });
        if is_pooled(&handle) {
            state.send_pool.push_back(handle.clone());
        }
        Ok(handle)
    }

    /// Posts a receive for `(source, tag)`; `source == None` is the
    /// wildcard, allowed only for header-class tags. If a matching frame
    /// already sits in the unexpected queue it is consumed immediately.
    pub fn post_recv(
        &self,
        source: Option<Rank>,
        tag: Tag,
        buffer: Vec<u8>,
        context: u64,
        completion: Completion,
    ) -> Result<OpRequest, ChannelError> {
        if source.is_none() && tag.is_data_class() {
            return Err(ChannelError::WildcardDataReceive);
        }
        if let Some(rank) = source {
            self.check_peer(rank)?;
        }

        let op_kind = if tag.is_header_class() {
            OpKind::RecvHeaderPreposted
        } else {
            OpKind::RecvData
        };
        let op = OpShared::new(op_kind, self.index, context);
        let handle = OpRequest {
            shared: Arc::clone(&op),
        };
        install_completion(&op, completion);

        let mut fired = Vec::new();
        {
            let mut state = self.lock_wait();
            let matched = state
                .unexpected
                .iter()
                .position(|f| recv_matches(source, tag, f));
            match matched {
                Some(idx) => {
                    let frame = state.unexpected.remove(idx).unwrap();
                    if frame.kind == FrameKind::Header {
                        state.unexpected_headers_by_peer[frame.source_rank] -= 1;
                    }
                    complete_recv(&op, buffer, frame, &mut fired);
                }
                None => state.posted_recvs.push_back(PostedRecv {
                    op,
                    source,
                    tag,
                    buffer,
                }),
            }
            if is_pooled(&handle) {
                state.recv_pool.push_back(handle.clone());
            }
        }
        fire_all(fired);
        Ok(handle)
    }

    /// Pumps the channel under its guard: flushes deferred sends, drains
    /// arrived frames into the matching engine, and fires completions.
    ///
    /// In try mode a held guard yields [`ProgressOutcome::Busy`] with no
    /// side effects at all.
    pub fn progress(&self, mode: ProgressMode) -> ProgressOutcome {
        self.stats.progress_calls.fetch_add(1, Ordering::Relaxed);
        let mut state = match self.state.try_lock() {
            Ok(guard) => guard,
            Err(TryLockError::WouldBlock) => match mode {
                ProgressMode::Try => {
                    self.stats.busy_returns.fetch_add(1, Ordering::Relaxed);
                    return ProgressOutcome::Busy;
                }
                ProgressMode::Blocking => {
                    self.stats.guard_blocked.fetch_add(1, Ordering::Relaxed);
                    self.state.lock().unwrap()
                }
            },
            Err(TryLockError::Poisoned(p)) => panic!("channel guard poisoned: {p}"),
        };

        let mut fired = Vec::new();
        let progressed = self.pump_locked(&mut state, &mut fired);
        self.stats
            .local_progress_count
            .fetch_add(1, Ordering::Relaxed);
        drop(state);
        fire_all(fired);

        if progressed {
            ProgressOutcome::Progressed
        } else {
            ProgressOutcome::Idle
        }
    }

    fn pump_locked(&self, state: &mut ChannelState, fired: &mut Vec<FiredContinuation>) -> bool {
        let mut progressed = false;

        for peer in 0..self.num_ranks {
            if peer == self.local_rank || state.peer_dead[peer] {
                continue;
            }

            // Flush transport output buffers.
            let pump_result = match state.endpoints[peer].as_mut() {
                Some(ep) => ep.pump(),
                None => continue,
            };
            match pump_result {
                Ok(wrote) => progressed |= wrote,
                Err(err) => {
                    self.fail_peer(state, peer, &err, fired);
                    progressed = true;
                    continue;
                }
            }

            // Flush deferred sends in FIFO order; stop at the first
            // frame the transport cannot take.
            while let Some(entry) = state.deferred_sends[peer].pop_front() {
                let DeferredSend { op, frame } = entry;
                let tag = frame.tag;
                let outcome = state.endpoints[peer]
                    .as_mut()
                    .expect("live peer lost its endpoint")
                    .try_send(frame);
                match outcome {
                    Ok(SendOutcome::Accepted) => {
                        op.complete(send_completion(&op, tag, OpStatus::Ok), fired);
                        progressed = true;
                    }
                    Ok(SendOutcome::WouldBlock(frame)) => {
                        state.deferred_sends[peer].push_front(DeferredSend { op, frame });
                        break;
                    }
                    Err(err) => {
                        op.complete(send_completion(&op, tag, OpStatus::TransportFailed), fired);
                        self.fail_peer(state, peer, &err, fired);
                        progressed = true;
                        break;
                    }
                }
            }
            if state.peer_dead[peer] {
                continue;
            }

            // Drain arrived frames into the matching engine. While an
            // unmatched header from this peer is queued, leave further
            // frames in the transport; backpressure keeps the
            // unexpected queue bounded.
            loop {
                if state.unexpected_headers_by_peer[peer] > 0 {
                    break;
                }
                let recv = state.endpoints[peer]
                    .as_mut()
                    .expect("live peer lost its endpoint")
                    .try_recv();
                match recv {
                    Ok(Some(frame)) => {
                        progressed = true;
                        self.route_frame(state, frame, fired);
                    }
                    Ok(None) => break,
                    Err(err) => {
                        self.fail_peer(state, peer, &err, fired);
                        progressed = true;
                        break;
                    }
                }
            }
        }

        progressed
    }

    fn route_frame(
        &self,
        state: &mut ChannelState,
        frame: Frame,
        fired: &mut Vec<FiredContinuation>,
    ) {
        let matched = state
            .posted_recvs
            .iter()
            .position(|p| recv_matches(p.source, p.tag, &frame));
        match matched {
            Some(idx) => {
                let posted = state.posted_recvs.remove(idx).unwrap();
                complete_recv(&posted.op, posted.buffer, frame, fired);
            }
            None => {
                if frame.kind == FrameKind::Header {
                    let peer = frame.source_rank;
                    state.unexpected_headers_by_peer[peer] += 1;
                    let depth: u64 = state.unexpected_headers_by_peer.iter().sum();
                    self.stats
                        .unexpected_header_high_water
                        .fetch_max(depth, Ordering::Relaxed);
                }
                state.unexpected.push_back(frame);
            }
        }
    }

    fn fail_peer(
        &self,
        state: &mut ChannelState,
        peer: Rank,
        _err: &TransportError,
        fired: &mut Vec<FiredContinuation>,
    ) {
        state.peer_dead[peer] = true;
        for DeferredSend { op, frame } in state.deferred_sends[peer].drain(..) {
            op.complete(
                send_completion(&op, frame.tag, OpStatus::TransportFailed),
                fired,
            );
        }
        let mut idx = 0;
        while idx < state.posted_recvs.len() {
            if state.posted_recvs[idx].source == Some(peer) {
                let posted = state.posted_recvs.remove(idx).unwrap();
                let outcome = OpCompletion {
                    op_id: posted.op.op_id,
                    kind: posted.op.kind,
                    channel: posted.op.channel,
                    context: posted.op.context,
                    status: OpStatus::TransportFailed,
                    source: Some(peer),
                    tag: posted.tag,
                    data: Some(posted.buffer),
                };
                posted.op.complete(outcome, fired);
            } else {
                idx += 1;
            }
        }
    }

    /// Tests up to `budget` pooled requests, alternating between the
    /// send and receive pools. Completed requests are removed and
    /// returned; still-pending ones rotate to the back of their pool.
    pub fn poll_pools(&self, budget: usize) -> Vec<OpRequest> {
        let mut state = self.lock_wait();
        let mut completed = Vec::new();
        for _ in 0..budget {
            let send_side = state.poll_send_side;
            state.poll_send_side = !send_side;
            let pool = if send_side {
                if state.send_pool.is_empty() {
                    &mut state.recv_pool
                } else {
                    &mut state.send_pool
                }
            } else if state.recv_pool.is_empty() {
                &mut state.send_pool
            } else {
                &mut state.recv_pool
            };
            match pool.pop_front() {
                Some(op) if op.is_complete() => completed.push(op),
                Some(op) => pool.push_back(op),
                None => break,
            }
        }
        completed
    }

    /// Sweeps every other channel with a try-mode progress call once per
    /// `global_progress_interval` local progress calls. Disabled
    /// intervals always skip.
    pub fn maybe_global_progress(&self, all: &[Arc<Channel>]) -> GlobalProgressOutcome {
        let interval = self.config.global_progress_interval;
        if interval == 0 {
            return GlobalProgressOutcome::Skipped;
        }
        let count = self.stats.local_progress_count.load(Ordering::Relaxed);
        if count == 0 || !count.is_multiple_of(interval) {
            return GlobalProgressOutcome::Skipped;
        }
        self.stats.global_sweeps.fetch_add(1, Ordering::Relaxed);
        for ch in all {
            if ch.index != self.index {
                ch.progress(ProgressMode::Try);
            }
        }
        GlobalProgressOutcome::Ran
    }

    /// Runs `f` with the guard held, for inspection of queue depths and
    /// frame counters. Useful for monitoring and to observe try-mode
    /// exclusion from another thread.
    pub fn inspect<R>(&self, f: impl FnOnce(ChannelView<'_>) -> R) -> R {
        let state = self.lock_wait();
        f(ChannelView { state: &state })
    }
}

/// Read-only view of channel internals, exposed under the guard.
pub struct ChannelView<'a> {
    state: &'a ChannelState,
}

impl ChannelView<'_> {
    pub fn unexpected_frames(&self) -> usize {
        self.state.unexpected.len()
    }

    pub fn unexpected_headers(&self) -> u64 {
        self.state.unexpected_headers_by_peer.iter().sum()
    }

    pub fn posted_recvs(&self) -> usize {
        self.state.posted_recvs.len()
    }

    pub fn deferred_sends(&self) -> usize {
        self.state.deferred_sends.iter().map(VecDeque::len).sum()
    }

    pub fn pool_depths(&self) -> (usize, usize) {
        (self.state.send_pool.len(), self.state.recv_pool.len())
    }

    pub fn frames_sent(&self) -> u64 {
        self.state
            .endpoints
            .iter()
            .flatten()
            .map(|ep| ep.frames_sent())
            .sum()
    }

    pub fn frames_received(&self) -> u64 {
        self.state
            .endpoints
            .iter()
            .flatten()
            .map(|ep| ep.frames_received())
            .sum()
    }
}

fn recv_matches(source: Option<Rank>, tag: Tag, frame: &Frame) -> bool {
    tag == frame.tag && source.is_none_or(|s| s == frame.source_rank)
}

fn is_pooled(handle: &OpRequest) -> bool {
    handle.shared.slot.lock().unwrap().pooled
}

fn install_completion(op: &Arc<OpShared>, completion: Completion) {
    let mut slot = op.slot.lock().unwrap();
    match completion {
        Completion::Pool => {
            slot.attached = true;
            slot.pooled = true;
        }
        Completion::Callback { callback, request } => {
            slot.attached = true;
            if let Some(cr) = &request {
                cr.register(op.channel);
            }
            slot.continuation = Some((callback, request));
        }
        Completion::Detached => {}
    }
}

fn send_completion(op: &Arc<OpShared>, tag: Tag, status: OpStatus) -> OpCompletion {
    OpCompletion {
        op_id: op.op_id,
        kind: op.kind,
        channel: op.channel,
        context: op.context,
        status,
        source: None,
        tag,
        data: None,
    }
}

fn complete_recv(
    op: &Arc<OpShared>,
    mut buffer: Vec<u8>,
    frame: Frame,
    fired: &mut Vec<FiredContinuation>,
) {
    let capacity = buffer.capacity();
    let status = if frame.body.len() > capacity {
        buffer.clear();
        buffer.extend_from_slice(&frame.body[..capacity]);
        OpStatus::Truncated {
            received: frame.body.len(),
            capacity,
        }
    } else {
        buffer.clear();
        buffer.extend_from_slice(&frame.body);
        OpStatus::Ok
    };
    let outcome = OpCompletion {
        op_id: op.op_id,
        kind: op.kind,
        channel: op.channel,
        context: op.context,
        status,
        source: Some(frame.source_rank),
        tag: frame.tag,
        data: Some(buffer),
    };
    op.complete(outcome, fired);
}
