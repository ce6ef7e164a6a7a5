//! Completion mechanisms: the shared completion queue fed by
//! continuation callbacks, and the continuation-request lifecycle with
//! per-channel pending counters.
//!
//! Callbacks attached to operations run exactly once, on whichever
//! thread observes the completion, with no channel guard held. They must
//! stay small and must not re-enter the runtime's progress paths;
//! running arbitrary work inside them risks stalls and deadlocks, so the
//! intended pattern is to push a [`CompletionDescriptor`] and return. A
//! debug-build detector panics on re-entrant progress calls.
//!
//! A continuation request aggregates attached continuations so a client
//! can test for "all of them ran" and restart the batch. Its counters
//! cost atomic traffic on every completion; passing `None` instead of a
//! request skips that entirely, which is the fast path the parcelport
//! uses.

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crossbeam_queue::SegQueue;
use thiserror::Error;

use crate::channel::{Channel, CompletionCallback, OpCompletion, OpId, OpKind, ProgressMode};
use crate::Rank;

/// Errors from continuation and continuation-request misuse.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompletionError {
    #[error("operation {0} already has a completion mode attached")]
    AlreadyAttached(OpId),
    #[error("continuation request is not active")]
    NotActive,
    #[error("continuation request is already active")]
    AlreadyActive,
}

/// Which stage of a parcel the completed operation served.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionKind {
    HeaderSent,
    DataSent,
    HeaderReceived,
    DataReceived,
}

impl From<OpKind> for CompletionKind {
    fn from(kind: OpKind) -> CompletionKind {
        match kind {
            OpKind::SendHeader => CompletionKind::HeaderSent,
            OpKind::SendData => CompletionKind::DataSent,
            OpKind::RecvHeaderPreposted => CompletionKind::HeaderReceived,
            OpKind::RecvData => CompletionKind::DataReceived,
        }
    }
}

/// Record pushed when an operation completes in continuation mode,
/// identifying which parcel state machine to advance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionDescriptor {
    pub op_id: OpId,
    pub kind: CompletionKind,
    pub parcel_id: u64,
    pub channel: usize,
    /// Sender rank, for receive completions.
    pub source: Option<Rank>,
    /// Opaque client token.
    pub context: u64,
}

/// Lock-free multi-producer multi-consumer queue of completion
/// descriptors, shared among all threads.
///
/// Pushes never block behind another producer; per-producer FIFO order
/// is preserved. The queue grows as needed; `capacity_hint` only sizes
/// expectations, it is not a limit.
pub struct CompletionQueue {
    inner: SegQueue<CompletionDescriptor>,
    capacity_hint: usize,
    pushed: AtomicU64,
    popped: AtomicU64,
}

impl CompletionQueue {
    pub fn new(capacity_hint: usize) -> CompletionQueue {
        CompletionQueue {
            inner: SegQueue::new(),
            capacity_hint,
            pushed: AtomicU64::new(0),
            popped: AtomicU64::new(0),
        }
    }

    pub fn capacity_hint(&self) -> usize {
        self.capacity_hint
    }

    /// Enqueues a descriptor; exactly one future poll retrieves it.
    pub fn push(&self, descriptor: CompletionDescriptor) {
        self.inner.push(descriptor);
        self.pushed.fetch_add(1, Ordering::Relaxed);
    }

    /// Dequeues the next descriptor, if any.
    pub fn poll(&self) -> Option<CompletionDescriptor> {
        let descriptor = self.inner.pop()?;
        self.popped.fetch_add(1, Ordering::Relaxed);
        Some(descriptor)
    }

    pub fn pushed(&self) -> u64 {
        self.pushed.load(Ordering::Relaxed)
    }

    pub fn popped(&self) -> u64 {
        self.popped.load(Ordering::Relaxed)
    }
}

/// Lifecycle of a continuation request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContinuationState {
    Inactive,
    Active,
    Complete,
}

/// Result of testing a continuation request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestOutcome {
    Complete,
    Pending,
}

struct CrInner {
    state: ContinuationState,
    /// Continuations whose operations completed while the request was
    /// not active; they run when the request is next started.
    held: Vec<(CompletionCallback, OpCompletion)>,
}

/// Aggregation object tracking a batch of pending continuations.
///
/// Freshly created requests are inactive; callbacks attached to a
/// non-active request are held and only run after
/// [`start_continuation_request`]. One atomic counter per channel lets
/// [`test_continuation_request`] progress only the channels that still
/// have pending operations.
///
/// Releasing a request that still has pending continuations is a
/// contract violation; sharing is by `Arc`, and every pending operation
/// holds a reference, so the backing storage cannot actually disappear
/// early.
pub struct ContinuationRequest {
    inner: Mutex<CrInner>,
    outstanding: AtomicU64,
    registered_total: AtomicU64,
    per_channel_pending: Vec<AtomicU64>,
}

impl ContinuationRequest {
    pub fn new(num_channels: usize) -> Arc<ContinuationRequest> {
        Arc::new(ContinuationRequest {
            inner: Mutex::new(CrInner {
                state: ContinuationState::Inactive,
                held: Vec::new(),
            }),
            outstanding: AtomicU64::new(0),
            registered_total: AtomicU64::new(0),
            per_channel_pending: (0..num_channels).map(|_| AtomicU64::new(0)).collect(),
        })
    }

    pub fn state(&self) -> ContinuationState {
        self.inner.lock().unwrap().state
    }

    pub fn registered_total(&self) -> u64 {
        self.registered_total.load(Ordering::Relaxed)
    }

    pub fn outstanding(&self) -> u64 {
        self.outstanding.load(Ordering::Relaxed)
    }

    pub fn pending_on(&self, channel: usize) -> u64 {
        self.per_channel_pending
            .get(channel)
            .map_or(0, |c| c.load(Ordering::Relaxed))
    }

    /// Accounts for a newly attached continuation.
    pub(crate) fn register(&self, channel: usize) {
        note_counter_op();
        self.registered_total.fetch_add(1, Ordering::Relaxed);
        note_counter_op();
        self.outstanding.fetch_add(1, Ordering::Relaxed);
        if let Some(counter) = self.per_channel_pending.get(channel) {
            note_counter_op();
            counter.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Accounts for an executed continuation.
    fn finish(&self, channel: usize) {
        if let Some(counter) = self.per_channel_pending.get(channel) {
            note_counter_op();
            counter.fetch_sub(1, Ordering::Relaxed);
        }
        note_counter_op();
        self.outstanding.fetch_sub(1, Ordering::Relaxed);
    }

    /// Runs the callback now if the request is active, otherwise holds
    /// it for the next start.
    pub(crate) fn deliver(&self, callback: CompletionCallback, outcome: OpCompletion) {
        let mut inner = self.inner.lock().unwrap();
        match inner.state {
            ContinuationState::Active => {
                drop(inner);
                let channel = outcome.channel;
                callback(outcome);
                self.finish(channel);
            }
            ContinuationState::Inactive | ContinuationState::Complete => {
                inner.held.push((callback, outcome));
            }
        }
    }
}

/// Runs a continuation directly (null request) or routes it through its
/// continuation request's active/held logic.
pub(crate) fn deliver(
    callback: CompletionCallback,
    request: Option<Arc<ContinuationRequest>>,
    outcome: OpCompletion,
) {
    match request {
        None => callback(outcome),
        Some(cr) => cr.deliver(callback, outcome),
    }
}

/// Activates a continuation request, releasing continuations that were
/// held while it was inactive or complete.
pub fn start_continuation_request(cr: &Arc<ContinuationRequest>) -> Result<(), CompletionError> {
    let held = {
        let mut inner = cr.inner.lock().unwrap();
        if inner.state == ContinuationState::Active {
            return Err(CompletionError::AlreadyActive);
        }
        inner.state = ContinuationState::Active;
        std::mem::take(&mut inner.held)
    };
    for (callback, outcome) in held {
        let channel = outcome.channel;
        callback(outcome);
        cr.finish(channel);
    }
    Ok(())
}

/// Tests an active continuation request, progressing only the channels
/// that still carry pending continuations. Transitions to `Complete`
/// once every registered continuation since the last start has run.
pub fn test_continuation_request(
    cr: &Arc<ContinuationRequest>,
    channels: &[Arc<Channel>],
) -> Result<TestOutcome, CompletionError> {
    if cr.state() != ContinuationState::Active {
        return Err(CompletionError::NotActive);
    }
    for channel in channels {
        if cr.pending_on(channel.index()) > 0 {
            channel.progress(ProgressMode::Try);
        }
    }
    if cr.outstanding.load(Ordering::Acquire) == 0 {
        let mut inner = cr.inner.lock().unwrap();
        if inner.state == ContinuationState::Active {
            inner.state = ContinuationState::Complete;
        }
        Ok(TestOutcome::Complete)
    } else {
        Ok(TestOutcome::Pending)
    }
}

/// Explicitly drives the progress engine of one channel, for clients
/// whose polling does not otherwise reach it. Liveness of pending
/// continuations is the caller's duty: an operation on a channel nobody
/// progresses stays pending forever.
pub fn progress_channel(channel: &Channel) {
    channel.progress(ProgressMode::Try);
}

static CR_COUNTER_OPS: AtomicU64 = AtomicU64::new(0);

fn note_counter_op() {
    CR_COUNTER_OPS.fetch_add(1, Ordering::Relaxed);
}

/// Process-wide count of continuation-request counter operations.
/// The null-request path performs none; instrumentation for asserting
/// exactly that.
pub fn continuation_counter_ops() -> u64 {
    CR_COUNTER_OPS.load(Ordering::Relaxed)
}

thread_local! {
    static IN_CLIENT_CALLBACK: Cell<bool> = const { Cell::new(false) };
}

/// RAII marker set while client callbacks run, backing the debug-mode
/// re-entrancy detector.
pub(crate) struct CallbackScope {
    was: bool,
}

impl CallbackScope {
    pub(crate) fn enter() -> CallbackScope {
        let was = IN_CLIENT_CALLBACK.with(|c| c.replace(true));
        CallbackScope { was }
    }
}

impl Drop for CallbackScope {
    fn drop(&mut self) {
        IN_CLIENT_CALLBACK.with(|c| c.set(self.was));
    }
}

#[cfg(debug_assertions)]
pub(crate) fn assert_not_reentrant(entry_point: &str) {
    IN_CLIENT_CALLBACK.with(|c| {
        assert!(
            !c.get(),
            "{entry_point} called from inside a runtime callback"
        );
    });
}

#[cfg(not(debug_assertions))]
pub(crate) fn assert_not_reentrant(_entry_point: &str) {}
