//! In-process transport backed by bounded lock-free frame queues.
//!
//! One queue exists per (channel, ordered rank pair); the bound supplies
//! backpressure so `WouldBlock` paths are exercised without a network.

use std::sync::Arc;

use crossbeam_queue::ArrayQueue;

use super::{note_transport_op, Endpoint, EndpointMatrix, SendOutcome, TransportError};
use crate::wire::Frame;
use crate::Rank;

/// Shared queue fabric connecting every rank of an in-process job.
pub struct LoopbackFabric {
    ranks: usize,
    channels: usize,
    max_frame: usize,
    /// Directed queues indexed by `channel * ranks^2 + from * ranks + to`.
    queues: Vec<Arc<ArrayQueue<Frame>>>,
}

impl LoopbackFabric {
    pub fn new(
        ranks: usize,
        channels: usize,
        queue_capacity: usize,
        max_frame: usize,
    ) -> LoopbackFabric {
        assert!(ranks >= 1 && channels >= 1 && queue_capacity >= 1);
        let queues = (0..ranks * ranks * channels)
            .map(|_| Arc::new(ArrayQueue::new(queue_capacity)))
            .collect();
        LoopbackFabric {
            ranks,
            channels,
            max_frame,
            queues,
        }
    }

    fn queue(&self, channel: usize, from: Rank, to: Rank) -> Arc<ArrayQueue<Frame>> {
        Arc::clone(&self.queues[channel * self.ranks * self.ranks + from * self.ranks + to])
    }

    /// Builds the endpoint matrix for one rank.
    pub fn endpoints(&self, rank: Rank) -> EndpointMatrix {
        assert!(rank < self.ranks, "rank {rank} out of range");
        let channels = (0..self.channels)
            .map(|ch| {
                (0..self.ranks)
                    .map(|peer| {
                        (peer != rank).then(|| {
                            Box::new(LoopbackEndpoint {
                                local_rank: rank,
                                peer_rank: peer,
                                channel_index: ch,
                                outgoing: self.queue(ch, rank, peer),
                                incoming: self.queue(ch, peer, rank),
                                max_frame: self.max_frame,
                                sent: 0,
                                received: 0,
                            }) as Box<dyn Endpoint>
                        })
                    })
                    .collect()
            })
            .collect();
        EndpointMatrix::new(rank, self.ranks, channels)
    }
}

struct LoopbackEndpoint {
    local_rank: Rank,
    peer_rank: Rank,
    channel_index: usize,
    outgoing: Arc<ArrayQueue<Frame>>,
    incoming: Arc<ArrayQueue<Frame>>,
    max_frame: usize,
    sent: u64,
    received: u64,
}

impl Endpoint for LoopbackEndpoint {
    fn local_rank(&self) -> Rank {
        self.local_rank
    }

    fn peer_rank(&self) -> Rank {
        self.peer_rank
    }

    fn channel_index(&self) -> usize {
        self.channel_index
    }

    fn try_send(&mut self, mut frame: Frame) -> Result<SendOutcome, TransportError> {
        note_transport_op();
        if frame.body.len() > self.max_frame {
            return Err(TransportError::FrameTooLarge {
                size: frame.body.len(),
                max: self.max_frame,
            });
        }
        frame.source_rank = self.local_rank;
        match self.outgoing.push(frame) {
            Ok(()) => {
                self.sent += 1;
                Ok(SendOutcome::Accepted)
            }
            Err(frame) => Ok(SendOutcome::WouldBlock(frame)),
        }
    }

    fn try_recv(&mut self) -> Result<Option<Frame>, TransportError> {
        note_transport_op();
        match self.incoming.pop() {
            Some(mut frame) => {
                frame.source_rank = self.peer_rank;
                self.received += 1;
                Ok(Some(frame))
            }
            None => Ok(None),
        }
    }

    fn pump(&mut self) -> Result<bool, TransportError> {
        note_transport_op();
        Ok(false)
    }

    fn frames_sent(&self) -> u64 {
        self.sent
    }

    fn frames_received(&self) -> u64 {
        self.received
    }
}
