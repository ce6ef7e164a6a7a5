//! TCP transport: one dedicated byte stream per (channel, rank-pair).
//!
//! Each frame is length-prefixed on the wire: a 4-byte little-endian
//! length counting the rest of the frame, then a kind byte (0 = header,
//! 1 = data), a 4-byte little-endian tag, and the body. Streams run
//! non-blocking; partial reads and writes are reassembled internally.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use super::{
    note_transport_op, Endpoint, EndpointMatrix, SendOutcome, TransportConfig, TransportError,
};
use crate::wire::{Frame, FrameKind, Tag};
use crate::Rank;

const HELLO_MAGIC: u32 = 0x4C43_5056; // "VPCL"
const FRAME_OVERHEAD: usize = 5; // kind byte + tag
const KIND_HEADER: u8 = 0;
const KIND_DATA: u8 = 1;

fn resolve(addr: &str) -> Result<SocketAddr, TransportError> {
    addr.to_socket_addrs()
        .map_err(|_| TransportError::AddressParse(addr.to_string()))?
        .next()
        .ok_or_else(|| TransportError::AddressParse(addr.to_string()))
}

fn connect_with_retry(addr: &SocketAddr, deadline: Instant) -> Result<TcpStream, TransportError> {
    loop {
        match TcpStream::connect_timeout(addr, Duration::from_millis(250)) {
            Ok(stream) => return Ok(stream),
            Err(err) => {
                if Instant::now() >= deadline {
                    return Err(TransportError::Connect {
                        addr: addr.to_string(),
                        source: err,
                    });
                }
                thread::sleep(Duration::from_millis(20));
            }
        }
    }
}

fn write_hello(stream: &mut TcpStream, rank: Rank, channel: usize) -> Result<(), TransportError> {
    let mut hello = [0u8; 12];
    hello[0..4].copy_from_slice(&HELLO_MAGIC.to_le_bytes());
    hello[4..8].copy_from_slice(&(rank as u32).to_le_bytes());
    hello[8..12].copy_from_slice(&(channel as u32).to_le_bytes());
    stream.write_all(&hello)?;
    Ok(())
}

fn read_hello(stream: &mut TcpStream, deadline: Instant) -> Result<(Rank, usize), TransportError> {
    let remaining = deadline
        .checked_duration_since(Instant::now())
        .unwrap_or(Duration::from_millis(1));
    stream.set_read_timeout(Some(remaining))?;
    let mut hello = [0u8; 12];
    stream.read_exact(&mut hello)?;
    stream.set_read_timeout(None)?;
    let magic = u32::from_le_bytes(hello[0..4].try_into().unwrap());
    if magic != HELLO_MAGIC {
        return Err(TransportError::Handshake(format!(
            "unexpected magic {magic:#010x}"
        )));
    }
    let rank = u32::from_le_bytes(hello[4..8].try_into().unwrap()) as Rank;
    let channel = u32::from_le_bytes(hello[8..12].try_into().unwrap()) as usize;
    Ok((rank, channel))
}

/// Establishes one stream per (channel, peer) for `cfg.local_rank`.
///
/// Every rank binds the listener named by its own address entry, then
/// initiates connections to all lower ranks and accepts connections
/// from all higher ranks; a 12-byte hello identifies the initiating
/// (rank, channel).
pub fn connect(
    cfg: &TransportConfig,
    ranks: usize,
    channels: usize,
) -> Result<EndpointMatrix, TransportError> {
    let local = cfg.local_rank;
    if local >= ranks {
        return Err(TransportError::RankOutOfRange { rank: local, ranks });
    }
    if cfg.addresses.len() != ranks {
        return Err(TransportError::AddressCount {
            supplied: cfg.addresses.len(),
            ranks,
        });
    }
    let deadline = Instant::now() + cfg.connect_timeout;

    let listener = if local + 1 < ranks {
        let addr = resolve(&cfg.addresses[local])?;
        Some(
            TcpListener::bind(addr).map_err(|source| TransportError::Connect {
                addr: cfg.addresses[local].clone(),
                source,
            })?,
        )
    } else {
        None
    };

    let mut slots: Vec<Vec<Option<TcpStream>>> = (0..channels)
        .map(|_| (0..ranks).map(|_| None).collect())
        .collect();

    for peer in 0..local {
        let addr = resolve(&cfg.addresses[peer])?;
        for (channel, row) in slots.iter_mut().enumerate() {
            let mut stream = connect_with_retry(&addr, deadline)?;
            write_hello(&mut stream, local, channel)?;
            row[peer] = Some(stream);
        }
    }

    if let Some(listener) = listener {
        listener.set_nonblocking(true)?;
        let mut pending = (ranks - local - 1) * channels;
        while pending > 0 {
            match listener.accept() {
                Ok((mut stream, _)) => {
                    stream.set_nonblocking(false)?;
                    let (peer, channel) = read_hello(&mut stream, deadline)?;
                    if peer <= local || peer >= ranks || channel >= channels {
                        return Err(TransportError::Handshake(format!(
                            "hello names rank {peer} channel {channel}"
                        )));
                    }
                    if slots[channel][peer].is_some() {
                        return Err(TransportError::Handshake(format!(
                            "duplicate stream for rank {peer} channel {channel}"
                        )));
                    }
                    slots[channel][peer] = Some(stream);
                    pending -= 1;
                }
                Err(err) if err.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(TransportError::ConnectTimeout(cfg.addresses[local].clone()));
                    }
                    thread::sleep(Duration::from_millis(1));
                }
                Err(err) => return Err(err.into()),
            }
        }
    }

    let matrix = slots
        .into_iter()
        .enumerate()
        .map(|(channel, row)| {
            row.into_iter()
                .enumerate()
                .map(|(peer, slot)| {
                    slot.map(|stream| {
                        stream.set_nodelay(true).ok();
                        stream.set_nonblocking(true)?;
                        Ok(Box::new(SocketEndpoint::new(
                            stream,
                            local,
                            peer,
                            channel,
                            cfg.max_frame,
                        )) as Box<dyn Endpoint>)
                    })
                    .transpose()
                })
                .collect::<Result<Vec<_>, io::Error>>()
        })
        .collect::<Result<Vec<_>, io::Error>>()?;

    Ok(EndpointMatrix::new(local, ranks, matrix))
}

struct SocketEndpoint {
    stream: TcpStream,
    local_rank: Rank,
    peer_rank: Rank,
    channel_index: usize,
    max_frame: usize,
    /// Bytes accepted but not yet written to the kernel.
    out_buf: Vec<u8>,
    out_cursor: usize,
    /// Bytes read but not yet parsed into frames.
    in_buf: Vec<u8>,
    in_cursor: usize,
    peer_closed: bool,
    sent: u64,
    received: u64,
}

impl SocketEndpoint {
    fn new(
        stream: TcpStream,
        local_rank: Rank,
        peer_rank: Rank,
        channel_index: usize,
        max_frame: usize,
    ) -> SocketEndpoint {
        SocketEndpoint {
            stream,
            local_rank,
            peer_rank,
            channel_index,
            max_frame,
            out_buf: Vec::new(),
            out_cursor: 0,
            in_buf: Vec::new(),
            in_cursor: 0,
            peer_closed: false,
            sent: 0,
            received: 0,
        }
    }

    fn out_pending(&self) -> usize {
        self.out_buf.len() - self.out_cursor
    }

    fn high_water(&self) -> usize {
        4 * (self.max_frame + FRAME_OVERHEAD + 4)
    }

    fn flush_output(&mut self) -> Result<bool, TransportError> {
        let mut wrote = false;
        while self.out_cursor < self.out_buf.len() {
            match self.stream.write(&self.out_buf[self.out_cursor..]) {
                Ok(0) => return Err(TransportError::PeerDisconnected(self.peer_rank)),
                Ok(n) => {
                    self.out_cursor += n;
                    wrote = true;
                }
                Err(err) if err.kind() == io::ErrorKind::WouldBlock => break,
                Err(err) if err.kind() == io::ErrorKind::Interrupted => continue,
                Err(err)
                    if matches!(
                        err.kind(),
                        io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset
                    ) =>
                {
                    return Err(TransportError::PeerDisconnected(self.peer_rank))
                }
                Err(err) => return Err(err.into()),
            }
        }
        if self.out_cursor == self.out_buf.len() {
            self.out_buf.clear();
            self.out_cursor = 0;
        } else if self.out_cursor > 1 << 16 {
            self.out_buf.drain(..self.out_cursor);
            self.out_cursor = 0;
        }
        Ok(wrote)
    }

    fn fill_input(&mut self) -> Result<(), TransportError> {
        if self.peer_closed {
            return Ok(());
        }
        let mut scratch = [0u8; 1 << 16];
        loop {
            match self.stream.read(&mut scratch) {
                Ok(0) => {
                    self.peer_closed = true;
                    return Ok(());
                }
                Ok(n) => {
                    self.in_buf.extend_from_slice(&scratch[..n]);
                    if n < scratch.len() {
                        return Ok(());
                    }
                }
                Err(err) if err.kind() == io::ErrorKind::WouldBlock => return Ok(()),
                Err(err) if err.kind() == io::ErrorKind::Interrupted => continue,
                Err(err) if err.kind() == io::ErrorKind::ConnectionReset => {
                    self.peer_closed = true;
                    return Ok(());
                }
                Err(err) => return Err(err.into()),
            }
        }
    }

    fn parse_frame(&mut self) -> Result<Option<Frame>, TransportError> {
        let avail = &self.in_buf[self.in_cursor..];
        if avail.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_le_bytes(avail[0..4].try_into().unwrap()) as usize;
        if len < FRAME_OVERHEAD || len > self.max_frame + FRAME_OVERHEAD {
            return Err(TransportError::MalformedFrame(format!(
                "frame length {len} out of bounds"
            )));
        }
        if avail.len() < 4 + len {
            return Ok(None);
        }
        let kind = match avail[4] {
            KIND_HEADER => FrameKind::Header,
            KIND_DATA => FrameKind::Data,
            other => {
                return Err(TransportError::MalformedFrame(format!(
                    "unknown frame kind {other}"
                )))
            }
        };
        let raw_tag = u32::from_le_bytes(avail[5..9].try_into().unwrap());
        let tag = Tag::new(raw_tag)
            .map_err(|_| TransportError::MalformedFrame(format!("tag {raw_tag} out of range")))?;
        if (kind == FrameKind::Header) != tag.is_header_class() {
            return Err(TransportError::MalformedFrame(format!(
                "kind/tag mismatch: kind {kind:?}, tag {raw_tag}"
            )));
        }
        let body = avail[9..4 + len].to_vec();
        self.in_cursor += 4 + len;
        if self.in_cursor == self.in_buf.len() {
            self.in_buf.clear();
            self.in_cursor = 0;
        } else if self.in_cursor > 1 << 16 {
            self.in_buf.drain(..self.in_cursor);
            self.in_cursor = 0;
        }
        Ok(Some(Frame {
            kind,
            source_rank: self.peer_rank,
            tag,
            body,
        }))
    }
}

impl Endpoint for SocketEndpoint {
    fn local_rank(&self) -> Rank {
        self.local_rank
    }

    fn peer_rank(&self) -> Rank {
        self.peer_rank
    }

    fn channel_index(&self) -> usize {
        self.channel_index
    }

    fn try_send(&mut self, frame: Frame) -> Result<SendOutcome, TransportError> {
        note_transport_op();
        if frame.body.len() > self.max_frame {
            return Err(TransportError::FrameTooLarge {
                size: frame.body.len(),
                max: self.max_frame,
            });
        }
        if self.out_pending() > self.high_water() {
            self.flush_output()?;
            if self.out_pending() > self.high_water() {
                return Ok(SendOutcome::WouldBlock(frame));
            }
        }
        let len = (FRAME_OVERHEAD + frame.body.len()) as u32;
        self.out_buf.extend_from_slice(&len.to_le_bytes());
        self.out_buf.push(match frame.kind {
            FrameKind::Header => KIND_HEADER,
            FrameKind::Data => KIND_DATA,
        });
        self.out_buf
            .extend_from_slice(&frame.tag.value().to_le_bytes());
        self.out_buf.extend_from_slice(&frame.body);
        self.sent += 1;
        self.flush_output()?;
        Ok(SendOutcome::Accepted)
    }

    fn try_recv(&mut self) -> Result<Option<Frame>, TransportError> {
        note_transport_op();
        if let Some(frame) = self.parse_frame()? {
            self.received += 1;
            return Ok(Some(frame));
        }
        self.fill_input()?;
        match self.parse_frame()? {
            Some(frame) => {
                self.received += 1;
                Ok(Some(frame))
            }
            None => {
                if self.peer_closed {
                    Err(TransportError::PeerDisconnected(self.peer_rank))
                } else {
                    Ok(None)
                }
            }
        }
    }

    fn pump(&mut self) -> Result<bool, TransportError> {
        note_transport_op();
        self.flush_output()
    }

    fn frames_sent(&self) -> u64 {
        self.sent
    }

    fn frames_received(&self) -> u64 {
        self.received
    }
}
