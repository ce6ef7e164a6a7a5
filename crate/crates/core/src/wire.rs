//! Wire protocol: the header record that announces a parcel, the tag
//! namespace shared by every transport, and the frame envelope.
//!
//! A parcel travels as one header frame followed by zero or more data
//! frames. The header describes the payload that follows so the receiver
//! can allocate buffers and post matching receives before any data frame
//! is consumed.
//!
//! # Header layout
//!
//! All multi-byte fields are little-endian:
//!
//! ```text
//! offset  size  field
//! 0       1     version
//! 1       1     flags (bit 0 = piggybacked, other bits reserved)
//! 2       2     channel_index
//! 4       4     followup_tag
//! 8       4     nzc_size
//! 12      2     zc_count
//! 14      4*n   zc sizes, one per ZC chunk
//! ...     k     piggybacked NZC payload, present iff flags bit 0 is set
//! ```
//!
//! Golden vectors for this layout live in `docs/protocol.md` and in the
//! tests below.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::Rank;

/// Current header version byte.
pub const WIRE_VERSION: u8 = 1;

/// Number of distinct tag values; tags live in `[0, TAG_SPACE)`.
pub const TAG_SPACE: u32 = 1 << 20;

/// Fixed header prefix before the ZC size table.
pub const HEADER_PREFIX_LEN: usize = 14;

const FLAG_PIGGYBACKED: u8 = 0x01;

/// Errors raised by header encoding and decoding.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("input truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("unsupported wire version {0}")]
    UnknownVersion(u8),
    #[error("unknown flag bits {0:#04x}")]
    UnknownFlags(u8),
    #[error("tag {0} outside the data-tag range [1, 2^20)")]
    TagOutOfRange(u32),
    #[error("parcel declares {0} ZC chunks; at most 65535 fit in a header")]
    TooManyChunks(usize),
    #[error("ZC chunk {index} has zero size")]
    ZeroSizedChunk { index: usize },
    #[error("piggyback payload is {actual} bytes but nzc_size declares {declared}")]
    PayloadSizeMismatch { declared: u32, actual: usize },
    #[error("{extra} trailing bytes after a complete header")]
    TrailingBytes { extra: usize },
}

/// Message tag. Tag 0 is reserved for header frames; data frames carry
/// tags in `[1, TAG_SPACE)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tag(u32);

impl Tag {
    /// The reserved header-class tag.
    pub const HEADER: Tag = Tag(0);

    /// Builds a tag, rejecting values outside `[0, TAG_SPACE)`.
    pub fn new(value: u32) -> Result<Tag, WireError> {
        if value >= TAG_SPACE {
            return Err(WireError::TagOutOfRange(value));
        }
        Ok(Tag(value))
    }

    /// Builds a data-class tag, rejecting 0 and out-of-range values.
    pub fn data(value: u32) -> Result<Tag, WireError> {
        if value == 0 || value >= TAG_SPACE {
            return Err(WireError::TagOutOfRange(value));
        }
        Ok(Tag(value))
    }

    pub fn value(self) -> u32 {
        self.0
    }

    pub fn is_header_class(self) -> bool {
        self.0 == 0
    }

    pub fn is_data_class(self) -> bool {
        self.0 != 0
    }
}

impl std::fmt::Display for Tag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Allocates the next follow-up tag from a per-channel counter.
///
/// Tags cycle through `[1, TAG_SPACE)`; consecutive allocations are
/// distinct until the counter wraps after `TAG_SPACE - 1` calls.
/// Collision of a wrapped tag with a still-live parcel is out of
/// contract; the tag space is sized so the supported workloads never
/// hold that many parcels in flight on one channel.
pub fn allocate_tag(counter: &AtomicU64) -> Tag {
    let n = counter.fetch_add(1, Ordering::Relaxed);
    Tag(1 + (n % u64::from(TAG_SPACE - 1)) as u32)
}

/// Frame class carried on the wire: header frames announce parcels,
/// data frames carry chunk payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Header,
    Data,
}

/// Transport-level envelope. `kind == Header` iff `tag` is the reserved
/// header tag; constructors maintain that pairing.
///
/// `source_rank` is stamped by the receiving endpoint, never trusted
/// from the sender.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub source_rank: Rank,
    pub tag: Tag,
    pub body: Vec<u8>,
}

impl Frame {
    /// A header-class frame (tag 0).
    pub fn header(body: Vec<u8>) -> Frame {
        Frame {
            kind: FrameKind::Header,
            source_rank: 0,
            tag: Tag::HEADER,
            body,
        }
    }

    /// A data-class frame; the tag must be non-zero.
    pub fn data(tag: Tag, body: Vec<u8>) -> Result<Frame, WireError> {
        if tag.is_header_class() {
            return Err(WireError::TagOutOfRange(0));
        }
        Ok(Frame {
            kind: FrameKind::Data,
            source_rank: 0,
            tag,
            body,
        })
    }
}

/// Header record announcing one parcel.
///
/// `payload` is `Some` iff the NZC chunk rides piggybacked inside the
/// header frame, in which case its length equals `nzc_size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub channel_index: u16,
    pub followup_tag: Tag,
    pub nzc_size: u32,
    pub zc_sizes: Vec<u32>,
    pub payload: Option<Vec<u8>>,
}

impl Header {
    pub fn piggybacked(&self) -> bool {
        self.payload.is_some()
    }

    /// Total encoded size of this header.
    pub fn encoded_len(&self) -> usize {
        HEADER_PREFIX_LEN + 4 * self.zc_sizes.len() + self.payload.as_ref().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<(), WireError> {
        if self.followup_tag.is_header_class() || self.followup_tag.value() >= TAG_SPACE {
            return Err(WireError::TagOutOfRange(self.followup_tag.value()));
        }
        if self.zc_sizes.len() > u16::MAX as usize {
            return Err(WireError::TooManyChunks(self.zc_sizes.len()));
        }
        if let Some(index) = self.zc_sizes.iter().position(|&s| s == 0) {
            return Err(WireError::ZeroSizedChunk { index });
        }
        match &self.payload {
            Some(p) if p.len() != self.nzc_size as usize => Err(WireError::PayloadSizeMismatch {
                declared: self.nzc_size,
                actual: p.len(),
            }),
            _ => Ok(()),
        }
    }

    /// Encodes into the deterministic little-endian layout above.
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(self.version);
        out.push(if self.piggybacked() {
            FLAG_PIGGYBACKED
        } else {
            0
        });
        out.extend_from_slice(&self.channel_index.to_le_bytes());
        out.extend_from_slice(&self.followup_tag.value().to_le_bytes());
        out.extend_from_slice(&self.nzc_size.to_le_bytes());
        out.extend_from_slice(&(self.zc_sizes.len() as u16).to_le_bytes());
        for size in &self.zc_sizes {
            out.extend_from_slice(&size.to_le_bytes());
        }
        if let Some(payload) = &self.payload {
            out.extend_from_slice(payload);
        }
        Ok(out)
    }

    /// Decodes a header, rejecting truncated input, unknown versions or
    /// flags, out-of-range tags, and trailing bytes. Never panics on
    /// arbitrary input.
    pub fn decode(bytes: &[u8]) -> Result<Header, WireError> {
        if bytes.len() < HEADER_PREFIX_LEN {
            return Err(WireError::Truncated {
                needed: HEADER_PREFIX_LEN,
                have: bytes.len(),
            });
        }
        let version = bytes[0];
        if version != WIRE_VERSION {
            return Err(WireError::UnknownVersion(version));
        }
        let flags = bytes[1];
        if flags & !FLAG_PIGGYBACKED != 0 {
            return Err(WireError::UnknownFlags(flags));
        }
        let piggybacked = flags & FLAG_PIGGYBACKED != 0;
        let channel_index = u16::from_le_bytes([bytes[2], bytes[3]]);
        let raw_tag = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        let followup_tag = Tag::data(raw_tag)?;
        let nzc_size = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
        let zc_count = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;

        let payload_len = if piggybacked { nzc_size as usize } else { 0 };
        let total = HEADER_PREFIX_LEN + 4 * zc_count + payload_len;
        if bytes.len() < total {
            return Err(WireError::Truncated {
                needed: total,
                have: bytes.len(),
            });
        }
        if bytes.len() > total {
            return Err(WireError::TrailingBytes {
                extra: bytes.len() - total,
            });
        }

        let mut zc_sizes = Vec::with_capacity(zc_count);
        for index in 0..zc_count {
            let at = HEADER_PREFIX_LEN + 4 * index;
            let size = u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
            if size == 0 {
                return Err(WireError::ZeroSizedChunk { index });
            }
            zc_sizes.push(size);
        }

        let payload = piggybacked.then(|| bytes[total - payload_len..].to_vec());

        Ok(Header {
            version,
            channel_index,
            followup_tag,
            nzc_size,
            zc_sizes,
            payload,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_header() -> Header {
        Header {
            version: WIRE_VERSION,
            channel_index: 1,
            followup_tag: Tag::data(5).unwrap(),
            nzc_size: 8,
            zc_sizes: vec![],
            payload: Some(b"ABCDEFGH".to_vec()),
        }
    }

    #[test]
    fn golden_empty_parcel() {
        let h = Header {
            version: WIRE_VERSION,
            channel_index: 0,
            followup_tag: Tag::data(1).unwrap(),
            nzc_size: 0,
            zc_sizes: vec![],
            payload: Some(vec![]),
        };
        let bytes = h.encode().unwrap();
        assert_eq!(
            bytes,
            [0x01, 0x01, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00]
        );
        assert_eq!(bytes.len(), 14);
    }

    #[test]
    fn golden_piggybacked_payload() {
        let bytes = sample_header().encode().unwrap();
        let expected: [u8; 22] = [
            0x01, 0x01, // version, flags
            0x01, 0x00, // channel_index = 1
            0x05, 0x00, 0x00, 0x00, // followup_tag = 5
            0x08, 0x00, 0x00, 0x00, // nzc_size = 8
            0x00, 0x00, // zc_count = 0
            0x41, 0x42, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, // "ABCDEFGH"
        ];
        assert_eq!(bytes, expected);
        assert_eq!(Header::decode(&bytes).unwrap(), sample_header());
    }

    #[test]
    fn large_nzc_does_not_piggyback() {
        let h = Header {
            version: WIRE_VERSION,
            channel_index: 0,
            followup_tag: Tag::data(7).unwrap(),
            nzc_size: 16384,
            zc_sizes: vec![],
            payload: None,
        };
        let bytes = h.encode().unwrap();
        assert_eq!(bytes.len(), 14);
        assert!(!Header::decode(&bytes).unwrap().piggybacked());
    }

    #[test]
    fn truncated_input_is_an_error() {
        assert_eq!(
            Header::decode(&[1, 0, 0]),
            Err(WireError::Truncated {
                needed: 14,
                have: 3
            })
        );
    }

    #[test]
    fn trailing_bytes_are_an_error() {
        let mut bytes = sample_header().encode().unwrap();
        bytes.push(0xFF);
        assert_eq!(
            Header::decode(&bytes),
            Err(WireError::TrailingBytes { extra: 1 })
        );
    }

    #[test]
    fn unknown_version_rejected() {
        let mut bytes = sample_header().encode().unwrap();
        bytes[0] = 9;
        assert_eq!(Header::decode(&bytes), Err(WireError::UnknownVersion(9)));
    }

    #[test]
    fn unknown_flag_bits_rejected() {
        let mut bytes = sample_header().encode().unwrap();
        bytes[1] |= 0x80;
        assert_eq!(Header::decode(&bytes), Err(WireError::UnknownFlags(0x81)));
    }

    #[test]
    fn header_tag_in_followup_field_rejected() {
        let mut bytes = sample_header().encode().unwrap();
        bytes[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(Header::decode(&bytes), Err(WireError::TagOutOfRange(0)));
    }

    #[test]
    fn piggyback_length_mismatch_rejected_on_encode() {
        let mut h = sample_header();
        h.nzc_size = 9;
        assert_eq!(
            h.encode(),
            Err(WireError::PayloadSizeMismatch {
                declared: 9,
                actual: 8
            })
        );
    }

    #[test]
    fn zero_sized_chunk_rejected() {
        let mut h = sample_header();
        h.payload = None;
        h.zc_sizes = vec![16, 0];
        assert_eq!(h.encode(), Err(WireError::ZeroSizedChunk { index: 1 }));
    }

    #[test]
    fn tag_allocation_starts_at_one_and_wraps() {
        let counter = AtomicU64::new(0);
        assert_eq!(allocate_tag(&counter).value(), 1);

        let counter = AtomicU64::new(u64::from(TAG_SPACE) - 2);
        assert_eq!(allocate_tag(&counter).value(), TAG_SPACE - 1);
        assert_eq!(allocate_tag(&counter).value(), 1);
    }

    #[test]
    fn consecutive_tags_are_distinct() {
        let counter = AtomicU64::new(0);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10_000 {
            assert!(seen.insert(allocate_tag(&counter).value()));
        }
    }

    #[test]
    fn frame_kind_follows_tag_class() {
        let f = Frame::header(vec![1, 2]);
        assert_eq!(f.kind, FrameKind::Header);
        assert!(f.tag.is_header_class());

        let f = Frame::data(Tag::data(3).unwrap(), vec![]).unwrap();
        assert_eq!(f.kind, FrameKind::Data);
        assert!(f.tag.is_data_class());

        assert!(Frame::data(Tag::HEADER, vec![]).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_header() -> impl Strategy<Value = Header> {
            (
                any::<u16>(),
                1u32..TAG_SPACE,
                prop::collection::vec(1u32..1_000_000, 0..8),
                prop::option::of(prop::collection::vec(any::<u8>(), 0..256)),
            )
                .prop_map(|(channel_index, tag, zc_sizes, payload)| {
                    let nzc_size = match &payload {
                        Some(p) => p.len() as u32,
                        None => 16384,
                    };
                    Header {
                        version: WIRE_VERSION,
                        channel_index,
                        followup_tag: Tag::data(tag).unwrap(),
                        nzc_size,
                        zc_sizes,
                        payload,
                    }
                })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn roundtrip_identity(h in arb_header()) {
                let bytes = h.encode().unwrap();
                prop_assert_eq!(bytes.len(), h.encoded_len());
                prop_assert_eq!(Header::decode(&bytes).unwrap(), h);
            }

            #[test]
            fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..128)) {
                let _ = Header::decode(&bytes);
            }

            #[test]
            fn tag_partition(value in 0u32..TAG_SPACE) {
                let tag = Tag::new(value).unwrap();
                prop_assert!(tag.is_header_class() != tag.is_data_class());
            }
        }
    }
}
