//! Bit-exact codec for downstream frames (HLend + BWMAP) and upstream DBRu
//! reports, both carried inside a small Ethernet encapsulation.
//!
//! All multi-byte fields are big-endian. Bit fields are packed MSB first.
//!
//! ```text
//! encapsulation header (20 bytes)
//!   0..6    destination MAC
//!   6..12   source MAC
//!   12..14  ethertype (default 0x88B5)
//!   14      kind: 0 = downstream frame, 1 = upstream DBRu
//!   15      reserved, zero
//!   16..20  sequence number (downstream frame_seq, zero for DBRu)
//!
//! downstream body
//!   HLend (2 bytes)            bwmap_len:11 | pad:5
//!   allocation record × n      alloc_id:14 | flags:2 | start_time:16 | grant_size:16 | reserved:16
//!   payload                    payload_len zero bytes
//!
//! DBRu body (16 bytes)
//!   0..2    alloc_id:14 | reserved:2
//!   2..5    occupancy_words:24
//!   5..8    reserved, zero
//!   8..16   created_at_ns (u64)
//! ```

pub mod pcap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{AllocId, Nanos};

pub use pcap::{pcap_append, PcapWriter};

pub const DEFAULT_ETHERTYPE: u16 = 0x88B5;
pub const ENCAP_HEADER_LEN: usize = 20;
pub const HLEND_LEN: usize = 2;
pub const ALLOCATION_RECORD_LEN: usize = 8;
pub const DBRU_BODY_LEN: usize = 16;
/// Largest BWMAP that HLend's 11-bit length field can describe.
pub const MAX_BWMAP_LEN: usize = (1 << 11) - 1;
/// Largest occupancy a DBRu can carry (24 bits).
pub const MAX_OCCUPANCY_WORDS: u32 = (1 << 24) - 1;
/// Highest word offset addressable by the 16-bit start_time/grant_size fields.
pub const MAX_FRAME_WORDS: u32 = 1 << 16;

pub type MacAddr = [u8; 6];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("truncated frame: need {needed} bytes, have {available}")]
    TruncatedFrame { needed: usize, available: usize },
    #[error("bad ethertype 0x{found:04x} (expected 0x{expected:04x})")]
    BadEthertype { expected: u16, found: u16 },
    #[error("unexpected encapsulation kind {found} (expected {expected})")]
    WrongKind { expected: u8, found: u8 },
    #[error("malformed bwmap at entry {index}: {reason}")]
    MalformedBwmap { index: usize, reason: String },
}

/// Two-bit allocation flags.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AllocFlags(u8);

impl AllocFlags {
    /// Solicits a DBRu in the granted burst.
    pub const DBRU: AllocFlags = AllocFlags(0b01);
    pub const NONE: AllocFlags = AllocFlags(0);

    pub const fn from_bits(bits: u8) -> Self {
        Self(bits & 0b11)
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub const fn dbru_requested(self) -> bool {
        self.0 & Self::DBRU.0 != 0
    }
}

/// One BWMAP grant entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AllocationStructure {
    pub alloc_id: AllocId,
    pub flags: AllocFlags,
    /// Offset in words within the upstream frame.
    pub start_time: u16,
    /// Length in words.
    pub grant_size: u16,
}

impl AllocationStructure {
    pub fn new(alloc_id: AllocId, flags: AllocFlags, start_time: u16, grant_size: u16) -> Self {
        Self {
            alloc_id,
            flags,
            start_time,
            grant_size,
        }
    }

    /// First word after this grant.
    pub fn end(&self) -> u32 {
        u32::from(self.start_time) + u32::from(self.grant_size)
    }

    pub fn to_bytes(&self) -> [u8; ALLOCATION_RECORD_LEN] {
        let head = (self.alloc_id.get() << 2) | u16::from(self.flags.bits());
        let mut out = [0u8; ALLOCATION_RECORD_LEN];
        out[0..2].copy_from_slice(&head.to_be_bytes());
        out[2..4].copy_from_slice(&self.start_time.to_be_bytes());
        out[4..6].copy_from_slice(&self.grant_size.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; ALLOCATION_RECORD_LEN]) -> Self {
        let head = u16::from_be_bytes([bytes[0], bytes[1]]);
        Self {
            alloc_id: AllocId::from_bits(head >> 2),
            flags: AllocFlags::from_bits((head & 0b11) as u8),
            start_time: u16::from_be_bytes([bytes[2], bytes[3]]),
            grant_size: u16::from_be_bytes([bytes[4], bytes[5]]),
        }
    }
}

/// Downstream header field carrying the BWMAP length.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HLend {
    pub bwmap_len: u16,
}

impl HLend {
    pub fn to_bytes(self) -> [u8; HLEND_LEN] {
        ((self.bwmap_len & 0x07FF) << 5).to_be_bytes()
    }

    pub fn from_bytes(bytes: [u8; HLEND_LEN]) -> Self {
        Self {
            bwmap_len: u16::from_be_bytes(bytes) >> 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownstreamFrame {
    pub hlend: HLend,
    pub bwmap: Vec<AllocationStructure>,
    pub payload_len: u32,
    pub frame_seq: u32,
}

impl DownstreamFrame {
    /// Builds a frame with HLend derived from `bwmap`.
    pub fn new(frame_seq: u32, bwmap: Vec<AllocationStructure>, payload_len: u32) -> Self {
        Self {
            hlend: HLend {
                bwmap_len: bwmap.len() as u16,
            },
            bwmap,
            payload_len,
            frame_seq,
        }
    }

    pub fn encoded_len(&self) -> usize {
        ENCAP_HEADER_LEN + HLEND_LEN + ALLOCATION_RECORD_LEN * self.bwmap.len() + self.payload_len as usize
    }

    /// Checks the HLend count, ordering, non-overlap and the capacity bound.
    pub fn validate(&self, capacity_words: u32) -> Result<(), CodecError> {
        if self.bwmap.len() > MAX_BWMAP_LEN {
            return Err(CodecError::InvariantViolation(format!(
                "bwmap has {} entries, HLend holds at most {MAX_BWMAP_LEN}",
                self.bwmap.len()
            )));
        }
        if usize::from(self.hlend.bwmap_len) != self.bwmap.len() {
            return Err(CodecError::InvariantViolation(format!(
                "hlend.bwmap_len = {} but bwmap has {} entries",
                self.hlend.bwmap_len,
                self.bwmap.len()
            )));
        }
        check_bwmap(&self.bwmap, capacity_words)
            .map_err(|(index, reason)| CodecError::InvariantViolation(format!("entry {index}: {reason}")))
    }
}

fn check_bwmap(bwmap: &[AllocationStructure], capacity_words: u32) -> Result<(), (usize, String)> {
    let mut prev: Option<&AllocationStructure> = None;
    for (index, a) in bwmap.iter().enumerate() {
        if a.end() > capacity_words {
            return Err((
                index,
                format!("grant ends at word {} beyond capacity {capacity_words}", a.end()),
            ));
        }
        if let Some(p) = prev {
            if a.start_time < p.start_time {
                return Err((
                    index,
                    format!("start_time {} precedes previous {}", a.start_time, p.start_time),
                ));
            }
            if p.end() > u32::from(a.start_time) {
                return Err((index, format!("overlaps previous grant ending at word {}", p.end())));
            }
        }
        prev = Some(a);
    }
    Ok(())
}

/// Upstream buffer-occupancy report for one Alloc-ID.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DbruReport {
    pub alloc_id: AllocId,
    pub occupancy_words: u32,
    pub created_at_ns: Nanos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum EncapKind {
    Downstream = 0,
    UpstreamDbru = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EthEncapHeader {
    pub dst: MacAddr,
    pub src: MacAddr,
    pub ethertype: u16,
    pub kind: EncapKind,
    pub seq: u32,
}

impl EthEncapHeader {
    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.dst);
        out.extend_from_slice(&self.src);
        out.extend_from_slice(&self.ethertype.to_be_bytes());
        out.push(self.kind as u8);
        out.push(0);
        out.extend_from_slice(&self.seq.to_be_bytes());
    }
}

/// Encapsulation parameters plus the frame capacity used for validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireCodec {
    pub ethertype: u16,
    pub olt_mac: MacAddr,
    pub onu_mac: MacAddr,
    pub capacity_words: u32,
}

impl Default for WireCodec {
    fn default() -> Self {
        Self {
            ethertype: DEFAULT_ETHERTYPE,
            olt_mac: [0x02, 0x00, 0x00, 0x00, 0x00, 0x01],
            onu_mac: [0x02, 0x00, 0x00, 0x00, 0x00, 0x02],
            capacity_words: MAX_FRAME_WORDS,
        }
    }
}

impl WireCodec {
    pub fn with_capacity(capacity_words: u32) -> Self {
        Self {
            capacity_words,
            ..Self::default()
        }
    }

    pub fn encode_downstream(&self, frame: &DownstreamFrame) -> Result<Vec<u8>, CodecError> {
        frame.validate(self.capacity_words)?;
        let mut out = Vec::with_capacity(frame.encoded_len());
        EthEncapHeader {
            dst: [0xFF; 6],
            src: self.olt_mac,
            ethertype: self.ethertype,
            kind: EncapKind::Downstream,
            seq: frame.frame_seq,
        }
        .write(&mut out);
        out.extend_from_slice(&frame.hlend.to_bytes());
        for alloc in &frame.bwmap {
            out.extend_from_slice(&alloc.to_bytes());
        }
        out.resize(out.len() + frame.payload_len as usize, 0);
        Ok(out)
    }

    pub fn decode_downstream(&self, bytes: &[u8]) -> Result<DownstreamFrame, CodecError> {
        let seq = self.read_header(bytes, EncapKind::Downstream)?;
        let body = &bytes[ENCAP_HEADER_LEN..];
        need(body, HLEND_LEN, ENCAP_HEADER_LEN)?;
        let hlend = HLend::from_bytes([body[0], body[1]]);
        let records = &body[HLEND_LEN..];
        let n = usize::from(hlend.bwmap_len);
        need(records, n * ALLOCATION_RECORD_LEN, ENCAP_HEADER_LEN + HLEND_LEN)?;
        let bwmap: Vec<AllocationStructure> = records[..n * ALLOCATION_RECORD_LEN]
            .chunks_exact(ALLOCATION_RECORD_LEN)
            .map(|c| AllocationStructure::from_bytes(c.try_into().expect("exact chunk")))
            .collect();
        check_bwmap(&bwmap, self.capacity_words)
            .map_err(|(index, reason)| CodecError::MalformedBwmap { index, reason })?;
        let payload_len = (records.len() - n * ALLOCATION_RECORD_LEN) as u32;
        Ok(DownstreamFrame {
            hlend,
            bwmap,
            payload_len,
            frame_seq: seq,
        })
    }

    pub fn encode_dbru(&self, report: &DbruReport) -> Result<Vec<u8>, CodecError> {
        if report.occupancy_words > MAX_OCCUPANCY_WORDS {
            return Err(CodecError::InvariantViolation(format!(
                "occupancy {} exceeds 24 bits",
                report.occupancy_words
            )));
        }
        let mut out = Vec::with_capacity(ENCAP_HEADER_LEN + DBRU_BODY_LEN);
        EthEncapHeader {
            dst: self.olt_mac,
            src: self.onu_mac,
            ethertype: self.ethertype,
            kind: EncapKind::UpstreamDbru,
            seq: 0,
        }
        .write(&mut out);
        out.extend_from_slice(&(report.alloc_id.get() << 2).to_be_bytes());
        out.extend_from_slice(&report.occupancy_words.to_be_bytes()[1..]);
        out.extend_from_slice(&[0; 3]);
        out.extend_from_slice(&report.created_at_ns.to_be_bytes());
        Ok(out)
    }

    pub fn decode_dbru(&self, bytes: &[u8]) -> Result<DbruReport, CodecError> {
        self.read_header(bytes, EncapKind::UpstreamDbru)?;
        let body = &bytes[ENCAP_HEADER_LEN..];
        need(body, DBRU_BODY_LEN, ENCAP_HEADER_LEN)?;
        let head = u16::from_be_bytes([body[0], body[1]]);
        let occupancy_words = u32::from_be_bytes([0, body[2], body[3], body[4]]);
        let created_at_ns = u64::from_be_bytes(body[8..16].try_into().expect("8 bytes"));
        Ok(DbruReport {
            alloc_id: AllocId::from_bits(head >> 2),
            occupancy_words,
            created_at_ns,
        })
    }

    /// Validates the encapsulation header and returns its sequence number.
    fn read_header(&self, bytes: &[u8], kind: EncapKind) -> Result<u32, CodecError> {
        need(bytes, ENCAP_HEADER_LEN, 0)?;
        let ethertype = u16::from_be_bytes([bytes[12], bytes[13]]);
        if ethertype != self.ethertype {
            return Err(CodecError::BadEthertype {
                expected: self.ethertype,
                found: ethertype,
            });
        }
        if bytes[14] != kind as u8 {
            return Err(CodecError::WrongKind {
                expected: kind as u8,
                found: bytes[14],
            });
        }
        Ok(u32::from_be_bytes([bytes[16], bytes[17], bytes[18], bytes[19]]))
    }
}

fn need(bytes: &[u8], len: usize, offset: usize) -> Result<(), CodecError> {
    if bytes.len() < len {
        Err(CodecError::TruncatedFrame {
            needed: offset + len,
            available: offset + bytes.len(),
        })
    } else {
        Ok(())
    }
}

pub fn encode_downstream(frame: &DownstreamFrame) -> Result<Vec<u8>, CodecError> {
    WireCodec::default().encode_downstream(frame)
}

pub fn decode_downstream(bytes: &[u8]) -> Result<DownstreamFrame, CodecError> {
    WireCodec::default().decode_downstream(bytes)
}

pub fn encode_dbru(report: &DbruReport) -> Result<Vec<u8>, CodecError> {
    WireCodec::default().encode_dbru(report)
}

pub fn decode_dbru(bytes: &[u8]) -> Result<DbruReport, CodecError> {
    WireCodec::default().decode_dbru(bytes)
}
