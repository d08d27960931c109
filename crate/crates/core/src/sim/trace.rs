use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::types::{AllocId, Nanos};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum TraceKind {
    Arrival = 0,
    SolicitedReport = 1,
    GrantAtOnu = 2,
    DbruAtNic = 3,
    Intercept = 4,
    DbruAtHost = 5,
    HostCycle = 6,
    BwmapAtNic = 7,
    Merge = 8,
    Depart = 9,
    QueueDrop = 10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub ts_ns: Nanos,
    pub kind: TraceKind,
    pub alloc_id: Option<AllocId>,
    pub frame_seq: Option<u32>,
}

impl TraceEvent {
    /// 15-byte record hashed into the trace digest: ts (u64 BE), kind (u8),
    /// alloc_id (u16 BE, 0xFFFF when absent), frame_seq (u32 BE, 0xFFFFFFFF when absent).
    pub fn to_bytes(&self) -> [u8; 15] {
        let mut out = [0u8; 15];
        out[0..8].copy_from_slice(&self.ts_ns.to_be_bytes());
        out[8] = self.kind as u8;
        out[9..11].copy_from_slice(&self.alloc_id.map_or(0xFFFF, AllocId::get).to_be_bytes());
        out[11..15].copy_from_slice(&self.frame_seq.unwrap_or(u32::MAX).to_be_bytes());
        out
    }
}

/// Ordered event log plus a running SHA-256 digest over it.
#[derive(Clone)]
pub struct EventTrace {
    hasher: Sha256,
    events: Option<Vec<TraceEvent>>,
    len: u64,
    last_ts: Nanos,
    out_of_order: u64,
}

impl EventTrace {
    pub fn new(keep_events: bool) -> Self {
        Self {
            hasher: Sha256::new(),
            events: keep_events.then(Vec::new),
            len: 0,
            last_ts: 0,
            out_of_order: 0,
        }
    }

    pub fn push(&mut self, ev: TraceEvent) {
        if ev.ts_ns < self.last_ts {
            self.out_of_order += 1;
        }
        self.last_ts = ev.ts_ns;
        self.hasher.update(ev.to_bytes());
        self.len += 1;
        if let Some(events) = &mut self.events {
            events.push(ev);
        }
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of events whose timestamp went backwards.
    pub fn out_of_order(&self) -> u64 {
        self.out_of_order
    }

    /// First 8 bytes of the digest, big-endian.
    pub fn finish(self) -> (u64, Option<Vec<TraceEvent>>) {
        let digest = self.hasher.finalize();
        let hash = u64::from_be_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"));
        (hash, self.events)
    }
}

/// Digest of an already collected event list, same as [`EventTrace::finish`].
pub fn trace_hash(events: &[TraceEvent]) -> u64 {
    let mut t = EventTrace::new(false);
    for ev in events {
        t.push(*ev);
    }
    t.finish().0
}
