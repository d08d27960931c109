//! Dataplane fast path: Alloc-ID classification, intercept-and-hold of
//! low-latency DBRus, and the single-pass BWMAP merge.
//!
//! The merge is restricted to what a match-action pipeline can do at line
//! rate: one walk over the pending FIFO, integer add/subtract/compare/min
//! only, no division and no sorting. The existing BWMAP is never walked; only
//! its length and its last entry are read.

use std::collections::{BTreeSet, VecDeque};

use thiserror::Error;

use crate::codec::{AllocFlags, AllocationStructure, DbruReport, DownstreamFrame, MAX_BWMAP_LEN};
use crate::types::{AllocId, Nanos, TrafficClass, Words};
use crate::vdba::TcontRegistry;

pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InterceptError {
    #[error("fast-path queue full ({capacity} entries); report for alloc_id {alloc_id} dropped")]
    QueueOverflow { alloc_id: AllocId, capacity: usize },
    #[error("malformed merge input: {0}")]
    MalformedInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Route {
    FastPath,
    HostPath,
}

/// Alloc-IDs whose DBRus are captured by the fast path.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassifierTable {
    low_latency_ids: BTreeSet<AllocId>,
}

impl ClassifierTable {
    /// Fast path disabled: everything goes to the host.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_registry(registry: &TcontRegistry) -> Self {
        Self {
            low_latency_ids: registry.ids_of(TrafficClass::LowLatency).collect(),
        }
    }

    pub fn from_ids(ids: impl IntoIterator<Item = AllocId>) -> Self {
        Self {
            low_latency_ids: ids.into_iter().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.low_latency_ids.is_empty()
    }

    pub fn contains(&self, alloc_id: AllocId) -> bool {
        self.low_latency_ids.contains(&alloc_id)
    }
}

pub fn classify(report: &DbruReport, table: &ClassifierTable) -> Route {
    if table.contains(report.alloc_id) {
        Route::FastPath
    } else {
        Route::HostPath
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingEntry {
    pub alloc_id: AllocId,
    pub remaining_words: Words,
    pub intercepted_at_ns: Nanos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intercepted {
    Queued,
    /// Zero-occupancy report; consumed without creating an entry.
    NothingToGrant,
}

/// Bounded FIFO of held low-latency requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingQueue {
    entries: VecDeque<PendingEntry>,
    capacity: usize,
    drops: u64,
    queued_words: u64,
}

impl Default for PendingQueue {
    fn default() -> Self {
        Self::new(DEFAULT_QUEUE_CAPACITY)
    }
}

impl PendingQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
            drops: 0,
            queued_words: 0,
        }
    }

    /// Holds `report` until the next BWMAP. The report is consumed; it is not
    /// forwarded to the host. On overflow the new report is dropped and counted.
    pub fn intercept(&mut self, report: &DbruReport, now_ns: Nanos) -> Result<Intercepted, InterceptError> {
        if report.occupancy_words == 0 {
            return Ok(Intercepted::NothingToGrant);
        }
        if self.entries.len() >= self.capacity {
            self.drops += 1;
            return Err(InterceptError::QueueOverflow {
                alloc_id: report.alloc_id,
                capacity: self.capacity,
            });
        }
        self.entries.push_back(PendingEntry {
            alloc_id: report.alloc_id,
            remaining_words: report.occupancy_words,
            intercepted_at_ns: now_ns,
        });
        self.queued_words += u64::from(report.occupancy_words);
        Ok(Intercepted::Queued)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn drops(&self) -> u64 {
        self.drops
    }

    /// Total words still waiting for a grant.
    pub fn queued_words(&self) -> u64 {
        self.queued_words
    }

    pub fn iter(&self) -> impl Iterator<Item = &PendingEntry> {
        self.entries.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeOutcome {
    pub frame: DownstreamFrame,
    pub merged_words: Words,
    /// Number of allocations appended to the BWMAP.
    pub appended: usize,
    /// Words queued when the merge started (merged plus carried over).
    pub demand_words: u64,
    /// Operations executed while walking the queue: one compare, one min,
    /// one add and one subtract per granted entry, one subtract for a
    /// partially granted head and one compare for the exhausted reserve.
    pub ops: u32,
}

/// Appends grants for held requests into the reserved tail region
/// `[capacity - reserve, capacity)` of `frame`.
///
/// Requests are served in FIFO order and packed contiguously. A head request
/// that does not fit stays queued with its remainder.
pub fn merge_bwmap(
    mut frame: DownstreamFrame,
    queue: &mut PendingQueue,
    capacity_words: Words,
    reserve: Words,
) -> Result<MergeOutcome, InterceptError> {
    if reserve > capacity_words {
        return Err(InterceptError::MalformedInput(format!(
            "reserve {reserve} exceeds capacity {capacity_words}"
        )));
    }
    let region_start = capacity_words - reserve;
    if let Some(last) = frame.bwmap.last() {
        if last.end() > region_start {
            return Err(InterceptError::MalformedInput(format!(
                "host allocation for alloc_id {} ends at word {} inside the reserved region starting at {region_start}",
                last.alloc_id,
                last.end()
            )));
        }
    }
    let demand_words = queue.queued_words;
    let slots = MAX_BWMAP_LEN.saturating_sub(frame.bwmap.len());

    let mut cursor = region_start;
    let mut space = reserve;
    let mut ops = 0u32;
    let mut appended = 0usize;

    while appended < slots {
        let Some(head) = queue.entries.front_mut() else {
            break;
        };
        ops += 1;
        if space == 0 {
            break;
        }
        ops += 1;
        let fits = head.remaining_words <= space;
        let grant = if fits { head.remaining_words } else { space };
        frame.bwmap.push(AllocationStructure::new(
            head.alloc_id,
            AllocFlags::DBRU,
            cursor as u16,
            grant as u16,
        ));
        appended += 1;
        ops += 2;
        cursor += grant;
        space -= grant;
        if fits {
            queue.entries.pop_front();
        } else {
            ops += 1;
            head.remaining_words -= grant;
        }
    }

    let merged_words = reserve - space;
    queue.queued_words -= u64::from(merged_words);
    frame.hlend.bwmap_len += appended as u16;
    Ok(MergeOutcome {
        frame,
        merged_words,
        appended,
        demand_words,
        ops,
    })
}
