use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::codec::{DbruReport, DownstreamFrame};
use crate::types::{AllocId, Nanos};

pub(crate) type RequestId = usize;

#[derive(Debug, Clone)]
pub(crate) struct ReportMsg {
    pub report: DbruReport,
    /// The arrival that triggered the report; `None` for solicited reports.
    pub request: Option<RequestId>,
}

/// Events, listed in tie-break order for equal timestamps.
#[derive(Debug)]
pub(crate) enum Event {
    FrameAtOnu {
        frame: Box<DownstreamFrame>,
        departed_at: Nanos,
    },
    Arrival {
        alloc: AllocId,
    },
    SolicitedReport {
        alloc: AllocId,
    },
    DbruAtNic {
        msg: ReportMsg,
    },
    DbruAtHost {
        msg: ReportMsg,
    },
    BwmapAtNic {
        target_seq: u32,
    },
    FrameMerge {
        seq: u32,
    },
    HostCycleClose {
        seq: u32,
    },
    FrameDepart {
        frame: Box<DownstreamFrame>,
    },
}

impl Event {
    fn rank(&self) -> u8 {
        match self {
            Event::FrameAtOnu { .. } => 0,
            Event::Arrival { .. } => 1,
            Event::SolicitedReport { .. } => 2,
            Event::DbruAtNic { .. } => 3,
            Event::DbruAtHost { .. } => 4,
            Event::BwmapAtNic { .. } => 5,
            Event::FrameMerge { .. } => 6,
            Event::HostCycleClose { .. } => 7,
            Event::FrameDepart { .. } => 8,
        }
    }

    fn alloc_key(&self) -> u16 {
        match self {
            Event::Arrival { alloc } | Event::SolicitedReport { alloc } => alloc.get(),
            Event::DbruAtNic { msg } | Event::DbruAtHost { msg } => msg.report.alloc_id.get(),
            _ => 0,
        }
    }
}

struct Scheduled {
    key: (Nanos, u8, u16, u64),
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key.cmp(&other.key)
    }
}

/// Min-queue ordered by (timestamp, event kind, alloc_id, insertion order).
#[derive(Default)]
pub(crate) struct EventQueue {
    heap: BinaryHeap<Reverse<Scheduled>>,
    inserted: u64,
}

impl EventQueue {
    pub fn push(&mut self, ts: Nanos, event: Event) {
        let key = (ts, event.rank(), event.alloc_key(), self.inserted);
        self.inserted += 1;
        self.heap.push(Reverse(Scheduled { key, event }));
    }

    pub fn pop_before(&mut self, end: Nanos) -> Option<(Nanos, Event)> {
        if self.heap.peek()?.0.key.0 >= end {
            return None;
        }
        self.heap.pop().map(|Reverse(s)| (s.key.0, s.event))
    }
}
