//! Deterministic discrete-event simulation of one OLT NIC, its host vDBA and
//! a set of ONU T-CONTs.
//!
//! Timeline of one downstream frame `j` (period `T`):
//!
//! * `j*T`: the NIC builds frame `j` from the host BWMAP targeted at it and
//!   merges held fast-path requests into the reserved tail.
//! * `j*T + fast_merge_ns`: the frame departs.
//! * `+ prop_delay_ns + onu_grant_apply_ns`: the ONU applies the grants; an
//!   allocation starting at word `s` begins transmitting `s*T/capacity` later.
//!
//! The host closes cycle `k` at `k*T`; its BWMAP is ready at
//! `k*T + host_dba_compute_ns + host_to_nic_ns` and targets the first frame
//! whose build time is not earlier than that (a host slip when that is not
//! frame `k+1`).
//!
//! DBRus carry the T-CONT's ungranted backlog. A report created at `t`
//! already reflects every grant applied at the ONU at or before `t`; both the
//! NIC and the host subtract the grants they issued that land after `t`, so
//! no backlog word is granted twice. Grants flagged for a DBRu make the ONU
//! send a fresh report when its transmission starts.
//!
//! Equal timestamps are ordered by event kind: grant arrival at the ONU,
//! traffic arrival, solicited report, DBRu at NIC, DBRu at host, BWMAP at
//! NIC, frame merge, host cycle close, frame departure; then by Alloc-ID.

mod compare;
mod event;
pub mod trace;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{AllocationStructure, DbruReport, DownstreamFrame, PcapWriter, WireCodec, MAX_OCCUPANCY_WORDS};
use crate::intercept::{
    merge_bwmap, ClassifierTable, InterceptError, Intercepted, PendingQueue, DEFAULT_QUEUE_CAPACITY,
};
use crate::metrics::{summarize, GrantPath, LatencySample, MetricsCollector, Summary};
use crate::traffic::{ArrivalProcess, TrafficSource, RNG_ALGORITHM};
use crate::types::{AllocId, Fraction, Nanos, TrafficClass, Words};
use crate::vdba::{
    compute_bwmap, compute_fixed_bwmap, reserved_words, CycleState, HostScope, ReservePolicy, TcontRegistry,
};

pub use compare::{compare, ClassDelta, ComparisonReport, ModeRun};
use event::{Event, EventQueue, ReportMsg, RequestId};
pub use trace::{trace_hash, EventTrace, TraceEvent, TraceKind};

pub const DEFAULT_FRAME_PERIOD_NS: Nanos = 125_000;
pub const DEFAULT_LINE_RATE_BPS: f64 = 9.95328e9;
/// Largest capacity whose word offsets fit the 16-bit start_time field.
pub const MAX_CAPACITY_WORDS: Words = u16::MAX as Words;
pub const MIN_DURATION_FRAMES: u64 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("packet capture: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SchedulingMode {
    Standard,
    FastIntercept,
    FixedAllocation,
}

impl SchedulingMode {
    pub const ALL: [SchedulingMode; 3] = [
        SchedulingMode::Standard,
        SchedulingMode::FastIntercept,
        SchedulingMode::FixedAllocation,
    ];
}

impl fmt::Display for SchedulingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchedulingMode::Standard => "Standard",
            SchedulingMode::FastIntercept => "FastIntercept",
            SchedulingMode::FixedAllocation => "FixedAllocation",
        })
    }
}

impl FromStr for SchedulingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchedulingMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown mode {s:?}; expected Standard, FastIntercept or FixedAllocation"))
    }
}

/// Stage delays in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayModel {
    pub prop_delay_ns: Nanos,
    pub nic_parse_ns: Nanos,
    pub fast_merge_ns: Nanos,
    pub nic_to_host_ns: Nanos,
    pub host_to_nic_ns: Nanos,
    pub host_dba_compute_ns: Nanos,
    pub onu_grant_apply_ns: Nanos,
}

impl Default for DelayModel {
    fn default() -> Self {
        Self {
            prop_delay_ns: 25_000,
            nic_parse_ns: 2_000,
            fast_merge_ns: 1_000,
            nic_to_host_ns: 20_000,
            host_to_nic_ns: 20_000,
            host_dba_compute_ns: 30_000,
            onu_grant_apply_ns: 0,
        }
    }
}

impl DelayModel {
    pub fn host_path_ns(&self) -> Nanos {
        self.nic_to_host_ns + self.host_dba_compute_ns + self.host_to_nic_ns
    }
}

/// `floor(line_rate_bps * frame_period / 32)` words, computed exactly.
pub fn capacity_from_line_rate(line_rate_bps: f64, frame_period_ns: Nanos) -> Option<u64> {
    let rate = Fraction::from_f64(line_rate_bps)?;
    let num = u128::from(rate.num()) * u128::from(frame_period_ns);
    let den = u128::from(rate.den()) * 32 * 1_000_000_000;
    u64::try_from(num / den).ok()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub frame_period_ns: Nanos,
    pub line_rate_bps: f64,
    pub upstream_capacity_words: Words,
    pub mode: SchedulingMode,
    pub reserve_policy: ReservePolicy,
    pub registry: TcontRegistry,
    pub traffic: BTreeMap<AllocId, ArrivalProcess>,
    pub delays: DelayModel,
    pub duration_ns: Nanos,
    pub seed: u64,
    pub fast_queue_capacity: usize,
    /// Keep the full event list in the report, not just its hash.
    pub keep_trace: bool,
}

impl Scenario {
    /// Defaults: 125 us frames at 9.95328 Gb/s (38880 words), fixed reserve of
    /// one tenth of the frame, default delays, 1 s, seed 1.
    pub fn new(mode: SchedulingMode, registry: TcontRegistry, traffic: BTreeMap<AllocId, ArrivalProcess>) -> Self {
        let capacity = capacity_from_line_rate(DEFAULT_LINE_RATE_BPS, DEFAULT_FRAME_PERIOD_NS)
            .expect("default line rate is finite") as Words;
        Self {
            frame_period_ns: DEFAULT_FRAME_PERIOD_NS,
            line_rate_bps: DEFAULT_LINE_RATE_BPS,
            upstream_capacity_words: capacity,
            mode,
            reserve_policy: ReservePolicy::fixed(Fraction::new(1, 10).expect("nonzero denominator"), capacity),
            registry,
            traffic,
            delays: DelayModel::default(),
            duration_ns: 1_000_000_000,
            seed: 1,
            fast_queue_capacity: DEFAULT_QUEUE_CAPACITY,
            keep_trace: false,
        }
    }

    pub fn with_mode(&self, mode: SchedulingMode) -> Self {
        Self { mode, ..self.clone() }
    }

    /// Number of downstream frames built during the run.
    pub fn frames(&self) -> u64 {
        self.duration_ns / self.frame_period_ns
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = self.frame_period_ns;
        if t == 0 {
            return Err(ConfigError::new("frame_period_ns", "must be positive"));
        }
        let cap = self.upstream_capacity_words;
        if cap == 0 || cap > MAX_CAPACITY_WORDS {
            return Err(ConfigError::new(
                "upstream_capacity_words",
                format!("must be in 1..={MAX_CAPACITY_WORDS} so word offsets fit 16 bits, got {cap}"),
            ));
        }
        if self.duration_ns < MIN_DURATION_FRAMES * t {
            return Err(ConfigError::new(
                "duration_ns",
                format!(
                    "must cover at least {MIN_DURATION_FRAMES} frames ({} ns), got {}",
                    MIN_DURATION_FRAMES * t,
                    self.duration_ns
                ),
            ));
        }
        if self.fast_queue_capacity == 0 {
            return Err(ConfigError::new("fast_queue_capacity", "must be positive"));
        }
        if self.registry.is_empty() {
            return Err(ConfigError::new("tconts", "at least one T-CONT is required"));
        }
        self.reserve_policy
            .validate(cap)
            .map_err(|e| ConfigError::new("reserve_policy", e.to_string()))?;
        for (id, process) in &self.traffic {
            if self.registry.get(*id).is_none() {
                return Err(ConfigError::new(
                    format!("traffic.{id}"),
                    "alloc_id is not in the T-CONT registry",
                ));
            }
            process
                .validate()
                .map_err(|e| ConfigError::new(format!("traffic.{id}"), e.to_string()))?;
        }
        let d = &self.delays;
        if d.fast_merge_ns >= t {
            return Err(ConfigError::new(
                "delays.fast_merge_ns",
                "must be shorter than one frame period",
            ));
        }
        if d.host_dba_compute_ns + d.host_to_nic_ns > 2 * t {
            return Err(ConfigError::new(
                "delays.host_dba_compute_ns",
                "host_dba_compute_ns + host_to_nic_ns must not exceed two frame periods (a BWMAP may slip at most one frame)",
            ));
        }
        Ok(())
    }
}

/// Destination for encoded control frames.
pub trait PacketSink {
    fn record(&mut self, bytes: &[u8], ts_ns: Nanos) -> io::Result<()>;
}

impl<W: Write> PacketSink for PcapWriter<W> {
    fn record(&mut self, bytes: &[u8], ts_ns: Nanos) -> io::Result<()> {
        self.append(bytes, ts_ns)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotUsage {
    pub granted_words: u64,
    pub used_words: u64,
}

impl SlotUsage {
    pub fn utilization(&self) -> Option<f64> {
        (self.granted_words > 0).then(|| self.used_words as f64 / self.granted_words as f64)
    }
}

/// A request still (partly) waiting for grants when the run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncompleteRequest {
    pub alloc_id: AllocId,
    pub class: TrafficClass,
    pub words: Words,
    pub remaining_words: Words,
    pub t_created: Nanos,
}

/// Counters of one run; everything except the samples and the event list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub mode: SchedulingMode,
    pub seed: u64,
    pub rng_algorithm: String,
    pub frame_period_ns: Nanos,
    pub upstream_capacity_words: Words,
    pub duration_ns: Nanos,
    pub frames_emitted: u64,
    pub requests_created: u64,
    pub requests_completed: u64,
    pub dbru_on_arrival: u64,
    pub dbru_solicited: u64,
    /// Fast-path reports dropped on queue overflow.
    pub drops: u64,
    pub slot_usage: BTreeMap<TrafficClass, SlotUsage>,
    /// Host cycles whose BWMAP missed the next frame.
    pub host_slips: u64,
    pub host_rejections: u64,
    pub fast_merged_words: u64,
    /// Largest fast-path backlog seen at a merge.
    pub max_fast_demand_words: u64,
    /// Smallest reserve offered to the fast path (None without fast path).
    pub min_fast_reserve_words: Option<Words>,
    pub merge_op_violations: u64,
    pub overlap_violations: u64,
    pub causality_violations: u64,
    pub invalid_samples: u64,
    pub trace_len: u64,
    pub trace_out_of_order: u64,
    pub trace_hash: u64,
}

impl RunStats {
    pub fn dbru_total(&self) -> u64 {
        self.dbru_on_arrival + self.dbru_solicited
    }
}

#[derive(Debug, Clone)]
pub struct SimReport {
    pub stats: RunStats,
    pub samples: Vec<LatencySample>,
    pub incomplete: Vec<IncompleteRequest>,
    pub trace: Option<Vec<TraceEvent>>,
}

impl SimReport {
    pub fn summary(&self) -> Summary {
        summarize(&self.samples, self.stats.drops)
    }

    pub fn trace_hash(&self) -> u64 {
        self.stats.trace_hash
    }
}

pub fn run(scenario: &Scenario) -> Result<SimReport, ConfigError> {
    match Simulator::new(scenario, None)?.run() {
        Ok(report) => Ok(report),
        Err(SimError::Config(e)) => Err(e),
        Err(SimError::Io(_)) => unreachable!("no sink attached"),
    }
}

/// Like [`run`], also writing every departing downstream frame and every DBRu
/// reaching the NIC to `sink`.
pub fn run_with_sink(scenario: &Scenario, sink: &mut dyn PacketSink) -> Result<SimReport, SimError> {
    Simulator::new(scenario, Some(sink))?.run()
}

struct Request {
    alloc: AllocId,
    class: TrafficClass,
    words: Words,
    remaining: Words,
    created: Nanos,
    parsed: Option<Nanos>,
    intercepted: Option<Nanos>,
    host: Option<Nanos>,
}

/// Grants issued by one scheduler for one Alloc-ID, by ONU arrival time.
#[derive(Default)]
struct GrantLog {
    entries: VecDeque<(Nanos, u64)>,
    total: u64,
}

impl GrantLog {
    fn push(&mut self, arrives_at: Nanos, words: u64) {
        self.entries.push_back((arrives_at, words));
        self.total += words;
    }

    /// Words that reach the ONU after a report created at `created`.
    fn landing_after(&mut self, created: Nanos) -> u64 {
        while let Some(&(at, words)) = self.entries.front() {
            if at > created {
                break;
            }
            self.total -= words;
            self.entries.pop_front();
        }
        self.total
    }
}

#[derive(Default)]
struct OnuTcont {
    fifo: VecDeque<RequestId>,
    backlog: u64,
}

const ID_SPACE: usize = AllocId::MAX as usize + 1;

struct Simulator<'a> {
    sc: &'a Scenario,
    period: Nanos,
    cap: Words,
    host_lag: u32,
    frames: u64,
    classifier: ClassifierTable,
    scope: HostScope,
    fast_enabled: bool,

    queue: EventQueue,
    trace: EventTrace,
    sink: Option<&'a mut dyn PacketSink>,
    codec: WireCodec,

    sources: BTreeMap<AllocId, (TrafficSource, Words)>,
    class_of: Vec<Option<TrafficClass>>,
    requests: Vec<Request>,
    onu: Vec<OnuTcont>,

    nic_queue: PendingQueue,
    nic_queued: Vec<u64>,
    nic_log: Vec<GrantLog>,
    nic_reserve: Words,

    host: CycleState,
    host_log: Vec<GrantLog>,
    host_maps: BTreeMap<u32, (Vec<AllocationStructure>, Words)>,

    metrics: MetricsCollector,
    stats: RunStats,
}

impl<'a> Simulator<'a> {
    fn new(sc: &'a Scenario, sink: Option<&'a mut dyn PacketSink>) -> Result<Self, ConfigError> {
        sc.validate()?;
        let period = sc.frame_period_ns;
        let host_ready = sc.delays.host_dba_compute_ns + sc.delays.host_to_nic_ns;
        let host_lag = host_ready.div_ceil(period).max(1) as u32;
        let classifier = match sc.mode {
            SchedulingMode::FastIntercept => ClassifierTable::from_registry(&sc.registry),
            _ => ClassifierTable::empty(),
        };
        let fast_enabled = !classifier.is_empty();
        let scope = if fast_enabled {
            HostScope::NormalOnly
        } else {
            HostScope::AllClasses
        };
        let mut class_of = vec![None; ID_SPACE];
        for (id, info) in sc.registry.iter() {
            class_of[usize::from(id.get())] = Some(info.class);
        }
        let sources = sc
            .traffic
            .iter()
            .map(|(id, p)| (*id, (TrafficSource::new(*id, *p, sc.seed), 0)))
            .collect();
        let stats = RunStats {
            mode: sc.mode,
            seed: sc.seed,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            frame_period_ns: period,
            upstream_capacity_words: sc.upstream_capacity_words,
            duration_ns: sc.duration_ns,
            frames_emitted: 0,
            requests_created: 0,
            requests_completed: 0,
            dbru_on_arrival: 0,
            dbru_solicited: 0,
            drops: 0,
            slot_usage: BTreeMap::new(),
            host_slips: 0,
            host_rejections: 0,
            fast_merged_words: 0,
            max_fast_demand_words: 0,
            min_fast_reserve_words: None,
            merge_op_violations: 0,
            overlap_violations: 0,
            causality_violations: 0,
            invalid_samples: 0,
            trace_len: 0,
            trace_out_of_order: 0,
            trace_hash: 0,
        };
        let mut sim = Self {
            sc,
            period,
            cap: sc.upstream_capacity_words,
            host_lag,
            frames: sc.frames(),
            classifier,
            scope,
            fast_enabled,
            queue: EventQueue::default(),
            trace: EventTrace::new(sc.keep_trace),
            sink,
            codec: WireCodec::with_capacity(sc.upstream_capacity_words),
            sources,
            class_of,
            requests: Vec::new(),
            onu: std::iter::repeat_with(OnuTcont::default).take(ID_SPACE).collect(),
            nic_queue: PendingQueue::new(sc.fast_queue_capacity),
            nic_queued: vec![0; ID_SPACE],
            nic_log: std::iter::repeat_with(GrantLog::default).take(ID_SPACE).collect(),
            nic_reserve: 0,
            host: CycleState::new(),
            host_log: std::iter::repeat_with(GrantLog::default).take(ID_SPACE).collect(),
            host_maps: BTreeMap::new(),
            metrics: MetricsCollector::new(),
            stats,
        };
        sim.nic_reserve = sim.current_reserve();
        Ok(sim)
    }

    fn run(mut self) -> Result<SimReport, SimError> {
        let ids: Vec<AllocId> = self.sources.keys().copied().collect();
        for id in ids {
            self.schedule_next_arrival(id);
        }
        if self.frames > 0 {
            self.queue.push(0, Event::FrameMerge { seq: 0 });
            self.queue.push(0, Event::HostCycleClose { seq: 0 });
        }
        while let Some((ts, event)) = self.queue.pop_before(self.sc.duration_ns) {
            match event {
                Event::FrameAtOnu { frame, departed_at } => self.on_frame_at_onu(ts, &frame, departed_at),
                Event::Arrival { alloc } => self.on_arrival(ts, alloc),
                Event::SolicitedReport { alloc } => self.on_solicited(ts, alloc),
                Event::DbruAtNic { msg } => self.on_dbru_at_nic(ts, msg)?,
                Event::DbruAtHost { msg } => self.on_dbru_at_host(ts, msg),
                Event::BwmapAtNic { target_seq } => self.log(ts, TraceKind::BwmapAtNic, None, Some(target_seq)),
                Event::FrameMerge { seq } => self.on_merge(ts, seq),
                Event::HostCycleClose { seq } => self.on_host_close(ts, seq),
                Event::FrameDepart { frame } => self.on_depart(ts, frame)?,
            }
        }
        Ok(self.finish())
    }

    fn finish(mut self) -> SimReport {
        let mut incomplete = Vec::new();
        for tcont in &self.onu {
            for &id in &tcont.fifo {
                let r = &self.requests[id];
                incomplete.push(IncompleteRequest {
                    alloc_id: r.alloc,
                    class: r.class,
                    words: r.words,
                    remaining_words: r.remaining,
                    t_created: r.created,
                });
            }
        }
        incomplete.sort_by_key(|r| (r.t_created, r.alloc_id));
        self.stats.drops = self.nic_queue.drops();
        self.metrics.add_drops(self.stats.drops);
        self.stats.trace_len = self.trace.len();
        self.stats.trace_out_of_order = self.trace.out_of_order();
        let (hash, events) = self.trace.finish();
        self.stats.trace_hash = hash;
        SimReport {
            stats: self.stats,
            samples: self.metrics.into_samples(),
            incomplete,
            trace: events,
        }
    }

    fn log(&mut self, ts: Nanos, kind: TraceKind, alloc_id: Option<AllocId>, frame_seq: Option<u32>) {
        self.trace.push(TraceEvent {
            ts_ns: ts,
            kind,
            alloc_id,
            frame_seq,
        });
    }

    fn class(&self, alloc: AllocId) -> TrafficClass {
        self.class_of[usize::from(alloc.get())].expect("alloc_id validated against the registry")
    }

    fn current_reserve(&self) -> Words {
        if self.fast_enabled {
            reserved_words(&self.sc.reserve_policy, &self.host, self.cap)
        } else {
            0
        }
    }

    fn frame_time(&self, seq: u32) -> Nanos {
        u64::from(seq) * self.period
    }

    /// When grants of frame `seq` are applied at the ONU.
    fn grant_arrival(&self, seq: u32) -> Nanos {
        let d = &self.sc.delays;
        self.frame_time(seq) + d.fast_merge_ns + d.prop_delay_ns + d.onu_grant_apply_ns
    }

    fn schedule_next_arrival(&mut self, alloc: AllocId) {
        let (source, words) = self.sources.get_mut(&alloc).expect("source exists");
        let next = source.next_arrival();
        *words = next.words;
        if next.at_ns < self.sc.duration_ns {
            self.queue.push(next.at_ns, Event::Arrival { alloc });
        }
    }

    fn send_report(&mut self, ts: Nanos, alloc: AllocId, request: Option<RequestId>) {
        let backlog = self.onu[usize::from(alloc.get())].backlog;
        let report = DbruReport {
            alloc_id: alloc,
            occupancy_words: backlog.min(u64::from(MAX_OCCUPANCY_WORDS)) as Words,
            created_at_ns: ts,
        };
        let d = &self.sc.delays;
        self.queue.push(
            ts + d.prop_delay_ns + d.nic_parse_ns,
            Event::DbruAtNic {
                msg: ReportMsg { report, request },
            },
        );
    }

    fn on_arrival(&mut self, ts: Nanos, alloc: AllocId) {
        self.log(ts, TraceKind::Arrival, Some(alloc), None);
        let words = self.sources[&alloc].1;
        let id = self.requests.len();
        self.requests.push(Request {
            alloc,
            class: self.class(alloc),
            words,
            remaining: words,
            created: ts,
            parsed: None,
            intercepted: None,
            host: None,
        });
        let tcont = &mut self.onu[usize::from(alloc.get())];
        tcont.fifo.push_back(id);
        tcont.backlog += u64::from(words);
        self.stats.requests_created += 1;
        self.stats.dbru_on_arrival += 1;
        self.send_report(ts, alloc, Some(id));
        self.schedule_next_arrival(alloc);
    }

    fn on_solicited(&mut self, ts: Nanos, alloc: AllocId) {
        self.log(ts, TraceKind::SolicitedReport, Some(alloc), None);
        self.stats.dbru_solicited += 1;
        self.send_report(ts, alloc, None);
    }

    fn on_dbru_at_nic(&mut self, ts: Nanos, msg: ReportMsg) -> Result<(), SimError> {
        let alloc = msg.report.alloc_id;
        self.log(ts, TraceKind::DbruAtNic, Some(alloc), None);
        if let Some(sink) = self.sink.as_deref_mut() {
            let bytes = self
                .codec
                .encode_dbru(&msg.report)
                .expect("occupancy is clamped to the 24-bit field");
            sink.record(&bytes, ts)?;
        }
        if let Some(id) = msg.request {
            self.requests[id].parsed = Some(ts);
        }
        if !self.classifier.contains(alloc) {
            let at = ts + self.sc.delays.nic_to_host_ns;
            self.queue.push(at, Event::DbruAtHost { msg });
            return Ok(());
        }
        if let Some(id) = msg.request {
            self.requests[id].intercepted = Some(ts);
        }
        let slot = usize::from(alloc.get());
        let landing = self.nic_log[slot].landing_after(msg.report.created_at_ns);
        let new_words = u64::from(msg.report.occupancy_words).saturating_sub(self.nic_queued[slot] + landing);
        let request = DbruReport {
            occupancy_words: new_words as Words,
            ..msg.report
        };
        match self.nic_queue.intercept(&request, ts) {
            Ok(Intercepted::Queued) => {
                self.nic_queued[slot] += new_words;
                self.log(ts, TraceKind::Intercept, Some(alloc), None);
            }
            Ok(Intercepted::NothingToGrant) => self.log(ts, TraceKind::Intercept, Some(alloc), None),
            Err(InterceptError::QueueOverflow { .. }) => self.log(ts, TraceKind::QueueDrop, Some(alloc), None),
            Err(InterceptError::MalformedInput(_)) => unreachable!("intercept never reports malformed input"),
        }
        Ok(())
    }

    fn on_dbru_at_host(&mut self, ts: Nanos, msg: ReportMsg) {
        let alloc = msg.report.alloc_id;
        self.log(ts, TraceKind::DbruAtHost, Some(alloc), None);
        if let Some(id) = msg.request {
            self.requests[id].host = Some(ts);
        }
        if self.sc.mode == SchedulingMode::FixedAllocation {
            return;
        }
        let landing = self.host_log[usize::from(alloc.get())].landing_after(msg.report.created_at_ns);
        let report = DbruReport {
            occupancy_words: u64::from(msg.report.occupancy_words).saturating_sub(landing) as Words,
            ..msg.report
        };
        if self.host.ingest_report(&report, &self.sc.registry, self.scope).is_err() {
            self.stats.host_rejections += 1;
        }
    }

    fn on_host_close(&mut self, ts: Nanos, seq: u32) {
        self.log(ts, TraceKind::HostCycle, None, Some(seq));
        let target = seq + self.host_lag;
        if self.host_lag > 1 {
            self.stats.host_slips += 1;
        }
        let (map, reserve) = if self.sc.mode == SchedulingMode::FixedAllocation {
            self.host.close_cycle();
            (compute_fixed_bwmap(&self.sc.registry, self.cap), 0)
        } else {
            let reserve = self.current_reserve();
            let map = compute_bwmap(&self.host, &self.sc.registry, self.cap, reserve);
            let arrives = self.grant_arrival(target);
            let mut carry: Vec<(AllocId, Words)> = Vec::new();
            let pending = self.host.pending();
            for grant in &map {
                self.host_log[usize::from(grant.alloc_id.get())].push(arrives, u64::from(grant.grant_size));
            }
            // Unmet demand stays pending until a newer report replaces it.
            for (&id, &need) in pending {
                let granted = map
                    .iter()
                    .find(|g| g.alloc_id == id)
                    .map_or(0, |g| Words::from(g.grant_size));
                if need > granted {
                    carry.push((id, need - granted));
                }
            }
            self.host.close_cycle();
            for (id, words) in carry {
                let report = DbruReport {
                    alloc_id: id,
                    occupancy_words: words,
                    created_at_ns: ts,
                };
                let _ = self.host.ingest_report(&report, &self.sc.registry, self.scope);
            }
            (map, reserve)
        };
        self.host_maps.insert(target, (map, reserve));
        let d = &self.sc.delays;
        self.queue.push(
            ts + d.host_dba_compute_ns + d.host_to_nic_ns,
            Event::BwmapAtNic { target_seq: target },
        );
        if u64::from(seq) + 1 < self.frames {
            self.queue
                .push(self.frame_time(seq + 1), Event::HostCycleClose { seq: seq + 1 });
        }
    }

    fn on_merge(&mut self, ts: Nanos, seq: u32) {
        self.log(ts, TraceKind::Merge, None, Some(seq));
        let (map, reserve) = self
            .host_maps
            .remove(&seq)
            .unwrap_or_else(|| (Vec::new(), self.nic_reserve));
        self.nic_reserve = reserve;
        let host_frame = DownstreamFrame::new(seq, map, 0);
        let frame = match merge_bwmap(host_frame.clone(), &mut self.nic_queue, self.cap, reserve) {
            Ok(out) => {
                if self.fast_enabled {
                    self.stats.max_fast_demand_words = self.stats.max_fast_demand_words.max(out.demand_words);
                    self.stats.min_fast_reserve_words =
                        Some(self.stats.min_fast_reserve_words.map_or(reserve, |m| m.min(reserve)));
                    let demand = out.demand_words.min(u64::from(Words::MAX)) as Words;
                    self.host.observe_fast_path_demand(demand, &self.sc.reserve_policy);
                }
                if u64::from(out.ops) > 4 * out.appended as u64 + 2 {
                    self.stats.merge_op_violations += 1;
                }
                self.stats.fast_merged_words += u64::from(out.merged_words);
                let arrives = self.grant_arrival(seq);
                let first_new = out.frame.bwmap.len() - out.appended;
                for grant in &out.frame.bwmap[first_new..] {
                    let slot = usize::from(grant.alloc_id.get());
                    self.nic_queued[slot] -= u64::from(grant.grant_size);
                    self.nic_log[slot].push(arrives, u64::from(grant.grant_size));
                }
                out.frame
            }
            Err(_) => {
                self.stats.overlap_violations += 1;
                host_frame
            }
        };
        self.stats.frames_emitted += 1;
        self.queue.push(
            ts + self.sc.delays.fast_merge_ns,
            Event::FrameDepart { frame: Box::new(frame) },
        );
        if u64::from(seq) + 1 < self.frames {
            self.queue
                .push(self.frame_time(seq + 1), Event::FrameMerge { seq: seq + 1 });
        }
    }

    fn on_depart(&mut self, ts: Nanos, frame: Box<DownstreamFrame>) -> Result<(), SimError> {
        self.log(ts, TraceKind::Depart, None, Some(frame.frame_seq));
        if frame.validate(self.cap).is_err() {
            self.stats.overlap_violations += 1;
        }
        if let Some(sink) = self.sink.as_deref_mut() {
            if let Ok(bytes) = self.codec.encode_downstream(&frame) {
                sink.record(&bytes, ts)?;
            }
        }
        let d = &self.sc.delays;
        self.queue.push(
            ts + d.prop_delay_ns + d.onu_grant_apply_ns,
            Event::FrameAtOnu { frame, departed_at: ts },
        );
        Ok(())
    }

    fn on_frame_at_onu(&mut self, ts: Nanos, frame: &DownstreamFrame, departed_at: Nanos) {
        self.log(ts, TraceKind::GrantAtOnu, None, Some(frame.frame_seq));
        let mut solicit: Vec<(AllocId, Nanos)> = Vec::new();
        for grant in &frame.bwmap {
            let offset = u64::from(grant.start_time) * self.period / u64::from(self.cap);
            let tx = ts + offset;
            let used = self.apply_grant(grant, frame.frame_seq, ts, tx, departed_at);
            let usage = self.stats.slot_usage.entry(self.class(grant.alloc_id)).or_default();
            usage.granted_words += u64::from(grant.grant_size);
            usage.used_words += used;
            if grant.flags.dbru_requested() {
                match solicit.iter_mut().find(|(id, _)| *id == grant.alloc_id) {
                    Some(entry) => entry.1 = entry.1.max(tx),
                    None => solicit.push((grant.alloc_id, tx)),
                }
            }
        }
        for (alloc, at) in solicit {
            self.queue.push(at, Event::SolicitedReport { alloc });
        }
    }

    /// Serves the T-CONT's requests oldest first; returns the words used.
    fn apply_grant(&mut self, grant: &AllocationStructure, seq: u32, at: Nanos, tx: Nanos, departed_at: Nanos) -> u64 {
        let slot = usize::from(grant.alloc_id.get());
        let mut left = Words::from(grant.grant_size);
        let mut used = 0u64;
        while left > 0 {
            let Some(&id) = self.onu[slot].fifo.front() else {
                break;
            };
            let req = &mut self.requests[id];
            let take = left.min(req.remaining);
            req.remaining -= take;
            left -= take;
            used += u64::from(take);
            if req.remaining == 0 {
                self.onu[slot].fifo.pop_front();
                self.complete(id, seq, at, tx, departed_at);
            }
        }
        self.onu[slot].backlog -= used;
        used
    }

    fn complete(&mut self, id: RequestId, seq: u32, at: Nanos, tx: Nanos, departed_at: Nanos) {
        self.stats.requests_completed += 1;
        let r = &self.requests[id];
        let path = match self.sc.mode {
            SchedulingMode::FixedAllocation => GrantPath::Static,
            _ if self.classifier.contains(r.alloc) => GrantPath::Fast,
            _ => GrantPath::Host,
        };
        let period = self.period;
        let eligible = match path {
            GrantPath::Fast => r.intercepted.map(|c| c.div_ceil(period)),
            GrantPath::Host => r.host.map(|d| d.div_ceil(period) + u64::from(self.host_lag)),
            GrantPath::Static => {
                let lead = self.grant_arrival(0);
                Some(r.created.saturating_sub(lead).div_ceil(period))
            }
        };
        let stage = match path {
            GrantPath::Fast => r.intercepted,
            GrantPath::Host => r.host,
            GrantPath::Static => None,
        };
        if stage.is_some_and(|s| departed_at <= s) {
            self.stats.causality_violations += 1;
        }
        let frames_waited = eligible.map_or(0, |e| u64::from(seq).saturating_sub(e)) as u32;
        let sample = LatencySample {
            alloc_id: r.alloc,
            class: r.class,
            path,
            words: r.words,
            t_created: r.created,
            t_nic_parsed: if path == GrantPath::Static { None } else { r.parsed },
            t_intercepted: if path == GrantPath::Fast { r.intercepted } else { None },
            t_host_ingested: if path == GrantPath::Host { r.host } else { None },
            t_merged_or_mapped: self.frame_time(seq),
            t_grant_at_onu: at,
            t_tx_start: tx,
            frames_waited,
        };
        if self.metrics.record(sample).is_err() {
            self.stats.invalid_samples += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic::SizeDist;

    fn id(raw: u16) -> AllocId {
        AllocId::new(raw).unwrap()
    }

    #[test]
    fn default_capacity_is_38880_words() {
        assert_eq!(capacity_from_line_rate(9.95328e9, 125_000), Some(38_880));
    }

    #[test]
    fn empty_traffic_emits_every_frame() {
        let reg = TcontRegistry::new().with(id(9000), TrafficClass::LowLatency, 1, 1);
        let mut sc = Scenario::new(SchedulingMode::FastIntercept, reg, BTreeMap::new());
        sc.duration_ns = 100 * sc.frame_period_ns;
        let report = run(&sc).unwrap();
        assert!(report.samples.is_empty());
        assert_eq!(report.stats.frames_emitted, 100);
    }

    #[test]
    fn short_duration_rejected() {
        let reg = TcontRegistry::new().with(id(1), TrafficClass::Normal, 1, 1);
        let mut sc = Scenario::new(SchedulingMode::Standard, reg, BTreeMap::new());
        sc.duration_ns = 9 * sc.frame_period_ns;
        assert_eq!(run(&sc).unwrap_err().field, "duration_ns");
    }

    #[test]
    fn traffic_for_unknown_alloc_rejected() {
        let reg = TcontRegistry::new().with(id(1), TrafficClass::Normal, 1, 1);
        let traffic = BTreeMap::from([(id(2), ArrivalProcess::cbr(125_000, 10))]);
        let sc = Scenario::new(SchedulingMode::Standard, reg, traffic);
        assert_eq!(sc.validate().unwrap_err().field, "traffic.2");
    }

    #[test]
    fn grant_log_keeps_only_later_arrivals() {
        let mut log = GrantLog::default();
        log.push(100, 5);
        log.push(200, 7);
        assert_eq!(log.landing_after(99), 12);
        assert_eq!(log.landing_after(100), 7);
        assert_eq!(log.landing_after(250), 0);
    }

    #[test]
    fn every_word_served_once() {
        let reg = TcontRegistry::new()
            .with(id(1), TrafficClass::Normal, 1, 1)
            .with(id(2), TrafficClass::Normal, 1, 2)
            .with(id(3), TrafficClass::LowLatency, 2, 1);
        let traffic = BTreeMap::from([
            (
                id(1),
                ArrivalProcess::poisson(4000.0, SizeDist::UniformInt { lo: 100, hi: 4000 }),
            ),
            (
                id(2),
                ArrivalProcess::poisson(4000.0, SizeDist::UniformInt { lo: 100, hi: 4000 }),
            ),
            (
                id(3),
                ArrivalProcess::poisson(2000.0, SizeDist::UniformInt { lo: 10, hi: 2000 }),
            ),
        ]);
        for mode in SchedulingMode::ALL {
            let mut sc = Scenario::new(mode, reg.clone(), traffic.clone());
            sc.duration_ns = 50_000_000;
            let r = run(&sc).unwrap();
            let served: u64 = r.samples.iter().map(|s| u64::from(s.words)).sum::<u64>()
                + r.incomplete
                    .iter()
                    .map(|i| u64::from(i.words - i.remaining_words))
                    .sum::<u64>();
            let used: u64 = r.stats.slot_usage.values().map(|u| u.used_words).sum();
            assert_eq!(served, used, "{mode}");
            assert_eq!(r.stats.invalid_samples, 0, "{mode}");
            assert_eq!(r.stats.overlap_violations, 0, "{mode}");
            assert_eq!(r.stats.causality_violations, 0, "{mode}");
            assert_eq!(r.stats.trace_out_of_order, 0, "{mode}");
            assert_eq!(
                r.stats.requests_created,
                r.stats.requests_completed + r.incomplete.len() as u64
            );
        }
    }
}
