//! Per-request stage timestamps, latency summaries and CSV/JSON export.
//!
//! Stage letters follow the pipeline: A = DBRu created at the ONU,
//! B = parsed at the OLT NIC, C = held by the fast path, D = ingested by the
//! host vDBA, E = grant leaves the NIC in a downstream frame.
//!
//! Samples CSV columns, in order (empty cell = not on this path):
//!
//! ```text
//! alloc_id,class,path,words,t_created,t_nic_parsed,t_intercepted,t_host_ingested,
//! t_merged_or_mapped,t_grant_at_onu,t_tx_start,frames_waited,grant_latency_ns,service_latency_ns
//! ```
//!
//! Summary CSV columns:
//!
//! ```text
//! class,path,count,grant_mean_ns,grant_p50_ns,grant_p95_ns,grant_p99_ns,grant_max_ns,
//! service_mean_ns,service_p50_ns,service_p95_ns,service_p99_ns,service_max_ns,
//! b_to_c_mean_ns,b_to_d_mean_ns,d_to_e_mean_ns,c_to_e_mean_ns
//! ```
//!
//! The JSON summary carries `schema_version` ([`SUMMARY_SCHEMA_VERSION`]).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{AllocId, Nanos, TrafficClass, Words};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

pub const SAMPLES_CSV_HEADER: &str = "alloc_id,class,path,words,t_created,t_nic_parsed,t_intercepted,\
t_host_ingested,t_merged_or_mapped,t_grant_at_onu,t_tx_start,frames_waited,grant_latency_ns,service_latency_ns";

pub const SUMMARY_CSV_HEADER: &str = "class,path,count,grant_mean_ns,grant_p50_ns,grant_p95_ns,\
grant_p99_ns,grant_max_ns,service_mean_ns,service_p50_ns,service_p95_ns,service_p99_ns,service_max_ns,\
b_to_c_mean_ns,b_to_d_mean_ns,d_to_e_mean_ns,c_to_e_mean_ns";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid sample for alloc_id {alloc_id}: {reason}")]
    InvalidSample { alloc_id: AllocId, reason: String },
    #[error("i/o failure: {0}")]
    IoFailure(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// How the grant that completed a request was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GrantPath {
    /// Dataplane fast path (intercept + merge).
    Fast,
    /// Host vDBA.
    Host,
    /// Fixed allocation, not driven by reports.
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatencySample {
    pub alloc_id: AllocId,
    pub class: TrafficClass,
    pub path: GrantPath,
    pub words: Words,
    pub t_created: Nanos,
    pub t_nic_parsed: Option<Nanos>,
    pub t_intercepted: Option<Nanos>,
    pub t_host_ingested: Option<Nanos>,
    pub t_merged_or_mapped: Nanos,
    pub t_grant_at_onu: Nanos,
    pub t_tx_start: Nanos,
    /// Frames between the first frame that could have carried the grant and
    /// the one that did (0 = first eligible frame).
    pub frames_waited: u32,
}

impl LatencySample {
    pub fn grant_latency_ns(&self) -> Nanos {
        self.t_grant_at_onu - self.t_created
    }

    pub fn service_latency_ns(&self) -> Nanos {
        self.t_tx_start - self.t_created
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let fail = |reason: &str| {
            Err(MetricsError::InvalidSample {
                alloc_id: self.alloc_id,
                reason: reason.to_string(),
            })
        };
        let chain: Vec<Nanos> = match self.path {
            GrantPath::Fast => {
                let (Some(b), Some(c), None) = (self.t_nic_parsed, self.t_intercepted, self.t_host_ingested) else {
                    return fail("fast-path sample needs t_nic_parsed and t_intercepted only");
                };
                vec![self.t_created, b, c, self.t_merged_or_mapped]
            }
            GrantPath::Host => {
                let (Some(b), None, Some(d)) = (self.t_nic_parsed, self.t_intercepted, self.t_host_ingested) else {
                    return fail("host-path sample needs t_nic_parsed and t_host_ingested only");
                };
                vec![self.t_created, b, d, self.t_merged_or_mapped]
            }
            GrantPath::Static => {
                if self.t_intercepted.is_some() || self.t_host_ingested.is_some() {
                    return fail("static sample must not carry intercept or host timestamps");
                }
                vec![self.t_created]
            }
        };
        let mut prev = 0;
        for t in chain.into_iter().chain([self.t_grant_at_onu, self.t_tx_start]) {
            if t < prev {
                return fail("timestamps decrease along the path");
            }
            prev = t;
        }
        Ok(())
    }
}

/// Distribution statistics; all `None` for an empty set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean_ns: Option<f64>,
    pub p50_ns: Option<u64>,
    pub p95_ns: Option<u64>,
    pub p99_ns: Option<u64>,
    pub max_ns: Option<u64>,
}

impl LatencyStats {
    pub fn from_values(mut values: Vec<u64>) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        values.sort_unstable();
        let sum: u128 = values.iter().map(|&v| u128::from(v)).sum();
        Self {
            count: values.len() as u64,
            mean_ns: Some(sum as f64 / values.len() as f64),
            p50_ns: Some(nearest_rank(&values, 50)),
            p95_ns: Some(nearest_rank(&values, 95)),
            p99_ns: Some(nearest_rank(&values, 99)),
            max_ns: values.last().copied(),
        }
    }
}

/// Nearest-rank percentile of an ascending, non-empty slice.
pub fn nearest_rank(sorted: &[u64], percent: u32) -> u64 {
    let n = sorted.len() as u64;
    let rank = (u64::from(percent) * n).div_ceil(100).max(1);
    sorted[(rank - 1) as usize]
}

/// Mean durations between stage timestamps, over the samples that have both ends.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMeans {
    pub b_to_c_ns: Option<f64>,
    pub b_to_d_ns: Option<f64>,
    pub d_to_e_ns: Option<f64>,
    pub c_to_e_ns: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub class: TrafficClass,
    /// `None` aggregates every path of the class.
    pub path: Option<GrantPath>,
    pub count: u64,
    pub grant_latency: LatencyStats,
    pub service_latency: LatencyStats,
    pub stages: StageMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub count: u64,
    pub drops: u64,
    pub grant_latency: LatencyStats,
    pub service_latency: LatencyStats,
    /// One entry per (class, path) observed.
    pub groups: Vec<GroupSummary>,
    /// One entry per class observed, all paths together.
    pub classes: Vec<GroupSummary>,
}

impl Summary {
    pub fn group(&self, class: TrafficClass, path: GrantPath) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.class == class && g.path == Some(path))
    }

    pub fn class(&self, class: TrafficClass) -> Option<&GroupSummary> {
        self.classes.iter().find(|g| g.class == class)
    }
}

fn mean_of(iter: impl Iterator<Item = u64>) -> Option<f64> {
    let (sum, n) = iter.fold((0u128, 0u64), |(s, n), v| (s + u128::from(v), n + 1));
    (n > 0).then(|| sum as f64 / n as f64)
}

fn summarize_group(class: TrafficClass, path: Option<GrantPath>, samples: &[&LatencySample]) -> GroupSummary {
    let stages = StageMeans {
        b_to_c_ns: mean_of(samples.iter().filter_map(|s| Some(s.t_intercepted? - s.t_nic_parsed?))),
        b_to_d_ns: mean_of(
            samples
                .iter()
                .filter_map(|s| Some(s.t_host_ingested? - s.t_nic_parsed?)),
        ),
        d_to_e_ns: mean_of(
            samples
                .iter()
                .filter_map(|s| Some(s.t_merged_or_mapped - s.t_host_ingested?)),
        ),
        c_to_e_ns: mean_of(
            samples
                .iter()
                .filter_map(|s| Some(s.t_merged_or_mapped - s.t_intercepted?)),
        ),
    };
    GroupSummary {
        class,
        path,
        count: samples.len() as u64,
        grant_latency: LatencyStats::from_values(samples.iter().map(|s| s.grant_latency_ns()).collect()),
        service_latency: LatencyStats::from_values(samples.iter().map(|s| s.service_latency_ns()).collect()),
        stages,
    }
}

pub fn summarize(samples: &[LatencySample], drops: u64) -> Summary {
    let mut groups: BTreeMap<(TrafficClass, GrantPath), Vec<&LatencySample>> = BTreeMap::new();
    let mut classes: BTreeMap<TrafficClass, Vec<&LatencySample>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.class, s.path)).or_default().push(s);
        classes.entry(s.class).or_default().push(s);
    }
    Summary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        count: samples.len() as u64,
        drops,
        grant_latency: LatencyStats::from_values(samples.iter().map(|s| s.grant_latency_ns()).collect()),
        service_latency: LatencyStats::from_values(samples.iter().map(|s| s.service_latency_ns()).collect()),
        groups: groups
            .into_iter()
            .map(|((class, path), v)| summarize_group(class, Some(path), &v))
            .collect(),
        classes: classes
            .into_iter()
            .map(|(class, v)| summarize_group(class, None, &v))
            .collect(),
    }
}

/// Retains every sample of a run; single writer.
#[derive(Debug, Clone, Default)]
pub struct MetricsCollector {
    samples: Vec<LatencySample>,
    drops: u64,
}

impl MetricsCollector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, sample: LatencySample) -> Result<(), MetricsError> {
        sample.validate()?;
        self.samples.push(sample);
        Ok(())
    }

    pub fn add_drops(&mut self, n: u64) {
        self.drops += n;
    }

    pub fn drops(&self) -> u64 {
        self.drops
    }

    pub fn samples(&self) -> &[LatencySample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<LatencySample> {
        self.samples
    }

    pub fn summarize(&self) -> Summary {
        summarize(&self.samples, self.drops)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    alloc_id: u16,
    class: TrafficClass,
    path: GrantPath,
    words: Words,
    t_created: Nanos,
    t_nic_parsed: Option<Nanos>,
    t_intercepted: Option<Nanos>,
    t_host_ingested: Option<Nanos>,
    t_merged_or_mapped: Nanos,
    t_grant_at_onu: Nanos,
    t_tx_start: Nanos,
    frames_waited: u32,
    grant_latency_ns: Nanos,
    service_latency_ns: Nanos,
}

pub fn export_samples_csv(samples: &[LatencySample], path: impl AsRef<Path>) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for s in samples {
        w.serialize(SampleRow {
            alloc_id: s.alloc_id.get(),
            class: s.class,
            path: s.path,
            words: s.words,
            t_created: s.t_created,
            t_nic_parsed: s.t_nic_parsed,
            t_intercepted: s.t_intercepted,
            t_host_ingested: s.t_host_ingested,
            t_merged_or_mapped: s.t_merged_or_mapped,
            t_grant_at_onu: s.t_grant_at_onu,
            t_tx_start: s.t_tx_start,
            frames_waited: s.frames_waited,
            grant_latency_ns: s.grant_latency_ns(),
            service_latency_ns: s.service_latency_ns(),
        })?;
    }
    if samples.is_empty() {
        w.write_record(SAMPLES_CSV_HEADER.split(','))?;
    }
    w.flush()?;
    Ok(())
}

pub fn import_samples_csv(path: impl AsRef<Path>) -> Result<Vec<LatencySample>, MetricsError> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let mut out = Vec::new();
    for row in r.deserialize::<SampleRow>() {
        let row = row?;
        let alloc_id = AllocId::new(row.alloc_id).ok_or_else(|| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("alloc_id {} out of range", row.alloc_id),
            )
        })?;
        out.push(LatencySample {
            alloc_id,
            class: row.class,
            path: row.path,
            words: row.words,
            t_created: row.t_created,
            t_nic_parsed: row.t_nic_parsed,
            t_intercepted: row.t_intercepted,
            t_host_ingested: row.t_host_ingested,
            t_merged_or_mapped: row.t_merged_or_mapped,
            t_grant_at_onu: row.t_grant_at_onu,
            t_tx_start: row.t_tx_start,
            frames_waited: row.frames_waited,
        });
    }
    Ok(out)
}

pub fn export_summary_csv(summary: &Summary, path: impl AsRef<Path>) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(SUMMARY_CSV_HEADER.split(','))?;
    let opt_f = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_default();
    let opt_u = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
    for g in summary.groups.iter().chain(&summary.classes) {
        let path = g.path.map(|p| format!("{p:?}")).unwrap_or_else(|| "All".to_string());
        w.write_record([
            g.class.to_string(),
            path,
            g.count.to_string(),
            opt_f(g.grant_latency.mean_ns),
            opt_u(g.grant_latency.p50_ns),
            opt_u(g.grant_latency.p95_ns),
            opt_u(g.grant_latency.p99_ns),
            opt_u(g.grant_latency.max_ns),
            opt_f(g.service_latency.mean_ns),
            opt_u(g.service_latency.p50_ns),
            opt_u(g.service_latency.p95_ns),
            opt_u(g.service_latency.p99_ns),
            opt_u(g.service_latency.max_ns),
            opt_f(g.stages.b_to_c_ns),
            opt_f(g.stages.b_to_d_ns),
            opt_f(g.stages.d_to_e_ns),
            opt_f(g.stages.c_to_e_ns),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<(), MetricsError> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, value)?;
    Ok(())
}

pub fn export_summary_json(summary: &Summary, path: impl AsRef<Path>) -> Result<(), MetricsError> {
    export_json(summary, path)
}

pub fn import_summary_json(path: impl AsRef<Path>) -> Result<Summary, MetricsError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn host_sample(created: Nanos, latency: Nanos) -> LatencySample {
        LatencySample {
            alloc_id: AllocId::new(1).unwrap(),
            class: TrafficClass::Normal,
            path: GrantPath::Host,
            words: 10,
            t_created: created,
            t_nic_parsed: Some(created + 1),
            t_intercepted: None,
            t_host_ingested: Some(created + 2),
            t_merged_or_mapped: created + 3,
            t_grant_at_onu: created + latency,
            t_tx_start: created + latency + 5,
            frames_waited: 1,
        }
    }

    #[test]
    fn percentiles_one_to_hundred() {
        let values: Vec<u64> = (1..=100).map(|v| v * 1000).collect();
        let stats = LatencyStats::from_values(values);
        assert_eq!(stats.p50_ns, Some(50_000));
        assert_eq!(stats.p95_ns, Some(95_000));
        assert_eq!(stats.p99_ns, Some(99_000));
        assert_eq!(stats.max_ns, Some(100_000));
        assert_eq!(stats.mean_ns, Some(50_500.0));
    }

    #[test]
    fn single_sample_stats_coincide() {
        let stats = LatencyStats::from_values(vec![777]);
        assert_eq!(stats.mean_ns, Some(777.0));
        assert_eq!(stats.p50_ns, Some(777));
        assert_eq!(stats.p99_ns, Some(777));
        assert_eq!(stats.max_ns, Some(777));
    }

    #[test]
    fn empty_summary_has_null_stats() {
        let s = MetricsCollector::new().summarize();
        assert_eq!(s.count, 0);
        assert_eq!(s.grant_latency, LatencyStats::default());
        assert!(s.groups.is_empty());
        let json = serde_json::to_value(&s).unwrap();
        assert!(json["grant_latency"]["p50_ns"].is_null());
    }

    #[test]
    fn nonmonotone_sample_rejected() {
        let mut s = host_sample(100, 50);
        s.t_host_ingested = Some(50);
        let mut m = MetricsCollector::new();
        assert!(matches!(m.record(s), Err(MetricsError::InvalidSample { .. })));
        assert!(m.samples().is_empty());
    }

    #[test]
    fn path_fields_must_match() {
        let mut s = host_sample(100, 50);
        s.t_intercepted = Some(101);
        assert!(s.validate().is_err());
        s.path = GrantPath::Fast;
        assert!(s.validate().is_err());
        s.t_host_ingested = None;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn host_stage_segments_sum_to_grant_latency() {
        let s = host_sample(1_000, 260_000);
        let a_b = s.t_nic_parsed.unwrap() - s.t_created;
        let b_d = s.t_host_ingested.unwrap() - s.t_nic_parsed.unwrap();
        let d_e = s.t_merged_or_mapped - s.t_host_ingested.unwrap();
        let e_g = s.t_grant_at_onu - s.t_merged_or_mapped;
        assert_eq!(a_b + b_d + d_e + e_g, s.grant_latency_ns());
    }

    #[test]
    fn csv_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        let samples: Vec<LatencySample> = (0..20).map(|i| host_sample(i * 10, 100 + i)).collect();
        export_samples_csv(&samples, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), SAMPLES_CSV_HEADER);
        assert_eq!(import_samples_csv(&path).unwrap(), samples);
    }

    #[test]
    fn empty_csv_still_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        export_samples_csv(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.trim_end(), SAMPLES_CSV_HEADER);
        assert!(import_samples_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn summary_csv_header_and_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<LatencySample> = (0..5).map(|i| host_sample(i, 10 + i)).collect();
        let summary = summarize(&samples, 3);
        export_summary_csv(&summary, dir.path().join("s.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), SUMMARY_CSV_HEADER);
        assert_eq!(text.lines().count(), 3);
        export_summary_json(&summary, dir.path().join("s.json")).unwrap();
        assert_eq!(import_summary_json(dir.path().join("s.json")).unwrap(), summary);
    }
}
