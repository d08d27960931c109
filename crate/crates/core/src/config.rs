//! JSON scenario files.
//!
//! ```json
//! {
//!   "mode": "FastIntercept",
//!   "duration_ns": 1000000000,
//!   "seed": 7,
//!   "reserve_policy": { "mode": "Fixed", "fraction": 0.1 },
//!   "delays": { "prop_delay_ns": 25000 },
//!   "tconts": [
//!     { "alloc_id": 1024, "class": "Normal", "onu_id": 1, "weight": 1 },
//!     { "alloc_id": 9000, "class": "LowLatency", "onu_id": 1 }
//!   ],
//!   "traffic": {
//!     "1024": { "kind": { "Poisson": { "rate_per_s": 800 } },
//!               "size": { "UniformInt": { "lo": 500, "hi": 3000 } } },
//!     "9000": { "kind": { "Cbr": { "interval_ns": 250000 } },
//!               "size": { "Fixed": { "words": 400 } } }
//!   },
//!   "output": { "json_path": "summary.json", "csv_path": "summary.csv" }
//! }
//! ```
//!
//! Omitted fields take the defaults of [`Scenario::new`]. Unknown keys are
//! rejected, and every error names the offending field as a dotted path.
//! `upstream_capacity_words`, when absent, is derived from `line_rate_bps`
//! and `frame_period_ns`. Overrides of the form `path=value` are applied to
//! the parsed document before it is interpreted; `value` is read as JSON
//! when it parses and as a string otherwise.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::intercept::DEFAULT_QUEUE_CAPACITY;
use crate::sim::{
    capacity_from_line_rate, ConfigError, DelayModel, Scenario, SchedulingMode, DEFAULT_FRAME_PERIOD_NS,
    DEFAULT_LINE_RATE_BPS, MAX_CAPACITY_WORDS,
};
use crate::traffic::ArrivalProcess;
use crate::types::{AllocId, Fraction, Nanos, TrafficClass, Words};
use crate::vdba::{ReservePolicy, TcontInfo, TcontRegistry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub mode: SchedulingMode,
    #[serde(default = "default_frame_period")]
    pub frame_period_ns: Nanos,
    #[serde(default = "default_line_rate")]
    pub line_rate_bps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upstream_capacity_words: Option<u64>,
    #[serde(default = "default_duration")]
    pub duration_ns: Nanos,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_queue_capacity")]
    pub fast_queue_capacity: usize,
    #[serde(default)]
    pub reserve_policy: ReserveConfig,
    #[serde(default)]
    pub delays: DelayModel,
    pub tconts: Vec<TcontConfig>,
    #[serde(default)]
    pub traffic: BTreeMap<AllocId, ArrivalProcess>,
    #[serde(default)]
    pub output: OutputOptions,
}

fn default_frame_period() -> Nanos {
    DEFAULT_FRAME_PERIOD_NS
}

fn default_line_rate() -> f64 {
    DEFAULT_LINE_RATE_BPS
}

fn default_duration() -> Nanos {
    1_000_000_000
}

fn default_seed() -> u64 {
    1
}

fn default_queue_capacity() -> usize {
    DEFAULT_QUEUE_CAPACITY
}

fn default_weight() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", deny_unknown_fields)]
pub enum ReserveConfig {
    /// `floor(fraction * capacity)` words every frame.
    Fixed { fraction: Fraction },
    /// EWMA of the fast-path backlog seen at each merge, clamped to
    /// `[min_words, max_words]` (`max_words` defaults to the capacity).
    Adaptive {
        ewma_alpha: Fraction,
        #[serde(default)]
        min_words: Words,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_words: Option<Words>,
    },
}

impl Default for ReserveConfig {
    fn default() -> Self {
        ReserveConfig::Fixed {
            fraction: Fraction::new(1, 10).expect("nonzero denominator"),
        }
    }
}

impl ReserveConfig {
    pub fn to_policy(self, capacity_words: Words) -> ReservePolicy {
        match self {
            ReserveConfig::Fixed { fraction } => ReservePolicy::fixed(fraction, capacity_words),
            ReserveConfig::Adaptive {
                ewma_alpha,
                min_words,
                max_words,
            } => ReservePolicy::adaptive(ewma_alpha, min_words, max_words.unwrap_or(capacity_words)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TcontConfig {
    pub alloc_id: AllocId,
    pub class: TrafficClass,
    #[serde(default)]
    pub onu_id: u32,
    #[serde(default = "default_weight")]
    pub weight: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputOptions {
    /// Summary table as CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<PathBuf>,
    /// Summary (run) or comparison report (compare) as JSON.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub json_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pcap_path: Option<PathBuf>,
    /// Every latency sample as CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub scenario: Scenario,
    pub output: OutputOptions,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
}

impl ConfigFile {
    pub fn into_loaded(self) -> Result<LoadedConfig, ConfigError> {
        let capacity = match self.upstream_capacity_words {
            Some(words) => {
                if words == 0 || words > u64::from(MAX_CAPACITY_WORDS) {
                    return Err(ConfigError::new(
                        "upstream_capacity_words",
                        format!("must be in 1..={MAX_CAPACITY_WORDS}, got {words}"),
                    ));
                }
                words
            }
            None => {
                let derived = capacity_from_line_rate(self.line_rate_bps, self.frame_period_ns)
                    .ok_or_else(|| ConfigError::new("line_rate_bps", "must be a finite non-negative number"))?;
                if derived == 0 || derived > u64::from(MAX_CAPACITY_WORDS) {
                    return Err(ConfigError::new(
                        "line_rate_bps",
                        format!(
                            "derived capacity of {derived} words per frame is outside 1..={MAX_CAPACITY_WORDS}; \
                             set upstream_capacity_words or lower the rate"
                        ),
                    ));
                }
                derived
            }
        } as Words;

        let mut registry = TcontRegistry::new();
        for (i, t) in self.tconts.iter().enumerate() {
            registry
                .insert(
                    t.alloc_id,
                    TcontInfo {
                        class: t.class,
                        onu_id: t.onu_id,
                        weight: t.weight,
                    },
                )
                .map_err(|e| ConfigError::new(format!("tconts[{i}]"), e.to_string()))?;
        }

        let scenario = Scenario {
            frame_period_ns: self.frame_period_ns,
            line_rate_bps: self.line_rate_bps,
            upstream_capacity_words: capacity,
            mode: self.mode,
            reserve_policy: self.reserve_policy.to_policy(capacity),
            registry,
            traffic: self.traffic,
            delays: self.delays,
            duration_ns: self.duration_ns,
            seed: self.seed,
            fast_queue_capacity: self.fast_queue_capacity,
            keep_trace: false,
        };
        scenario.validate()?;
        Ok(LoadedConfig {
            scenario,
            output: self.output,
        })
    }
}

/// Sets the dotted `path` in `doc` to `value`. Numeric segments index arrays;
/// missing object keys are created.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let Some((path, raw)) = assignment.split_once('=') else {
        return Err(ConfigError::new(assignment, "override must have the form key=value"));
    };
    let path = path.trim();
    if path.is_empty() {
        return Err(ConfigError::new(assignment, "override key is empty"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for segment in path.split('.') {
        node = match node {
            Value::Object(map) => map.entry(segment.to_string()).or_insert(Value::Null),
            Value::Array(items) => {
                let index: usize = segment
                    .parse()
                    .map_err(|_| ConfigError::new(path, format!("{segment:?} is not an array index")))?;
                let len = items.len();
                items
                    .get_mut(index)
                    .ok_or_else(|| ConfigError::new(path, format!("index {index} out of range (length {len})")))?
            }
            Value::Null => {
                *node = Value::Object(serde_json::Map::new());
                let Value::Object(map) = node else { unreachable!() };
                map.entry(segment.to_string()).or_insert(Value::Null)
            }
            _ => {
                return Err(ConfigError::new(
                    path,
                    format!("cannot descend into a scalar at {segment:?}"),
                ))
            }
        };
    }
    *node = value;
    Ok(())
}

fn field_of(path: &serde_path_to_error::Path) -> String {
    let text = path.to_string();
    if text == "." || text == "?" {
        "config".to_string()
    } else {
        text
    }
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<LoadedConfig, ConfigError> {
    let mut doc: Value = {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| ConfigError::new(field_of(e.path()), e.inner().to_string()))?
    };
    for assignment in overrides {
        apply_override(&mut doc, assignment)?;
    }
    let file: ConfigFile = serde_path_to_error::deserialize(doc).map_err(|e| {
        let message = e.inner().to_string();
        ConfigError::new(field_of(e.path()), message)
    })?;
    file.into_loaded()
}

pub fn load_config(path: impl AsRef<Path>, overrides: &[String]) -> Result<LoadedConfig, LoadError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(parse_config(&text, overrides)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "mode": "FastIntercept",
        "tconts": [
            { "alloc_id": 1024, "class": "Normal" },
            { "alloc_id": 9000, "class": "LowLatency", "onu_id": 2, "weight": 3 }
        ],
        "traffic": {
            "9000": { "kind": { "Cbr": { "interval_ns": 250000 } }, "size": { "Fixed": { "words": 400 } } }
        }
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config(MINIMAL, &[]).unwrap();
        let sc = &cfg.scenario;
        assert_eq!(sc.upstream_capacity_words, 38_880);
        assert_eq!(sc.frame_period_ns, 125_000);
        assert_eq!(sc.delays, DelayModel::default());
        assert_eq!(
            sc.reserve_policy,
            ReservePolicy::fixed(Fraction::new(1, 10).unwrap(), 38_880)
        );
        assert_eq!(sc.registry.len(), 2);
        assert_eq!(sc.registry.get(AllocId::new(9000).unwrap()).unwrap().weight, 3);
        assert_eq!(sc.traffic.len(), 1);
        assert_eq!(cfg.output, OutputOptions::default());
    }

    #[test]
    fn override_changes_only_that_field() {
        let base = parse_config(MINIMAL, &[]).unwrap().scenario;
        let changed = parse_config(MINIMAL, &["mode=Standard".to_string()]).unwrap().scenario;
        assert_eq!(changed.mode, SchedulingMode::Standard);
        assert_eq!(changed.with_mode(base.mode), base);
    }

    #[test]
    fn nested_and_indexed_overrides() {
        let cfg = parse_config(
            MINIMAL,
            &[
                "delays.prop_delay_ns=50000".to_string(),
                "tconts.0.weight=4".to_string(),
                "traffic.9000.kind.Cbr.interval_ns=125000".to_string(),
            ],
        )
        .unwrap();
        let sc = cfg.scenario;
        assert_eq!(sc.delays.prop_delay_ns, 50_000);
        assert_eq!(sc.registry.get(AllocId::new(1024).unwrap()).unwrap().weight, 4);
        assert_eq!(
            sc.traffic[&AllocId::new(9000).unwrap()],
            ArrivalProcess::cbr(125_000, 400)
        );
    }

    #[test]
    fn negative_delay_names_field() {
        let err = parse_config(MINIMAL, &["delays.prop_delay_ns=-5".to_string()]).unwrap_err();
        assert_eq!(err.field, "delays.prop_delay_ns");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = parse_config(MINIMAL, &["delays.bogus_ns=1".to_string()]).unwrap_err();
        assert_eq!(err.field, "delays.bogus_ns");
        assert!(err.message.contains("unknown field"), "{}", err.message);
    }

    #[test]
    fn short_duration_rejected() {
        let err = parse_config(MINIMAL, &["duration_ns=1000".to_string()]).unwrap_err();
        assert_eq!(err.field, "duration_ns");
    }

    #[test]
    fn capacity_limit() {
        let err = parse_config(MINIMAL, &["line_rate_bps=40e9".to_string()]).unwrap_err();
        assert_eq!(err.field, "line_rate_bps");
        let err = parse_config(MINIMAL, &["upstream_capacity_words=65536".to_string()]).unwrap_err();
        assert_eq!(err.field, "upstream_capacity_words");
        let ok = parse_config(MINIMAL, &["upstream_capacity_words=65535".to_string()]).unwrap();
        assert_eq!(ok.scenario.upstream_capacity_words, 65_535);
    }

    #[test]
    fn adaptive_reserve() {
        let cfg = parse_config(
            MINIMAL,
            &[r#"reserve_policy={"mode":"Adaptive","ewma_alpha":0.5,"min_words":64}"#.to_string()],
        )
        .unwrap();
        assert_eq!(
            cfg.scenario.reserve_policy,
            ReservePolicy::adaptive(Fraction::new(1, 2).unwrap(), 64, 38_880)
        );
    }

    #[test]
    fn duplicate_alloc_id_rejected() {
        let err = parse_config(MINIMAL, &[r#"tconts.1.alloc_id=1024"#.to_string()]).unwrap_err();
        assert_eq!(err.field, "tconts[1]");
    }

    #[test]
    fn syntax_error_reported() {
        let err = parse_config("{ not json", &[]).unwrap_err();
        assert_eq!(err.field, "config");
    }

    #[test]
    fn malformed_override() {
        let err = parse_config(MINIMAL, &["mode".to_string()]).unwrap_err();
        assert!(err.message.contains("key=value"));
    }
}
