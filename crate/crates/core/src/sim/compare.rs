use std::thread;

use serde::{Deserialize, Serialize};

use super::{run, ConfigError, RunStats, Scenario, SchedulingMode};
use crate::metrics::{Summary, SUMMARY_SCHEMA_VERSION};
use crate::types::TrafficClass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRun {
    pub mode: SchedulingMode,
    pub stats: RunStats,
    pub summary: Summary,
}

/// Mean grant latency of `mode` against the baseline; positive when `mode`
/// is faster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub mode: SchedulingMode,
    pub class: TrafficClass,
    pub baseline_mean_ns: Option<f64>,
    pub mean_ns: Option<f64>,
    pub delta_mean_ns: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub baseline: SchedulingMode,
    pub runs: Vec<ModeRun>,
    pub deltas: Vec<ClassDelta>,
}

impl ComparisonReport {
    pub fn run(&self, mode: SchedulingMode) -> Option<&ModeRun> {
        self.runs.iter().find(|r| r.mode == mode)
    }

    pub fn delta(&self, mode: SchedulingMode, class: TrafficClass) -> Option<&ClassDelta> {
        self.deltas.iter().find(|d| d.mode == mode && d.class == class)
    }
}

/// Runs every scenario (concurrently) and reports per-class mean grant
/// latency deltas against the first one. The scenarios must differ only in
/// their mode.
pub fn compare(scenarios: &[Scenario]) -> Result<ComparisonReport, ConfigError> {
    let Some(base) = scenarios.first() else {
        return Err(ConfigError::new("scenarios", "at least one scenario is required"));
    };
    for (i, sc) in scenarios.iter().enumerate() {
        sc.validate()?;
        if sc.with_mode(base.mode) != *base {
            return Err(ConfigError::new(
                format!("scenarios[{i}]"),
                "differs from scenarios[0] in a field other than mode",
            ));
        }
    }
    let reports = thread::scope(|s| {
        let handles: Vec<_> = scenarios.iter().map(|sc| s.spawn(move || run(sc))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let runs: Vec<ModeRun> = reports
        .into_iter()
        .map(|r| ModeRun {
            mode: r.stats.mode,
            summary: r.summary(),
            stats: r.stats,
        })
        .collect();

    let mean = |run: &ModeRun, class| run.summary.class(class).and_then(|g| g.grant_latency.mean_ns);
    let mut deltas = Vec::new();
    for run in &runs {
        for class in [TrafficClass::Normal, TrafficClass::LowLatency] {
            let baseline_mean_ns = mean(&runs[0], class);
            let mean_ns = mean(run, class);
            if baseline_mean_ns.is_none() && mean_ns.is_none() {
                continue;
            }
            deltas.push(ClassDelta {
                mode: run.mode,
                class,
                baseline_mean_ns,
                mean_ns,
                delta_mean_ns: baseline_mean_ns.zip(mean_ns).map(|(b, m)| b - m),
            });
        }
    }
    Ok(ComparisonReport {
        schema_version: SUMMARY_SCHEMA_VERSION,
        baseline: base.mode,
        runs,
        deltas,
    })
}
