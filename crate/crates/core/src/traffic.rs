//! DBRu arrival processes for Normal and low-latency T-CONTs.
//!
//! Every T-CONT owns a ChaCha8 generator seeded from the scenario seed with
//! the Alloc-ID as its stream number, so per-T-CONT sequences are
//! decorrelated and reproducible. Sampling is spelled out below so that other
//! implementations can regenerate identical streams:
//!
//! * `u = (next_u64 >> 11) * 2^-53`
//! * Poisson inter-arrival: `round(-ln(1 - u) / rate * 1e9)` ns, at least 1 ns
//! * `UniformInt { lo, hi }`: `lo + next_u64 % (hi - lo + 1)`
//!
//! Poisson draws the gap first, then the size.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::MAX_OCCUPANCY_WORDS;
use crate::types::{AllocId, Nanos, Words};

pub const RNG_ALGORITHM: &str =
    "ChaCha8 (rand_chacha 0.3, seed_from_u64(seed), stream = alloc_id); u = (next_u64 >> 11) * 2^-53; \
     poisson gap = round(-ln(1-u)/rate s); uniform = lo + next_u64 % (hi-lo+1)";

#[derive(Debug, Error, PartialEq)]
pub enum TrafficError {
    #[error("invalid arrival process: {0}")]
    InvalidProcess(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum ArrivalKind {
    Poisson {
        rate_per_s: f64,
    },
    Cbr {
        interval_ns: Nanos,
    },
    /// Arrivals at multiples of `interval_ns` that fall in the first `on_ns`
    /// of every `on_ns + off_ns` period (periods start at t = 0).
    OnOff {
        on_ns: Nanos,
        off_ns: Nanos,
        interval_ns: Nanos,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum SizeDist {
    Fixed { words: Words },
    UniformInt { lo: Words, hi: Words },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalProcess {
    pub kind: ArrivalKind,
    pub size: SizeDist,
    /// Overrides the scenario seed for this T-CONT.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// One generated arrival: `words` join the T-CONT buffer at `at_ns`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arrival {
    pub at_ns: Nanos,
    pub words: Words,
}

#[derive(Debug, Clone)]
pub struct TrafficRng(ChaCha8Rng);

impl TrafficRng {
    pub fn new(seed: u64, alloc_id: AllocId) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(alloc_id.get()));
        Self(rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn next_unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl ArrivalProcess {
    pub fn cbr(interval_ns: Nanos, words: Words) -> Self {
        Self {
            kind: ArrivalKind::Cbr { interval_ns },
            size: SizeDist::Fixed { words },
            seed: None,
        }
    }

    pub fn poisson(rate_per_s: f64, size: SizeDist) -> Self {
        Self {
            kind: ArrivalKind::Poisson { rate_per_s },
            size,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrafficError> {
        match self.kind {
            ArrivalKind::Poisson { rate_per_s } => {
                if !(rate_per_s.is_finite() && rate_per_s > 0.0) {
                    return Err(TrafficError::InvalidProcess(format!(
                        "rate_per_s must be positive, got {rate_per_s}"
                    )));
                }
            }
            ArrivalKind::Cbr { interval_ns } => {
                if interval_ns == 0 {
                    return Err(TrafficError::InvalidProcess("interval_ns must be positive".into()));
                }
            }
            ArrivalKind::OnOff { on_ns, interval_ns, .. } => {
                if interval_ns == 0 || on_ns == 0 {
                    return Err(TrafficError::InvalidProcess(
                        "on_ns and interval_ns must be positive".into(),
                    ));
                }
            }
        }
        let (lo, hi) = match self.size {
            SizeDist::Fixed { words } => (words, words),
            SizeDist::UniformInt { lo, hi } => (lo, hi),
        };
        if lo == 0 || lo > hi || hi > MAX_OCCUPANCY_WORDS {
            return Err(TrafficError::InvalidProcess(format!(
                "sizes must satisfy 1 <= lo <= hi < 2^24, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    /// Next arrival strictly after `now_ns`.
    pub fn next_event(&self, rng: &mut TrafficRng, now_ns: Nanos) -> Arrival {
        let at_ns = match self.kind {
            ArrivalKind::Poisson { rate_per_s } => {
                let u = rng.next_unit();
                let gap = (-(1.0 - u).ln() / rate_per_s * 1e9).round() as Nanos;
                now_ns + gap.max(1)
            }
            ArrivalKind::Cbr { interval_ns } => (now_ns / interval_ns + 1) * interval_ns,
            ArrivalKind::OnOff {
                on_ns,
                off_ns,
                interval_ns,
            } => next_on_off(now_ns, on_ns, off_ns, interval_ns),
        };
        let words = match self.size {
            SizeDist::Fixed { words } => words,
            SizeDist::UniformInt { lo, hi } => {
                let span = u64::from(hi - lo) + 1;
                lo + (rng.next_u64() % span) as Words
            }
        };
        Arrival { at_ns, words }
    }
}

fn next_on_off(now_ns: Nanos, on_ns: Nanos, off_ns: Nanos, interval_ns: Nanos) -> Nanos {
    let period = on_ns + off_ns;
    let mut t = (now_ns / interval_ns + 1) * interval_ns;
    // Phase 0 of some period is always a multiple of interval_ns, so this ends.
    while t % period >= on_ns {
        let next_period = (t / period + 1) * period;
        t = next_period.div_ceil(interval_ns) * interval_ns;
    }
    t
}

/// Stateful per-T-CONT generator.
#[derive(Debug, Clone)]
pub struct TrafficSource {
    pub alloc_id: AllocId,
    process: ArrivalProcess,
    rng: TrafficRng,
    now_ns: Nanos,
}

impl TrafficSource {
    pub fn new(alloc_id: AllocId, process: ArrivalProcess, scenario_seed: u64) -> Self {
        let seed = process.seed.unwrap_or(scenario_seed);
        Self {
            alloc_id,
            process,
            rng: TrafficRng::new(seed, alloc_id),
            now_ns: 0,
        }
    }

    pub fn next_arrival(&mut self) -> Arrival {
        let a = self.process.next_event(&mut self.rng, self.now_ns);
        self.now_ns = a.at_ns;
        a
    }
}
