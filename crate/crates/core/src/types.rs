//! Small domain newtypes shared by every module.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Simulation time in nanoseconds.
pub type Nanos = u64;

/// Upstream capacity unit. One word is 4 bytes.
pub type Words = u32;

pub const WORD_BYTES: u32 = 4;

/// 14-bit allocation identifier of a T-CONT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct AllocId(u16);

impl AllocId {
    pub const MAX: u16 = (1 << 14) - 1;

    /// Returns `None` when `raw` does not fit in 14 bits.
    pub const fn new(raw: u16) -> Option<Self> {
        if raw <= Self::MAX {
            Some(Self(raw))
        } else {
            None
        }
    }

    /// Masks `raw` to 14 bits.
    pub const fn from_bits(raw: u16) -> Self {
        Self(raw & Self::MAX)
    }

    pub const fn get(self) -> u16 {
        self.0
    }
}

impl fmt::Display for AllocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl<'de> Deserialize<'de> for AllocId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = u16::deserialize(deserializer)?;
        AllocId::new(raw).ok_or_else(|| serde::de::Error::custom(format!("alloc_id {raw} does not fit in 14 bits")))
    }
}

impl FromStr for AllocId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let raw: u16 = s.parse().map_err(|e| format!("bad alloc_id {s:?}: {e}"))?;
        AllocId::new(raw).ok_or_else(|| format!("alloc_id {raw} does not fit in 14 bits"))
    }
}

/// Traffic class of a T-CONT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TrafficClass {
    Normal,
    LowLatency,
}

impl fmt::Display for TrafficClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrafficClass::Normal => "Normal",
            TrafficClass::LowLatency => "LowLatency",
        })
    }
}

impl FromStr for TrafficClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Normal" => Ok(TrafficClass::Normal),
            "LowLatency" => Ok(TrafficClass::LowLatency),
            other => Err(format!("unknown traffic class {other:?}")),
        }
    }
}

/// Exact non-negative rational number `num / den`.
///
/// Deserializes from either a JSON number (interpreted through its shortest
/// decimal representation, so `0.1` is exactly 1/10) or a `"num/den"` string.
/// Serializes as a `"num/den"` string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fraction {
    num: u64,
    den: u64,
}

impl Fraction {
    pub const ZERO: Fraction = Fraction { num: 0, den: 1 };
    pub const ONE: Fraction = Fraction { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Option<Self> {
        if den == 0 {
            return None;
        }
        let g = gcd(num, den);
        Some(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub fn num(self) -> u64 {
        self.num
    }

    pub fn den(self) -> u64 {
        self.den
    }

    /// `floor(self * value)`.
    pub fn mul_floor(self, value: u64) -> u64 {
        (u128::from(self.num) * u128::from(value) / u128::from(self.den)) as u64
    }

    pub fn is_zero(self) -> bool {
        self.num == 0
    }

    pub fn lt_one(self) -> bool {
        self.num < self.den
    }

    pub fn le_one(self) -> bool {
        self.num <= self.den
    }

    /// Parses a plain decimal such as `0.125` or `3` exactly.
    pub fn from_decimal(text: &str) -> Option<Self> {
        let text = text.trim();
        if text.starts_with('-') {
            return None;
        }
        let (int_part, frac_part) = match text.split_once('.') {
            Some((i, f)) => (i, f),
            None => (text, ""),
        };
        if frac_part.len() > 18 || !frac_part.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        let int: u64 = if int_part.is_empty() { 0 } else { int_part.parse().ok()? };
        let den = 10u64.checked_pow(frac_part.len() as u32)?;
        let frac: u64 = if frac_part.is_empty() {
            0
        } else {
            frac_part.parse().ok()?
        };
        let num = int.checked_mul(den)?.checked_add(frac)?;
        Fraction::new(num, den)
    }

    pub fn from_f64(value: f64) -> Option<Self> {
        if !value.is_finite() || value < 0.0 {
            return None;
        }
        // `Display` for f64 prints the shortest string that round-trips.
        Self::from_decimal(&format!("{value}"))
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a.max(1)
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Fraction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some((n, d)) = s.split_once('/') {
            let num = n.trim().parse().map_err(|_| format!("bad fraction {s:?}"))?;
            let den = d.trim().parse().map_err(|_| format!("bad fraction {s:?}"))?;
            Fraction::new(num, den).ok_or_else(|| format!("zero denominator in {s:?}"))
        } else {
            Fraction::from_decimal(s).ok_or_else(|| format!("bad fraction {s:?}"))
        }
    }
}

impl Serialize for Fraction {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Int(u64),
            Float(f64),
            Text(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Int(v) => Ok(Fraction { num: v, den: 1 }),
            Repr::Float(v) => {
                Fraction::from_f64(v).ok_or_else(|| serde::de::Error::custom(format!("invalid fraction {v}")))
            }
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}
