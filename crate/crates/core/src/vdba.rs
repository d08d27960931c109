//! Host-resident virtual DBA.
//!
//! Reports for Normal-class T-CONTs are collected per cycle (one cycle per
//! downstream frame) and turned into a BWMAP that leaves the tail of the
//! upstream frame unallocated for the dataplane fast path.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{AllocFlags, AllocationStructure, DbruReport};
use crate::types::{AllocId, Fraction, TrafficClass, Words};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VdbaError {
    #[error("alloc_id {0} is not registered")]
    UnknownAllocId(AllocId),
    #[error("alloc_id {0} is a low-latency T-CONT and must not reach the host scheduler")]
    WrongClass(AllocId),
    #[error("invalid registry: {0}")]
    InvalidRegistry(String),
    #[error("invalid reserve policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcontInfo {
    pub class: TrafficClass,
    pub onu_id: u32,
    pub weight: u32,
}

/// Provisioned T-CONTs keyed by Alloc-ID. Iteration is in ascending Alloc-ID order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TcontRegistry {
    entries: BTreeMap<AllocId, TcontInfo>,
}

impl TcontRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, alloc_id: AllocId, info: TcontInfo) -> Result<(), VdbaError> {
        if info.weight == 0 {
            return Err(VdbaError::InvalidRegistry(format!(
                "alloc_id {alloc_id} has zero weight"
            )));
        }
        if self.entries.insert(alloc_id, info).is_some() {
            return Err(VdbaError::InvalidRegistry(format!(
                "alloc_id {alloc_id} registered twice"
            )));
        }
        Ok(())
    }

    /// Builder-style insert for tests and hand-built scenarios.
    pub fn with(mut self, alloc_id: AllocId, class: TrafficClass, onu_id: u32, weight: u32) -> Self {
        self.insert(alloc_id, TcontInfo { class, onu_id, weight })
            .expect("valid registry entry");
        self
    }

    pub fn get(&self, alloc_id: AllocId) -> Option<&TcontInfo> {
        self.entries.get(&alloc_id)
    }

    pub fn class_of(&self, alloc_id: AllocId) -> Option<TrafficClass> {
        self.entries.get(&alloc_id).map(|i| i.class)
    }

    pub fn iter(&self) -> impl Iterator<Item = (AllocId, &TcontInfo)> {
        self.entries.iter().map(|(id, info)| (*id, info))
    }

    pub fn ids_of(&self, class: TrafficClass) -> impl Iterator<Item = AllocId> + '_ {
        self.entries
            .iter()
            .filter(move |(_, info)| info.class == class)
            .map(|(id, _)| *id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReserveMode {
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReservePolicy {
    pub mode: ReserveMode,
    pub fixed_fraction: Fraction,
    pub ewma_alpha: Fraction,
    pub min_words: Words,
    pub max_words: Words,
}

impl ReservePolicy {
    pub fn fixed(fraction: Fraction, capacity_words: Words) -> Self {
        Self {
            mode: ReserveMode::Fixed,
            fixed_fraction: fraction,
            ewma_alpha: Fraction::ONE,
            min_words: 0,
            max_words: capacity_words,
        }
    }

    pub fn adaptive(alpha: Fraction, min_words: Words, max_words: Words) -> Self {
        Self {
            mode: ReserveMode::Adaptive,
            fixed_fraction: Fraction::ZERO,
            ewma_alpha: alpha,
            min_words,
            max_words,
        }
    }

    pub fn validate(&self, capacity_words: Words) -> Result<(), VdbaError> {
        if !self.fixed_fraction.lt_one() {
            return Err(VdbaError::InvalidPolicy(format!(
                "fixed_fraction {} must be in [0, 1)",
                self.fixed_fraction
            )));
        }
        if self.ewma_alpha.is_zero() || !self.ewma_alpha.le_one() {
            return Err(VdbaError::InvalidPolicy(format!(
                "ewma_alpha {} must be in (0, 1]",
                self.ewma_alpha
            )));
        }
        if self.min_words > self.max_words {
            return Err(VdbaError::InvalidPolicy(format!(
                "min_words {} exceeds max_words {}",
                self.min_words, self.max_words
            )));
        }
        if self.max_words > capacity_words {
            return Err(VdbaError::InvalidPolicy(format!(
                "max_words {} exceeds frame capacity {capacity_words}",
                self.max_words
            )));
        }
        Ok(())
    }
}

/// Which classes the host accepts reports for.
///
/// With the fast path active, low-latency reports reaching the host indicate a
/// classification bug. With the fast path disabled the host schedules every class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HostScope {
    NormalOnly,
    AllClasses,
}

/// Fixed-point scale of the demand EWMA (16 fractional bits).
const EWMA_ONE: u128 = 1 << 16;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CycleState {
    pending_reports: BTreeMap<AllocId, Words>,
    cycle_seq: u64,
    /// Q48.16 words.
    reserve_demand_ewma: u64,
}

impl CycleState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `report` for the current cycle; a later report for the same
    /// Alloc-ID replaces an earlier one.
    pub fn ingest_report(
        &mut self,
        report: &DbruReport,
        registry: &TcontRegistry,
        scope: HostScope,
    ) -> Result<(), VdbaError> {
        let class = registry
            .class_of(report.alloc_id)
            .ok_or(VdbaError::UnknownAllocId(report.alloc_id))?;
        if scope == HostScope::NormalOnly && class != TrafficClass::Normal {
            return Err(VdbaError::WrongClass(report.alloc_id));
        }
        self.pending_reports.insert(report.alloc_id, report.occupancy_words);
        Ok(())
    }

    pub fn pending(&self) -> &BTreeMap<AllocId, Words> {
        &self.pending_reports
    }

    pub fn cycle_seq(&self) -> u64 {
        self.cycle_seq
    }

    /// Clears the pending reports and advances to the next cycle.
    pub fn close_cycle(&mut self) {
        self.pending_reports.clear();
        self.cycle_seq += 1;
    }

    /// Folds one frame's fast-path demand into the reserve EWMA.
    pub fn observe_fast_path_demand(&mut self, words: Words, policy: &ReservePolicy) {
        let alpha = policy.ewma_alpha;
        let num = u128::from(alpha.num());
        let den = u128::from(alpha.den());
        let sample = u128::from(words) * EWMA_ONE;
        let old = u128::from(self.reserve_demand_ewma);
        let next = (num * sample + (den - num) * old) / den;
        self.reserve_demand_ewma = next.min(u128::from(u64::MAX)) as u64;
    }

    pub fn reserve_demand_ewma(&self) -> f64 {
        self.reserve_demand_ewma as f64 / EWMA_ONE as f64
    }

    fn reserve_demand_ewma_ceil(&self) -> u64 {
        (u128::from(self.reserve_demand_ewma).div_ceil(EWMA_ONE)) as u64
    }
}

/// Size of the unallocated tail region for the next BWMAP.
pub fn reserved_words(policy: &ReservePolicy, state: &CycleState, capacity_words: Words) -> Words {
    let raw = match policy.mode {
        ReserveMode::Fixed => policy.fixed_fraction.mul_floor(u64::from(capacity_words)),
        ReserveMode::Adaptive => state.reserve_demand_ewma_ceil(),
    };
    raw.clamp(u64::from(policy.min_words), u64::from(policy.max_words)) as Words
}

/// Weighted proportional share with iterative redistribution.
///
/// Every pass hands each still-unsatisfied T-CONT `floor(leftover * w / W)`
/// words (capped at its outstanding demand), W summing the weights of the
/// unsatisfied set. When a pass can hand out nothing, the remaining words go
/// one at a time to unsatisfied T-CONTs in ascending Alloc-ID order.
/// Grants are packed contiguously from word 0 in Alloc-ID order and carry the
/// DBRu flag; zero grants are omitted.
pub fn compute_bwmap(
    state: &CycleState,
    registry: &TcontRegistry,
    capacity_words: Words,
    reserve: Words,
) -> Vec<AllocationStructure> {
    let grantable = u64::from(capacity_words.saturating_sub(reserve));
    let demands: Vec<(AllocId, u64, u64)> = state
        .pending_reports
        .iter()
        .filter(|(_, occ)| **occ > 0)
        .filter_map(|(id, occ)| {
            registry
                .get(*id)
                .map(|info| (*id, u64::from(*occ), u64::from(info.weight)))
        })
        .collect();
    let mut grants = vec![0u64; demands.len()];
    let mut leftover = grantable;

    loop {
        let active: Vec<usize> = (0..demands.len()).filter(|&i| grants[i] < demands[i].1).collect();
        if active.is_empty() || leftover == 0 {
            break;
        }
        let weight_sum: u64 = active.iter().map(|&i| demands[i].2).sum();
        let mut given = 0;
        for &i in &active {
            let share = (u128::from(leftover) * u128::from(demands[i].2) / u128::from(weight_sum)) as u64;
            let g = share.min(demands[i].1 - grants[i]);
            grants[i] += g;
            given += g;
        }
        if given == 0 {
            for &i in &active {
                if leftover == 0 {
                    break;
                }
                grants[i] += 1;
                leftover -= 1;
            }
        } else {
            leftover -= given;
        }
    }

    pack(demands.iter().map(|d| d.0).zip(grants), AllocFlags::DBRU)
}

/// Static equal split of the whole frame across every registered Alloc-ID,
/// remainder words to the lowest Alloc-IDs. Independent of reports.
pub fn compute_fixed_bwmap(registry: &TcontRegistry, capacity_words: Words) -> Vec<AllocationStructure> {
    let n = registry.len() as u64;
    if n == 0 {
        return Vec::new();
    }
    let base = u64::from(capacity_words) / n;
    let extra = u64::from(capacity_words) % n;
    let sizes = registry
        .iter()
        .enumerate()
        .map(|(rank, (id, _))| (id, base + u64::from((rank as u64) < extra)));
    pack(sizes, AllocFlags::NONE)
}

fn pack(grants: impl Iterator<Item = (AllocId, u64)>, flags: AllocFlags) -> Vec<AllocationStructure> {
    let mut start = 0u64;
    let mut out = Vec::new();
    for (id, size) in grants {
        if size == 0 {
            continue;
        }
        out.push(AllocationStructure::new(id, flags, start as u16, size as u16));
        start += size;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(raw: u16) -> AllocId {
        AllocId::new(raw).unwrap()
    }

    fn report(raw: u16, occ: Words) -> DbruReport {
        DbruReport {
            alloc_id: id(raw),
            occupancy_words: occ,
            created_at_ns: 0,
        }
    }

    fn normal_registry(ids: &[u16]) -> TcontRegistry {
        ids.iter().fold(TcontRegistry::new(), |r, &raw| {
            r.with(id(raw), TrafficClass::Normal, u32::from(raw), 1)
        })
    }

    #[test]
    fn latest_report_wins() {
        let reg = normal_registry(&[7]);
        let mut st = CycleState::new();
        st.ingest_report(&report(7, 10), &reg, HostScope::NormalOnly).unwrap();
        st.ingest_report(&report(7, 30), &reg, HostScope::NormalOnly).unwrap();
        assert_eq!(st.pending()[&id(7)], 30);
    }

    #[test]
    fn unknown_and_wrong_class() {
        let reg = normal_registry(&[7]).with(id(9000), TrafficClass::LowLatency, 1, 1);
        let mut st = CycleState::new();
        assert_eq!(
            st.ingest_report(&report(999, 1), &reg, HostScope::NormalOnly),
            Err(VdbaError::UnknownAllocId(id(999)))
        );
        assert_eq!(
            st.ingest_report(&report(9000, 1), &reg, HostScope::NormalOnly),
            Err(VdbaError::WrongClass(id(9000)))
        );
        assert!(st.ingest_report(&report(9000, 1), &reg, HostScope::AllClasses).is_ok());
        assert!(st.pending().contains_key(&id(9000)));
    }

    #[test]
    fn close_cycle_clears_pending() {
        let reg = normal_registry(&[7]);
        let mut st = CycleState::new();
        st.ingest_report(&report(7, 10), &reg, HostScope::NormalOnly).unwrap();
        st.close_cycle();
        assert!(st.pending().is_empty());
        assert_eq!(st.cycle_seq(), 1);
    }

    #[test]
    fn fixed_reserve_fraction() {
        let policy = ReservePolicy::fixed(Fraction::from_f64(0.1).unwrap(), 38880);
        assert_eq!(reserved_words(&policy, &CycleState::new(), 38880), 3888);
    }

    #[test]
    fn fixed_reserve_zero_fraction_hits_min() {
        let mut policy = ReservePolicy::fixed(Fraction::ZERO, 38880);
        policy.min_words = 128;
        assert_eq!(reserved_words(&policy, &CycleState::new(), 38880), 128);
    }

    #[test]
    fn adaptive_alpha_one_tracks_last_frame() {
        let policy = ReservePolicy::adaptive(Fraction::ONE, 0, 38880);
        let mut st = CycleState::new();
        st.observe_fast_path_demand(500, &policy);
        assert_eq!(reserved_words(&policy, &st, 38880), 500);
    }

    #[test]
    fn adaptive_ewma_rounds_up_and_clamps() {
        let policy = ReservePolicy::adaptive(Fraction::new(1, 2).unwrap(), 10, 400);
        let mut st = CycleState::new();
        assert_eq!(reserved_words(&policy, &st, 38880), 10);
        st.observe_fast_path_demand(101, &policy);
        // 50.5 -> 51
        assert_eq!(reserved_words(&policy, &st, 38880), 51);
        st.observe_fast_path_demand(5000, &policy);
        assert_eq!(reserved_words(&policy, &st, 38880), 400);
    }

    #[test]
    fn policy_validation() {
        let mut p = ReservePolicy::adaptive(Fraction::ONE, 0, 100);
        assert!(p.validate(100).is_ok());
        p.max_words = 101;
        assert!(p.validate(100).is_err());
        p.max_words = 50;
        p.min_words = 60;
        assert!(p.validate(100).is_err());
        let q = ReservePolicy::adaptive(Fraction::ZERO, 0, 100);
        assert!(q.validate(100).is_err());
        let f = ReservePolicy::fixed(Fraction::ONE, 100);
        assert!(f.validate(100).is_err());
    }

    #[test]
    fn empty_pending_gives_empty_bwmap() {
        let reg = normal_registry(&[100, 200]);
        assert!(compute_bwmap(&CycleState::new(), &reg, 38880, 3888).is_empty());
    }

    #[test]
    fn under_demand_fully_granted() {
        let reg = normal_registry(&[100, 200]);
        let mut st = CycleState::new();
        st.ingest_report(&report(100, 5000), &reg, HostScope::NormalOnly)
            .unwrap();
        st.ingest_report(&report(200, 5000), &reg, HostScope::NormalOnly)
            .unwrap();
        let map = compute_bwmap(&st, &reg, 38880, 3888);
        assert_eq!(
            map,
            vec![
                AllocationStructure::new(id(100), AllocFlags::DBRU, 0, 5000),
                AllocationStructure::new(id(200), AllocFlags::DBRU, 5000, 5000),
            ]
        );
    }

    #[test]
    fn over_demand_split_equally() {
        let reg = normal_registry(&[100, 200]);
        let mut st = CycleState::new();
        st.ingest_report(&report(100, 30000), &reg, HostScope::NormalOnly)
            .unwrap();
        st.ingest_report(&report(200, 30000), &reg, HostScope::NormalOnly)
            .unwrap();
        let map = compute_bwmap(&st, &reg, 38880, 3888);
        assert_eq!(
            map,
            vec![
                AllocationStructure::new(id(100), AllocFlags::DBRU, 0, 17496),
                AllocationStructure::new(id(200), AllocFlags::DBRU, 17496, 17496),
            ]
        );
    }

    #[test]
    fn leftover_goes_to_hungry_tconts() {
        let reg = normal_registry(&[1, 2, 3]);
        let mut st = CycleState::new();
        st.ingest_report(&report(1, 10), &reg, HostScope::NormalOnly).unwrap();
        st.ingest_report(&report(2, 1000), &reg, HostScope::NormalOnly).unwrap();
        st.ingest_report(&report(3, 1000), &reg, HostScope::NormalOnly).unwrap();
        let map = compute_bwmap(&st, &reg, 301, 0);
        let sizes: Vec<u16> = map.iter().map(|a| a.grant_size).collect();
        // 100 each, 91 left for {2,3}: 45 each, last word to the lower id.
        assert_eq!(sizes, vec![10, 146, 145]);
        assert_eq!(sizes.iter().map(|&s| u32::from(s)).sum::<u32>(), 301);
    }

    #[test]
    fn fixed_split_four_ways() {
        let reg = normal_registry(&[1, 2, 3, 4]);
        let map = compute_fixed_bwmap(&reg, 38880);
        let layout: Vec<(u16, u16)> = map.iter().map(|a| (a.start_time, a.grant_size)).collect();
        assert_eq!(layout, vec![(0, 9720), (9720, 9720), (19440, 9720), (29160, 9720)]);
    }

    #[test]
    fn fixed_split_single_and_remainder() {
        let one = compute_fixed_bwmap(&normal_registry(&[5]), 38880);
        assert_eq!(one, vec![AllocationStructure::new(id(5), AllocFlags::NONE, 0, 38880)]);
        let three = compute_fixed_bwmap(&normal_registry(&[1, 2, 3]), 10);
        let sizes: Vec<u16> = three.iter().map(|a| a.grant_size).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
    }

    #[test]
    fn fixed_split_covers_both_classes() {
        let reg = normal_registry(&[1]).with(id(2), TrafficClass::LowLatency, 1, 1);
        assert_eq!(compute_fixed_bwmap(&reg, 100).len(), 2);
    }
}
