//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use vpon_core::codec::{AllocFlags, AllocationStructure, DbruReport, DownstreamFrame, MAX_BWMAP_LEN};
use vpon_core::intercept::{MergeOutcome, PendingEntry, PendingQueue};
use vpon_core::{AllocId, Words};

pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform in `lo..=hi`.
    pub fn range(&mut self, lo: u64, hi: u64) -> u64 {
        lo + self.0.next_u64() % (hi - lo + 1)
    }

    pub fn chance(&mut self, percent: u64) -> bool {
        self.range(0, 99) < percent
    }
}

/// Weighted proportional share written out directly from its definition,
/// with exact rational shares: each round, every unsatisfied T-CONT may take
/// `leftover * w / W` (rounded down, capped by what it still needs); a round
/// that hands out nothing gives single words in Alloc-ID order instead.
pub fn reference_allocation(demands: &BTreeMap<AllocId, (u64, u64)>, grantable: u64) -> BTreeMap<AllocId, u64> {
    let mut granted: BTreeMap<AllocId, u64> = demands.keys().map(|k| (*k, 0)).collect();
    let mut leftover = grantable;
    loop {
        let hungry: Vec<AllocId> = demands
            .iter()
            .filter(|(id, (need, _))| granted[*id] < *need)
            .map(|(id, _)| *id)
            .collect();
        if hungry.is_empty() || leftover == 0 {
            return granted;
        }
        let total_weight: u64 = hungry.iter().map(|id| demands[id].1).sum();
        let round: Vec<(AllocId, u64)> = hungry
            .iter()
            .map(|id| {
                let (need, w) = demands[id];
                let share = leftover * w / total_weight;
                (*id, share.min(need - granted[id]))
            })
            .collect();
        let handed: u64 = round.iter().map(|r| r.1).sum();
        if handed > 0 {
            for (id, g) in round {
                *granted.get_mut(&id).unwrap() += g;
            }
            leftover -= handed;
        } else {
            for id in hungry {
                if leftover == 0 {
                    break;
                }
                *granted.get_mut(&id).unwrap() += 1;
                leftover -= 1;
            }
        }
    }
}

/// Random host BWMAP that stays below `limit`, sorted by start time.
pub fn random_host_bwmap(rng: &mut Rng, limit: Words) -> Vec<AllocationStructure> {
    let n = rng.range(0, 8);
    let mut cursor = 0u64;
    let mut out = Vec::new();
    for _ in 0..n {
        if cursor >= u64::from(limit) {
            break;
        }
        let room = u64::from(limit) - cursor;
        let gap = rng.range(0, room.min(50));
        if gap >= room {
            break;
        }
        let size = rng.range(1, (room - gap).min(3000));
        out.push(AllocationStructure::new(
            AllocId::new(rng.range(0, 2000) as u16).unwrap(),
            AllocFlags::DBRU,
            (cursor + gap) as u16,
            size as u16,
        ));
        cursor += gap + size;
    }
    out
}

pub fn random_queue(rng: &mut Rng, max_len: u64, max_words: u64) -> PendingQueue {
    let mut q = PendingQueue::new(64);
    for _ in 0..rng.range(0, max_len) {
        let report = DbruReport {
            alloc_id: AllocId::new(rng.range(9000, 9010) as u16).unwrap(),
            occupancy_words: rng.range(1, max_words) as Words,
            created_at_ns: 0,
        };
        q.intercept(&report, 0).unwrap();
    }
    q
}

/// Checks every merge invariant; returns a description of the first failure.
pub fn check_merge(
    before: &DownstreamFrame,
    queue_before: &[PendingEntry],
    out: &MergeOutcome,
    queue_after: &[PendingEntry],
    capacity: Words,
    reserve: Words,
) -> Result<(), String> {
    let n = before.bwmap.len();
    let bwmap = &out.frame.bwmap;
    if bwmap.len() < n || bwmap[..n] != before.bwmap[..] {
        return Err("host prefix changed".into());
    }
    if usize::from(out.frame.hlend.bwmap_len) != bwmap.len() {
        return Err("HLend does not match BWMAP length".into());
    }
    out.frame
        .validate(capacity)
        .map_err(|e| format!("merged frame invalid: {e}"))?;
    if bwmap.len() > MAX_BWMAP_LEN {
        return Err("BWMAP too long".into());
    }
    let added = &bwmap[n..];
    if added.len() != out.appended {
        return Err("appended count mismatch".into());
    }
    let region = capacity - reserve;
    let mut cursor = region;
    for g in added {
        if u32::from(g.start_time) != cursor || g.grant_size == 0 || !g.flags.dbru_requested() {
            return Err(format!("fast grant {g:?} not packed from {cursor}"));
        }
        cursor += u32::from(g.grant_size);
    }
    let total: u32 = added.iter().map(|g| u32::from(g.grant_size)).sum();
    if total > reserve || total != out.merged_words {
        return Err(format!("granted {total} words with reserve {reserve}"));
    }
    // FIFO conservation: grants consume the queue front to back.
    let mut expected: Vec<(AllocId, Words)> = queue_before.iter().map(|e| (e.alloc_id, e.remaining_words)).collect();
    for g in added {
        let Some(head) = expected.first_mut() else {
            return Err("grant without a queued request".into());
        };
        if head.0 != g.alloc_id || u32::from(g.grant_size) > head.1 {
            return Err(format!("grant {g:?} does not match queue head {head:?}"));
        }
        head.1 -= u32::from(g.grant_size);
        if head.1 == 0 {
            expected.remove(0);
        }
    }
    let after: Vec<(AllocId, Words)> = queue_after.iter().map(|e| (e.alloc_id, e.remaining_words)).collect();
    if after != expected {
        return Err("queue remainder does not conserve requested words".into());
    }
    let slots_left = bwmap.len() < MAX_BWMAP_LEN;
    if !after.is_empty() && slots_left && total != reserve {
        return Err("reserve left idle while requests wait".into());
    }
    if u64::from(out.ops) > 4 * out.appended as u64 + 2 {
        return Err(format!("{} ops for {} grants", out.ops, out.appended));
    }
    Ok(())
}
