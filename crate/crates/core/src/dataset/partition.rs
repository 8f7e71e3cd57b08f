use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DatasetError;
use crate::fkd::Label;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePartition {
    pub stage1_videos: BTreeSet<String>,
    pub stage23_videos: BTreeSet<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage23Split {
    pub stage2_videos: BTreeSet<String>,
    pub stage3_videos: BTreeSet<String>,
    pub fraction: f64,
    pub seed: u64,
}

/// Hex SHA-256 over the sorted ids, one per line.
pub fn partition_digest(ids: &BTreeSet<String>) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Per-label quotas summing to `count`, proportional to the label sizes and
/// rounded by largest remainder.
fn quotas(by_label: &BTreeMap<Label, Vec<&str>>, count: usize, total: usize) -> BTreeMap<Label, usize> {
    let mut out: BTreeMap<Label, usize> = BTreeMap::new();
    let mut remainders = Vec::new();
    for (label, ids) in by_label {
        let exact = count * ids.len();
        out.insert(*label, exact / total);
        remainders.push((exact % total, *label));
    }
    let assigned: usize = out.values().sum();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, label) in remainders.into_iter().take(count - assigned) {
        *out.get_mut(&label).unwrap() += 1;
    }
    out
}

fn stratified_take(
    inventory: &[(String, Label)],
    count: usize,
    seed: u64,
) -> Result<(BTreeSet<String>, BTreeSet<String>), DatasetError> {
    let mut by_label: BTreeMap<Label, Vec<&str>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (id, label) in inventory {
        if !seen.insert(id.as_str()) {
            return Err(DatasetError::DuplicateVideo(id.clone()));
        }
        by_label.entry(*label).or_default().push(id);
    }
    let quotas = if inventory.is_empty() { BTreeMap::new() } else { quotas(&by_label, count, inventory.len()) };
    let mut taken = BTreeSet::new();
    let mut rest = BTreeSet::new();
    for (label, ids) in &mut by_label {
        ids.sort_unstable();
        let salt = match label {
            Label::Real => 0x5245_414c,
            Label::Fake => 0x4641_4b45,
        };
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ salt));
        let q = quotas[label];
        taken.extend(ids[..q].iter().map(|s| s.to_string()));
        rest.extend(ids[q..].iter().map(|s| s.to_string()));
    }
    Ok((taken, rest))
}

/// Splits videos into a Stage-1 set of `stage1_count` and the remainder,
/// preserving the real/fake ratio.
pub fn partition_stages(
    inventory: &[(String, Label)],
    stage1_count: usize,
    seed: u64,
) -> Result<StagePartition, DatasetError> {
    if stage1_count >= inventory.len() {
        return Err(DatasetError::CountTooLarge { requested: stage1_count, available: inventory.len() });
    }
    let (stage1_videos, stage23_videos) = stratified_take(inventory, stage1_count, seed)?;
    Ok(StagePartition { stage1_videos, stage23_videos, seed })
}

/// Splits the Stage-2/3 pool; `stage2_fraction` of the videos (rounded)
/// go to Stage 2.
pub fn split_stage23(pool: &[(String, Label)], stage2_fraction: f64, seed: u64) -> Result<Stage23Split, DatasetError> {
    if !(0.0..=1.0).contains(&stage2_fraction) {
        return Err(DatasetError::BadFraction(stage2_fraction));
    }
    let count = (stage2_fraction * pool.len() as f64).round() as usize;
    let (stage2_videos, stage3_videos) = stratified_take(pool, count, seed.wrapping_add(1))?;
    Ok(Stage23Split { stage2_videos, stage3_videos, fraction: stage2_fraction, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inventory(real: usize, fake: usize) -> Vec<(String, Label)> {
        (0..real)
            .map(|i| (format!("r{i:04}"), Label::Real))
            .chain((0..fake).map(|i| (format!("f{i:04}"), Label::Fake)))
            .collect()
    }

    #[test]
    fn reference_split() {
        let inv = inventory(700, 2800);
        let p = partition_stages(&inv, 2500, 42).unwrap();
        assert_eq!(p.stage1_videos.len(), 2500);
        assert_eq!(p.stage23_videos.len(), 1000);
        let real1 = p.stage1_videos.iter().filter(|v| v.starts_with('r')).count();
        assert_eq!(real1, 500);
        assert_eq!(partition_stages(&inv, 2500, 42).unwrap(), p);
        assert_ne!(partition_stages(&inv, 2500, 43).unwrap(), p);
    }

    #[test]
    fn count_too_large() {
        let inv = inventory(500, 3000);
        assert!(matches!(partition_stages(&inv, 3500, 0), Err(DatasetError::CountTooLarge { .. })));
    }

    #[test]
    fn duplicates_rejected() {
        let mut inv = inventory(2, 2);
        inv.push(("r0000".into(), Label::Real));
        assert!(matches!(partition_stages(&inv, 1, 0), Err(DatasetError::DuplicateVideo(_))));
    }

    #[test]
    fn input_order_does_not_matter() {
        let inv = inventory(30, 70);
        let mut rev = inv.clone();
        rev.reverse();
        assert_eq!(partition_stages(&inv, 40, 9).unwrap(), partition_stages(&rev, 40, 9).unwrap());
    }

    #[test]
    fn stage23_split() {
        let inv = inventory(200, 800);
        let s = split_stage23(&inv, 0.5, 1).unwrap();
        assert_eq!(s.stage2_videos.len(), 500);
        assert!(s.stage2_videos.is_disjoint(&s.stage3_videos));
        assert!(split_stage23(&inv, 1.5, 1).is_err());
        assert_eq!(split_stage23(&inv, 1.0, 1).unwrap().stage3_videos.len(), 0);
    }

    proptest! {
        #[test]
        fn disjoint_cover_stratified(real in 0usize..60, fake in 0usize..60, frac in 0.0f64..1.0, seed in any::<u64>()) {
            let inv = inventory(real, fake);
            prop_assume!(!inv.is_empty());
            let count = ((inv.len() - 1) as f64 * frac) as usize;
            let p = partition_stages(&inv, count, seed).unwrap();
            prop_assert!(p.stage1_videos.is_disjoint(&p.stage23_videos));
            let union: BTreeSet<String> = p.stage1_videos.union(&p.stage23_videos).cloned().collect();
            let all: BTreeSet<String> = inv.iter().map(|(v, _)| v.clone()).collect();
            prop_assert_eq!(union, all);
            prop_assert_eq!(p.stage1_videos.len(), count);
            let real1 = p.stage1_videos.iter().filter(|v| v.starts_with('r')).count() as f64;
            let ideal = count as f64 * real as f64 / inv.len() as f64;
            prop_assert!((real1 - ideal).abs() < 1.0 + 1e-9);
        }
    }
}
