use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Label;

/// Label and number of extractable frames of one video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoInventory {
    pub label: Label,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub seed: u64,
    pub targets: BTreeMap<Label, usize>,
    pub frames_per_video: BTreeMap<String, usize>,
    /// Frames that could not be allocated because the class ran out of capacity.
    pub shortfall: BTreeMap<Label, usize>,
}

impl SamplingPlan {
    pub fn planned(&self, label: Label, inventory: &BTreeMap<String, VideoInventory>) -> usize {
        self.frames_per_video
            .iter()
            .filter(|(v, _)| inventory.get(*v).is_some_and(|inv| inv.label == label))
            .map(|(_, n)| n)
            .sum()
    }
}

/// Spreads each class target as evenly as possible over that class's videos.
///
/// Videos are visited in a seeded shuffle so the remainder frames land on
/// different videos for different seeds. When a video hits its capacity the
/// leftover is redistributed over videos that still have frames; anything that
/// cannot be placed is reported in `shortfall`.
pub fn build_sampling_plan(
    inventory: &BTreeMap<String, VideoInventory>,
    targets: &BTreeMap<Label, usize>,
    seed: u64,
) -> SamplingPlan {
    let mut frames_per_video = BTreeMap::new();
    let mut shortfall = BTreeMap::new();

    for (&label, &target) in targets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ label_salt(label));
        let mut videos: Vec<(&str, usize)> =
            inventory.iter().filter(|(_, inv)| inv.label == label).map(|(id, inv)| (id.as_str(), inv.frames)).collect();
        videos.shuffle(&mut rng);

        let mut alloc = vec![0usize; videos.len()];
        let mut remaining = target;
        loop {
            let open: Vec<usize> = (0..videos.len()).filter(|&i| alloc[i] < videos[i].1).collect();
            if remaining == 0 || open.is_empty() {
                break;
            }
            let share = remaining / open.len();
            let extra = remaining % open.len();
            for (rank, &i) in open.iter().enumerate() {
                let want = share + usize::from(rank < extra);
                let take = want.min(videos[i].1 - alloc[i]);
                alloc[i] += take;
                remaining -= take;
            }
        }

        for ((id, _), n) in videos.iter().zip(alloc) {
            if n > 0 {
                frames_per_video.insert((*id).to_string(), n);
            }
        }
        if remaining > 0 {
            log::warn!("sampling plan short by {remaining} {label} frames");
            shortfall.insert(label, remaining);
        }
    }

    SamplingPlan { seed, targets: targets.clone(), frames_per_video, shortfall }
}

fn label_salt(label: Label) -> u64 {
    match label {
        Label::Real => 0x5245_414c,
        Label::Fake => 0x4641_4b45,
    }
}
