use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::fkd::Label;

/// Above this many cross-class pairs the rank-based path is used.
const PAIRWISE_LIMIT: u128 = 1 << 22;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub video_id: String,
    pub frame_id: String,
    /// Probability that the frame is fake.
    pub score: f64,
    pub ground_truth: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Median,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video_id: String,
    pub score: f64,
    pub label: Label,
}

/// AUC as an exact ratio `twice_wins / (2 * pairs)`, where ties count half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AucRatio {
    pub twice_wins: u128,
    pub pairs: u128,
}

impl AucRatio {
    pub fn value(self) -> f64 {
        self.twice_wins as f64 / (2 * self.pairs) as f64
    }
}

/// Groups frames by video and aggregates their scores. Videos come back
/// sorted by id.
pub fn video_scores(frames: &[FrameScore], aggregation: Aggregation) -> Result<Vec<VideoScore>, EvalError> {
    if frames.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut grouped: BTreeMap<&str, (Label, Vec<f64>)> = BTreeMap::new();
    for f in frames {
        if !(f.score.is_finite() && (0.0..=1.0).contains(&f.score)) {
            return Err(EvalError::InvalidScore {
                video_id: f.video_id.clone(),
                frame_id: f.frame_id.clone(),
                score: f.score,
            });
        }
        let entry = grouped.entry(&f.video_id).or_insert((f.ground_truth, Vec::new()));
        if entry.0 != f.ground_truth {
            return Err(EvalError::MixedVideoLabel(f.video_id.clone()));
        }
        entry.1.push(f.score);
    }
    Ok(grouped
        .into_iter()
        .map(|(id, (label, mut scores))| {
            let score = match aggregation {
                Aggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
                Aggregation::Max => scores.iter().copied().fold(f64::MIN, f64::max),
                Aggregation::Median => {
                    scores.sort_by(f64::total_cmp);
                    let n = scores.len();
                    if n % 2 == 1 {
                        scores[n / 2]
                    } else {
                        (scores[n / 2 - 1] + scores[n / 2]) / 2.0
                    }
                }
            };
            VideoScore { video_id: id.to_string(), score, label }
        })
        .collect())
}

fn split(videos: &[VideoScore]) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let fake: Vec<f64> = videos.iter().filter(|v| v.label == Label::Fake).map(|v| v.score).collect();
    let real: Vec<f64> = videos.iter().filter(|v| v.label == Label::Real).map(|v| v.score).collect();
    if fake.is_empty() || real.is_empty() {
        return Err(EvalError::SingleClass);
    }
    Ok((fake, real))
}

/// Counts every fake/real pair directly. Quadratic.
pub fn auc_pairwise(videos: &[VideoScore]) -> Result<AucRatio, EvalError> {
    let (fake, real) = split(videos)?;
    let mut twice_wins = 0u128;
    for f in &fake {
        for r in &real {
            twice_wins += match f.total_cmp(r) {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    Ok(AucRatio { twice_wins, pairs: (fake.len() * real.len()) as u128 })
}

/// Mann-Whitney statistic from midranks. O(n log n).
pub fn auc_rank(videos: &[VideoScore]) -> Result<AucRatio, EvalError> {
    let (fake, real) = split(videos)?;
    let mut all: Vec<(f64, bool)> = fake.iter().map(|&s| (s, true)).chain(real.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // doubled midranks keep the arithmetic in integers
    let mut twice_rank_sum = 0u128;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0.total_cmp(&all[i].0).is_eq() {
            j += 1;
        }
        let twice_midrank = (i + 1 + j + 1) as u128;
        let fakes_in_run = all[i..=j].iter().filter(|x| x.1).count() as u128;
        twice_rank_sum += twice_midrank * fakes_in_run;
        i = j + 1;
    }
    let nf = fake.len() as u128;
    Ok(AucRatio { twice_wins: twice_rank_sum - nf * (nf + 1), pairs: nf * real.len() as u128 })
}

/// Video-level AUC: frame scores are aggregated per video, then fake videos
/// are compared against real ones with ties counting half.
pub fn video_level_auc(frames: &[FrameScore], aggregation: Aggregation) -> Result<f64, EvalError> {
    let videos = video_scores(frames, aggregation)?;
    let (fake, real) = split(&videos)?;
    let ratio = if (fake.len() as u128) * (real.len() as u128) <= PAIRWISE_LIMIT {
        auc_pairwise(&videos)?
    } else {
        auc_rank(&videos)?
    };
    Ok(ratio.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(video: &str, score: f64, label: Label) -> FrameScore {
        FrameScore { video_id: video.into(), frame_id: "0".into(), score, ground_truth: label }
    }

    fn videos(real: &[f64], fake: &[f64]) -> Vec<FrameScore> {
        real.iter()
            .enumerate()
            .map(|(i, &s)| frame(&format!("r{i}"), s, Label::Real))
            .chain(fake.iter().enumerate().map(|(i, &s)| frame(&format!("f{i}"), s, Label::Fake)))
            .collect()
    }

    /// Independent oracle: exact fraction of won pairs, ties half.
    fn oracle(real: &[f64], fake: &[f64]) -> (u128, u128) {
        let mut num = 0u128;
        for f in fake {
            for r in real {
                if f > r {
                    num += 2;
                } else if f == r {
                    num += 1;
                }
            }
        }
        (num, 2 * (real.len() * fake.len()) as u128)
    }

    #[test]
    fn examples() {
        let f = videos(&[0.1, 0.4], &[0.3, 0.9]);
        assert_eq!(video_level_auc(&f, Aggregation::Mean).unwrap(), 0.75);
        assert_eq!(video_level_auc(&videos(&[0.1, 0.2], &[0.8, 0.9]), Aggregation::Mean).unwrap(), 1.0);
        assert_eq!(video_level_auc(&videos(&[0.5; 3], &[0.5; 4]), Aggregation::Mean).unwrap(), 0.5);
    }

    #[test]
    fn frames_are_averaged_per_video() {
        let frames = vec![
            frame("r", 0.0, Label::Real),
            frame("r", 0.8, Label::Real),
            frame("f", 0.5, Label::Fake),
            frame("f", 0.5, Label::Fake),
        ];
        assert_eq!(video_level_auc(&frames, Aggregation::Mean).unwrap(), 1.0);
        assert_eq!(video_level_auc(&frames, Aggregation::Max).unwrap(), 0.0);
        assert_eq!(video_level_auc(&frames, Aggregation::Median).unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(video_level_auc(&videos(&[0.1], &[]), Aggregation::Mean), Err(EvalError::SingleClass)));
        assert!(matches!(video_level_auc(&[], Aggregation::Mean), Err(EvalError::Empty)));
        assert!(matches!(
            video_level_auc(&videos(&[1.5], &[0.2]), Aggregation::Mean),
            Err(EvalError::InvalidScore { .. })
        ));
        let mixed = vec![frame("v", 0.1, Label::Real), frame("v", 0.2, Label::Fake)];
        assert!(matches!(video_scores(&mixed, Aggregation::Mean), Err(EvalError::MixedVideoLabel(_))));
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        // coarse grid so ties are common
        prop::collection::vec((0u32..=20).prop_map(|x| x as f64 / 20.0), 1..100)
    }

    proptest! {
        #[test]
        fn both_paths_match_oracle(real in scores(), fake in scores()) {
            let vs = video_scores(&videos(&real, &fake), Aggregation::Mean).unwrap();
            let (num, den) = oracle(&real, &fake);
            let p = auc_pairwise(&vs).unwrap();
            let r = auc_rank(&vs).unwrap();
            prop_assert_eq!(p, r);
            prop_assert_eq!(p.twice_wins * den, num * 2 * p.pairs);
        }

        #[test]
        fn monotone_invariance(real in scores(), fake in scores()) {
            let base = video_level_auc(&videos(&real, &fake), Aggregation::Mean).unwrap();
            let t = |xs: &[f64]| xs.iter().map(|x| x * x * x).collect::<Vec<_>>();
            let moved = video_level_auc(&videos(&t(&real), &t(&fake)), Aggregation::Mean).unwrap();
            prop_assert_eq!(base, moved);
        }

        #[test]
        fn complement(real in prop::collection::btree_set(0u32..10_000, 1..50), fake in prop::collection::btree_set(10_000u32..20_000, 1..50), shuffle in any::<u64>()) {
            // distinct values, so no ties across classes
            let mix = |x: u32| ((x as u64).wrapping_mul(shuffle | 1) % 1_000_003) as f64 / 1_000_003.0;
            let real: Vec<f64> = real.into_iter().map(mix).collect();
            let fake: Vec<f64> = fake.into_iter().map(mix).collect();
            prop_assume!(real.iter().all(|r| !fake.contains(r)));
            let flip = |xs: &[f64]| xs.iter().map(|x| 1.0 - x).collect::<Vec<_>>();
            let a = auc_rank(&video_scores(&videos(&real, &fake), Aggregation::Mean).unwrap()).unwrap();
            let b = auc_rank(&video_scores(&videos(&flip(&real), &flip(&fake)), Aggregation::Mean).unwrap()).unwrap();
            prop_assert_eq!(a.twice_wins + b.twice_wins, 2 * a.pairs);
        }
    }
}
