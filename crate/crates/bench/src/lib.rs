//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vrag_core::eval::FrameScore;
use vrag_core::fcot::{serialize_fcot, FCotResponse};
use vrag_core::fkd::{Label, VectorMatrix};
use vrag_core::retrieval::VectorIndex;

pub fn random_index(rows: usize, dimension: usize, seed: u64) -> VectorIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * dimension).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let ids = (0..rows).map(|i| format!("entry-{i:06}")).collect();
    VectorIndex::build(ids, &VectorMatrix { dimension, data }).expect("valid matrix")
}

pub fn random_query(dimension: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dimension).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

/// Alternating fake and real videos with uniform frame scores.
pub fn random_frames(videos: usize, frames_per_video: usize, seed: u64) -> Vec<FrameScore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..videos)
        .flat_map(|v| (0..frames_per_video).map(move |f| (v, f)))
        .map(|(v, f)| FrameScore {
            video_id: format!("v{v:06}"),
            frame_id: format!("{f:04}"),
            score: rng.gen(),
            ground_truth: if v % 2 == 0 { Label::Fake } else { Label::Real },
        })
        .collect()
}

pub fn sample_response(words: usize) -> String {
    let body = vec!["blending"; words].join(" ");
    let r = FCotResponse::new(body.clone(), body.clone(), body, Label::Fake, Some(Label::Fake));
    serialize_fcot(&r).expect("tag-free sections")
}
