//! Seeded synthetic datasets for tests, benchmarks and smoke runs.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::abx::{Triplet, TripletManifest};
use crate::featstore::{FeatureMatrix, FrameSequence, PairManifest, PairRecord};

fn gaussian_frame(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

#[derive(Debug, Clone)]
pub struct AbxConfig {
    pub categories: usize,
    pub tokens_per_category: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub dim: usize,
    /// Std of the Gaussian noise added to category prototypes. A non-finite
    /// value drops the prototypes: every frame is iid Gaussian.
    pub noise: f32,
    pub triplets: usize,
    pub groups: Vec<String>,
}

impl Default for AbxConfig {
    fn default() -> Self {
        Self {
            categories: 8,
            tokens_per_category: 6,
            min_len: 4,
            max_len: 9,
            dim: 8,
            noise: 0.1,
            triplets: 200,
            groups: vec!["within".into(), "across".into()],
        }
    }
}

/// Tokens named `c{category}_t{token}` built from per-category prototype
/// trajectories (Gaussian random walks) resampled to each token's length, and triples whose `A` and `X` share a category.
pub fn abx_dataset(cfg: &AbxConfig, seed: u64) -> (HashMap<String, FrameSequence>, TripletManifest) {
    assert!(cfg.categories >= 2 && cfg.tokens_per_category >= 2 && cfg.min_len >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proto_len = cfg.max_len;
    let iid = !cfg.noise.is_finite();
    let mut features = HashMap::new();
    for c in 0..cfg.categories {
        // a slow random walk, so neighbouring prototype frames stay similar
        let mut proto: Vec<Vec<f32>> = vec![gaussian_frame(&mut rng, cfg.dim)];
        for _ in 1..proto_len {
            let step = gaussian_frame(&mut rng, cfg.dim);
            let next = proto[proto.len() - 1].iter().zip(&step).map(|(p, s)| p + 0.25 * s).collect();
            proto.push(next);
        }
        for t in 0..cfg.tokens_per_category {
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let frames: Vec<Vec<f32>> = (0..len)
                .map(|k| {
                    let noise = gaussian_frame(&mut rng, cfg.dim);
                    if iid {
                        return noise;
                    }
                    let src = &proto[k * proto_len / len];
                    src.iter().zip(&noise).map(|(p, n)| p + cfg.noise * n).collect()
                })
                .collect();
            let id = format!("c{c}_t{t}");
            features.insert(id.clone(), FrameSequence::from_frames(id, &frames).expect("nonempty frames"));
        }
    }
    let triplets = (0..cfg.triplets)
        .map(|k| {
            let same = rng.random_range(0..cfg.categories);
            let other = (same + rng.random_range(1..cfg.categories)) % cfg.categories;
            let pair = sample(&mut rng, cfg.tokens_per_category, 2);
            let b = rng.random_range(0..cfg.tokens_per_category);
            Triplet::new(
                format!("c{same}_t{}", pair.index(0)),
                format!("c{other}_t{b}"),
                format!("c{same}_t{}", pair.index(1)),
                cfg.groups[k % cfg.groups.len()].clone(),
            )
        })
        .collect();
    (features, TripletManifest::new(triplets).expect("nonempty triplets"))
}

/// Caption and image embeddings where every caption is its image's one-hot
/// axis plus small noise, so the matched pair always has the largest dot
/// product in both directions. Needs `dim >= n_images` and `noise < 0.1`.
pub fn matched_embeddings(
    n_images: usize,
    captions_per_image: usize,
    dim: usize,
    noise: f32,
    seed: u64,
) -> (FeatureMatrix, FeatureMatrix, PairManifest) {
    assert!(dim >= n_images);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = noise / (dim as f32).sqrt();
    let mut images = Vec::with_capacity(n_images);
    let mut captions = Vec::new();
    let mut records = Vec::new();
    for j in 0..n_images {
        let mut axis = vec![0.0f32; dim];
        axis[j] = 1.0;
        for c in 0..captions_per_image {
            let cap: Vec<f32> = axis
                .iter()
                .map(|a| a + scale * rng.sample::<f32, _>(StandardNormal))
                .collect();
            captions.push(cap);
            records.push(PairRecord::new(format!("img{j}_cap{c}"), format!("img{j}")));
        }
        images.push(axis);
    }
    // interleave caption order so image order differs from caption order
    let order: Vec<usize> = (0..captions.len())
        .map(|k| (k % n_images) * captions_per_image + k / n_images)
        .collect();
    let captions: Vec<Vec<f32>> = order.iter().map(|&k| captions[k].clone()).collect();
    let records: Vec<PairRecord> = order.iter().map(|&k| records[k].clone()).collect();
    (
        FeatureMatrix::from_rows(&captions).expect("caption rows"),
        FeatureMatrix::from_rows(&images).expect("image rows"),
        PairManifest::new(records).expect("valid manifest"),
    )
}

/// Utterances whose frames are noisy copies of `centers` cluster means, with
/// the cluster sequence following a sparse random Markov chain.
pub fn clustered_utterances(
    utterances: usize,
    frames_per_utterance: usize,
    dim: usize,
    centers: usize,
    seed: u64,
) -> Vec<FrameSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f32>> = (0..centers)
        .map(|_| gaussian_frame(&mut rng, dim).into_iter().map(|v| 4.0 * v).collect())
        .collect();
    // each state prefers two successors
    let successors: Vec<[usize; 2]> = (0..centers)
        .map(|_| [rng.random_range(0..centers), rng.random_range(0..centers)])
        .collect();
    (0..utterances)
        .map(|u| {
            let mut state = rng.random_range(0..centers);
            let frames: Vec<Vec<f32>> = (0..frames_per_utterance)
                .map(|_| {
                    state = if rng.random_bool(0.85) {
                        successors[state][rng.random_range(0..2)]
                    } else {
                        rng.random_range(0..centers)
                    };
                    means[state].iter().map(|m| m + 0.3 * rng.sample::<f32, _>(StandardNormal)).collect()
                })
                .collect();
            FrameSequence::from_frames(format!("utt{u:04}"), &frames).expect("nonempty frames")
        })
        .collect()
}
