#![allow(dead_code)]

use std::collections::BTreeMap;

use cclis::losses::{BatchView, SampleSource};
use cclis::model::{ModelConfig, ModelState};
use cclis::rng::{seeded, Rng};
use cclis::tasks::{stack_features, Sample};
use rand::Rng as _;

pub fn small_config(input_dim: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        hidden: vec![6],
        projection_hidden: 5,
        embed_dim: 4,
        tau: 0.5,
        proto_init_std: 1.0,
    }
}

pub fn small_model(classes: usize, input_dim: usize, seed: u64) -> ModelState {
    let mut rng = seeded(seed);
    let mut m = ModelState::new(&small_config(input_dim), &mut rng).unwrap();
    m.grow_prototypes(classes, 1.0, &mut rng).unwrap();
    m
}

/// `sizes[c]` samples of class `c` with uniform features in `[-1, 1)`.
pub fn random_samples(sizes: &[usize], input_dim: usize, rng: &mut Rng) -> Vec<Sample> {
    let mut out = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            out.push(Sample {
                id: out.len(),
                label: c,
                task: 0,
                features: (0..input_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            });
        }
    }
    out
}

/// All samples in one batch. Classes below `first_current` are buffered
/// with the uniform proposal `g = 1/|S_m|`.
pub fn full_retention_batch(samples: &[Sample], first_current: usize) -> BatchView {
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for s in samples {
        *sizes.entry(s.label).or_default() += 1;
    }
    batch_with(samples, first_current, |s| 1.0 / sizes[&s.label] as f64)
}

pub fn batch_with(samples: &[Sample], first_current: usize, g: impl Fn(&Sample) -> f64) -> BatchView {
    let mut current: Vec<usize> = samples.iter().map(|s| s.label).filter(|&l| l >= first_current).collect();
    let mut buffered: Vec<usize> = samples.iter().map(|s| s.label).filter(|&l| l < first_current).collect();
    current.sort_unstable();
    current.dedup();
    buffered.sort_unstable();
    buffered.dedup();
    BatchView {
        inputs: stack_features(samples).unwrap(),
        labels: samples.iter().map(|s| s.label).collect(),
        sources: samples
            .iter()
            .map(|s| if s.label >= first_current { SampleSource::Current } else { SampleSource::Buffered { g: g(s) } })
            .collect(),
        sample_ids: samples.iter().map(|s| s.id).collect(),
        current_classes: current,
        buffered_classes: buffered,
    }
}
