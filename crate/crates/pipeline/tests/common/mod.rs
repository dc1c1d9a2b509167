#![allow(dead_code)]

use kdp_core::Preset;
use kdp_pipeline::train::TrainConfig;
use kdp_pipeline::{DemoDataset, Episode, ObsStats};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Episodes of `steps` rows whose observations are Gaussian noise and whose
/// actions come from `action(label, t, rng)`.
pub fn dataset(
    obs_dim: usize,
    episodes: usize,
    steps: usize,
    labels: usize,
    seed: u64,
    action: impl Fn(u8, usize, &mut ChaCha8Rng) -> [f32; 2],
) -> DemoDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episodes: Vec<Episode> = (0..episodes)
        .map(|e| {
            let label = (e % labels) as u8;
            let mut observations: Vec<f32> = (0..steps * obs_dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
            // the first feature carries the label so routing can depend on it
            for t in 0..steps {
                observations[t * obs_dim] = label as f32;
            }
            let actions = (0..steps).flat_map(|t| action(label, t, &mut rng)).collect();
            Episode {
                label,
                seed: e as u64,
                observations,
                actions,
            }
        })
        .collect();
    let stats = ObsStats::compute(&episodes, obs_dim);
    DemoDataset { obs_dim, episodes, stats }
}

pub fn micro_config(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig {
        preset: Preset::Micro,
        batch_size: 32,
        horizon: 4,
        steps,
        checkpoint_every: steps.max(1),
        warmup_steps: 10,
        lr: 1e-3,
        seed,
        ..TrainConfig::default()
    }
}
