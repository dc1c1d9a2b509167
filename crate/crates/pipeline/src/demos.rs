//! Expert demonstrations: generation, the `KDPD` file format, observation
//! statistics and minibatch sampling.

use std::io::{Read, Write};

use kdp_driveworld::{Cause, ScenarioConfig, World, OBS_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::PipelineError;
use crate::parallel::{derive_seed, parallel_map};

pub const DATASET_MAGIC: &[u8; 4] = b"KDPD";
pub const DATASET_VERSION: u32 = 1;
/// Smallest standard deviation used for normalization.
pub const STD_FLOOR: f64 = 1e-6;
pub const DEFAULT_RETRY_CAP: usize = 50;
const NOISE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub label: u8,
    pub seed: u64,
    /// Row-major `steps x obs_dim`.
    pub observations: Vec<f32>,
    /// Row-major `steps x 2`.
    pub actions: Vec<f32>,
}

impl Episode {
    pub fn steps(&self) -> usize {
        self.actions.len() / 2
    }

    pub fn action(&self, t: usize) -> [f32; 2] {
        [self.actions[2 * t], self.actions[2 * t + 1]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObsStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ObsStats {
    /// Population mean and standard deviation per dimension, with the
    /// standard deviation floored at [`STD_FLOOR`].
    pub fn compute(episodes: &[Episode], obs_dim: usize) -> ObsStats {
        let mut n = 0usize;
        let mut mean = vec![0.0; obs_dim];
        for ep in episodes {
            for row in ep.observations.chunks(obs_dim) {
                n += 1;
                for (m, &x) in mean.iter_mut().zip(row) {
                    *m += x as f64;
                }
            }
        }
        let inv = if n > 0 { 1.0 / n as f64 } else { 0.0 };
        mean.iter_mut().for_each(|m| *m *= inv);
        let mut var = vec![0.0; obs_dim];
        for ep in episodes {
            for row in ep.observations.chunks(obs_dim) {
                for ((v, &x), m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = x as f64 - m;
                    *v += d * d;
                }
            }
        }
        let std = var.iter().map(|v| (v * inv).sqrt().max(STD_FLOOR)).collect();
        ObsStats { mean, std }
    }

    pub fn normalize_into(&self, obs: &[f32], out: &mut [f64]) {
        for (((o, &x), m), s) in out.iter_mut().zip(obs).zip(&self.mean).zip(&self.std) {
            *o = (x as f64 - m) / s;
        }
    }

    pub fn normalize(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&x, m), s)| (x as f32 as f64 - m) / s)
            .collect()
    }

    fn bytes(&self) -> Vec<u8> {
        self.mean.iter().chain(&self.std).flat_map(|x| x.to_le_bytes()).collect()
    }

    /// Hex SHA-256 of the little-endian stats block.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.bytes()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub obs_dim: usize,
    pub episodes: Vec<Episode>,
    pub stats: ObsStats,
}

/// Outcome counts from dataset generation, per scenario config.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSummary {
    pub attempts: Vec<usize>,
    pub accepted: Vec<usize>,
}

impl GenerationSummary {
    pub fn acceptance_rate(&self, scenario: usize) -> f64 {
        self.accepted[scenario] as f64 / self.attempts[scenario].max(1) as f64
    }
}

/// Rolls a policy until termination, recording observation and action
/// pairs. The world executes each action perturbed by `cfg.demo_noise`
/// drawn from the episode seed, while the clean action is recorded.
/// Returns the terminal cause.
pub fn record_episode(cfg: &ScenarioConfig, seed: u64, policy: impl Fn(&World) -> [f64; 2]) -> Result<(Episode, Cause), PipelineError> {
    let mut world = World::new(cfg.clone(), seed)?;
    let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[NOISE_STREAM]));
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    let mut obs = world.observe();
    loop {
        let a = policy(&world);
        let a = [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)];
        observations.extend(obs.iter().map(|&x| x as f32));
        actions.extend(a.iter().map(|&x| x as f32));
        let mut exec = a;
        for (x, sd) in exec.iter_mut().zip(cfg.demo_noise) {
            let z: f64 = noise.sample(StandardNormal);
            *x = (*x + sd * z).clamp(-1.0, 1.0);
        }
        let out = world.step(exec)?;
        obs = out.observation;
        if out.terminated {
            let ep = Episode {
                label: cfg.kind.category() as u8,
                seed,
                observations,
                actions,
            };
            return Ok((ep, out.cause));
        }
    }
}

/// Rolls the scripted expert `episodes_per_scenario` times for each config,
/// re-drawing failed episodes until `retry_cap` failures in one scenario.
pub fn generate_dataset(
    specs: &[ScenarioConfig],
    episodes_per_scenario: usize,
    seed: u64,
    retry_cap: usize,
    workers: usize,
) -> Result<(DemoDataset, GenerationSummary), PipelineError> {
    if episodes_per_scenario == 0 || specs.is_empty() {
        return Err(PipelineError::Usage("need at least one scenario and one episode".into()));
    }
    let mut episodes = Vec::new();
    let mut summary = GenerationSummary {
        attempts: vec![0; specs.len()],
        accepted: vec![0; specs.len()],
    };
    for (i, cfg) in specs.iter().enumerate() {
        cfg.validate()?;
        let mut accepted: Vec<Option<Episode>> = vec![None; episodes_per_scenario];
        let mut failures = 0usize;
        let mut round = 0u64;
        while accepted.iter().any(Option::is_none) {
            let todo: Vec<usize> = (0..episodes_per_scenario).filter(|&e| accepted[e].is_none()).collect();
            let results = parallel_map(todo.len(), workers, |k| {
                let ep_seed = derive_seed(seed, &[i as u64, todo[k] as u64, round]);
                record_episode(cfg, ep_seed, crate::expert::scripted_expert)
            });
            for (k, r) in results.into_iter().enumerate() {
                let (ep, cause) = r?;
                summary.attempts[i] += 1;
                if cause == Cause::Success {
                    summary.accepted[i] += 1;
                    accepted[todo[k]] = Some(ep);
                } else {
                    failures += 1;
                }
            }
            if failures > retry_cap {
                return Err(PipelineError::Generation {
                    scenario: cfg.kind.to_string(),
                    failures,
                });
            }
            round += 1;
        }
        episodes.extend(accepted.into_iter().flatten());
    }
    let stats = ObsStats::compute(&episodes, OBS_DIM);
    Ok((
        DemoDataset {
            obs_dim: OBS_DIM,
            episodes,
            stats,
        },
        summary,
    ))
}

/// Observations and clean action sequences for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    /// `B x obs_dim`, normalized.
    pub obs: Vec<f64>,
    /// `B x H x 2`, raw actions in [-1, 1].
    pub actions: Vec<f64>,
    pub labels: Vec<usize>,
    /// `(episode, step)` of each sample.
    pub index: Vec<(usize, usize)>,
    pub horizon: usize,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl DemoDataset {
    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(Episode::steps).sum()
    }

    pub fn labels(&self) -> Vec<u8> {
        let mut l: Vec<u8> = self.episodes.iter().map(|e| e.label).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// Clean `horizon x 2` sequence starting at step `t`, padded with the
    /// final action.
    pub fn action_window(&self, episode: usize, t: usize, horizon: usize) -> Vec<f64> {
        let ep = &self.episodes[episode];
        let last = ep.steps() - 1;
        (0..horizon).flat_map(|h| ep.action((t + h).min(last)).map(|x| x as f64)).collect()
    }

    /// Uniform draw over all `(episode, step)` pairs.
    pub fn sample_minibatch<R: Rng + ?Sized>(&self, batch: usize, horizon: usize, rng: &mut R) -> Result<Minibatch, PipelineError> {
        if horizon < 1 {
            return Err(PipelineError::Usage("horizon must be at least 1".into()));
        }
        if batch < 1 {
            return Err(PipelineError::Usage("batch size must be at least 1".into()));
        }
        let mut offsets = Vec::with_capacity(self.episodes.len());
        let mut total = 0usize;
        for ep in &self.episodes {
            offsets.push(total);
            total += ep.steps();
        }
        if total == 0 {
            return Err(PipelineError::Usage("dataset has no steps".into()));
        }
        let d = self.obs_dim;
        let mut mb = Minibatch {
            obs: vec![0.0; batch * d],
            actions: Vec::with_capacity(batch * horizon * 2),
            labels: Vec::with_capacity(batch),
            index: Vec::with_capacity(batch),
            horizon,
        };
        for b in 0..batch {
            let u = rng.gen_range(0..total);
            let e = offsets.partition_point(|&o| o <= u) - 1;
            let t = u - offsets[e];
            let ep = &self.episodes[e];
            self.stats
                .normalize_into(&ep.observations[t * d..(t + 1) * d], &mut mb.obs[b * d..(b + 1) * d]);
            mb.actions.extend(self.action_window(e, t, horizon));
            mb.labels.push(ep.label as usize);
            mb.index.push((e, t));
        }
        Ok(mb)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), PipelineError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.episodes.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.obs_dim as u32).to_le_bytes());
        buf.extend(self.stats.bytes());
        for ep in &self.episodes {
            buf.push(ep.label);
            buf.extend_from_slice(&ep.seed.to_le_bytes());
            buf.extend_from_slice(&(ep.steps() as u32).to_le_bytes());
            buf.extend(ep.observations.iter().flat_map(|x| x.to_le_bytes()));
            buf.extend(ep.actions.iter().flat_map(|x| x.to_le_bytes()));
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to memory");
        v
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, PipelineError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut c = Cursor { bytes: &bytes, pos: 0 };
        if c.take(4)? != DATASET_MAGIC {
            return Err(PipelineError::Format("not a KDPD dataset".into()));
        }
        let version = c.u32()?;
        if version != DATASET_VERSION {
            return Err(PipelineError::Format(format!("unsupported dataset version {version}")));
        }
        let n = c.u64()? as usize;
        let obs_dim = c.u32()? as usize;
        let mean = c.f64s(obs_dim)?;
        let std = c.f64s(obs_dim)?;
        let mut episodes = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let label = c.take(1)?[0];
            let seed = c.u64()?;
            let steps = c.u32()? as usize;
            let observations = c.f32s(steps * obs_dim)?;
            let actions = c.f32s(steps * 2)?;
            episodes.push(Episode {
                label,
                seed,
                observations,
                actions,
            });
        }
        if c.pos != bytes.len() {
            return Err(PipelineError::Format("trailing bytes after last episode".into()));
        }
        let ds = DemoDataset {
            obs_dim,
            episodes,
            stats: ObsStats { mean, std },
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), PipelineError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PipelineError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for (i, ep) in self.episodes.iter().enumerate() {
            if ep.actions.len() % 2 != 0 || ep.observations.len() != ep.steps() * self.obs_dim {
                return Err(PipelineError::Format(format!(
                    "episode {i} has mismatched observation and action counts"
                )));
            }
            if ep.steps() == 0 {
                return Err(PipelineError::Format(format!("episode {i} is empty")));
            }
            if ep.actions.iter().any(|a| !(-1.0..=1.0).contains(a)) {
                return Err(PipelineError::Format(format!("episode {i} has actions outside [-1, 1]")));
            }
        }
        if self.stats.mean.len() != self.obs_dim || self.stats.std.len() != self.obs_dim {
            return Err(PipelineError::Format("stats width differs from observation width".into()));
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| PipelineError::Format("dataset truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, PipelineError> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, PipelineError> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
