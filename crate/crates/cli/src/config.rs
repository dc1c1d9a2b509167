//! The run-config file: one TOML document holding everything a command
//! needs. Command-line flags are merged on top and the merged result is
//! written next to the outputs as `config.snapshot`.

use std::path::{Path, PathBuf};

use kdp_core::Preset;
use kdp_driveworld::{ScenarioConfig, ScenarioKind};
use kdp_pipeline::demos::DEFAULT_RETRY_CAP;
use kdp_pipeline::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SNAPSHOT: &str = "config.snapshot";
pub const SEED_ENV: &str = "KDP_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// The checkpoint, sampled with its training objective.
    #[default]
    Model,
    /// The scripted expert that produced the demonstrations.
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Output directory.
    pub out: PathBuf,
    /// Demonstration file; `<out>/demos.kdpd` when unset.
    pub dataset: Option<PathBuf>,
    /// Checkpoint evaluated by `eval`; `<out>/checkpoints/best.kdpc` (or
    /// `last.kdpc`) when unset.
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint `train` continues from.
    pub resume: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out: PathBuf::from("runs/default"),
            dataset: None,
            checkpoint: None,
            resume: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemosSection {
    /// Accepted episodes per scenario.
    pub episodes: usize,
    /// Failed expert episodes tolerated per scenario before giving up.
    pub retry_cap: usize,
}

impl Default for DemosSection {
    fn default() -> Self {
        DemosSection {
            episodes: 200,
            retry_cap: DEFAULT_RETRY_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Episodes per scenario.
    pub episodes: usize,
    /// Sampler stochasticity; 0 is deterministic given the initial noise.
    pub eta: f64,
    pub policy: PolicyKind,
    /// Also time the evaluated model.
    pub latency: bool,
    /// Environment steps per temporal activation bucket.
    pub bucket_steps: usize,
    /// Caps the length of evaluation episodes below each scenario's own
    /// `max_steps`.
    pub max_steps: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            episodes: 50,
            eta: 0.0,
            policy: PolicyKind::Model,
            latency: false,
            bucket_steps: kdp_pipeline::rollout::BUCKET_STEPS,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencySection {
    pub presets: Vec<Preset>,
    pub trials: usize,
}

impl Default for LatencySection {
    fn default() -> Self {
        LatencySection {
            presets: vec![Preset::Small, Preset::Medium, Preset::Large, Preset::Giant],
            trials: 100,
        }
    }
}

/// ```toml
/// seed = 7
/// precision = "f32"
///
/// [paths]
/// out = "runs/ramp"
///
/// [[scenarios]]
/// kind = "in_ramp"
///
/// [train]
/// preset = "small"
/// steps = 5000
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed of every command. Falls back to `KDP_SEED`, then 0.
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub precision: Precision,
    pub paths: Paths,
    /// Scenarios used by `gen-demos` and `eval`.
    pub scenarios: Vec<ScenarioConfig>,
    pub demos: DemosSection,
    /// `train.seed` is replaced by the master seed when merging.
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub latency: LatencySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            workers: 1,
            precision: Precision::F64,
            paths: Paths::default(),
            scenarios: default_scenarios(&ScenarioKind::ALL),
            demos: DemosSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            latency: LatencySection::default(),
        }
    }
}

/// Scenario configs with randomized routes and exits.
pub fn default_scenarios(kinds: &[ScenarioKind]) -> Vec<ScenarioConfig> {
    kinds
        .iter()
        .map(|&k| ScenarioConfig {
            random_variant: true,
            ..ScenarioConfig::new(k)
        })
        .collect()
}

/// Expands `all` and de-duplicates while keeping order.
pub fn parse_scenarios(names: &[String]) -> Result<Vec<ScenarioKind>, CliError> {
    let mut out = Vec::new();
    for n in names {
        let kinds = if n.eq_ignore_ascii_case("all") {
            ScenarioKind::ALL.to_vec()
        } else {
            vec![n.parse::<ScenarioKind>().map_err(|e| CliError::Config(e.to_string()))?]
        };
        for k in kinds {
            if !out.contains(&k) {
                out.push(k);
            }
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Fills the seed from `env_seed` when neither file nor flag set it and
    /// propagates it to the training section.
    pub fn resolve_seed(&mut self, env_seed: Option<&str>) -> Result<u64, CliError> {
        let seed = match (self.seed, env_seed) {
            (Some(s), _) => s,
            (None, Some(v)) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            (None, None) => 0,
        };
        self.seed = Some(seed);
        self.train.seed = seed;
        Ok(seed)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.scenarios.is_empty() {
            return Err(CliError::Config("at least one scenario is required".into()));
        }
        for s in &self.scenarios {
            s.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if self.demos.episodes == 0 {
            return Err(CliError::Config("demos.episodes must be positive".into()));
        }
        if self.eval.episodes == 0 || self.eval.bucket_steps == 0 || self.eval.max_steps == Some(0) {
            return Err(CliError::Config(
                "eval.episodes, eval.bucket_steps and eval.max_steps must be positive".into(),
            ));
        }
        if !(self.eval.eta.is_finite() && (0.0..=1.0).contains(&self.eval.eta)) {
            return Err(CliError::Config(format!("eval.eta {} must lie in [0, 1]", self.eval.eta)));
        }
        if self.latency.trials == 0 || self.latency.presets.is_empty() {
            return Err(CliError::Config("latency needs at least one preset and one trial".into()));
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    /// Scenarios as evaluated, with `eval.max_steps` applied.
    pub fn eval_scenarios(&self) -> Vec<ScenarioConfig> {
        let mut out = self.scenarios.clone();
        if let Some(cap) = self.eval.max_steps {
            out.iter_mut().for_each(|s| s.max_steps = s.max_steps.min(cap));
        }
        out
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.paths.dataset.clone().unwrap_or_else(|| self.paths.out.join("demos.kdpd"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths.out.join("checkpoints")
    }

    pub fn write_snapshot(&self) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.paths.out)?;
        let path = self.paths.out.join(SNAPSHOT);
        std::fs::write(&path, self.to_toml())?;
        Ok(path)
    }
}
