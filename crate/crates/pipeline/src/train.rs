//! Training loop: minibatch, forward corruption, sparse-expert noise
//! prediction, composite loss and Adam update, with checkpoints and a CSV
//! loss report.

use std::io::Write;
use std::path::{Path, PathBuf};

use kdp_core::moe::{selection_counts, usage_entropy};
use kdp_core::numerics::checkpoint::{load_into, read_records, records_from, write_records, Record};
use kdp_core::schedule::{DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use kdp_core::{
    estimate_joint, load_balance_loss, mutual_info, no_grad, Adam, AdamConfig, Dropout, KdpModel, ModelConfig, NoisePrediction,
    NoiseSchedule, NumericsError, Preset, Scalar, ScheduleKind, Tensor, ACTION_DIM,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::demos::{DemoDataset, Minibatch};
use crate::error::{PipelineError, Result};
use crate::parallel::derive_seed;

const INIT_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;

/// What the network is trained to output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Injected noise, from corrupted action sequences.
    #[default]
    Diffusion,
    /// The clean action sequence directly, from an all-zero input sequence.
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::SquaredCosine,
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build<S: Scalar>(&self) -> Result<NoiseSchedule<S>> {
        Ok(NoiseSchedule::new(self.kind, self.steps, self.beta_start, self.beta_end)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub preset: Preset,
    pub objective: Objective,
    pub batch_size: usize,
    pub horizon: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub p_drop: f64,
    pub lambda_bal: f64,
    pub gamma_mi: f64,
    pub n_categories: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub warmup_steps: usize,
    /// Optimizer updates in the whole run.
    pub steps: usize,
    pub checkpoint_every: usize,
    /// EMA coefficient of the smoothed diffusion loss used for best-model
    /// selection.
    pub smoothing: f64,
    pub seed: u64,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: Preset::Small,
            objective: Objective::Diffusion,
            batch_size: 64,
            horizon: 8,
            n_experts: 8,
            top_k: 2,
            p_drop: 0.3,
            lambda_bal: 0.01,
            gamma_mi: 0.01,
            n_categories: 3,
            lr: 1e-4,
            adam_beta1: 0.95,
            adam_beta2: 0.999,
            warmup_steps: 100,
            steps: 5000,
            checkpoint_every: 500,
            smoothing: 0.98,
            seed: 0,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, obs_dim: usize) -> ModelConfig {
        ModelConfig {
            p_drop: self.p_drop,
            horizon: self.horizon,
            obs_dim,
            n_experts: self.n_experts,
            top_k: self.top_k,
            ..ModelConfig::preset(self.preset)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.batch_size == 0 || self.horizon == 0 {
            return bad("batch_size and horizon must be positive".into());
        }
        if self.steps == 0 || self.checkpoint_every == 0 {
            return bad("steps and checkpoint_every must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lambda_bal >= 0.0 && self.gamma_mi >= 0.0) {
            return bad("lambda_bal and gamma_mi must be non-negative".into());
        }
        if self.n_categories == 0 {
            return bad("n_categories must be positive".into());
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad(format!("smoothing {} must lie in [0, 1)", self.smoothing));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        self.model_config(kdp_core::OBS_DIM).validate()?;
        self.schedule.build::<f64>()?;
        Ok(())
    }

    /// Learning rate after `done` completed updates.
    pub fn lr_at(&self, done: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * ((done + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Anything that maps a noisy action sequence to a noise estimate. The
/// observation is first turned into a context that stays fixed across
/// denoising steps.
pub trait NoisePredictor<S: Scalar>: Sync {
    fn horizon(&self) -> usize;

    /// `obs: [B, obs_dim]` normalized.
    fn context(&self, obs: &Tensor<S>) -> Result<Tensor<S>>;

    /// `a_t: [B, H, 2]`, one step per row.
    fn predict(&self, ctx: &Tensor<S>, a_t: &Tensor<S>, ts: &[usize]) -> Result<NoisePrediction<S>>;
}

impl<S: Scalar> NoisePredictor<S> for KdpModel<S> {
    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn context(&self, obs: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.encode_observation(obs)?)
    }

    fn predict(&self, ctx: &Tensor<S>, a_t: &Tensor<S>, ts: &[usize]) -> Result<NoisePrediction<S>> {
        Ok(self.predict_noise(a_t, ctx, ts, None)?)
    }
}

/// Loss terms as graph nodes.
#[derive(Debug, Clone)]
pub struct Losses<S: Scalar> {
    pub l_diff: Tensor<S>,
    pub l_bal: Tensor<S>,
    pub mi: Tensor<S>,
    pub total: Tensor<S>,
}

/// Composite objective `L_diff + lambda L_bal - gamma I(K; E)`. `target` is
/// the injected noise, or the clean sequence for the regression objective.
pub fn composite_loss<S: Scalar>(
    pred: &NoisePrediction<S>,
    target: &Tensor<S>,
    labels: &[usize],
    n_categories: usize,
    lambda_bal: f64,
    gamma_mi: f64,
) -> Result<Losses<S>> {
    let diff = pred.estimate.sub(target)?;
    let l_diff = diff.mul(&diff)?.mean()?;
    let l_bal = load_balance_loss(&pred.gate)?;
    let mi = mutual_info(&estimate_joint(&pred.gate, labels, n_categories)?)?;
    let mut total = l_diff.clone();
    if lambda_bal != 0.0 {
        total = total.add(&l_bal.scale(S::lit(lambda_bal))?)?;
    }
    if gamma_mi != 0.0 {
        total = total.sub(&mi.scale(S::lit(gamma_mi))?)?;
    }
    Ok(Losses { l_diff, l_bal, mi, total })
}

/// One row of the training report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    pub step: u64,
    pub l_diff: f64,
    pub l_bal: f64,
    pub mi: f64,
    pub total: f64,
    /// Entropy of the batch's hard expert selections, nats.
    pub usage_entropy: f64,
}

pub const REPORT_HEADER: &str = "step,l_diff,l_bal,mi,total,usage_entropy";

impl ReportRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.l_diff, self.l_bal, self.mi, self.total, self.usage_entropy
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || PipelineError::Format(format!("bad report row {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(ReportRow {
            step: f[0].parse().map_err(|_| bad())?,
            l_diff: num(1)?,
            l_bal: num(2)?,
            mi: num(3)?,
            total: num(4)?,
            usage_entropy: num(5)?,
        })
    }
}

pub fn write_report<W: Write>(mut w: W, rows: &[ReportRow]) -> Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    Ok(())
}

pub fn read_report(text: &str) -> Result<Vec<ReportRow>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(ReportRow::parse)
        .collect()
}

/// Noise draws and corrupted inputs for one batch.
pub struct Corruption<S: Scalar> {
    pub ts: Vec<usize>,
    pub eps: Tensor<S>,
    pub a_t: Tensor<S>,
}

/// Draws `t ~ U{1..T}` per sample and `eps ~ N(0, I)`, and forms `a_t` in
/// closed form.
pub fn corrupt<S: Scalar, R: Rng + ?Sized>(schedule: &NoiseSchedule<S>, a0: &[f64], batch: usize, rng: &mut R) -> Result<Corruption<S>> {
    let per = a0.len() / batch;
    let ts: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=schedule.steps())).collect();
    let eps: Vec<S> = (0..a0.len()).map(|_| S::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    let mut a_t = Vec::with_capacity(a0.len());
    for (b, &t) in ts.iter().enumerate() {
        let clean: Vec<S> = a0[b * per..(b + 1) * per].iter().map(|x| S::lit(*x)).collect();
        a_t.extend(schedule.forward_diffuse(&clean, t, &eps[b * per..(b + 1) * per])?);
    }
    let shape = [batch, per / ACTION_DIM, ACTION_DIM];
    Ok(Corruption {
        ts,
        eps: Tensor::from_vec(&shape, eps)?,
        a_t: Tensor::from_vec(&shape, a_t)?,
    })
}

fn to_tensor<S: Scalar>(shape: &[usize], data: &[f64]) -> Result<Tensor<S>> {
    Ok(Tensor::from_vec(shape, data.iter().map(|x| S::lit(*x)).collect())?)
}

fn loss_value<S: Scalar>(t: &Tensor<S>) -> Result<f64> {
    Ok(t.item()?.as_f64())
}

fn report_row<S: Scalar>(step: u64, l: &Losses<S>, counts: &[usize]) -> Result<ReportRow> {
    Ok(ReportRow {
        step,
        l_diff: loss_value(&l.l_diff)?,
        l_bal: loss_value(&l.l_bal)?,
        mi: loss_value(&l.mi)?,
        total: loss_value(&l.total)?,
        usage_entropy: usage_entropy(counts),
    })
}

/// Model, optimizer and loop state.
pub struct Trainer<S: Scalar = f64> {
    pub cfg: TrainConfig,
    pub model: KdpModel<S>,
    pub schedule: NoiseSchedule<S>,
    opt: Adam<S>,
    params: Vec<(String, Tensor<S>)>,
    step: u64,
    ema: Option<f64>,
    best: f64,
    usage: Vec<usize>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(cfg: &TrainConfig, obs_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[INIT_STREAM]));
        let model = KdpModel::new(&cfg.model_config(obs_dim), &mut rng)?;
        Self::from_model(cfg, model)
    }

    pub fn from_model(cfg: &TrainConfig, model: KdpModel<S>) -> Result<Self> {
        let params = model.parameters();
        let tensors: Vec<Tensor<S>> = params.iter().map(|(_, t)| t.clone()).collect();
        let adam = AdamConfig {
            lr: cfg.lr_at(0),
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            ..AdamConfig::default()
        };
        Ok(Trainer {
            cfg: cfg.clone(),
            opt: Adam::new(adam, &tensors),
            schedule: cfg.schedule.build()?,
            model,
            params,
            step: 0,
            ema: None,
            best: f64::INFINITY,
            usage: vec![0; cfg.n_experts],
        })
    }

    /// Completed updates.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn smoothed_loss(&self) -> Option<f64> {
        self.ema
    }

    fn tensors(&self) -> Vec<Tensor<S>> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    /// The rng stream for update number `step + 1`; independent of how the
    /// run was split across resumes.
    pub fn step_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[STEP_STREAM, self.step]))
    }

    /// Builds the loss graph for a minibatch, with dropout when `train` is set.
    pub fn losses<R: RngCore>(&self, mb: &Minibatch, rng: &mut R, train: bool) -> Result<(Losses<S>, NoisePrediction<S>)> {
        let b = mb.len();
        let h = mb.horizon;
        let obs = to_tensor::<S>(&[b, self.model.cfg.obs_dim], &mb.obs)?;
        let (ts, input, target) = match self.cfg.objective {
            Objective::Diffusion => {
                let c = corrupt(&self.schedule, &mb.actions, b, rng)?;
                (c.ts, c.a_t, c.eps)
            }
            Objective::Regression => (
                vec![0; b],
                Tensor::zeros(&[b, h, ACTION_DIM]),
                to_tensor(&[b, h, ACTION_DIM], &mb.actions)?,
            ),
        };
        let dropout = train.then_some(Dropout { p: self.cfg.p_drop, rng });
        let pred = self.model.forward(&obs, &input, &ts, dropout)?;
        let losses = composite_loss(
            &pred,
            &target,
            &mb.labels,
            self.cfg.n_categories,
            self.cfg.lambda_bal,
            self.cfg.gamma_mi,
        )?;
        Ok((losses, pred))
    }

    /// One update on a prepared minibatch, drawing noise and dropout from
    /// `rng`.
    pub fn update<R: RngCore>(&mut self, mb: &Minibatch, rng: &mut R) -> Result<ReportRow> {
        let next = self.step + 1;
        let (losses, pred) = match self.losses(mb, rng, true) {
            Ok(v) => v,
            Err(PipelineError::Model(kdp_core::DenoiserError::Numerics(NumericsError::NonFinite { op })))
            | Err(PipelineError::Numerics(NumericsError::NonFinite { op })) => {
                return Err(PipelineError::NonFinite {
                    what: format!("forward value in {op}"),
                    step: next,
                });
            }
            Err(e) => return Err(e),
        };
        let counts = selection_counts(&pred.decisions, self.model.cfg.n_experts);
        let row = report_row(next, &losses, &counts)?;
        if !row.total.is_finite() {
            return Err(PipelineError::NonFinite {
                what: "loss".into(),
                step: next,
            });
        }
        let params = self.tensors();
        losses.total.backward().map_err(|e| match e {
            NumericsError::NonFinite { op } => PipelineError::NonFinite {
                what: format!("gradient in {op}"),
                step: next,
            },
            e => e.into(),
        })?;
        self.opt.set_lr(self.cfg.lr_at(self.step));
        self.opt.step(&params)?;
        kdp_core::numerics::zero_grads(&params);
        self.step = next;
        self.usage.iter_mut().zip(&counts).for_each(|(u, c)| *u += c);
        let a = self.cfg.smoothing;
        self.ema = Some(match self.ema {
            None => row.l_diff,
            Some(e) => a * e + (1.0 - a) * row.l_diff,
        });
        Ok(row)
    }

    /// One full training step: sample a minibatch from `ds` with this step's
    /// rng stream, then update.
    pub fn train_step(&mut self, ds: &DemoDataset) -> Result<ReportRow> {
        let mut rng = self.step_rng();
        let mb = ds.sample_minibatch(self.cfg.batch_size, self.cfg.horizon, &mut rng)?;
        self.update(&mb, &mut rng)
    }

    /// Loss values on a minibatch without updating, in eval mode.
    pub fn evaluate_losses<R: RngCore>(&self, mb: &Minibatch, rng: &mut R) -> Result<ReportRow> {
        let (l, pred) = no_grad(|| self.losses(mb, rng, false))?;
        report_row(self.step, &l, &selection_counts(&pred.decisions, self.model.cfg.n_experts))
    }

    fn records(&self) -> Vec<Record> {
        let mut out = records_from(&self.params);
        let (m, v) = self.opt.moments();
        for (((name, t), m), v) in self.params.iter().zip(m).zip(v) {
            let shape = t.shape().to_vec();
            out.push(Record {
                name: format!("optim.m.{name}"),
                shape: shape.clone(),
                values: m.iter().map(|x| x.as_f64()).collect(),
            });
            out.push(Record {
                name: format!("optim.v.{name}"),
                shape,
                values: v.iter().map(|x| x.as_f64()).collect(),
            });
        }
        let ema = self.ema.unwrap_or(f64::NAN);
        out.push(Record {
            name: "train.state".into(),
            shape: vec![4],
            values: vec![
                self.step as f64,
                self.opt.steps_taken() as f64,
                if ema.is_nan() { -1.0 } else { ema },
                self.best.min(f64::MAX),
            ],
        });
        out
    }

    /// Writes `path` and its metadata sidecar.
    pub fn save_checkpoint(&self, path: &Path, stats_hash: &str) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_records(&mut w, &self.records())?;
        w.flush()?;
        let meta = CheckpointMeta {
            step: self.step,
            stats_hash: stats_hash.to_string(),
            train: self.cfg.clone(),
            model: self.model.cfg.clone(),
        };
        std::fs::write(sidecar_path(path), meta.to_toml())?;
        Ok(())
    }

    /// Restores model, optimizer and loop state from a checkpoint written
    /// by a run with the same model shape.
    pub fn resume(cfg: &TrainConfig, path: &Path) -> Result<(Self, CheckpointMeta)> {
        let meta = CheckpointMeta::load(path)?;
        let model_cfg = cfg.model_config(meta.model.obs_dim);
        if model_cfg != meta.model {
            return Err(PipelineError::Config(format!(
                "model settings differ from checkpoint {}: run has {:?}, checkpoint has {:?}",
                path.display(),
                model_cfg,
                meta.model
            )));
        }
        if cfg.objective != meta.train.objective {
            return Err(PipelineError::Config("objective differs from checkpoint".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = KdpModel::new(&model_cfg, &mut rng)?;
        let mut trainer = Trainer::from_model(cfg, model)?;
        let records = read_records(&mut std::io::BufReader::new(std::fs::File::open(path)?))?;
        load_into(&trainer.params, &records)?;
        let find = |name: &str| {
            records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| PipelineError::Checkpoint(format!("{} lacks {name}", path.display())))
        };
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (name, _) in &trainer.params {
            first.push(find(&format!("optim.m.{name}"))?.values.iter().map(|x| S::lit(*x)).collect());
            second.push(find(&format!("optim.v.{name}"))?.values.iter().map(|x| S::lit(*x)).collect());
        }
        let state = &find("train.state")?.values;
        if state.len() != 4 {
            return Err(PipelineError::Checkpoint("malformed train.state".into()));
        }
        trainer.opt.restore(state[1] as u64, first, second)?;
        trainer.step = state[0] as u64;
        trainer.ema = if state[2] < 0.0 { None } else { Some(state[2]) };
        trainer.best = if state[3] == f64::MAX { f64::INFINITY } else { state[3] };
        Ok((trainer, meta))
    }
}

/// Sidecar stored next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub step: u64,
    pub stats_hash: String,
    pub train: TrainConfig,
    pub model: ModelConfig,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.toml");
    ckpt.with_file_name(name)
}

impl CheckpointMeta {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("metadata serializes")
    }

    pub fn load(ckpt: &Path) -> Result<Self> {
        let p = sidecar_path(ckpt);
        let text = std::fs::read_to_string(&p).map_err(|e| PipelineError::Checkpoint(format!("{}: {e}", p.display())))?;
        toml::from_str(&text).map_err(|e| PipelineError::Checkpoint(format!("{}: {e}", p.display())))
    }
}

/// Loads only the weights of a checkpoint for inference.
pub fn load_model<S: Scalar>(path: &Path) -> Result<(KdpModel<S>, CheckpointMeta)> {
    let meta = CheckpointMeta::load(path)?;
    let model = KdpModel::new(&meta.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    let records = read_records(&mut std::io::BufReader::new(std::fs::File::open(path)?))?;
    load_into(&model.parameters(), &records)?;
    Ok((model, meta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    /// Rows for the updates run by this call.
    pub rows: Vec<ReportRow>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    /// Hard selection counts per expert over all updates of this call.
    pub usage: Vec<usize>,
    pub wall_clock: std::time::Duration,
}

pub const LAST_CHECKPOINT: &str = "last.kdpc";
pub const BEST_CHECKPOINT: &str = "best.kdpc";
pub const DIAGNOSTIC_CHECKPOINT: &str = "diagnostic.kdpc";

/// Trains until `cfg.steps` updates, writing `last.kdpc` every
/// `checkpoint_every` updates and `best.kdpc` whenever the smoothed
/// diffusion loss improves at such a boundary. A non-finite loss writes
/// `diagnostic.kdpc` with the pre-update weights and aborts.
pub fn fit<S: Scalar>(
    ds: &DemoDataset,
    cfg: &TrainConfig,
    ckpt_dir: &Path,
    resume: Option<&Path>,
    mut on_row: impl FnMut(&ReportRow),
) -> Result<(Trainer<S>, FitOutcome)> {
    let hash = ds.stats.hash();
    let mut trainer = match resume {
        Some(path) => {
            let (t, meta) = Trainer::<S>::resume(cfg, path)?;
            if meta.stats_hash != hash {
                return Err(PipelineError::StatsMismatch {
                    expected: meta.stats_hash,
                    found: hash,
                });
            }
            t
        }
        None => Trainer::new(cfg, ds.obs_dim)?,
    };
    if trainer.model.cfg.obs_dim != ds.obs_dim {
        return Err(PipelineError::Config(format!(
            "dataset observation width {} differs from model width {}",
            ds.obs_dim, trainer.model.cfg.obs_dim
        )));
    }
    if ds.total_steps() == 0 {
        return Err(PipelineError::Usage("dataset has no steps".into()));
    }
    std::fs::create_dir_all(ckpt_dir)?;
    let start = std::time::Instant::now();
    let last = ckpt_dir.join(LAST_CHECKPOINT);
    let best_path = ckpt_dir.join(BEST_CHECKPOINT);
    let mut best_written = resume.is_some() && best_path.exists();
    let mut rows = Vec::new();
    while trainer.step < cfg.steps as u64 {
        let mut rng = trainer.step_rng();
        let mb = ds.sample_minibatch(cfg.batch_size, cfg.horizon, &mut rng)?;
        let row = match trainer.update(&mb, &mut rng) {
            Ok(r) => r,
            Err(e @ PipelineError::NonFinite { .. }) => {
                let diag = ckpt_dir.join(DIAGNOSTIC_CHECKPOINT);
                trainer.save_checkpoint(&diag, &hash)?;
                return Err(PipelineError::Diverged {
                    cause: e.to_string(),
                    snapshot: diag,
                });
            }
            Err(e) => return Err(e),
        };
        on_row(&row);
        rows.push(row);
        let done = trainer.step;
        if done % cfg.checkpoint_every as u64 == 0 || done == cfg.steps as u64 {
            let ema = trainer.ema.unwrap_or(f64::INFINITY);
            let improved = ema < trainer.best;
            if improved {
                trainer.best = ema;
            }
            trainer.save_checkpoint(&last, &hash)?;
            if improved {
                trainer.save_checkpoint(&best_path, &hash)?;
                best_written = true;
            }
        }
    }
    if rows.is_empty() {
        trainer.save_checkpoint(&last, &hash)?;
    }
    let outcome = FitOutcome {
        rows,
        last_checkpoint: last,
        best_checkpoint: best_written.then_some(best_path),
        usage: trainer.usage.clone(),
        wall_clock: start.elapsed(),
    };
    Ok((trainer, outcome))
}
