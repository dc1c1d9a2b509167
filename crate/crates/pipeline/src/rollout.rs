//! Online inference and closed-loop evaluation: the denoising sampler,
//! receding-horizon execution, per-episode metrics, activation analysis and
//! latency measurement.

use std::io::Write;
use std::time::Instant;

use kdp_core::{no_grad, ActionSequence, KdpModel, ModelConfig, NoiseSchedule, Preset, RoutingDecision, Scalar, Tensor, ACTION_DIM};
use kdp_driveworld::log::LogRecord;
use kdp_driveworld::vehicle::DT;
use kdp_driveworld::{Cause, ScenarioConfig, ScenarioKind, World};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::demos::ObsStats;
use crate::error::{PipelineError, Result};
use crate::expert::scripted_expert;
use crate::parallel::{derive_seed, parallel_map};
use crate::train::{NoisePredictor, Objective};

const EVAL_STREAM: u64 = 3;
const SAMPLER_STREAM: u64 = 4;
/// Environment steps per temporal activation bucket.
pub const BUCKET_STEPS: usize = 5;
pub const LATENCY_WARMUP: usize = 10;

/// One routing decision made while producing an action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub env_step: usize,
    /// Denoising step; 0 for one-shot policies.
    pub t: usize,
    pub gate: Vec<f64>,
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
}

impl ActivationRecord {
    pub fn new<S: Scalar>(env_step: usize, t: usize, d: &RoutingDecision<S>) -> Self {
        ActivationRecord {
            env_step,
            t,
            gate: d.gate.iter().map(|x| x.as_f64()).collect(),
            selected: d.selected.clone(),
            weights: d.weights.iter().map(|x| x.as_f64()).collect(),
        }
    }

    pub fn decision(&self) -> RoutingDecision<f64> {
        RoutingDecision {
            gate: self.gate.clone(),
            selected: self.selected.clone(),
            weights: self.weights.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub scenario: Option<ScenarioKind>,
    pub label: usize,
    pub records: Vec<ActivationRecord>,
}

impl ActivationTrace {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| PipelineError::Format(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Parses records and re-checks every routing invariant.
    pub fn read_jsonl(text: &str, label: usize) -> Result<Self> {
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: ActivationRecord = serde_json::from_str(line).map_err(|e| PipelineError::Format(e.to_string()))?;
            r.decision().validate()?;
            records.push(r);
        }
        Ok(ActivationTrace {
            scenario: ScenarioKind::from_category(label),
            label,
            records,
        })
    }
}

/// Sampled sequences with the routing of every denoising step; the outer
/// index of `routing` is the sample.
pub struct SampleOutput<S: Scalar> {
    pub actions: Vec<ActionSequence<S>>,
    pub routing: Vec<Vec<(usize, RoutingDecision<S>)>>,
}

fn check_finite<S: Scalar>(v: &[S], t: usize) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(PipelineError::NonFinite {
            what: format!("sampler state at denoising step {t}"),
            step: t as u64,
        });
    }
    Ok(())
}

/// Batched reverse chain. Sample `b` draws its initial noise and any
/// per-step noise from `rngs[b]`, so results do not depend on batch
/// composition. `obs` is `[B, obs_dim]` and already normalized.
pub fn sample_batch<S: Scalar, P: NoisePredictor<S> + ?Sized, R: Rng>(
    model: &P,
    schedule: &NoiseSchedule<S>,
    obs: &Tensor<S>,
    eta: f64,
    rngs: &mut [R],
    record: bool,
) -> Result<SampleOutput<S>> {
    let b = obs.shape()[0];
    if rngs.len() != b {
        return Err(PipelineError::Usage(format!("{} rng streams for {b} samples", rngs.len())));
    }
    let h = model.horizon();
    let per = h * ACTION_DIM;
    let eta_s = S::lit(eta);
    no_grad(|| {
        let ctx = model.context(obs)?;
        let mut a: Vec<S> = Vec::with_capacity(b * per);
        for rng in rngs.iter_mut() {
            a.extend((0..per).map(|_| S::lit(rng.sample::<f64, _>(StandardNormal))));
        }
        let mut routing = vec![Vec::new(); if record { b } else { 0 }];
        for t in (1..=schedule.steps()).rev() {
            let input = Tensor::from_vec(&[b, h, ACTION_DIM], a.clone()).map_err(|_| PipelineError::NonFinite {
                what: format!("sampler state at denoising step {t}"),
                step: t as u64,
            })?;
            let pred = model.predict(&ctx, &input, &vec![t; b])?;
            let eps = pred.estimate.data();
            check_finite(&eps, t)?;
            let mut next = Vec::with_capacity(b * per);
            for (s, rng) in rngs.iter_mut().enumerate() {
                let range = s * per..(s + 1) * per;
                let z: Vec<S> = if t > 1 && eta > 0.0 {
                    (0..per).map(|_| S::lit(rng.sample::<f64, _>(StandardNormal))).collect()
                } else {
                    vec![S::zero(); per]
                };
                next.extend(schedule.reverse_step(&a[range.clone()], &eps[range], t, eta_s, &z)?);
            }
            drop(eps);
            check_finite(&next, t)?;
            a = next;
            if record {
                for (s, d) in pred.decisions.into_iter().enumerate() {
                    routing[s].push((t, d));
                }
            }
        }
        let actions = a
            .chunks(per)
            .map(|c| ActionSequence::new(h, c.to_vec()).expect("horizon rows").clamped())
            .collect();
        Ok(SampleOutput { actions, routing })
    })
}

/// One observation, one sequence.
pub fn sample_actions<S: Scalar, P: NoisePredictor<S> + ?Sized, R: Rng>(
    obs: &[S],
    model: &P,
    schedule: &NoiseSchedule<S>,
    eta: f64,
    rng: &mut R,
) -> Result<ActionSequence<S>> {
    let obs = Tensor::from_vec(&[1, obs.len()], obs.to_vec())?;
    let mut rngs = [rng];
    let out = sample_batch(model, schedule, &obs, eta, &mut rngs, false)?;
    Ok(out.actions.into_iter().next().expect("one sample"))
}

/// One-shot prediction for the regression objective.
pub fn regress_batch<S: Scalar, P: NoisePredictor<S> + ?Sized>(model: &P, obs: &Tensor<S>) -> Result<SampleOutput<S>> {
    let b = obs.shape()[0];
    let h = model.horizon();
    no_grad(|| {
        let ctx = model.context(obs)?;
        let pred = model.predict(&ctx, &Tensor::zeros(&[b, h, ACTION_DIM]), &vec![0; b])?;
        let est = pred.estimate.to_vec();
        let actions = est
            .chunks(h * ACTION_DIM)
            .map(|c| ActionSequence::new(h, c.to_vec()).expect("horizon rows").clamped())
            .collect();
        let routing = pred.decisions.into_iter().map(|d| vec![(0, d)]).collect();
        Ok(SampleOutput { actions, routing })
    })
}

/// First action of each sequence, the only one executed.
pub fn first_actions<S: Scalar>(seqs: &[ActionSequence<S>]) -> Vec<[f64; 2]> {
    seqs.iter().map(|s| s.row(0).map(|x| x.as_f64())).collect()
}

/// An action and the routing behind it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Decision {
    pub action: [f64; 2],
    pub routing: Vec<(usize, RoutingDecision<f64>)>,
}

/// Drives a set of worlds in lockstep. `ids` names the episode each world
/// belongs to.
pub trait Policy {
    fn act(&mut self, ids: &[usize], worlds: &[&World]) -> Result<Vec<Decision>>;
}

/// The demonstrator through the evaluation harness.
pub struct ScriptedPolicy;

impl Policy for ScriptedPolicy {
    fn act(&mut self, _ids: &[usize], worlds: &[&World]) -> Result<Vec<Decision>> {
        Ok(worlds
            .iter()
            .map(|w| Decision {
                action: scripted_expert(w),
                routing: Vec::new(),
            })
            .collect())
    }
}

/// Same action in every world.
pub struct ConstantPolicy(pub [f64; 2]);

impl Policy for ConstantPolicy {
    fn act(&mut self, _ids: &[usize], worlds: &[&World]) -> Result<Vec<Decision>> {
        Ok(vec![
            Decision {
                action: self.0,
                routing: Vec::new()
            };
            worlds.len()
        ])
    }
}

/// Trained network acting through the sampler, with one rng stream per
/// episode.
pub struct DiffusionPolicy<'a, S: Scalar, P: NoisePredictor<S> + ?Sized = KdpModel<S>> {
    pub model: &'a P,
    pub schedule: &'a NoiseSchedule<S>,
    pub stats: &'a ObsStats,
    pub objective: Objective,
    pub eta: f64,
    pub record: bool,
    pub workers: usize,
    rngs: Vec<ChaCha8Rng>,
}

impl<'a, S: Scalar, P: NoisePredictor<S> + ?Sized> DiffusionPolicy<'a, S, P> {
    pub fn new(model: &'a P, schedule: &'a NoiseSchedule<S>, stats: &'a ObsStats, seeds: &[u64]) -> Self {
        DiffusionPolicy {
            model,
            schedule,
            stats,
            objective: Objective::Diffusion,
            eta: 0.0,
            record: true,
            workers: 1,
            rngs: seeds.iter().map(|s| ChaCha8Rng::seed_from_u64(*s)).collect(),
        }
    }

    fn act_chunk(&self, obs: Vec<S>, mut rngs: Vec<ChaCha8Rng>) -> Result<(Vec<Decision>, Vec<ChaCha8Rng>)> {
        let b = rngs.len();
        let obs = Tensor::from_vec(&[b, obs.len() / b.max(1)], obs)?;
        let out = match self.objective {
            Objective::Diffusion => sample_batch(self.model, self.schedule, &obs, self.eta, &mut rngs, self.record)?,
            Objective::Regression => regress_batch(self.model, &obs)?,
        };
        let actions = first_actions(&out.actions);
        let mut routing = out.routing.into_iter();
        let decisions = actions
            .into_iter()
            .map(|action| {
                let r = if self.record {
                    routing.next().unwrap_or_default()
                } else {
                    Vec::new()
                };
                let routing = r
                    .into_iter()
                    .map(|(t, d)| {
                        let d = RoutingDecision {
                            gate: d.gate.iter().map(|x| x.as_f64()).collect(),
                            selected: d.selected,
                            weights: d.weights.iter().map(|x| x.as_f64()).collect(),
                        };
                        (t, d)
                    })
                    .collect();
                Decision { action, routing }
            })
            .collect();
        Ok((decisions, rngs))
    }
}

impl<S: Scalar, P: NoisePredictor<S> + ?Sized> Policy for DiffusionPolicy<'_, S, P> {
    fn act(&mut self, ids: &[usize], worlds: &[&World]) -> Result<Vec<Decision>> {
        let n = ids.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let workers = self.workers.clamp(1, n);
        let chunk = n.div_ceil(workers);
        let mut jobs = Vec::new();
        for (cid, cw) in ids.chunks(chunk).zip(worlds.chunks(chunk)) {
            let obs: Vec<S> = cw.iter().flat_map(|w| self.stats.normalize(&w.observe())).map(S::lit).collect();
            let rngs: Vec<ChaCha8Rng> = cid.iter().map(|&i| self.rngs[i].clone()).collect();
            jobs.push((cid.to_vec(), obs, rngs));
        }
        let this = &*self;
        let results = parallel_map(jobs.len(), workers, |j| this.act_chunk(jobs[j].1.clone(), jobs[j].2.clone()));
        let mut out = Vec::with_capacity(n);
        for ((cid, _, _), r) in jobs.iter().zip(results) {
            let (decisions, rngs) = r?;
            for (&i, rng) in cid.iter().zip(rngs) {
                self.rngs[i] = rng;
            }
            out.extend(decisions);
        }
        Ok(out)
    }
}

/// Per-episode outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub scenario: ScenarioKind,
    pub episode: usize,
    pub seed: u64,
    pub success: bool,
    pub collision: bool,
    pub cause: Cause,
    pub reward: f64,
    /// Mean ego speed over executed steps, m/s.
    pub avg_velocity: f64,
    /// Population variance of per-step finite-difference accelerations.
    pub accel_variance: f64,
    pub steps: usize,
}

impl EpisodeMetrics {
    /// `speeds` holds the speed before the first step followed by the speed
    /// after every step.
    pub fn from_run(scenario: ScenarioKind, episode: usize, seed: u64, cause: Cause, reward: f64, speeds: &[f64]) -> Self {
        let steps = speeds.len().saturating_sub(1);
        let (avg_velocity, accel_variance) = if steps == 0 {
            (0.0, 0.0)
        } else {
            let avg = speeds[1..].iter().sum::<f64>() / steps as f64;
            let acc: Vec<f64> = speeds.windows(2).map(|w| (w[1] - w[0]) / DT).collect();
            let m = acc.iter().sum::<f64>() / steps as f64;
            (avg, acc.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / steps as f64)
        };
        EpisodeMetrics {
            scenario,
            episode,
            seed,
            success: cause == Cause::Success,
            collision: cause == Cause::Collision,
            cause,
            reward,
            avg_velocity,
            accel_variance,
            steps,
        }
    }
}

/// Everything produced by one evaluated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub metrics: EpisodeMetrics,
    pub trace: ActivationTrace,
    pub log: Vec<LogRecord>,
}

/// One episode to run.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpec {
    pub config: ScenarioConfig,
    pub episode: usize,
    pub seed: u64,
}

/// Evaluation seed of episode `e` of scenario `s`.
pub fn eval_seed(master: u64, scenario: usize, episode: usize) -> u64 {
    derive_seed(master, &[EVAL_STREAM, scenario as u64, episode as u64])
}

/// `n` episodes of each config with seeds from [`eval_seed`].
pub fn episode_specs(configs: &[ScenarioConfig], n: usize, master: u64) -> Vec<EpisodeSpec> {
    let mut out = Vec::new();
    for (s, cfg) in configs.iter().enumerate() {
        for e in 0..n {
            out.push(EpisodeSpec {
                config: cfg.clone(),
                episode: out.len(),
                seed: eval_seed(master, s, e),
            });
        }
    }
    out
}

/// Sampler seeds matching [`episode_specs`] order, one per episode.
pub fn sampler_seeds(configs: &[ScenarioConfig], n: usize, master: u64) -> Vec<u64> {
    episode_specs(configs, n, master)
        .iter()
        .map(|s| derive_seed(s.seed, &[SAMPLER_STREAM]))
        .collect()
}

/// Runs every episode to termination, all worlds advancing together so
/// the policy sees one batch per step. Only the first action of each
/// decision is executed.
pub fn run_episodes(specs: &[EpisodeSpec], policy: &mut dyn Policy, keep_logs: bool) -> Result<Vec<EpisodeResult>> {
    let mut worlds = specs
        .iter()
        .map(|s| {
            if keep_logs {
                World::with_log(s.config.clone(), s.seed)
            } else {
                World::new(s.config.clone(), s.seed)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut speeds: Vec<Vec<f64>> = worlds.iter().map(|w| vec![w.ego().speed]).collect();
    let mut rewards = vec![0.0; specs.len()];
    let mut traces: Vec<ActivationTrace> = specs
        .iter()
        .map(|s| ActivationTrace {
            scenario: Some(s.config.kind),
            label: s.config.kind.category(),
            records: Vec::new(),
        })
        .collect();
    loop {
        let live: Vec<usize> = (0..worlds.len()).filter(|&i| !worlds[i].is_terminated()).collect();
        if live.is_empty() {
            break;
        }
        let refs: Vec<&World> = live.iter().map(|&i| &worlds[i]).collect();
        let decisions = policy.act(&live, &refs)?;
        if decisions.len() != live.len() {
            return Err(PipelineError::Usage(format!(
                "policy returned {} actions for {} worlds",
                decisions.len(),
                live.len()
            )));
        }
        for (&i, d) in live.iter().zip(decisions) {
            let env_step = worlds[i].steps();
            traces[i]
                .records
                .extend(d.routing.iter().map(|(t, r)| ActivationRecord::new(env_step, *t, r)));
            let action = [d.action[0].clamp(-1.0, 1.0), d.action[1].clamp(-1.0, 1.0)];
            let out = worlds[i].step(action)?;
            rewards[i] += out.reward;
            speeds[i].push(worlds[i].ego().speed);
        }
    }
    Ok(worlds
        .iter_mut()
        .zip(specs)
        .zip(traces)
        .enumerate()
        .map(|(i, ((w, s), trace))| EpisodeResult {
            metrics: EpisodeMetrics::from_run(s.config.kind, s.episode, s.seed, w.cause(), rewards[i], &speeds[i]),
            trace,
            log: w.take_log(),
        })
        .collect())
}

/// A single episode through the same harness.
pub fn run_episode(spec: &EpisodeSpec, policy: &mut dyn Policy) -> Result<EpisodeResult> {
    Ok(run_episodes(std::slice::from_ref(spec), policy, true)?.remove(0))
}

/// Means over a group of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub scenario: ScenarioKind,
    pub episodes: usize,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub reward: f64,
    pub avg_velocity: f64,
    pub accel_variance: f64,
    pub steps: f64,
}

impl Aggregate {
    pub fn of(scenario: ScenarioKind, eps: &[&EpisodeMetrics]) -> Self {
        let n = eps.len().max(1) as f64;
        let mean = |f: &dyn Fn(&EpisodeMetrics) -> f64| eps.iter().map(|e| f(e)).sum::<f64>() / n;
        Aggregate {
            scenario,
            episodes: eps.len(),
            success_rate: eps.iter().filter(|e| e.success).count() as f64 / n,
            collision_rate: eps.iter().filter(|e| e.collision).count() as f64 / n,
            reward: mean(&|e| e.reward),
            avg_velocity: mean(&|e| e.avg_velocity),
            accel_variance: mean(&|e| e.accel_variance),
            steps: mean(&|e| e.steps as f64),
        }
    }
}

/// Per-scenario aggregates in [`ScenarioKind::ALL`] order, skipping
/// scenarios without episodes.
pub fn aggregate(metrics: &[EpisodeMetrics]) -> Vec<Aggregate> {
    ScenarioKind::ALL
        .iter()
        .filter_map(|&k| {
            let eps: Vec<&EpisodeMetrics> = metrics.iter().filter(|m| m.scenario == k).collect();
            (!eps.is_empty()).then(|| Aggregate::of(k, &eps))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub episodes: Vec<EpisodeResult>,
    pub aggregates: Vec<Aggregate>,
}

impl Evaluation {
    pub fn metrics(&self) -> Vec<EpisodeMetrics> {
        self.episodes.iter().map(|e| e.metrics.clone()).collect()
    }

    pub fn traces(&self) -> Vec<ActivationTrace> {
        self.episodes.iter().map(|e| e.trace.clone()).collect()
    }
}

/// `n_episodes` per config with fresh seeds derived from `seed`.
pub fn evaluate(configs: &[ScenarioConfig], policy: &mut dyn Policy, n_episodes: usize, seed: u64, keep_logs: bool) -> Result<Evaluation> {
    if n_episodes == 0 {
        return Err(PipelineError::Usage("need at least one evaluation episode".into()));
    }
    let specs = episode_specs(configs, n_episodes, seed);
    let mut episodes = run_episodes(&specs, policy, keep_logs)?;
    episodes.sort_by_key(|e| e.metrics.episode);
    let aggregates = aggregate(&episodes.iter().map(|e| e.metrics.clone()).collect::<Vec<_>>());
    Ok(Evaluation { episodes, aggregates })
}

pub const METRICS_HEADER: &str = "row,scenario,episode,seed,success,collision,cause,reward,avg_velocity,accel_variance,steps";

fn cause_name(c: Cause) -> &'static str {
    match c {
        Cause::Success => "success",
        Cause::Collision => "collision",
        Cause::OffRoad => "off_road",
        Cause::Timeout => "timeout",
        Cause::Running => "none",
    }
}

/// Per-episode rows followed by one aggregate row per scenario. In
/// aggregate rows `episode` is the episode count and `success`/`collision`
/// are rates.
pub fn write_metrics_csv<W: Write>(mut w: W, metrics: &[EpisodeMetrics], aggregates: &[Aggregate]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for m in metrics {
        writeln!(
            w,
            "episode,{},{},{},{},{},{},{},{},{},{}",
            m.scenario,
            m.episode,
            m.seed,
            u8::from(m.success),
            u8::from(m.collision),
            cause_name(m.cause),
            m.reward,
            m.avg_velocity,
            m.accel_variance,
            m.steps
        )?;
    }
    for a in aggregates {
        writeln!(
            w,
            "aggregate,{},{},,{},{},,{},{},{},{}",
            a.scenario, a.episodes, a.success_rate, a.collision_rate, a.reward, a.avg_velocity, a.accel_variance, a.steps
        )?;
    }
    Ok(())
}

/// Gate and top-K weight averages per environment-step bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalRow {
    pub scenario: usize,
    pub bucket: usize,
    pub decisions: usize,
    /// Mean full softmax gate.
    pub gate: Vec<f64>,
    /// Mean renormalized top-K weight, zero for unselected experts.
    pub topk: Vec<f64>,
}

/// Hard selection frequencies and mean top-K weights for one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRow {
    pub scenario: usize,
    pub decisions: usize,
    /// Fraction of decisions selecting each expert; sums to K.
    pub selection: Vec<f64>,
    pub topk: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActivationAnalysis {
    pub temporal: Vec<TemporalRow>,
    pub scenario: Vec<ScenarioRow>,
}

/// Aggregates traces per scenario label: the temporal matrix averages over
/// denoising steps within `bucket_steps`-step windows, the scenario rows
/// over everything.
pub fn analyze_activations(traces: &[ActivationTrace], n_experts: usize, bucket_steps: usize) -> Result<ActivationAnalysis> {
    if traces.iter().all(|t| t.records.is_empty()) {
        return Err(PipelineError::Usage("no activation records to analyze".into()));
    }
    let bucket_steps = bucket_steps.max(1);
    use std::collections::BTreeMap;
    let mut temporal: BTreeMap<(usize, usize), (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut scen: BTreeMap<usize, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for tr in traces {
        for r in &tr.records {
            if r.gate.len() != n_experts {
                return Err(PipelineError::Usage(format!(
                    "record has {} gates, expected {n_experts}",
                    r.gate.len()
                )));
            }
            let te = temporal
                .entry((tr.label, r.env_step / bucket_steps))
                .or_insert_with(|| (0, vec![0.0; n_experts], vec![0.0; n_experts]));
            te.0 += 1;
            te.1.iter_mut().zip(&r.gate).for_each(|(a, g)| *a += g);
            let se = scen
                .entry(tr.label)
                .or_insert_with(|| (0, vec![0.0; n_experts], vec![0.0; n_experts]));
            se.0 += 1;
            for (&i, &w) in r.selected.iter().zip(&r.weights) {
                te.2[i] += w;
                se.1[i] += 1.0;
                se.2[i] += w;
            }
        }
    }
    let div = |v: Vec<f64>, n: usize| v.into_iter().map(|x| x / n as f64).collect::<Vec<_>>();
    Ok(ActivationAnalysis {
        temporal: temporal
            .into_iter()
            .map(|((scenario, bucket), (n, g, w))| TemporalRow {
                scenario,
                bucket,
                decisions: n,
                gate: div(g, n),
                topk: div(w, n),
            })
            .collect(),
        scenario: scen
            .into_iter()
            .map(|(scenario, (n, s, w))| ScenarioRow {
                scenario,
                decisions: n,
                selection: div(s, n),
                topk: div(w, n),
            })
            .collect(),
    })
}

fn scenario_name(label: usize) -> String {
    ScenarioKind::from_category(label)
        .map(|k| k.to_string())
        .unwrap_or_else(|| format!("category_{label}"))
}

fn expert_columns(n: usize) -> String {
    (0..n).map(|i| format!(",e{i}")).collect()
}

fn values(v: &[f64]) -> String {
    v.iter().map(|x| format!(",{x}")).collect()
}

impl ActivationAnalysis {
    /// Columns `scenario,bucket,start_step,decisions,variant,e0..`; the
    /// `gate` variant averages the full softmax, `topk` the renormalized
    /// weights after selection.
    pub fn write_temporal_csv<W: Write>(&self, mut w: W, n_experts: usize, bucket_steps: usize) -> Result<()> {
        writeln!(w, "scenario,bucket,start_step,decisions,variant{}", expert_columns(n_experts))?;
        for r in &self.temporal {
            let head = format!(
                "{},{},{},{}",
                scenario_name(r.scenario),
                r.bucket,
                r.bucket * bucket_steps,
                r.decisions
            );
            writeln!(w, "{head},gate{}", values(&r.gate))?;
            writeln!(w, "{head},topk{}", values(&r.topk))?;
        }
        Ok(())
    }

    /// Columns `scenario,decisions,variant,e0..`; `selection` rows are hard
    /// selection frequencies, `topk` rows mean renormalized weights.
    pub fn write_scenario_csv<W: Write>(&self, mut w: W, n_experts: usize) -> Result<()> {
        writeln!(w, "scenario,decisions,variant{}", expert_columns(n_experts))?;
        for r in &self.scenario {
            let head = format!("{},{}", scenario_name(r.scenario), r.decisions);
            writeln!(w, "{head},selection{}", values(&r.selection))?;
            writeln!(w, "{head},topk{}", values(&r.topk))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRow {
    pub preset: Preset,
    pub params: usize,
    pub diffusion_steps: usize,
    pub trials: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Wall-clock of one full sampling call per decision, after
/// [`LATENCY_WARMUP`] untimed calls. The standard deviation is the
/// population one.
pub fn measure_latency<S: Scalar>(model: &KdpModel<S>, schedule: &NoiseSchedule<S>, trials: usize, seed: u64) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(PipelineError::Usage("need at least one timed trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs: Vec<S> = (0..model.cfg.obs_dim)
        .map(|_| S::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let mut times = Vec::with_capacity(trials);
    for i in 0..LATENCY_WARMUP + trials {
        let start = Instant::now();
        let a = sample_actions(&obs, model, schedule, 0.0, &mut rng)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(a);
        if i >= LATENCY_WARMUP {
            times.push(ms);
        }
    }
    let mean = times.iter().sum::<f64>() / trials as f64;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / trials as f64;
    Ok((mean, var.sqrt()))
}

/// Latency of randomly initialized models of each preset.
pub fn measure_presets<S: Scalar>(
    presets: &[Preset],
    base: &ModelConfig,
    schedule: &NoiseSchedule<S>,
    trials: usize,
    seed: u64,
) -> Result<Vec<LatencyRow>> {
    presets
        .iter()
        .map(|&p| {
            let (n_emb, n_head, n_layer) = p.dims();
            let cfg = ModelConfig {
                n_emb,
                n_head,
                n_layer,
                ..base.clone()
            };
            let model = KdpModel::<S>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let (mean_ms, std_ms) = measure_latency(&model, schedule, trials, seed)?;
            Ok(LatencyRow {
                preset: p,
                params: model.num_params(),
                diffusion_steps: schedule.steps(),
                trials,
                mean_ms,
                std_ms,
            })
        })
        .collect()
}

pub const LATENCY_HEADER: &str = "preset,params,diffusion_steps,trials,mean_ms,std_ms";

pub fn write_latency_csv<W: Write>(mut w: W, rows: &[LatencyRow]) -> Result<()> {
    writeln!(w, "{LATENCY_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.preset, r.params, r.diffusion_steps, r.trials, r.mean_ms, r.std_ms
        )?;
    }
    Ok(())
}
