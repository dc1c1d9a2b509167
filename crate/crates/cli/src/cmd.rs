use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use kdp_core::{ModelConfig, Scalar, OBS_DIM};
use kdp_driveworld::ScenarioKind;
use kdp_pipeline::demos::DemoDataset;
use kdp_pipeline::rollout::{
    analyze_activations, evaluate, measure_latency, measure_presets, sampler_seeds, write_latency_csv, write_metrics_csv, ActivationTrace,
    DiffusionPolicy, Evaluation, LatencyRow, ScriptedPolicy,
};
use kdp_pipeline::train::{fit, load_model, read_report, CheckpointMeta, ReportRow, BEST_CHECKPOINT, LAST_CHECKPOINT, REPORT_HEADER};
use kdp_pipeline::{generate_dataset, PipelineError};

use crate::config::{default_scenarios, parse_scenarios, SEED_ENV, SNAPSHOT};
use crate::{AnalyzeArgs, CliError, CommonArgs, EvalArgs, GenDemosArgs, LatencyArgs, PolicyKind, Precision, RunConfig, TrainArgs};

pub const METRICS_CSV: &str = "metrics.csv";
pub const TEMPORAL_CSV: &str = "activations_temporal.csv";
pub const SCENARIO_CSV: &str = "activations_scenario.csv";
pub const LATENCY_CSV: &str = "latency.csv";
pub const REPORT_CSV: &str = "train_report.csv";
pub const TRACES_DIR: &str = "traces";

/// Loads the base config (explicit file, else the output directory's
/// snapshot, else defaults) and applies the common flags.
pub fn base_config(c: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let out = c.out.clone().unwrap_or_else(|| RunConfig::default().paths.out);
            let snap = out.join(SNAPSHOT);
            if snap.exists() {
                RunConfig::load(&snap)?
            } else {
                RunConfig::default()
            }
        }
    };
    if let Some(o) = &c.out {
        cfg.paths.out = o.clone();
    }
    if c.seed.is_some() {
        cfg.seed = c.seed;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(p) = c.precision {
        cfg.precision = p;
    }
    let env = std::env::var(SEED_ENV).ok();
    cfg.resolve_seed(env.as_deref())?;
    Ok(cfg)
}

fn finish(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    cfg.write_snapshot()?;
    Ok(())
}

fn set_scenarios(cfg: &mut RunConfig, names: &[String]) -> Result<(), CliError> {
    if !names.is_empty() {
        cfg.scenarios = default_scenarios(&parse_scenarios(names)?);
    }
    Ok(())
}

fn workers(cfg: &RunConfig) -> usize {
    kdp_pipeline::parallel::resolve_workers(cfg.workers)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn gen_demos(a: &GenDemosArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&a.common)?;
    set_scenarios(&mut cfg, &a.scenarios)?;
    if let Some(n) = a.episodes {
        if n == 0 {
            return Err(CliError::Config("--episodes must be positive".into()));
        }
        cfg.demos.episodes = n;
    }
    if let Some(r) = a.retry_cap {
        cfg.demos.retry_cap = r;
    }
    if let Some(d) = &a.dataset {
        cfg.paths.dataset = Some(d.clone());
    }
    finish(&cfg)?;
    let seed = cfg.train.seed;
    let (ds, summary) = generate_dataset(&cfg.scenarios, cfg.demos.episodes, seed, cfg.demos.retry_cap, workers(&cfg))?;
    let path = cfg.dataset_path();
    ds.save(&path)?;
    for (i, s) in cfg.scenarios.iter().enumerate() {
        println!("{}: {} accepted of {} attempts", s.kind, summary.accepted[i], summary.attempts[i]);
    }
    println!(
        "episodes {} steps {} stats_hash {}",
        ds.episodes.len(),
        ds.total_steps(),
        ds.stats.hash()
    );
    println!("wrote {}", path.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&a.common)?;
    if let Some(d) = &a.dataset {
        cfg.paths.dataset = Some(d.clone());
    }
    if a.resume.is_some() {
        cfg.paths.resume = a.resume.clone();
    }
    let t = &mut cfg.train;
    if let Some(v) = a.preset {
        t.preset = v;
    }
    if let Some(v) = a.objective {
        t.objective = v.into();
    }
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { t.$field = v; })* };
    }
    set!(
        steps,
        batch_size,
        horizon,
        n_experts,
        top_k,
        lr,
        lambda_bal,
        gamma_mi,
        p_drop,
        checkpoint_every
    );
    if let Some(v) = a.diffusion_steps {
        t.schedule.steps = v;
    }
    finish(&cfg)?;
    match cfg.precision {
        Precision::F32 => train_with::<f32>(&cfg),
        Precision::F64 => train_with::<f64>(&cfg),
    }
}

fn train_with<S: Scalar>(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = DemoDataset::load(&cfg.dataset_path())?;
    let report_path = cfg.paths.out.join(REPORT_CSV);
    let mut kept: Vec<ReportRow> = Vec::new();
    if let Some(resume) = &cfg.paths.resume {
        let meta = CheckpointMeta::load(resume)?;
        if report_path.exists() {
            kept = read_report(&std::fs::read_to_string(&report_path)?)?;
            kept.retain(|r| r.step <= meta.step);
        }
    }
    let mut report = create(&report_path)?;
    writeln!(report, "{REPORT_HEADER}")?;
    for r in &kept {
        writeln!(report, "{}", r.csv())?;
    }
    let every = cfg.train.checkpoint_every as u64;
    let mut io_err = None;
    let result = fit::<S>(&ds, &cfg.train, &cfg.checkpoint_dir(), cfg.paths.resume.as_deref(), |r| {
        if let Err(e) = writeln!(report, "{}", r.csv()) {
            io_err.get_or_insert(e);
        }
        if r.step % every == 0 {
            eprintln!(
                "step {} l_diff {:.5} l_bal {:.5} mi {:.5} usage_entropy {:.3}",
                r.step, r.l_diff, r.l_bal, r.mi, r.usage_entropy
            );
        }
    });
    report.flush()?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let (trainer, outcome) = result?;
    println!(
        "trained to step {} in {:.1}s, smoothed loss {}",
        trainer.step(),
        outcome.wall_clock.as_secs_f64(),
        trainer.smoothed_loss().map_or("n/a".into(), |l| format!("{l:.6}"))
    );
    println!("last checkpoint {}", outcome.last_checkpoint.display());
    if let Some(b) = &outcome.best_checkpoint {
        println!("best checkpoint {}", b.display());
    }
    Ok(())
}

fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    let dir = cfg.checkpoint_dir();
    let best = dir.join(BEST_CHECKPOINT);
    if best.exists() {
        best
    } else {
        dir.join(LAST_CHECKPOINT)
    }
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&a.common)?;
    set_scenarios(&mut cfg, &a.scenarios)?;
    if let Some(c) = &a.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    if let Some(d) = &a.dataset {
        cfg.paths.dataset = Some(d.clone());
    }
    if let Some(n) = a.episodes {
        cfg.eval.episodes = n;
    }
    if let Some(e) = a.eta {
        cfg.eval.eta = e;
    }
    if let Some(p) = a.policy {
        cfg.eval.policy = p;
    }
    if a.latency {
        cfg.eval.latency = true;
    }
    if let Some(t) = a.trials {
        cfg.latency.trials = t;
    }
    if cfg.eval.policy == PolicyKind::Model && cfg.paths.checkpoint.is_none() {
        cfg.paths.checkpoint = Some(default_checkpoint(&cfg));
    }
    finish(&cfg)?;
    let seed = cfg.train.seed;
    let n = cfg.eval.episodes;
    let (evaluation, n_experts) = match cfg.eval.policy {
        PolicyKind::Scripted => (evaluate(&cfg.eval_scenarios(), &mut ScriptedPolicy, n, seed, false)?, None),
        PolicyKind::Model => match cfg.precision {
            Precision::F32 => eval_model::<f32>(&cfg)?,
            Precision::F64 => eval_model::<f64>(&cfg)?,
        },
    };
    let out = &cfg.paths.out;
    let mut w = create(&out.join(METRICS_CSV))?;
    write_metrics_csv(&mut w, &evaluation.metrics(), &evaluation.aggregates)?;
    w.flush()?;
    for ag in &evaluation.aggregates {
        println!(
            "{}: success {:.3} collision {:.3} reward {:.2} avg_velocity {:.2} accel_variance {:.3} ({} episodes)",
            ag.scenario, ag.success_rate, ag.collision_rate, ag.reward, ag.avg_velocity, ag.accel_variance, ag.episodes
        );
    }
    if let Some(n_experts) = n_experts {
        let traces = merge_traces(&evaluation);
        let dir = out.join(TRACES_DIR);
        for t in &traces {
            let kind = t.scenario.expect("evaluation traces carry their scenario");
            let mut w = create(&dir.join(format!("{kind}.jsonl")))?;
            t.write_jsonl(&mut w)?;
            w.flush()?;
        }
        write_analysis(out, &traces, n_experts, cfg.eval.bucket_steps)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// One trace per scenario holding the records of all its episodes.
fn merge_traces(ev: &Evaluation) -> Vec<ActivationTrace> {
    let mut out: Vec<ActivationTrace> = Vec::new();
    for ep in &ev.episodes {
        match out.iter_mut().find(|t| t.label == ep.trace.label) {
            Some(t) => t.records.extend(ep.trace.records.iter().cloned()),
            None => out.push(ep.trace.clone()),
        }
    }
    out.retain(|t| !t.records.is_empty());
    out
}

fn write_analysis(out: &Path, traces: &[ActivationTrace], n_experts: usize, bucket: usize) -> Result<(), CliError> {
    if traces.is_empty() {
        return Ok(());
    }
    let analysis = analyze_activations(traces, n_experts, bucket)?;
    let mut w = create(&out.join(TEMPORAL_CSV))?;
    analysis.write_temporal_csv(&mut w, n_experts, bucket)?;
    w.flush()?;
    let mut w = create(&out.join(SCENARIO_CSV))?;
    analysis.write_scenario_csv(&mut w, n_experts)?;
    w.flush()?;
    Ok(())
}

fn eval_model<S: Scalar>(cfg: &RunConfig) -> Result<(Evaluation, Option<usize>), CliError> {
    let ckpt = cfg.paths.checkpoint.as_ref().expect("checkpoint resolved before evaluation");
    let ds = DemoDataset::load(&cfg.dataset_path())?;
    let meta = CheckpointMeta::load(ckpt)?;
    let found = ds.stats.hash();
    if meta.stats_hash != found {
        return Err(PipelineError::StatsMismatch {
            expected: meta.stats_hash,
            found,
        }
        .into());
    }
    let (model, meta) = load_model::<S>(ckpt)?;
    let schedule = meta.train.schedule.build::<S>()?;
    let seed = cfg.train.seed;
    let scenarios = cfg.eval_scenarios();
    let seeds = sampler_seeds(&scenarios, cfg.eval.episodes, seed);
    let mut policy = DiffusionPolicy::new(&model, &schedule, &ds.stats, &seeds);
    policy.objective = meta.train.objective;
    policy.eta = cfg.eval.eta;
    policy.workers = workers(cfg);
    let ev = evaluate(&scenarios, &mut policy, cfg.eval.episodes, seed, false)?;
    if cfg.eval.latency {
        let (mean_ms, std_ms) = measure_latency(&model, &schedule, cfg.latency.trials, seed)?;
        let row = LatencyRow {
            preset: meta.train.preset,
            params: model.num_params(),
            diffusion_steps: schedule.steps(),
            trials: cfg.latency.trials,
            mean_ms,
            std_ms,
        };
        println!("latency {mean_ms:.3} ms ± {std_ms:.3} over {} trials", row.trials);
        let mut w = create(&cfg.paths.out.join(LATENCY_CSV))?;
        write_latency_csv(&mut w, &[row])?;
        w.flush()?;
    }
    Ok((ev, Some(model.cfg.n_experts)))
}

pub fn analyze(a: &AnalyzeArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&a.common)?;
    if let Some(b) = a.bucket_steps {
        cfg.eval.bucket_steps = b;
    }
    finish(&cfg)?;
    let dir = a.traces.clone().unwrap_or_else(|| cfg.paths.out.join(TRACES_DIR));
    let mut traces = Vec::new();
    for kind in ScenarioKind::ALL {
        let path = dir.join(format!("{kind}.jsonl"));
        if path.exists() {
            traces.push(ActivationTrace::read_jsonl(&std::fs::read_to_string(&path)?, kind.category())?);
        }
    }
    let n_experts = traces
        .iter()
        .find_map(|t| t.records.first().map(|r| r.gate.len()))
        .ok_or_else(|| CliError::Config(format!("no activation traces under {}", dir.display())))?;
    write_analysis(&cfg.paths.out, &traces, n_experts, cfg.eval.bucket_steps)?;
    println!(
        "analyzed {} decisions from {}",
        traces.iter().map(|t| t.records.len()).sum::<usize>(),
        dir.display()
    );
    Ok(())
}

pub fn latency(a: &LatencyArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&a.common)?;
    if !a.presets.is_empty() {
        cfg.latency.presets = a.presets.clone();
    }
    if let Some(t) = a.trials {
        cfg.latency.trials = t;
    }
    if let Some(t) = a.diffusion_steps {
        cfg.train.schedule.steps = t;
    }
    finish(&cfg)?;
    let rows = match cfg.precision {
        Precision::F32 => latency_rows::<f32>(&cfg)?,
        Precision::F64 => latency_rows::<f64>(&cfg)?,
    };
    for r in &rows {
        println!(
            "{}: {:.3} ms ± {:.3} ({} params, T={})",
            r.preset, r.mean_ms, r.std_ms, r.params, r.diffusion_steps
        );
    }
    let mut w = create(&cfg.paths.out.join(LATENCY_CSV))?;
    write_latency_csv(&mut w, &rows)?;
    w.flush()?;
    Ok(())
}

fn latency_rows<S: Scalar>(cfg: &RunConfig) -> Result<Vec<LatencyRow>, CliError> {
    let base: ModelConfig = cfg.train.model_config(OBS_DIM);
    let schedule = cfg.train.schedule.build::<S>()?;
    Ok(measure_presets(
        &cfg.latency.presets,
        &base,
        &schedule,
        cfg.latency.trials,
        cfg.train.seed,
    )?)
}
