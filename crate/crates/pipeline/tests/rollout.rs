mod common;

use kdp_core::{ModelConfig, NoisePrediction, NoiseSchedule, Preset, RoutingDecision, ScheduleKind, Tensor};
use kdp_driveworld::{Cause, ScenarioConfig, ScenarioKind};
use kdp_pipeline::expert::accel_to_action;
use kdp_pipeline::rollout::{
    aggregate, analyze_activations, evaluate, measure_latency, run_episode, sample_actions, sample_batch, write_metrics_csv,
    ActivationRecord, ActivationTrace, ConstantPolicy, DiffusionPolicy, EpisodeMetrics, EpisodeSpec, ScriptedPolicy,
};
use kdp_pipeline::train::NoisePredictor;
use kdp_pipeline::{ObsStats, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Predicts zero noise with uniform routing.
struct ZeroPredictor {
    horizon: usize,
}

impl NoisePredictor<f64> for ZeroPredictor {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn context(&self, obs: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(obs.clone())
    }

    fn predict(&self, ctx: &Tensor<f64>, a_t: &Tensor<f64>, _ts: &[usize]) -> Result<NoisePrediction<f64>> {
        let b = ctx.shape()[0];
        let d = RoutingDecision {
            gate: vec![0.25; 4],
            selected: vec![0, 1],
            weights: vec![0.5, 0.5],
        };
        Ok(NoisePrediction {
            estimate: Tensor::zeros(a_t.shape()),
            gate: Tensor::from_vec(&[b, 4], vec![0.25; 4 * b])?,
            decisions: vec![d; b],
        })
    }
}

fn micro_model(obs_dim: usize, seed: u64) -> kdp_core::KdpModel<f64> {
    let cfg = ModelConfig {
        obs_dim,
        horizon: 4,
        ..ModelConfig::preset(Preset::Micro)
    };
    kdp_core::KdpModel::new(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn empty_ramp() -> ScenarioConfig {
    ScenarioConfig {
        traffic_density: 0.0,
        ..ScenarioConfig::new(ScenarioKind::InRamp)
    }
}

#[test]
fn deterministic_sampler_repeats_exactly() {
    let model = micro_model(7, 1);
    let schedule = NoiseSchedule::<f64>::new(ScheduleKind::SquaredCosine, 20, 1e-4, 0.02).unwrap();
    let obs = [0.3, -1.0, 0.5, 2.0, 0.0, 1.0, -0.2];
    let a = sample_actions(&obs, &model, &schedule, 0.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = sample_actions(&obs, &model, &schedule, 0.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a, b);
    assert!(a.as_slice().iter().all(|x| (-1.0..=1.0).contains(x)));
    let c = sample_actions(&obs, &model, &schedule, 1.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn zero_predictor_scales_initial_noise_by_the_chain() {
    let schedule = NoiseSchedule::<f64>::standard();
    let model = ZeroPredictor { horizon: 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let out = sample_actions(&[0.0; 2], &model, &schedule, 0.0, &mut rng).unwrap();
    let mut oracle_rng = ChaCha8Rng::seed_from_u64(11);
    let a_t: Vec<f64> = (0..6).map(|_| oracle_rng.sample(StandardNormal)).collect();
    let scale = schedule.alpha_bar(100).sqrt();
    for (o, a) in out.as_slice().iter().zip(&a_t) {
        assert!((o - (a / scale).clamp(-1.0, 1.0)).abs() < 1e-9);
    }
}

#[test]
fn batch_results_do_not_depend_on_batch_composition() {
    let model = micro_model(5, 2);
    let schedule = NoiseSchedule::<f64>::new(ScheduleKind::SquaredCosine, 10, 1e-4, 0.02).unwrap();
    let rows: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
    let obs = Tensor::from_vec(&[3, 5], rows.clone()).unwrap();
    let mut rngs: Vec<ChaCha8Rng> = (0..3).map(ChaCha8Rng::seed_from_u64).collect();
    let all = sample_batch(&model, &schedule, &obs, 0.5, &mut rngs, true).unwrap();
    assert_eq!(all.routing[0].len(), 10);
    let single = Tensor::from_vec(&[1, 5], rows[5..10].to_vec()).unwrap();
    let mut one = [ChaCha8Rng::seed_from_u64(1)];
    let alone = sample_batch(&model, &schedule, &single, 0.5, &mut one, false).unwrap();
    for (a, b) in alone.actions[0].as_slice().iter().zip(all.actions[1].as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn scripted_expert_succeeds_on_empty_ramp() {
    let spec = EpisodeSpec {
        config: empty_ramp(),
        episode: 0,
        seed: 3,
    };
    let r = run_episode(&spec, &mut ScriptedPolicy).unwrap();
    assert!(r.metrics.success);
    assert!(!r.metrics.collision);
    assert!(!r.log.is_empty());
}

#[test]
fn immobile_ego_times_out() {
    let config = ScenarioConfig {
        ego_speed: [0.0, 0.0],
        max_steps: 60,
        ..empty_ramp()
    };
    let spec = EpisodeSpec {
        config,
        episode: 0,
        seed: 1,
    };
    let m = run_episode(&spec, &mut ConstantPolicy([0.0, 0.0])).unwrap().metrics;
    assert_eq!(m.cause, Cause::Timeout);
    assert!(!m.success && !m.collision);
    assert!(m.avg_velocity.abs() < 1e-9);
    assert_eq!(m.steps, 60);
}

#[test]
fn constant_speed_run_has_no_acceleration_variance() {
    let v = 8.0;
    let config = ScenarioConfig {
        ego_speed: [v, v],
        ego_offset: 0.0,
        ego_yaw: 0.0,
        max_steps: 20,
        ..empty_ramp()
    };
    let spec = EpisodeSpec {
        config,
        episode: 0,
        seed: 1,
    };
    let m = run_episode(&spec, &mut ConstantPolicy([0.0, accel_to_action(0.0, v)]))
        .unwrap()
        .metrics;
    assert_eq!(m.steps, 20);
    assert!(m.accel_variance < 1e-6, "{}", m.accel_variance);
    assert!((m.avg_velocity - v).abs() < 1e-6);
}

#[test]
fn acceleration_variance_matches_definition() {
    let speeds = [5.0, 5.5, 5.5, 6.5];
    let m = EpisodeMetrics::from_run(ScenarioKind::InRamp, 0, 0, Cause::Success, 1.0, &speeds);
    // accelerations 5, 0, 10 m/s^2
    assert!((m.accel_variance - 50.0 / 3.0).abs() < 1e-9);
    assert!((m.avg_velocity - 17.5 / 3.0).abs() < 1e-12);
    assert_eq!(m.steps, 3);
    assert!(m.success && !m.collision);
}

fn metric(success: bool, cause: Cause) -> EpisodeMetrics {
    let cause = if success { Cause::Success } else { cause };
    EpisodeMetrics::from_run(ScenarioKind::Intersection, 0, 0, cause, 0.0, &[1.0, 2.0])
}

#[test]
fn aggregate_rates_are_ratios() {
    let eps = [
        metric(true, Cause::Success),
        metric(false, Cause::Timeout),
        metric(true, Cause::Success),
        metric(true, Cause::Success),
    ];
    let a = aggregate(&eps);
    assert_eq!(a.len(), 1);
    assert_eq!(a[0].success_rate, 0.75);
    assert_eq!(a[0].collision_rate, 0.0);
    let crashes = vec![metric(false, Cause::Collision); 5];
    let a = aggregate(&crashes);
    assert_eq!((a[0].success_rate, a[0].collision_rate), (0.0, 1.0));
}

#[test]
fn evaluation_is_reproducible_and_aggregates_per_scenario() {
    let mut cfgs: Vec<ScenarioConfig> = ScenarioKind::ALL.iter().map(|k| ScenarioConfig::new(*k)).collect();
    for c in &mut cfgs {
        c.max_steps = 40;
        c.random_variant = true;
    }
    let run = || {
        let ev = evaluate(&cfgs, &mut ScriptedPolicy, 2, 5, false).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &ev.metrics(), &ev.aggregates).unwrap();
        buf
    };
    let a = run();
    assert_eq!(a, run());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("aggregate,")).count(), 3);
    assert_eq!(text.lines().filter(|l| l.starts_with("episode,")).count(), 6);
}

#[test]
fn one_decision_per_step_with_full_routing_trace() {
    let model = micro_model(kdp_driveworld::OBS_DIM, 3);
    let schedule = NoiseSchedule::<f64>::new(ScheduleKind::SquaredCosine, 6, 1e-4, 0.02).unwrap();
    let stats = ObsStats {
        mean: vec![0.0; kdp_driveworld::OBS_DIM],
        std: vec![1.0; kdp_driveworld::OBS_DIM],
    };
    let config = ScenarioConfig {
        max_steps: 7,
        ..empty_ramp()
    };
    let specs = [
        EpisodeSpec {
            config: config.clone(),
            episode: 0,
            seed: 2,
        },
        EpisodeSpec {
            config,
            episode: 1,
            seed: 3,
        },
    ];
    let mut policy = DiffusionPolicy::new(&model, &schedule, &stats, &[10, 11]);
    let results = kdp_pipeline::rollout::run_episodes(&specs, &mut policy, true).unwrap();
    for r in &results {
        assert_eq!(r.trace.records.len(), r.metrics.steps * 6);
        for rec in &r.trace.records {
            rec.decision().validate().unwrap();
        }
        let logged = r
            .log
            .iter()
            .filter(|l| matches!(l, kdp_driveworld::log::LogRecord::Step { .. }))
            .count();
        assert_eq!(logged, r.metrics.steps);
    }
}

#[test]
fn parallel_workers_match_serial_evaluation() {
    let model = micro_model(kdp_driveworld::OBS_DIM, 4);
    let schedule = NoiseSchedule::<f64>::new(ScheduleKind::SquaredCosine, 4, 1e-4, 0.02).unwrap();
    let stats = ObsStats {
        mean: vec![0.0; kdp_driveworld::OBS_DIM],
        std: vec![1.0; kdp_driveworld::OBS_DIM],
    };
    let cfgs = [ScenarioConfig {
        max_steps: 5,
        ..empty_ramp()
    }];
    let seeds = [1, 2, 3, 4];
    let run = |workers| {
        let mut p = DiffusionPolicy::new(&model, &schedule, &stats, &seeds);
        p.workers = workers;
        evaluate(&cfgs, &mut p, 4, 9, false).unwrap().metrics()
    };
    assert_eq!(run(1), run(3));
}

fn record(step: usize, gate: Vec<f64>, selected: Vec<usize>, weights: Vec<f64>) -> ActivationRecord {
    ActivationRecord {
        env_step: step,
        t: 1,
        gate,
        selected,
        weights,
    }
}

#[test]
fn uniform_gates_give_flat_temporal_matrix() {
    let n = 4;
    let records = (0..12).map(|s| record(s, vec![0.25; n], vec![s % n], vec![1.0])).collect();
    let trace = ActivationTrace {
        scenario: Some(ScenarioKind::InRamp),
        label: 0,
        records,
    };
    let a = analyze_activations(&[trace], n, 5).unwrap();
    assert_eq!(a.temporal.len(), 3);
    for row in &a.temporal {
        assert!(row.gate.iter().all(|g| (g - 0.25).abs() < 1e-12));
        assert!((row.topk.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(a.temporal[2].decisions, 2);
}

#[test]
fn always_selected_expert_gives_one_hot_histogram() {
    let n = 8;
    let mut gate = vec![0.05; n];
    gate[3] = 0.65;
    let records = (0..20).map(|s| record(s, gate.clone(), vec![3], vec![1.0])).collect();
    let trace = ActivationTrace {
        scenario: Some(ScenarioKind::Roundabout),
        label: 2,
        records,
    };
    let a = analyze_activations(&[trace], n, 5).unwrap();
    let row = &a.scenario[0];
    assert_eq!(row.scenario, 2);
    let mut expect = vec![0.0; n];
    expect[3] = 1.0;
    assert_eq!(row.selection, expect);
}

#[test]
fn hard_selection_frequencies_sum_to_k() {
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut traces = Vec::new();
    for label in 0..3 {
        let records = (0..50)
            .map(|s| {
                let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let d = kdp_core::route_scores(&scores, 2).unwrap();
                ActivationRecord::new(s, 1, &d)
            })
            .collect();
        traces.push(ActivationTrace {
            scenario: ScenarioKind::from_category(label),
            label,
            records,
        });
    }
    let a = analyze_activations(&traces, n, 5).unwrap();
    assert_eq!(a.scenario.len(), 3);
    for row in &a.scenario {
        assert!((row.selection.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert!((row.topk.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let mut buf = Vec::new();
    a.write_scenario_csv(&mut buf, n).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("scenario,decisions,variant,e0,"));
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn empty_traces_are_rejected() {
    assert!(analyze_activations(&[ActivationTrace::default()], 8, 5).is_err());
}

#[test]
fn activation_jsonl_round_trips_and_validates() {
    let d = kdp_core::route_scores(&[0.1, 0.5, -0.3, 0.2], 2).unwrap();
    let trace = ActivationTrace {
        scenario: Some(ScenarioKind::Intersection),
        label: 1,
        records: vec![ActivationRecord::new(3, 7, &d)],
    };
    let mut buf = Vec::new();
    trace.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(ActivationTrace::read_jsonl(&text, 1).unwrap(), trace);
    let broken = text.replace("\"selected\":[1,3]", "\"selected\":[1,1]");
    assert_ne!(broken, text);
    assert!(ActivationTrace::read_jsonl(&broken, 1).is_err());
}

#[test]
fn single_trial_latency_has_zero_spread() {
    let model = micro_model(10, 1);
    let schedule = NoiseSchedule::<f64>::new(ScheduleKind::SquaredCosine, 5, 1e-4, 0.02).unwrap();
    let (mean, std) = measure_latency(&model, &schedule, 1, 0).unwrap();
    assert!(mean > 0.0);
    assert_eq!(std, 0.0);
}

#[test]
fn doubling_diffusion_steps_roughly_doubles_latency() {
    let model = micro_model(kdp_driveworld::OBS_DIM, 1);
    let short = NoiseSchedule::<f64>::new(ScheduleKind::SquaredCosine, 50, 1e-4, 0.02).unwrap();
    let long = NoiseSchedule::<f64>::new(ScheduleKind::SquaredCosine, 100, 1e-4, 0.02).unwrap();
    let (a, _) = measure_latency(&model, &short, 30, 0).unwrap();
    let (b, _) = measure_latency(&model, &long, 30, 0).unwrap();
    let ratio = b / a;
    println!("latency T=50 {a:.3} ms, T=100 {b:.3} ms, ratio {ratio:.3}");
    assert!((1.5..=2.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn executed_actions_are_clamped() {
    let spec = EpisodeSpec {
        config: ScenarioConfig {
            max_steps: 10,
            ..empty_ramp()
        },
        episode: 0,
        seed: 1,
    };
    let r = run_episode(&spec, &mut ConstantPolicy([5.0, -7.0])).unwrap();
    for rec in &r.log {
        if let kdp_driveworld::log::LogRecord::Step { action, .. } = rec {
            assert!(action.iter().all(|a| (-1.0..=1.0).contains(a)));
        }
    }
}
