mod common;

use common::{dataset, micro_config};
use kdp_core::numerics::checkpoint::Record;
use kdp_core::{NoisePrediction, Preset, RoutingDecision, Tensor};
use kdp_pipeline::train::{composite_loss, fit, load_model, read_report, write_report, CheckpointMeta, Objective, TrainConfig, Trainer};
use kdp_pipeline::PipelineError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn constant_ds() -> kdp_pipeline::DemoDataset {
    dataset(6, 8, 20, 3, 1, |_, _, _| [0.3, 0.3])
}

#[test]
fn perfect_prediction_has_zero_diffusion_loss() {
    let eps = Tensor::<f64>::from_vec(&[2, 3, 2], vec![0.5, -1.0, 0.25, 2.0, -0.75, 1.5, 0.1, 0.2, -0.3, 0.4, 0.0, -2.0]).unwrap();
    let gate = Tensor::from_vec(&[2, 4], vec![0.25; 8]).unwrap();
    let d = RoutingDecision {
        gate: vec![0.25; 4],
        selected: vec![0, 1],
        weights: vec![0.5, 0.5],
    };
    let pred = NoisePrediction {
        estimate: eps.clone(),
        gate,
        decisions: vec![d.clone(), d],
    };
    let l = composite_loss(&pred, &eps, &[0, 1], 2, 0.01, 0.01).unwrap();
    assert_eq!(l.l_diff.item().unwrap(), 0.0);
    assert!((l.l_bal.item().unwrap() + 4f64.ln() / 4.0).abs() < 1e-12);
    assert!(l.mi.item().unwrap().abs() < 1e-12);
}

#[test]
fn disabled_regularizers_leave_diffusion_loss() {
    let ds = constant_ds();
    let cfg = TrainConfig {
        lambda_bal: 0.0,
        gamma_mi: 0.0,
        ..micro_config(3, 5)
    };
    let mut t = Trainer::<f64>::new(&cfg, ds.obs_dim).unwrap();
    for _ in 0..5 {
        let row = t.train_step(&ds).unwrap();
        assert_eq!(row.total.to_bits(), row.l_diff.to_bits());
    }
}

#[test]
fn loss_telemetry_identity_holds_every_step() {
    let ds = dataset(6, 9, 15, 3, 2, |l, t, _| [0.1 * l as f32, (t as f32 * 0.1).sin()]);
    let cfg = TrainConfig {
        lambda_bal: 0.5,
        gamma_mi: 0.7,
        ..micro_config(4, 20)
    };
    let mut t = Trainer::<f64>::new(&cfg, ds.obs_dim).unwrap();
    for _ in 0..20 {
        let r = t.train_step(&ds).unwrap();
        assert!((r.total - (r.l_diff + 0.5 * r.l_bal - 0.7 * r.mi)).abs() < 1e-9, "{r:?}");
        assert!(r.mi >= 0.0);
    }
}

#[test]
fn untrained_diffusion_loss_is_near_unit() {
    let ds = constant_ds();
    for seed in 0..3 {
        let cfg = TrainConfig {
            batch_size: 64,
            ..micro_config(seed, 1)
        };
        let t = Trainer::<f64>::new(&cfg, ds.obs_dim).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mb = ds.sample_minibatch(64, cfg.horizon, &mut rng).unwrap();
        let r = t.evaluate_losses(&mb, &mut rng).unwrap();
        assert!((0.5..=2.0).contains(&r.l_diff), "step-0 L_diff {}", r.l_diff);
    }
}

#[test]
fn router_gradient_matches_finite_differences() {
    let ds = dataset(5, 6, 10, 3, 5, |l, t, _| [0.2 * l as f32 - 0.2, 0.05 * t as f32]);
    let cfg = TrainConfig {
        p_drop: 0.0,
        lambda_bal: 0.3,
        gamma_mi: 0.4,
        ..micro_config(6, 1)
    };
    let t = Trainer::<f64>::new(&cfg, ds.obs_dim).unwrap();
    let mb = ds.sample_minibatch(12, cfg.horizon, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let loss = || {
        let (l, _) = t.losses(&mb, &mut ChaCha8Rng::seed_from_u64(2), false).unwrap();
        l
    };
    let router = t.model.bank.router.clone();
    loss().total.backward().unwrap();
    let grad = router.grad().unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in (0..router.numel()).step_by(3) {
        let orig = router.data()[i];
        router.update_data(|d| d[i] = orig + h).unwrap();
        let up = loss().total.item().unwrap();
        router.update_data(|d| d[i] = orig - h).unwrap();
        let down = loss().total.item().unwrap();
        router.update_data(|d| d[i] = orig).unwrap();
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn toy_constant_action_converges() {
    let ds = constant_ds();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        p_drop: 0.0,
        smoothing: 0.95,
        ..micro_config(7, 2000)
    };
    let (trainer, out) = fit::<f64>(&ds, &cfg, dir.path(), None, |_| {}).unwrap();
    let first = out.rows[0].l_diff;
    let smoothed = trainer.smoothed_loss().unwrap();
    println!("toy L_diff {first:.3} -> smoothed {smoothed:.4}");
    assert!(smoothed < 0.05, "smoothed L_diff {smoothed}");
    assert!(out.best_checkpoint.is_some());
}

#[test]
fn resumed_run_matches_uninterrupted_bit_for_bit() {
    let ds = dataset(6, 6, 12, 3, 8, |l, t, _| [0.3 * l as f32 - 0.3, (t as f32 * 0.2).cos() * 0.5]);
    let full_dir = tempfile::tempdir().unwrap();
    let split_dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 4,
        ..micro_config(9, 12)
    };
    let (_, full) = fit::<f64>(&ds, &cfg, full_dir.path(), None, |_| {}).unwrap();

    let first = TrainConfig { steps: 5, ..cfg.clone() };
    let (_, a) = fit::<f64>(&ds, &first, split_dir.path(), None, |_| {}).unwrap();
    let (_, b) = fit::<f64>(&ds, &cfg, split_dir.path(), Some(&split_dir.path().join("last.kdpc")), |_| {}).unwrap();
    let joined: Vec<_> = a.rows.iter().chain(&b.rows).copied().collect();
    assert_eq!(joined.len(), 12);
    for (x, y) in joined.iter().zip(&full.rows) {
        assert_eq!(x.csv(), y.csv());
    }
    let w1 = std::fs::read(full_dir.path().join("last.kdpc")).unwrap();
    let w2 = std::fs::read(split_dir.path().join("last.kdpc")).unwrap();
    assert_eq!(w1, w2);
}

#[test]
fn seeds_change_loss_trace() {
    let ds = constant_ds();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let (_, a) = fit::<f64>(&ds, &micro_config(1, 5), d1.path(), None, |_| {}).unwrap();
    let (_, b) = fit::<f64>(&ds, &micro_config(2, 5), d2.path(), None, |_| {}).unwrap();
    assert_ne!(a.rows, b.rows);
}

#[test]
fn resume_rejects_other_preset_and_other_stats() {
    let ds = constant_ds();
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(1, 2);
    fit::<f64>(&ds, &cfg, dir.path(), None, |_| {}).unwrap();
    let last = dir.path().join("last.kdpc");
    let other = TrainConfig {
        preset: Preset::Small,
        steps: 4,
        ..cfg.clone()
    };
    let err = fit::<f64>(&ds, &other, dir.path(), Some(&last), |_| {})
        .err()
        .expect("resume rejected");
    assert!(matches!(err, PipelineError::Config(_)), "{err}");
    let ds2 = dataset(6, 8, 20, 3, 99, |_, _, _| [0.3, 0.3]);
    let err = fit::<f64>(&ds2, &TrainConfig { steps: 4, ..cfg }, dir.path(), Some(&last), |_| {})
        .err()
        .expect("resume rejected");
    assert!(matches!(err, PipelineError::StatsMismatch { .. }), "{err}");
}

#[test]
fn divergence_writes_diagnostic_snapshot() {
    let ds = constant_ds();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        lr: 1e200,
        warmup_steps: 0,
        ..micro_config(1, 10)
    };
    match fit::<f64>(&ds, &cfg, dir.path(), None, |_| {}) {
        Err(PipelineError::Diverged { snapshot, .. }) => {
            assert!(snapshot.exists());
            assert!(CheckpointMeta::load(&snapshot).is_ok());
        }
        other => panic!("expected divergence, got {:?}", other.map(|(_, o)| o.rows.len())),
    }
}

#[test]
fn checkpoint_round_trips_weights_and_metadata() {
    let ds = constant_ds();
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(3, 3);
    let (trainer, out) = fit::<f64>(&ds, &cfg, dir.path(), None, |_| {}).unwrap();
    let (model, meta) = load_model::<f64>(&out.last_checkpoint).unwrap();
    assert_eq!(meta.step, 3);
    assert_eq!(meta.stats_hash, ds.stats.hash());
    assert_eq!(meta.train, cfg);
    for ((n1, a), (n2, b)) in trainer.model.parameters().iter().zip(model.parameters()) {
        assert_eq!(n1, &n2);
        assert_eq!(a.to_vec(), b.to_vec());
    }
    let records: Vec<Record> =
        kdp_core::numerics::checkpoint::read_records(&mut std::fs::File::open(&out.last_checkpoint).unwrap()).unwrap();
    assert!(records.iter().any(|r| r.name.starts_with("optim.m.")));
}

#[test]
fn f32_training_runs() {
    let ds = constant_ds();
    let mut t = Trainer::<f32>::new(&micro_config(2, 3), ds.obs_dim).unwrap();
    for _ in 0..3 {
        assert!(t.train_step(&ds).unwrap().total.is_finite());
    }
}

#[test]
fn regression_objective_fits_mean_action() {
    let ds = dataset(
        6,
        8,
        10,
        1,
        4,
        |_, _, rng| if rand::Rng::gen_bool(rng, 0.5) { [0.6, 0.0] } else { [-0.6, 0.0] },
    );
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        objective: Objective::Regression,
        p_drop: 0.0,
        ..micro_config(5, 300)
    };
    let (_, out) = fit::<f64>(&ds, &cfg, dir.path(), None, |_| {}).unwrap();
    let last = out.rows.last().unwrap().l_diff;
    // best achievable is the variance of a +-0.6 coin averaged over both action dims
    assert!(last < 0.25, "regression loss {last}");
}

#[test]
fn report_csv_round_trips() {
    let ds = constant_ds();
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = fit::<f64>(&ds, &micro_config(1, 4), dir.path(), None, |_| {}).unwrap();
    let mut buf = Vec::new();
    write_report(&mut buf, &out.rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("step,l_diff,l_bal,mi,total,usage_entropy\n"));
    assert_eq!(read_report(&text).unwrap(), out.rows);
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        top_k: 9,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        lr: -1.0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    let bad: Result<TrainConfig, _> = toml::from_str("batch_sise = 3");
    assert!(bad.is_err());
    let defaults = TrainConfig::default();
    assert_eq!(
        (
            defaults.batch_size,
            defaults.horizon,
            defaults.top_k,
            defaults.n_experts,
            defaults.p_drop
        ),
        (64, 8, 2, 8, 0.3)
    );
    assert_eq!(defaults.schedule.steps, 100);
}
