use kdp_driveworld::geometry::{Obb, Vec2};
use kdp_driveworld::log::{read_jsonl, write_jsonl, LogRecord};
use kdp_driveworld::world::{COLLISION_PENALTY, SUCCESS_BONUS};
use kdp_driveworld::{Cause, ScenarioConfig, ScenarioKind, TurnRoute, VehicleState, World, WorldError, OBS_DIM};
use rand::{Rng, SeedableRng};

fn quiet(kind: ScenarioKind) -> ScenarioConfig {
    ScenarioConfig {
        traffic_density: 0.0,
        ego_speed: [0.0, 0.0],
        ..ScenarioConfig::new(kind)
    }
}

fn all_configs() -> Vec<ScenarioConfig> {
    let mut v = vec![ScenarioConfig::new(ScenarioKind::InRamp)];
    for t in TurnRoute::ALL {
        v.push(ScenarioConfig {
            route: t,
            ..ScenarioConfig::new(ScenarioKind::Intersection)
        });
    }
    for e in 1..=3 {
        v.push(ScenarioConfig {
            exit: e,
            ..ScenarioConfig::new(ScenarioKind::Roundabout)
        });
    }
    v
}

#[test]
fn stepping_forward_at_the_goal_boundary_succeeds() {
    for kind in ScenarioKind::ALL {
        let mut w = World::new(quiet(kind), 0).unwrap();
        let path = w.route().clone();
        let s = path.length() - w.config().goal_margin - 0.05;
        let mut ego = VehicleState::new(path.point_at(s), path.heading_at(s), 5.0);
        ego.steer = 0.0;
        w.set_ego_state(ego);
        let out = w.step([0.0, 0.2]).unwrap();
        assert!(out.terminated);
        assert_eq!(out.cause, Cause::Success, "{kind}");
        assert!(out.reward > SUCCESS_BONUS && out.reward < SUCCESS_BONUS + 1.0);
    }
}

#[test]
fn overlapping_a_vehicle_is_a_collision() {
    let mut w = World::new(quiet(ScenarioKind::InRamp), 0).unwrap();
    let ego = *w.ego();
    w.place_obstacle(Obb::new(ego.position + Vec2::new(2.0, 0.5), 0.0, 4.5, 1.8));
    let out = w.step([0.0, 0.0]).unwrap();
    assert_eq!(out.cause, Cause::Collision);
    assert!(out.terminated);
    assert!((out.reward + COLLISION_PENALTY).abs() < 1e-9);
}

#[test]
fn stationary_ego_times_out_with_zero_reward() {
    let mut w = World::new(quiet(ScenarioKind::InRamp), 5).unwrap();
    for step in 1..=1000 {
        let out = w.step([0.0, 0.0]).unwrap();
        assert_eq!(out.reward, 0.0);
        if step < 1000 {
            assert!(!out.terminated, "ended early at {step}");
        } else {
            assert_eq!(out.cause, Cause::Timeout);
        }
    }
    assert!(matches!(w.step([0.0, 0.0]), Err(WorldError::Usage(_))));
}

#[test]
fn full_speed_ego_cannot_tunnel_through_thin_obstacles() {
    for offset in [2.8, 3.3, 3.9, 4.4, 4.9] {
        let mut w = World::new(quiet(ScenarioKind::InRamp), 0).unwrap();
        let mut ego = *w.ego();
        ego.speed = 22.22;
        w.set_ego_state(ego);
        let wall = Obb::new(ego.position + Vec2::new(offset, 0.0), std::f64::consts::FRAC_PI_2, 3.0, 1.0);
        let end = kdp_driveworld::step_ego(&ego, &kdp_driveworld::map_action([0.0, 1.0]), 0.1).footprint();
        w.place_obstacle(wall);
        let out = w.step([0.0, 1.0]).unwrap();
        assert_eq!(
            out.cause,
            Cause::Collision,
            "wall at +{offset} m, end pose overlaps: {}",
            end.overlaps(&wall)
        );
    }
}

#[test]
fn observations_are_finite_and_well_formed() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for cfg in all_configs() {
        let mut w = World::new(cfg, rng.gen()).unwrap();
        let mut obs = w.observe();
        for _ in 0..300 {
            assert_eq!(obs.len(), OBS_DIM);
            assert!(obs.iter().all(|x| x.is_finite()));
            assert!(obs[19..].iter().all(|x| (0.0..=1.0).contains(x)));
            let out = w.step([rng.gen_range(-0.3..0.3), rng.gen_range(-1.0..1.0)]).unwrap();
            obs = out.observation;
            if out.terminated {
                break;
            }
        }
    }
}

#[test]
fn identical_inputs_give_identical_streams() {
    for cfg in all_configs() {
        let run = |cfg: &ScenarioConfig| {
            let mut w = World::new(cfg.clone(), 42).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
            let mut outs = Vec::new();
            for _ in 0..200 {
                let out = w.step([rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.8)]).unwrap();
                let done = out.terminated;
                outs.push(out);
                if done {
                    break;
                }
            }
            outs
        };
        let a = run(&cfg);
        let b = run(&cfg);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.reward.to_bits(), y.reward.to_bits());
            assert_eq!(x.cause, y.cause);
            assert!(x.observation.iter().zip(&y.observation).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}

#[test]
fn spawns_log_parameters_from_the_configured_ranges() {
    let cfg = ScenarioConfig::new(ScenarioKind::InRamp);
    let r = cfg.drivers;
    let mut w = World::with_log(cfg, 3).unwrap();
    for _ in 0..150 {
        if w.step([0.0, 0.3]).unwrap().terminated {
            break;
        }
    }
    let log = w.take_log();
    let spawns: Vec<_> = log.iter().filter(|r| matches!(r, LogRecord::Spawn { .. })).collect();
    assert!(spawns.len() >= 3);
    for s in &spawns {
        if let LogRecord::Spawn { idm, politeness, .. } = s {
            assert!((r.v0[0]..=r.v0[1]).contains(&idm.v0));
            assert!((r.time_headway[0]..=r.time_headway[1]).contains(&idm.time_headway));
            assert!((r.politeness[0]..=r.politeness[1]).contains(politeness));
        }
    }
    let steps = log.iter().filter(|r| matches!(r, LogRecord::Step { .. })).count();
    assert_eq!(steps, w.steps());

    let mut buf = Vec::new();
    write_jsonl(&mut buf, &log).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), log.len());
    assert_eq!(read_jsonl(&text).unwrap(), log);
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let cfg = ScenarioConfig {
        route: TurnRoute::Right,
        ..ScenarioConfig::new(ScenarioKind::Intersection)
    };
    let text = cfg.to_toml_string();
    assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), cfg);
    let partial = ScenarioConfig::from_toml_str("kind = \"roundabout\"\nexit = 3\n").unwrap();
    assert_eq!(partial.kind, ScenarioKind::Roundabout);
    assert_eq!(partial.exit, 3);
    assert!(matches!(
        ScenarioConfig::from_toml_str("kind = \"in_ramp\"\ntrafic = 2\n"),
        Err(WorldError::Config(_))
    ));
    assert!(matches!(ScenarioConfig::from_toml_str("exit = 9\n"), Err(WorldError::Config(_))));
}

#[test]
fn leaving_the_road_ends_the_episode() {
    let mut w = World::new(quiet(ScenarioKind::InRamp), 0).unwrap();
    let mut ego = *w.ego();
    ego.heading = std::f64::consts::FRAC_PI_2;
    ego.speed = 10.0;
    w.set_ego_state(ego);
    let mut cause = Cause::Running;
    for _ in 0..50 {
        let out = w.step([0.0, 0.0]).unwrap();
        if out.terminated {
            cause = out.cause;
            break;
        }
    }
    assert_eq!(cause, Cause::OffRoad);
}
