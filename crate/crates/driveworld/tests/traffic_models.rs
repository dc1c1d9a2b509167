use kdp_driveworld::idm::{desired_gap, mobil_safe, EMERGENCY_DECEL};
use kdp_driveworld::{idm_accel, mobil_lane_change, DriverRanges, IdmParams, Leader, MobilAccels, MobilParams};
use proptest::prelude::*;
use rand::SeedableRng;

fn reference_idm(v: f64, v_lead: f64, gap: f64, p: &IdmParams) -> f64 {
    let s_star = p.s0 + v * p.time_headway + v * (v - v_lead) / (2.0 * (p.a_max * p.b_comf).sqrt());
    p.a_max * (1.0 - (v / p.v0).powf(p.delta) - (s_star / gap).powi(2))
}

#[test]
fn free_road_examples() {
    let p = IdmParams::default();
    assert_eq!(idm_accel(0.0, None, &p), p.a_max);
    assert!(idm_accel(p.v0, None, &p).abs() < 1e-15);
}

#[test]
fn equal_speed_following_matches_formula() {
    let p = IdmParams {
        v0: 13.0,
        time_headway: 1.2,
        a_max: 1.7,
        b_comf: 2.1,
        s0: 2.4,
        delta: 4.0,
    };
    let gap = p.s0 + 10.0 * p.time_headway;
    let got = idm_accel(10.0, Some(Leader { speed: 10.0, gap }), &p);
    let want = reference_idm(10.0, 10.0, gap, &p);
    assert!(((got - want) / want).abs() < 1e-12, "{got} vs {want}");
    assert!((desired_gap(10.0, 0.0, &p) - gap).abs() < 1e-12);
}

#[test]
fn zero_gap_is_emergency_brake() {
    let p = IdmParams::default();
    assert_eq!(idm_accel(3.0, Some(Leader { speed: 3.0, gap: 0.0 }), &p), -EMERGENCY_DECEL);
    assert_eq!(idm_accel(3.0, Some(Leader { speed: 3.0, gap: -1.0 }), &p), -EMERGENCY_DECEL);
}

proptest! {
    #[test]
    fn idm_output_is_bounded(
        v in 0.0f64..30.0, v_lead in 0.0f64..30.0, gap in -5.0f64..200.0,
        v0 in 5.0f64..20.0, th in 0.5f64..2.5, a in 0.5f64..3.0, b in 0.5f64..4.0, s0 in 1.0f64..4.0,
        has_leader in any::<bool>(),
    ) {
        let p = IdmParams { v0, time_headway: th, a_max: a, b_comf: b, s0, delta: 4.0 };
        let leader = has_leader.then_some(Leader { speed: v_lead, gap });
        let acc = idm_accel(v, leader, &p);
        prop_assert!(acc >= -EMERGENCY_DECEL && acc <= a);
    }
}

#[test]
fn mobil_changes_into_empty_faster_lane() {
    let acc = MobilAccels {
        own_current: -2.0,
        own_target: 1.0,
        ..Default::default()
    };
    assert!(mobil_lane_change(&acc, &MobilParams::default()));
}

#[test]
fn mobil_safety_vetoes_any_incentive() {
    let p = MobilParams::default();
    let acc = MobilAccels {
        own_current: -5.0,
        own_target: 2.0,
        new_follower_current: 0.0,
        new_follower_target: -p.b_safe - 0.1,
        ..Default::default()
    };
    assert!(!mobil_safe(&acc, &p));
    assert!(!mobil_lane_change(&acc, &p));
}

#[test]
fn mobil_symmetric_lanes_stay() {
    let acc = MobilAccels {
        own_current: 0.4,
        own_target: 0.4,
        new_follower_current: 0.1,
        new_follower_target: 0.1,
        old_follower_current: -0.3,
        old_follower_target: -0.3,
    };
    assert!(!mobil_lane_change(&acc, &MobilParams::default()));
}

#[test]
fn sampled_driver_parameters_lie_in_ranges() {
    let r = DriverRanges::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let (p, polite) = r.sample(&mut rng);
        assert!((r.v0[0]..r.v0[1]).contains(&p.v0));
        assert!((r.time_headway[0]..r.time_headway[1]).contains(&p.time_headway));
        assert!((r.a_max[0]..r.a_max[1]).contains(&p.a_max));
        assert!((r.b_comf[0]..r.b_comf[1]).contains(&p.b_comf));
        assert!((r.s0[0]..r.s0[1]).contains(&p.s0));
        assert!((r.politeness[0]..r.politeness[1]).contains(&polite));
    }
}
