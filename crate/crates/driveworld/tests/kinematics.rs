use std::f64::consts::TAU;

use kdp_driveworld::geometry::Vec2;
use kdp_driveworld::vehicle::{integrate, Controls, DRAG, DT, THROTTLE_GAIN, V_MAX, WHEELBASE};
use kdp_driveworld::{map_action, step_ego, VehicleState};
use proptest::prelude::*;

#[test]
fn map_action_examples() {
    assert_eq!(
        map_action([0.0, 0.0]),
        Controls {
            steer_deg: 0.0,
            throttle: 0.0,
            brake: 0.0
        }
    );
    assert_eq!(
        map_action([1.0, 1.0]),
        Controls {
            steer_deg: 40.0,
            throttle: 800.0,
            brake: 0.0
        }
    );
    assert_eq!(
        map_action([-0.5, -0.5]),
        Controls {
            steer_deg: -20.0,
            throttle: 0.0,
            brake: 75.0
        }
    );
}

#[test]
fn map_action_clamps_out_of_range() {
    assert_eq!(map_action([3.0, -7.0]), map_action([1.0, -1.0]));
    assert_eq!(map_action([f64::NAN, f64::NAN]), map_action([0.0, 0.0]));
}

#[test]
fn rest_with_zero_controls_is_an_equilibrium() {
    let s = VehicleState::new(Vec2::new(3.0, -2.0), 0.7, 0.0);
    let n = step_ego(&s, &map_action([0.0, 0.0]), DT);
    assert_eq!(n, s);
}

#[test]
fn full_throttle_rises_strictly_then_saturates() {
    let mut s = VehicleState::new(Vec2::default(), 0.0, 0.0);
    let full = map_action([0.0, 1.0]);
    let mut capped_at = None;
    for k in 0..400 {
        let n = step_ego(&s, &full, DT);
        if s.speed < V_MAX {
            assert!(n.speed > s.speed, "speed stalled at step {k}");
        }
        assert!(n.speed <= V_MAX);
        if n.speed == V_MAX && capped_at.is_none() {
            capped_at = Some(k);
        }
        s = n;
    }
    assert!(capped_at.is_some());
    assert_eq!(s.speed, V_MAX);
}

fn hold_speed(v: f64, steer_deg: f64) -> Controls {
    Controls {
        steer_deg,
        throttle: DRAG * v * v / THROTTLE_GAIN,
        brake: 0.0,
    }
}

#[test]
fn constant_steer_traces_the_analytic_circle() {
    let steer = 10f64.to_radians();
    let radius = WHEELBASE / steer.tan();
    assert!((radius - 15.88).abs() < 0.01);
    let start = VehicleState::new(Vec2::default(), 0.0, 5.0);
    let center = Vec2::new(0.0, radius);
    let mut s = start;
    let controls = hold_speed(5.0, 10.0);
    for _ in 0..200 {
        s = step_ego(&s, &controls, DT);
        assert!((s.position.dist(center) - radius).abs() < 1e-6);
        assert!((s.speed - 5.0).abs() < 1e-9);
    }

    let period = TAU * radius / 5.0;
    let n = 173;
    let mut s = start;
    for _ in 0..n {
        s = integrate(&s, steer, 0.0, period / n as f64);
    }
    assert!(
        s.position.dist(start.position) < 0.1,
        "returned {:.3} m away",
        s.position.dist(start.position)
    );
}

proptest! {
    #[test]
    fn speed_and_steer_stay_in_bounds(actions in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..200), v0 in 0.0..V_MAX) {
        let mut s = VehicleState::new(Vec2::default(), 0.0, v0);
        for (a1, a2) in actions {
            s = step_ego(&s, &map_action([a1, a2]), DT);
            prop_assert!((0.0..=V_MAX).contains(&s.speed));
            prop_assert!(s.steer.abs() <= 40f64.to_radians() + 1e-12);
            prop_assert!(s.position.x.is_finite() && s.position.y.is_finite());
        }
    }
}
