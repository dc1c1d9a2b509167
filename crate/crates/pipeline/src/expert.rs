//! Rule-based demonstrator with privileged access to the world: IDM for
//! speed, pure pursuit for steering.

use kdp_driveworld::geometry::Vec2;
use kdp_driveworld::idm::{idm_accel, IdmParams, Leader};
use kdp_driveworld::path::Path;
use kdp_driveworld::vehicle::{BRAKE_GAIN, DRAG, MASS, MAX_BRAKE, MAX_STEER_DEG, MAX_THROTTLE, THROTTLE_GAIN, WHEELBASE};
use kdp_driveworld::{VehicleState, World};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertParams {
    pub idm: IdmParams,
    /// Lateral acceleration budget for curve speed (m/s^2).
    pub lateral_accel: f64,
    /// Deceleration assumed when slowing ahead of a curve (m/s^2).
    pub curve_decel: f64,
    pub lookahead_min: f64,
    pub lookahead_gain: f64,
}

impl Default for ExpertParams {
    fn default() -> Self {
        ExpertParams {
            idm: IdmParams {
                v0: 11.0,
                time_headway: 1.5,
                a_max: 2.0,
                b_comf: 3.0,
                s0: 3.0,
                delta: 4.0,
            },
            lateral_accel: 2.0,
            curve_decel: 2.0,
            lookahead_min: 3.0,
            lookahead_gain: 0.5,
        }
    }
}

/// First point at or after `s` on `path` that lies `dist` from `origin`,
/// or the path end if none does.
pub fn lookahead_point(path: &Path, s: f64, origin: Vec2, dist: f64) -> Vec2 {
    let end = path.length();
    let far = |x: f64| path.point_at(x).dist(origin) >= dist;
    let mut lo = s.clamp(0.0, end);
    if far(lo) {
        return path.point_at(lo);
    }
    let step = 0.25;
    let mut hi = lo;
    loop {
        if hi >= end {
            return path.point_at(end);
        }
        hi = (hi + step).min(end);
        if far(hi) {
            break;
        }
        lo = hi;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if far(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    path.point_at(hi)
}

/// Pure-pursuit steering angle (rad) toward the lookahead point.
pub fn pure_pursuit(state: &VehicleState, path: &Path, s: f64, p: &ExpertParams) -> f64 {
    let ld = p.lookahead_min.max(p.lookahead_gain * state.speed);
    let target = lookahead_point(path, s, state.position, ld);
    let local = (target - state.position).rotate(-state.heading);
    let d2 = local.dot(local);
    if d2 < 1e-12 {
        return 0.0;
    }
    let kappa = 2.0 * local.y / d2;
    (WHEELBASE * kappa).atan()
}

pub fn steer_to_action(steer: f64) -> f64 {
    (steer.to_degrees() / MAX_STEER_DEG).clamp(-1.0, 1.0)
}

/// Pedal command producing longitudinal acceleration `accel` at speed `v`.
pub fn accel_to_action(accel: f64, v: f64) -> f64 {
    let force = accel * MASS + DRAG * v * v;
    let a2 = if force >= 0.0 {
        force / (MAX_THROTTLE * THROTTLE_GAIN)
    } else {
        force / (MAX_BRAKE * BRAKE_GAIN)
    };
    a2.clamp(-1.0, 1.0)
}

/// Highest speed allowed now so that every curve within 40 m can be taken
/// within the lateral acceleration budget.
pub fn curve_speed(path: &Path, s: f64, p: &ExpertParams) -> f64 {
    let mut v = f64::INFINITY;
    let mut d = 0.0;
    while d <= 40.0 {
        let k = path.curvature_at(s + d, 2.0).abs();
        if k > 1e-4 {
            let vc = (p.lateral_accel / k).sqrt();
            v = v.min((vc * vc + 2.0 * p.curve_decel * d).sqrt());
        }
        d += 2.0;
    }
    v
}

/// Longitudinal acceleration the expert wants given an optional leader and
/// an optional hold line distance.
pub fn desired_accel(v: f64, path: &Path, s: f64, leader: Option<Leader>, hold: Option<f64>, p: &ExpertParams) -> f64 {
    let mut idm = p.idm;
    idm.v0 = idm.v0.min(curve_speed(path, s, p)).max(1.0);
    let mut a = idm_accel(v, leader, &idm);
    if let Some(dist) = hold {
        a = a.min(idm_accel(
            v,
            Some(Leader {
                speed: 0.0,
                gap: dist + idm.s0 - 0.5,
            }),
            &idm,
        ));
    }
    a
}

pub fn expert_action_with(world: &World, p: &ExpertParams) -> [f64; 2] {
    let ego = world.ego();
    let path = world.route();
    let s = world.ego_progress();
    let steer = pure_pursuit(ego, path, s, p);
    let a = desired_accel(ego.speed, path, s, world.ego_leader(), world.ego_hold_distance(), p);
    [steer_to_action(steer), accel_to_action(a, ego.speed)]
}

/// The demonstrator with default parameters.
pub fn scripted_expert(world: &World) -> [f64; 2] {
    expert_action_with(world, &ExpertParams::default())
}
