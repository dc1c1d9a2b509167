//! Ego kinematics: control mapping and a kinematic bicycle integrated along
//! exact arcs.

use serde::{Deserialize, Serialize};

use crate::geometry::{Obb, Vec2};

pub const WHEELBASE: f64 = 2.8;
pub const MASS: f64 = 1100.0;
pub const V_MAX: f64 = 80.0 / 3.6;
pub const MAX_STEER_DEG: f64 = 40.0;
pub const MAX_THROTTLE: f64 = 800.0;
pub const MAX_BRAKE: f64 = 150.0;
/// Newtons per unit of throttle command.
pub const THROTTLE_GAIN: f64 = 2.86;
/// Newtons per unit of brake command.
pub const BRAKE_GAIN: f64 = 44.0;
/// Aerodynamic drag coefficient in N / (m/s)^2.
pub const DRAG: f64 = 0.4;
pub const DT: f64 = 0.1;
pub const SUBSTEPS: usize = 2;
pub const CAR_LENGTH: f64 = 4.5;
pub const CAR_WIDTH: f64 = 1.8;

pub fn max_steer() -> f64 {
    MAX_STEER_DEG.to_radians()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub steer: f64,
    pub length: f64,
    pub width: f64,
}

impl VehicleState {
    pub fn new(position: Vec2, heading: f64, speed: f64) -> Self {
        VehicleState {
            position,
            heading,
            speed,
            steer: 0.0,
            length: CAR_LENGTH,
            width: CAR_WIDTH,
        }
    }

    pub fn footprint(&self) -> Obb {
        Obb::new(self.position, self.heading, self.length, self.width)
    }

    pub fn yaw_rate(&self) -> f64 {
        self.speed * self.steer.tan() / WHEELBASE
    }
}

/// Actuator commands: steering in degrees, throttle and brake as forces.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Controls {
    pub steer_deg: f64,
    pub throttle: f64,
    pub brake: f64,
}

impl Controls {
    /// Longitudinal acceleration at speed `v`.
    pub fn acceleration(&self, v: f64) -> f64 {
        (self.throttle * THROTTLE_GAIN - self.brake * BRAKE_GAIN - DRAG * v * v) / MASS
    }
}

fn clamp_unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(-1.0, 1.0)
    }
}

/// Maps a normalized action pair to actuator commands.
pub fn map_action(a: [f64; 2]) -> Controls {
    let a1 = clamp_unit(a[0]);
    let a2 = clamp_unit(a[1]);
    Controls {
        steer_deg: MAX_STEER_DEG * a1,
        throttle: MAX_THROTTLE * a2.max(0.0),
        brake: MAX_BRAKE * (-a2).max(0.0),
    }
}

/// Advances a bicycle with fixed steering and constant acceleration for
/// `dt`, moving along the exact arc the travelled distance implies.
pub fn integrate(state: &VehicleState, steer: f64, accel: f64, dt: f64) -> VehicleState {
    let v0 = state.speed;
    let mut v1 = v0 + accel * dt;
    let dist = if v1 < 0.0 {
        let t_stop = if accel < 0.0 { v0 / -accel } else { 0.0 };
        v1 = 0.0;
        0.5 * v0 * t_stop
    } else {
        0.5 * (v0 + v1) * dt
    };
    let v1 = v1.min(V_MAX);
    let dtheta = dist * steer.tan() / WHEELBASE;
    let h = state.heading;
    let delta = if dtheta.abs() < 1e-9 {
        Vec2::from_angle(h + 0.5 * dtheta) * dist
    } else {
        let r = dist / dtheta;
        Vec2::new(r * ((h + dtheta).sin() - h.sin()), r * (h.cos() - (h + dtheta).cos()))
    };
    VehicleState {
        position: state.position + delta,
        heading: h + dtheta,
        speed: v1,
        steer,
        ..*state
    }
}

/// One decision step of the ego: steering is set directly, then the
/// longitudinal dynamics are integrated in substeps.
pub fn step_ego(state: &VehicleState, controls: &Controls, dt: f64) -> VehicleState {
    let steer = controls.steer_deg.to_radians().clamp(-max_steer(), max_steer());
    let h = dt / SUBSTEPS as f64;
    let mut s = *state;
    for _ in 0..SUBSTEPS {
        let accel = controls.acceleration(s.speed);
        s = integrate(&s, steer, accel, h);
    }
    s.heading = crate::geometry::wrap_angle(s.heading);
    s
}
