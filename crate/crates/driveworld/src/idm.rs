//! Intelligent Driver Model car following and MOBIL lane-change decisions.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Braking output when a leader is at or inside zero gap.
pub const EMERGENCY_DECEL: f64 = 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Desired speed (m/s).
    pub v0: f64,
    /// Time headway (s).
    pub time_headway: f64,
    pub a_max: f64,
    /// Comfortable deceleration (positive).
    pub b_comf: f64,
    /// Jam distance (m).
    pub s0: f64,
    pub delta: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            v0: 12.0,
            time_headway: 1.4,
            a_max: 1.5,
            b_comf: 2.0,
            s0: 2.5,
            delta: 4.0,
        }
    }
}

/// A vehicle ahead: its speed and bumper-to-bumper gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leader {
    pub speed: f64,
    pub gap: f64,
}

/// Desired gap s*.
pub fn desired_gap(v: f64, dv: f64, p: &IdmParams) -> f64 {
    p.s0 + (v * p.time_headway + v * dv / (2.0 * (p.a_max * p.b_comf).sqrt())).max(0.0)
}

/// IDM acceleration, clamped to `[-EMERGENCY_DECEL, a_max]`.
pub fn idm_accel(v: f64, leader: Option<Leader>, p: &IdmParams) -> f64 {
    let free = 1.0 - (v / p.v0).powf(p.delta);
    let raw = match leader {
        None => p.a_max * free,
        Some(l) if l.gap <= 0.0 => return -EMERGENCY_DECEL,
        Some(l) => {
            let ratio = desired_gap(v, v - l.speed, p) / l.gap;
            p.a_max * (free - ratio * ratio)
        }
    };
    raw.clamp(-EMERGENCY_DECEL, p.a_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MobilParams {
    pub politeness: f64,
    /// Minimum net gain to change lanes (m/s^2).
    pub threshold: f64,
    /// Largest deceleration imposed on the new follower (positive).
    pub b_safe: f64,
}

impl Default for MobilParams {
    fn default() -> Self {
        MobilParams {
            politeness: 0.25,
            threshold: 0.2,
            b_safe: 4.0,
        }
    }
}

/// Accelerations before and after a candidate change for the vehicle and
/// the two followers it affects. Absent followers contribute zeros.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MobilAccels {
    pub own_current: f64,
    pub own_target: f64,
    pub new_follower_current: f64,
    pub new_follower_target: f64,
    pub old_follower_current: f64,
    pub old_follower_target: f64,
}

pub fn mobil_safe(acc: &MobilAccels, p: &MobilParams) -> bool {
    acc.new_follower_target >= -p.b_safe
}

pub fn mobil_incentive(acc: &MobilAccels, p: &MobilParams) -> f64 {
    acc.own_target - acc.own_current
        + p.politeness * ((acc.new_follower_target - acc.new_follower_current) + (acc.old_follower_target - acc.old_follower_current))
}

pub fn mobil_lane_change(acc: &MobilAccels, p: &MobilParams) -> bool {
    mobil_safe(acc, p) && mobil_incentive(acc, p) > p.threshold
}

/// Uniform sampling ranges for per-vehicle driver parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverRanges {
    pub v0: [f64; 2],
    pub time_headway: [f64; 2],
    pub a_max: [f64; 2],
    pub b_comf: [f64; 2],
    pub s0: [f64; 2],
    pub politeness: [f64; 2],
}

impl Default for DriverRanges {
    fn default() -> Self {
        DriverRanges {
            v0: [8.0, 14.0],
            time_headway: [1.0, 1.8],
            a_max: [1.0, 2.0],
            b_comf: [1.5, 2.5],
            s0: [2.0, 3.0],
            politeness: [0.0, 0.5],
        }
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

impl DriverRanges {
    pub fn validate(&self) -> Result<(), String> {
        let named = [
            ("v0", self.v0),
            ("time_headway", self.time_headway),
            ("a_max", self.a_max),
            ("b_comf", self.b_comf),
            ("s0", self.s0),
            ("politeness", self.politeness),
        ];
        for (name, [lo, hi]) in named {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(format!("{name} range [{lo}, {hi}] is not an ordered pair"));
            }
            if name != "politeness" && lo <= 0.0 {
                return Err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    /// Draws IDM parameters and a politeness factor.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (IdmParams, f64) {
        let idm = IdmParams {
            v0: draw(rng, self.v0),
            time_headway: draw(rng, self.time_headway),
            a_max: draw(rng, self.a_max),
            b_comf: draw(rng, self.b_comf),
            s0: draw(rng, self.s0),
            delta: 4.0,
        };
        (idm, draw(rng, self.politeness))
    }
}
