//! A small deterministic traffic world for closed-loop driving policies.
//!
//! Three scenarios share one stepping loop: a highway on-ramp, an
//! unsignalized six-lane intersection and a three-lane roundabout. Traffic
//! follows reference paths under IDM with MOBIL lane changes; the ego is a
//! kinematic bicycle observed through a 259-value vector that ends in a
//! 240-beam lidar scan.

pub mod config;
pub mod error;
pub mod geometry;
pub mod idm;
pub mod layout;
pub mod lidar;
pub mod log;
pub mod path;
pub mod vehicle;
pub mod world;

pub use config::{ScenarioConfig, ScenarioKind, TurnRoute};
pub use error::WorldError;
pub use geometry::{Obb, Segment, Vec2};
pub use idm::{idm_accel, mobil_lane_change, DriverRanges, IdmParams, Leader, MobilAccels, MobilParams};
pub use lidar::{lidar_scan, LIDAR_RANGE, N_BEAMS};
pub use vehicle::{map_action, step_ego, Controls, VehicleState};
pub use world::{Cause, StepOutcome, TrafficVehicle, World, OBS_DIM};
