//! Scenario configuration, read from TOML key-value files.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::WorldError;
use crate::idm::{DriverRanges, MobilParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    InRamp,
    Intersection,
    Roundabout,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [ScenarioKind::InRamp, ScenarioKind::Intersection, ScenarioKind::Roundabout];

    /// Zero-based knowledge category label.
    pub fn category(self) -> usize {
        match self {
            ScenarioKind::InRamp => 0,
            ScenarioKind::Intersection => 1,
            ScenarioKind::Roundabout => 2,
        }
    }

    pub fn from_category(c: usize) -> Option<Self> {
        Self::ALL.get(c).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::InRamp => "in_ramp",
            ScenarioKind::Intersection => "intersection",
            ScenarioKind::Roundabout => "roundabout",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "in_ramp" | "inramp" | "ramp" => Ok(ScenarioKind::InRamp),
            "intersection" => Ok(ScenarioKind::Intersection),
            "roundabout" => Ok(ScenarioKind::Roundabout),
            other => Err(WorldError::Config(format!("unknown scenario kind `{other}`"))),
        }
    }
}

/// Ego movement through the intersection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnRoute {
    Left,
    Straight,
    Right,
}

impl TurnRoute {
    pub const ALL: [TurnRoute; 3] = [TurnRoute::Left, TurnRoute::Straight, TurnRoute::Right];

    pub fn index(self) -> usize {
        match self {
            TurnRoute::Left => 0,
            TurnRoute::Straight => 1,
            TurnRoute::Right => 2,
        }
    }
}

/// Everything that defines an episode except the seed.
///
/// ```toml
/// kind = "roundabout"
/// exit = 1
/// traffic_density = 1.0
///
/// [drivers]
/// v0 = [8.0, 14.0]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    /// Intersection movement of the ego.
    pub route: TurnRoute,
    /// Roundabout exit counted counter-clockwise from the entry arm, 1..=3.
    pub exit: usize,
    /// Draw `route` and `exit` from the episode seed instead.
    pub random_variant: bool,
    /// Multiplier on the number of traffic vehicles; 0 disables traffic.
    pub traffic_density: f64,
    pub max_steps: usize,
    /// Distance before the route end that counts as reaching the goal.
    pub goal_margin: f64,
    /// Range of the ego's initial speed.
    pub ego_speed: [f64; 2],
    /// Largest initial lateral offset of the ego from its route, m.
    pub ego_offset: f64,
    /// Largest initial heading error of the ego, degrees.
    pub ego_yaw: f64,
    /// Standard deviation of Gaussian noise added to each executed
    /// demonstration action (steer, pedal). Recorded labels stay clean.
    pub demo_noise: [f64; 2],
    pub drivers: DriverRanges,
    pub mobil: MobilParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            kind: ScenarioKind::InRamp,
            route: TurnRoute::Left,
            exit: 2,
            random_variant: false,
            traffic_density: 1.0,
            max_steps: 1000,
            goal_margin: 5.0,
            ego_speed: [6.0, 10.0],
            ego_offset: 0.6,
            ego_yaw: 4.0,
            demo_noise: [0.1, 0.1],
            drivers: DriverRanges::default(),
            mobil: MobilParams::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn new(kind: ScenarioKind) -> Self {
        let ego_speed = match kind {
            ScenarioKind::InRamp => [6.0, 10.0],
            ScenarioKind::Intersection | ScenarioKind::Roundabout => [4.0, 7.0],
        };
        ScenarioConfig {
            kind,
            ego_speed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::Config(m));
        if !(1..=3).contains(&self.exit) {
            return bad(format!("roundabout exit must be 1..=3, got {}", self.exit));
        }
        if !(self.traffic_density.is_finite() && self.traffic_density >= 0.0) {
            return bad("traffic_density must be a non-negative number".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        if !(self.goal_margin.is_finite() && self.goal_margin >= 0.0) {
            return bad("goal_margin must be non-negative".into());
        }
        let [lo, hi] = self.ego_speed;
        if !(0.0 <= lo && lo <= hi && hi <= crate::vehicle::V_MAX) {
            return bad(format!("ego_speed [{lo}, {hi}] must lie in [0, {:.2}]", crate::vehicle::V_MAX));
        }
        if !(0.0..=1.5).contains(&self.ego_offset) || !(0.0..=30.0).contains(&self.ego_yaw) {
            return bad(format!(
                "ego_offset {} must lie in [0, 1.5] and ego_yaw {} in [0, 30]",
                self.ego_offset, self.ego_yaw
            ));
        }
        if !self.demo_noise.iter().all(|s| (0.0..=1.0).contains(s)) {
            return bad(format!("demo_noise {:?} must lie in [0, 1]", self.demo_noise));
        }
        self.drivers.validate().map_err(WorldError::Config)?;
        let m = &self.mobil;
        if !(m.politeness.is_finite() && m.threshold.is_finite() && m.b_safe > 0.0) {
            return bad("mobil parameters must be finite with positive b_safe".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, WorldError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| WorldError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self, WorldError> {
        let text = std::fs::read_to_string(path).map_err(|e| WorldError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}
