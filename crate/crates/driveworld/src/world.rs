//! Episode state and the stepping loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ScenarioConfig, ScenarioKind, TurnRoute};
use crate::error::WorldError;
use crate::geometry::{swept_overlap, wrap_angle, Obb, Vec2};
use crate::idm::{idm_accel, mobil_lane_change, IdmParams, Leader, MobilAccels, MobilParams};
use crate::layout::{circle, ramp, Layout, RouteRole, LANE_WIDTH};
use crate::lidar::{lidar_scan, LIDAR_RANGE};
use crate::log::{LogRecord, TrafficSnapshot};
use crate::path::Path;
use crate::vehicle::{self, map_action, max_steer, step_ego, VehicleState, CAR_LENGTH, DT, V_MAX, WHEELBASE};

pub const OBS_DIM: usize = 259;
pub const EGO_BLOCK: usize = 9;
pub const NAV_BLOCK: usize = 10;
pub const SUCCESS_BONUS: f64 = 20.0;
pub const COLLISION_PENALTY: f64 = 10.0;
/// Largest distance any box moves between swept collision samples.
pub const SWEEP_STEP: f64 = 0.5;
pub const CHECKPOINTS: [f64; 2] = [10.0, 20.0];
pub const NAV_SCALE: f64 = 50.0;
/// Lateral tolerance from the route end for the goal region.
pub const GOAL_LATERAL: f64 = 3.5;
const LEADER_LOOKAHEAD: f64 = 80.0;
const LEADER_LATERAL: f64 = 2.6;
const LEADER_HEADING: f64 = std::f64::consts::FRAC_PI_3;
const LATERAL_SPEED: f64 = 1.2;
const LANE_CHANGE_PERIOD: usize = 10;
const TRAFFIC_LATERAL_ACCEL: f64 = 2.5;
/// Braking a vehicle must exceed to stop before a yield line; above it the
/// vehicle is committed and no longer yields.
const COMMIT_DECEL: f64 = 5.0;
const STOP_BACK: f64 = 3.0;
const SPAWN_CLEARANCE: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    Success,
    Collision,
    OffRoad,
    Timeout,
    #[serde(rename = "none")]
    Running,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub cause: Cause,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficVehicle {
    pub id: u64,
    /// Route followed; `None` for a parked obstacle.
    pub route: Option<usize>,
    pub s: f64,
    pub speed: f64,
    /// Offset from the route centreline, decaying to zero after a lane
    /// change.
    pub lateral: f64,
    pub idm: IdmParams,
    pub politeness: f64,
    pub state: VehicleState,
    prev_box: Obb,
}

impl TrafficVehicle {
    pub fn footprint(&self) -> Obb {
        self.state.footprint()
    }
}

#[derive(Debug, Clone, Copy)]
struct Agent {
    id: Option<u64>,
    pos: Vec2,
    heading: f64,
    speed: f64,
    length: f64,
    route: Option<usize>,
    s: f64,
    idm: IdmParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Spawn {
    MainLane,
    Ramp,
    Crossing,
    Arrival,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Trigger {
    progress: f64,
    spawn: Spawn,
}

#[derive(Debug, Clone, Copy)]
struct Neighbor {
    agent: usize,
    /// Arc-length offset from the query point, negative behind.
    ds: f64,
}

pub struct World {
    cfg: ScenarioConfig,
    rng: ChaCha8Rng,
    layout: Layout,
    ego: VehicleState,
    ego_s: f64,
    ego_lateral: f64,
    prev_action: [f64; 2],
    steps: usize,
    cause: Cause,
    traffic: Vec<TrafficVehicle>,
    next_id: u64,
    triggers: Vec<Trigger>,
    log: Option<Vec<LogRecord>>,
}

fn ego_start(kind: ScenarioKind) -> f64 {
    match kind {
        ScenarioKind::InRamp | ScenarioKind::Roundabout => 5.0,
        ScenarioKind::Intersection => 4.5,
    }
}

impl World {
    pub fn new(cfg: ScenarioConfig, seed: u64) -> Result<Self, WorldError> {
        Self::build(cfg, seed, false)
    }

    /// Like [`World::new`], also recording spawn and step records.
    pub fn with_log(cfg: ScenarioConfig, seed: u64) -> Result<Self, WorldError> {
        Self::build(cfg, seed, true)
    }

    fn build(cfg: ScenarioConfig, seed: u64, log: bool) -> Result<Self, WorldError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = cfg;
        if cfg.random_variant {
            cfg.route = TurnRoute::ALL[rng.gen_range(0..3)];
            cfg.exit = rng.gen_range(1..=3);
            cfg.random_variant = false;
        }
        let layout = Layout::build(&cfg);
        let path = layout.ego_path();
        let s0 = ego_start(cfg.kind);
        let [lo, hi] = cfg.ego_speed;
        let speed = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let offset = if cfg.ego_offset > 0.0 {
            rng.gen_range(-cfg.ego_offset..=cfg.ego_offset)
        } else {
            0.0
        };
        let yaw = if cfg.ego_yaw > 0.0 {
            rng.gen_range(-cfg.ego_yaw..=cfg.ego_yaw).to_radians()
        } else {
            0.0
        };
        let heading = path.heading_at(s0);
        let position = path.point_at(s0) + Vec2::from_angle(heading).perp() * offset;
        let ego = VehicleState::new(position, heading + yaw, speed);
        let mut world = World {
            cfg,
            rng,
            layout,
            ego,
            ego_s: s0,
            ego_lateral: offset,
            prev_action: [0.0; 2],
            steps: 0,
            cause: Cause::Running,
            traffic: Vec::new(),
            next_id: 0,
            triggers: Vec::new(),
            log: if log { Some(Vec::new()) } else { None },
        };
        world.populate();
        Ok(world)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn kind(&self) -> ScenarioKind {
        self.cfg.kind
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn route(&self) -> &Path {
        self.layout.ego_path()
    }

    pub fn ego(&self) -> &VehicleState {
        &self.ego
    }

    /// Arc length of the ego's projection onto its route.
    pub fn ego_progress(&self) -> f64 {
        self.ego_s
    }

    pub fn ego_lateral(&self) -> f64 {
        self.ego_lateral
    }

    pub fn traffic(&self) -> &[TrafficVehicle] {
        &self.traffic
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn cause(&self) -> Cause {
        self.cause
    }

    pub fn is_terminated(&self) -> bool {
        self.cause != Cause::Running
    }

    pub fn take_log(&mut self) -> Vec<LogRecord> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Moves the ego, re-projecting it onto its route.
    pub fn set_ego_state(&mut self, state: VehicleState) {
        self.ego = state;
        let pr = self.route().project(state.position);
        self.ego_s = pr.s;
        self.ego_lateral = pr.lateral;
    }

    /// Adds a stationary obstacle with the given footprint.
    pub fn place_obstacle(&mut self, footprint: Obb) -> u64 {
        let mut state = VehicleState::new(footprint.center, footprint.heading, 0.0);
        state.length = 2.0 * footprint.half_length;
        state.width = 2.0 * footprint.half_width;
        let id = self.next_id;
        self.next_id += 1;
        self.traffic.push(TrafficVehicle {
            id,
            route: None,
            s: 0.0,
            speed: 0.0,
            lateral: 0.0,
            idm: IdmParams::default(),
            politeness: 0.0,
            state,
            prev_box: footprint,
        });
        id
    }

    fn density_count(&self, base: f64) -> usize {
        (base * self.cfg.traffic_density).round() as usize
    }

    fn populate(&mut self) {
        match self.cfg.kind {
            ScenarioKind::InRamp => {
                let lanes = self.layout.routes_with(|r| matches!(r, RouteRole::MainLane(_)));
                for &lane in &lanes {
                    let n = self.density_count(3.0);
                    let len = self.layout.routes[lane].path.length();
                    for _ in 0..n {
                        for _attempt in 0..30 {
                            let s = self.rng.gen_range(0.0..len - 10.0);
                            if self.try_spawn(lane, s, 25.0, None) {
                                break;
                            }
                        }
                    }
                }
                for k in 0..self.density_count(3.0) {
                    let progress = 15.0 * k as f64 + self.rng.gen_range(0.0..5.0);
                    self.triggers.push(Trigger {
                        progress,
                        spawn: Spawn::Ramp,
                    });
                }
                for k in 0..self.density_count(2.0) {
                    let progress = 30.0 + 40.0 * k as f64 + self.rng.gen_range(0.0..10.0);
                    self.triggers.push(Trigger {
                        progress,
                        spawn: Spawn::MainLane,
                    });
                }
            }
            ScenarioKind::Intersection => {
                for k in 0..self.density_count(4.0) {
                    let progress = 10.0 * k as f64 + self.rng.gen_range(0.0..6.0);
                    self.triggers.push(Trigger {
                        progress,
                        spawn: Spawn::Crossing,
                    });
                }
            }
            ScenarioKind::Roundabout => {
                let passes = self.layout.routes_with(|r| matches!(r, RouteRole::RoundaboutPass { .. }));
                for _ in 0..self.density_count(2.0) {
                    for _attempt in 0..30 {
                        let r = passes[self.rng.gen_range(0..passes.len())];
                        let route = &self.layout.routes[r];
                        let (lo, hi) = (route.merge.unwrap().s_joined + 2.0, route.exit.unwrap().1 - 2.0);
                        if hi <= lo {
                            continue;
                        }
                        let s = self.rng.gen_range(lo..hi);
                        if self.try_spawn(r, s, 20.0, None) {
                            break;
                        }
                    }
                }
                for ring in self.layout.routes_with(|r| matches!(r, RouteRole::Ring(_))) {
                    let len = self.layout.routes[ring].path.length();
                    for _ in 0..self.density_count(2.0) {
                        for _attempt in 0..30 {
                            let s = self.rng.gen_range(0.0..len);
                            if self.try_spawn(ring, s, 20.0, None) {
                                break;
                            }
                        }
                    }
                }
                for k in 0..self.density_count(3.0) {
                    let progress = 12.0 * k as f64 + self.rng.gen_range(0.0..6.0);
                    self.triggers.push(Trigger {
                        progress,
                        spawn: Spawn::Arrival,
                    });
                }
            }
        }
        self.triggers.sort_by(|a, b| a.progress.total_cmp(&b.progress));
    }

    fn fire_triggers(&mut self) {
        while let Some(t) = self.triggers.first().copied() {
            if t.progress > self.ego_s {
                break;
            }
            self.triggers.remove(0);
            match t.spawn {
                Spawn::Ramp => {
                    let r = self.layout.routes_with(|r| *r == RouteRole::Ramp)[0];
                    self.try_spawn(r, 0.0, SPAWN_CLEARANCE, Some(10.0));
                }
                Spawn::MainLane => {
                    let lanes = self.layout.routes_with(|r| matches!(r, RouteRole::MainLane(_)));
                    let r = lanes[self.rng.gen_range(0..lanes.len())];
                    self.try_spawn(r, 0.0, SPAWN_CLEARANCE, None);
                }
                Spawn::Crossing => {
                    let approach = self.rng.gen_range(1..4);
                    let movement = self.rng.gen_range(0..3);
                    let r = self.layout.routes_with(|r| *r == RouteRole::Crossing { approach, movement })[0];
                    let (s_in, _) = self.layout.routes[r].zone.unwrap();
                    let s = (s_in - STOP_BACK - self.rng.gen_range(15.0..45.0)).max(0.0);
                    let v = self.rng.gen_range(5.0..8.0);
                    self.try_spawn(r, s, SPAWN_CLEARANCE, Some(v));
                }
                Spawn::Arrival => {
                    let entry = self.rng.gen_range(1..4);
                    let exit = (entry + self.rng.gen_range(1..4)) % 4;
                    let r = self.layout.routes_with(|r| *r == RouteRole::RoundaboutPass { entry, exit })[0];
                    let v = self.rng.gen_range(6.0..9.0);
                    self.try_spawn(r, 0.0, SPAWN_CLEARANCE, Some(v));
                }
            }
        }
    }

    /// Spawns on `route` at `s` unless another vehicle is within
    /// `clearance`. Draws driver parameters either way so the random stream
    /// does not depend on geometry.
    fn try_spawn(&mut self, route: usize, s: f64, clearance: f64, speed: Option<f64>) -> bool {
        let (idm, politeness) = self.cfg.drivers.sample(&mut self.rng);
        let path = &self.layout.routes[route].path;
        let s = path.normalize_s(s);
        let pos = path.point_at(s);
        let heading = path.heading_at(s);
        if pos.dist(self.ego.position) < clearance.max(SPAWN_CLEARANCE)
            || self.traffic.iter().any(|t| t.state.position.dist(pos) < clearance)
        {
            return false;
        }
        let speed = speed.unwrap_or(idm.v0).min(idm.v0);
        let state = VehicleState::new(pos, heading, speed);
        let id = self.next_id;
        self.next_id += 1;
        if let Some(log) = self.log.as_mut() {
            log.push(LogRecord::Spawn {
                step: self.steps,
                id,
                route: Some(route),
                s,
                speed,
                idm,
                politeness,
            });
        }
        self.traffic.push(TrafficVehicle {
            id,
            route: Some(route),
            s,
            speed,
            lateral: 0.0,
            idm,
            politeness,
            state,
            prev_box: state.footprint(),
        });
        true
    }

    fn agents(&self) -> Vec<Agent> {
        let mut out: Vec<Agent> = self
            .traffic
            .iter()
            .map(|t| Agent {
                id: Some(t.id),
                pos: t.state.position,
                heading: t.state.heading,
                speed: t.speed,
                length: t.state.length,
                route: t.route,
                s: t.s,
                idm: t.idm,
            })
            .collect();
        out.push(Agent {
            id: None,
            pos: self.ego.position,
            heading: self.ego.heading,
            speed: self.ego.speed,
            length: self.ego.length,
            route: Some(self.layout.ego_route),
            s: self.ego_s,
            idm: IdmParams::default(),
        });
        out
    }

    /// Nearest agent ahead along `path` from `s`, in the same lane and
    /// travelling roughly the same way.
    fn leader_on(&self, agents: &[Agent], me: usize, path: &Path, s: f64) -> Option<(usize, Leader)> {
        let a = &agents[me];
        let mut best: Option<(usize, f64)> = None;
        for (j, b) in agents.iter().enumerate() {
            if j == me || b.pos.dist(a.pos) > LEADER_LOOKAHEAD + 10.0 {
                continue;
            }
            let pr = path.project_window(b.pos, s, s + LEADER_LOOKAHEAD);
            if b.pos.dist(pr.point) > LEADER_LATERAL || wrap_angle(b.heading - pr.heading).abs() > LEADER_HEADING {
                continue;
            }
            let mut ds = pr.s - path.normalize_s(s);
            if path.is_closed() {
                ds = ds.rem_euclid(path.length());
            }
            if ds <= 0.0 {
                continue;
            }
            if best.is_none_or(|(_, d)| ds < d) {
                best = Some((j, ds));
            }
        }
        best.map(|(j, ds)| {
            (
                j,
                Leader {
                    speed: agents[j].speed,
                    gap: ds - 0.5 * (a.length + agents[j].length),
                },
            )
        })
    }

    /// Closest agents ahead and behind inside the lane of `path`.
    fn lane_neighbors(&self, agents: &[Agent], me: usize, path: &Path, s: f64) -> (Option<Neighbor>, Option<Neighbor>) {
        let mut lead: Option<Neighbor> = None;
        let mut follow: Option<Neighbor> = None;
        for (j, b) in agents.iter().enumerate() {
            if j == me || b.pos.dist(agents[me].pos) > 120.0 {
                continue;
            }
            let pr = path.project(b.pos);
            if b.pos.dist(pr.point) > LANE_WIDTH / 2.0 {
                continue;
            }
            let ds = pr.s - s;
            if ds >= 0.0 {
                if lead.is_none_or(|n| ds < n.ds) {
                    lead = Some(Neighbor { agent: j, ds });
                }
            } else if follow.is_none_or(|n| ds > n.ds) {
                follow = Some(Neighbor { agent: j, ds });
            }
        }
        (lead, follow)
    }

    fn committed(speed: f64, dist: f64) -> bool {
        speed * speed / (2.0 * COMMIT_DECEL) > dist
    }

    /// Whether agent `me` must hold before the intersection conflict zone.
    fn crossing_blocked(&self, agents: &[Agent], me: usize) -> bool {
        let a = &agents[me];
        let Some(ri) = a.route else { return false };
        let Some((s_in, _)) = self.layout.routes[ri].zone else {
            return false;
        };
        let line = s_in - STOP_BACK;
        let dist = line - a.s;
        if dist < -0.5 || Self::committed(a.speed, dist) {
            return false;
        }
        let eta = dist.max(0.0) / a.speed.max(0.5);
        for (j, b) in agents.iter().enumerate() {
            let Some(rj) = b.route else { continue };
            if j == me || !self.layout.conflicts[ri][rj] {
                continue;
            }
            let (sj_in, sj_out) = self.layout.routes[rj].zone.unwrap();
            let line_j = sj_in - STOP_BACK;
            if b.s > sj_out + STOP_BACK {
                continue;
            }
            let dist_j = line_j - b.s;
            if dist_j < -0.5 || Self::committed(b.speed, dist_j) {
                return true;
            }
            if dist_j > 40.0 {
                continue;
            }
            let eta_j = dist_j.max(0.0) / b.speed.max(0.5);
            let first = match (a.id, b.id) {
                (None, _) => eta_j < eta - 0.5,
                (_, None) => eta_j < eta + 0.5,
                (Some(ia), Some(ib)) => eta_j < eta || (eta_j == eta && ib < ia),
            };
            if first {
                return true;
            }
        }
        false
    }

    /// Whether agent `me` must hold before entering the roundabout.
    fn merge_blocked(&self, agents: &[Agent], me: usize) -> bool {
        let a = &agents[me];
        let Some(ri) = a.route else { return false };
        let Some(m) = self.layout.routes[ri].merge else { return false };
        let dist = m.s_line - a.s;
        if !(-0.5..=30.0).contains(&dist) || Self::committed(a.speed, dist) {
            return false;
        }
        let lane = circle::LANE_RADII[0];
        for (j, b) in agents.iter().enumerate() {
            if j == me {
                continue;
            }
            let r = b.pos.norm();
            if !(lane - 2.25..=circle::OUTER_RADIUS + 1.0).contains(&r) {
                continue;
            }
            let phi = b.pos.angle();
            if wrap_angle(b.heading - (phi + std::f64::consts::FRAC_PI_2)).abs() > 50f64.to_radians() {
                continue;
            }
            if let Some(rj) = b.route {
                if let Some((arm, s_exit)) = self.layout.routes[rj].exit {
                    if arm == m.arm && b.s < s_exit {
                        continue;
                    }
                }
            }
            let d = wrap_angle(m.angle - phi) * lane;
            if d >= -8.0 && d <= 3.0 * b.speed + 10.0 {
                return true;
            }
        }
        false
    }

    /// Arc length at which agent `me` has to stop, if it has to.
    fn hold_point(&self, agents: &[Agent], me: usize) -> Option<f64> {
        let ri = agents[me].route?;
        let route = &self.layout.routes[ri];
        if route.role == RouteRole::Ramp {
            return Some(route.path.length() - 0.5 * CAR_LENGTH);
        }
        if let Some(zone) = route.zone.filter(|_| self.crossing_blocked(agents, me)) {
            return Some(zone.0 - STOP_BACK);
        }
        route.merge.filter(|_| self.merge_blocked(agents, me)).map(|m| m.s_line)
    }

    /// The vehicle the ego is following on its route, if any.
    pub fn ego_leader(&self) -> Option<Leader> {
        let agents = self.agents();
        let me = agents.len() - 1;
        self.leader_on(&agents, me, self.route(), self.ego_s).map(|(_, l)| l)
    }

    /// Distance along the route to the line where the ego must currently
    /// hold for priority traffic, if it must.
    pub fn ego_hold_distance(&self) -> Option<f64> {
        let agents = self.agents();
        let me = agents.len() - 1;
        let route = &self.layout.routes[self.layout.ego_route];
        let line = if let Some(zone) = route.zone.filter(|_| self.crossing_blocked(&agents, me)) {
            zone.0 - STOP_BACK
        } else {
            route.merge.filter(|_| self.merge_blocked(&agents, me))?.s_line
        };
        Some(line - self.ego_s)
    }

    fn speed_cap(path: &Path, s: f64, v0: f64) -> f64 {
        let kappa = [0.0, 5.0, 10.0, 15.0, 20.0]
            .iter()
            .map(|d| path.curvature_at(s + d, 3.0).abs())
            .fold(0.0, f64::max);
        if kappa > 1e-3 {
            v0.min((TRAFFIC_LATERAL_ACCEL / kappa).sqrt()).max(3.0)
        } else {
            v0
        }
    }

    fn traffic_accel(&self, agents: &[Agent], i: usize) -> f64 {
        let t = &self.traffic[i];
        let Some(ri) = t.route else { return 0.0 };
        let path = &self.layout.routes[ri].path;
        let mut p = t.idm;
        p.v0 = Self::speed_cap(path, t.s, p.v0);
        let leader = self.leader_on(agents, i, path, t.s).map(|(_, l)| l);
        let mut a = idm_accel(t.speed, leader, &p);
        if let Some(stop) = self.hold_point(agents, i) {
            let gap = stop - t.s + p.s0 - 0.5;
            a = a.min(idm_accel(t.speed, Some(Leader { speed: 0.0, gap }), &p));
        }
        a
    }

    fn accel_behind(f: &Agent, lead: Option<(f64, f64)>) -> f64 {
        idm_accel(f.speed, lead.map(|(speed, gap)| Leader { speed, gap }), &f.idm)
    }

    /// MOBIL evaluation of moving vehicle `i` from its lane to route
    /// `target`. Returns the arc length and offset on the target lane.
    fn consider_lane_change(&self, agents: &[Agent], i: usize, target: usize, mobil: &MobilParams) -> Option<(f64, f64)> {
        let t = &self.traffic[i];
        let me = &agents[i];
        let cur_path = &self.layout.routes[t.route?].path;
        let tgt_path = &self.layout.routes[target].path;
        let pr = tgt_path.project(t.state.position);
        let (lead_c, foll_c) = self.lane_neighbors(agents, i, cur_path, t.s);
        let (lead_t, foll_t) = self.lane_neighbors(agents, i, tgt_path, pr.s);
        let gap_to = |n: &Neighbor, other_len: f64| n.ds.abs() - 0.5 * (me.length + other_len);
        let lead = |n: Option<Neighbor>| n.map(|n| (agents[n.agent].speed, gap_to(&n, agents[n.agent].length)));
        let mut acc = MobilAccels {
            own_current: idm_accel(t.speed, lead(lead_c).map(|(speed, gap)| Leader { speed, gap }), &t.idm),
            own_target: idm_accel(t.speed, lead(lead_t).map(|(speed, gap)| Leader { speed, gap }), &t.idm),
            ..Default::default()
        };
        if let Some(f) = foll_t {
            let fa = &agents[f.agent];
            let to_lead = lead_t.map(|l| (agents[l.agent].speed, l.ds - f.ds - 0.5 * (fa.length + agents[l.agent].length)));
            acc.new_follower_current = Self::accel_behind(fa, to_lead);
            acc.new_follower_target = Self::accel_behind(fa, Some((t.speed, gap_to(&f, fa.length))));
        }
        if let Some(f) = foll_c {
            let fa = &agents[f.agent];
            let to_lead = lead_c.map(|l| (agents[l.agent].speed, l.ds - f.ds - 0.5 * (fa.length + agents[l.agent].length)));
            acc.old_follower_current = Self::accel_behind(fa, Some((t.speed, gap_to(&f, fa.length))));
            acc.old_follower_target = Self::accel_behind(fa, to_lead);
        }
        let params = MobilParams {
            politeness: t.politeness,
            ..*mobil
        };
        let gaps_ok = lead(lead_t).is_none_or(|(_, g)| g > 0.0) && foll_t.is_none_or(|f| gap_to(&f, agents[f.agent].length) > 0.0);
        (gaps_ok && mobil_lane_change(&acc, &params)).then_some((pr.s, pr.lateral))
    }

    /// Gap acceptance for a ramp vehicle joining lane 0: only the safety
    /// half of MOBIL applies.
    fn consider_merge(&self, agents: &[Agent], i: usize, lane0: usize) -> Option<(f64, f64)> {
        let t = &self.traffic[i];
        let x = t.state.position.x;
        if !(ramp::MERGE_START + 2.0..=ramp::MERGE_END).contains(&x) {
            return None;
        }
        let path = &self.layout.routes[lane0].path;
        let pr = path.project(t.state.position);
        let (lead, foll) = self.lane_neighbors(agents, i, path, pr.s);
        let b_safe = self.cfg.mobil.b_safe;
        if let Some(l) = lead {
            let la = &agents[l.agent];
            let gap = l.ds - 0.5 * (t.state.length + la.length);
            if gap <= 1.0 || idm_accel(t.speed, Some(Leader { speed: la.speed, gap }), &t.idm) < -b_safe {
                return None;
            }
        }
        if let Some(f) = foll {
            let fa = &agents[f.agent];
            let gap = -f.ds - 0.5 * (t.state.length + fa.length);
            if gap <= 1.0 || Self::accel_behind(fa, Some((t.speed, gap))) < -b_safe {
                return None;
            }
        }
        Some((pr.s, pr.lateral))
    }

    fn advance_traffic(&mut self) {
        let agents = self.agents();
        let n = self.traffic.len();
        let accels: Vec<f64> = (0..n).map(|i| self.traffic_accel(&agents, i)).collect();
        let mut switches: Vec<Option<(usize, f64, f64)>> = vec![None; n];
        if self.cfg.kind == ScenarioKind::InRamp {
            let lanes = self.layout.routes_with(|r| matches!(r, RouteRole::MainLane(_)));
            let mobil = self.cfg.mobil;
            for (i, t) in self.traffic.iter().enumerate() {
                let Some(ri) = t.route else { continue };
                if t.lateral != 0.0 {
                    continue;
                }
                match self.layout.routes[ri].role {
                    RouteRole::Ramp => {
                        switches[i] = self.consider_merge(&agents, i, lanes[0]).map(|(s, l)| (lanes[0], s, l));
                    }
                    RouteRole::MainLane(k) if (self.steps + t.id as usize).is_multiple_of(LANE_CHANGE_PERIOD) => {
                        let target = lanes[1 - k];
                        switches[i] = self.consider_lane_change(&agents, i, target, &mobil).map(|(s, l)| (target, s, l));
                    }
                    _ => {}
                }
            }
        }
        for (i, t) in self.traffic.iter_mut().enumerate() {
            t.prev_box = t.state.footprint();
            let Some(ri) = t.route else { continue };
            let (ri, s0) = match switches[i] {
                Some((target, s, lat)) => {
                    t.route = Some(target);
                    t.lateral = lat;
                    (target, s)
                }
                None => (ri, t.s),
            };
            let path = &self.layout.routes[ri].path;
            let v1 = (t.speed + accels[i] * DT).max(0.0);
            let s1 = s0 + 0.5 * (t.speed + v1) * DT;
            t.speed = v1;
            t.s = if path.is_closed() { path.normalize_s(s1) } else { s1 };
            let step = LATERAL_SPEED * DT;
            let lat_rate = if t.lateral.abs() > 0.0 {
                -t.lateral.signum() * LATERAL_SPEED
            } else {
                0.0
            };
            t.lateral = if t.lateral.abs() <= step {
                0.0
            } else {
                t.lateral - t.lateral.signum() * step
            };
            let heading = path.heading_at(t.s);
            let drift = if t.lateral != 0.0 { lat_rate.atan2(t.speed.max(1.0)) } else { 0.0 };
            t.state.position = path.point_at(t.s) + Vec2::from_angle(heading).perp() * t.lateral;
            t.state.heading = wrap_angle(heading + drift);
            t.state.speed = t.speed;
        }
        let routes = &self.layout.routes;
        self.traffic.retain(|t| match t.route {
            Some(r) => routes[r].path.is_closed() || t.s < routes[r].path.length() - 0.1,
            None => true,
        });
    }

    /// Observation of the current state: ego block, navigation block and
    /// lidar block.
    pub fn observe(&self) -> Vec<f64> {
        let path = self.route();
        let len = path.length();
        let e = &self.ego;
        let hdev = wrap_angle(e.heading - path.heading_at(self.ego_s));
        let yaw_scale = V_MAX * max_steer().tan() / WHEELBASE;
        let mut obs = Vec::with_capacity(OBS_DIM);
        obs.extend_from_slice(&[
            e.speed / V_MAX,
            e.steer / max_steer(),
            hdev.sin(),
            hdev.cos(),
            self.ego_lateral / (LANE_WIDTH / 2.0),
            e.yaw_rate() / yaw_scale,
            ((len - self.ego_s) / len).clamp(0.0, 1.0),
            self.prev_action[0],
            self.prev_action[1],
        ]);
        for d in CHECKPOINTS {
            let s = self.ego_s + d;
            let rel = (path.point_at(s) - e.position).rotate(-e.heading);
            let dh = wrap_angle(path.heading_at(s) - e.heading);
            obs.extend_from_slice(&[rel.x / NAV_SCALE, rel.y / NAV_SCALE, dh.sin(), dh.cos(), rel.norm() / NAV_SCALE]);
        }
        let boxes: Vec<Obb> = self
            .traffic
            .iter()
            .filter(|t| t.state.position.dist(e.position) < LIDAR_RANGE + 5.0)
            .map(|t| t.footprint())
            .collect();
        obs.extend(lidar_scan(e.position, e.heading, &self.layout.edges, &boxes));
        obs
    }

    /// Applies one normalized action and advances the world by one tick.
    pub fn step(&mut self, action: [f64; 2]) -> Result<StepOutcome, WorldError> {
        if self.is_terminated() {
            return Err(WorldError::Usage(format!("episode already ended ({:?})", self.cause)));
        }
        let controls = map_action(action);
        let ego_prev = self.ego.footprint();
        self.ego = step_ego(&self.ego, &controls, DT);
        let pedal = if controls.throttle > 0.0 {
            controls.throttle / vehicle::MAX_THROTTLE
        } else {
            -controls.brake / vehicle::MAX_BRAKE
        };
        self.prev_action = [controls.steer_deg / vehicle::MAX_STEER_DEG, pedal];
        let path = self.layout.ego_path();
        let pr = path.project_window(self.ego.position, self.ego_s - 10.0, self.ego_s + 15.0);
        let progress = pr.s - self.ego_s;
        self.ego_s = pr.s;
        self.ego_lateral = pr.lateral;

        self.advance_traffic();
        self.fire_triggers();
        self.steps += 1;

        let ego_box = self.ego.footprint();
        let collided = self
            .traffic
            .iter()
            .any(|t| swept_overlap(&ego_prev, &ego_box, &t.prev_box, &t.footprint(), SWEEP_STEP));
        let len = self.route().length();
        let cause = if collided {
            Cause::Collision
        } else if !self.layout.is_drivable(self.ego.position) {
            Cause::OffRoad
        } else if self.ego_s >= len - self.cfg.goal_margin && self.ego_lateral.abs() < GOAL_LATERAL {
            Cause::Success
        } else if self.steps >= self.cfg.max_steps {
            Cause::Timeout
        } else {
            Cause::Running
        };
        let mut reward = progress;
        match cause {
            Cause::Success => reward += SUCCESS_BONUS,
            Cause::Collision => reward -= COLLISION_PENALTY,
            _ => {}
        }
        self.cause = cause;
        if let Some(log) = &mut self.log {
            let traffic = self
                .traffic
                .iter()
                .map(|t| TrafficSnapshot {
                    id: t.id,
                    x: t.state.position.x,
                    y: t.state.position.y,
                    heading: t.state.heading,
                    speed: t.speed,
                })
                .collect();
            let record = LogRecord::Step {
                step: self.steps,
                ego: self.ego,
                action: self.prev_action,
                reward,
                cause,
                traffic,
            };
            log.push(record);
        }
        Ok(StepOutcome {
            observation: self.observe(),
            reward,
            terminated: cause != Cause::Running,
            cause,
        })
    }
}
