//! Static geometry of the three scenarios: road edges for the lidar,
//! drivable regions for the off-road test, and the reference routes that
//! traffic and the ego follow.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::config::{ScenarioConfig, ScenarioKind, TurnRoute};
use crate::geometry::{Segment, Vec2};
use crate::path::Path;

pub const LANE_WIDTH: f64 = 3.5;

pub mod ramp {
    /// Main road spans x in [MAIN_START, MAIN_END]; the ego's route is the
    /// first 150 m of lane 0.
    pub const MAIN_START: f64 = -30.0;
    pub const MAIN_END: f64 = 210.0;
    pub const EGO_ROUTE_LENGTH: f64 = 150.0;
    pub const MERGE_START: f64 = 60.0;
    /// End of the 50 m acceleration lane.
    pub const MERGE_END: f64 = 110.0;
    pub const LANE_Y: [f64; 2] = [0.0, 3.5];
    pub const ACCEL_LANE_Y: f64 = -3.5;
}

pub mod cross {
    pub const ROAD_HALF_WIDTH: f64 = 10.5;
    pub const CURB_RADIUS: f64 = 6.25;
    pub const CORNER: f64 = ROAD_HALF_WIDTH + CURB_RADIUS;
    /// Half-size of the square in which crossing routes are checked for
    /// conflicts.
    pub const ZONE: f64 = 12.0;
    pub const ARM_LENGTH: f64 = 90.0;
    pub const LANE_X: [f64; 3] = [1.75, 5.25, 8.75];
    pub const LEFT_RADIUS: f64 = 12.25;
    pub const RIGHT_RADIUS: f64 = 8.0;
    pub const EXIT_RUN: f64 = 35.0;
    pub const EGO_START: f64 = 65.0;
    pub const TRAFFIC_START: f64 = 70.0;
    /// Two routes conflict when their in-zone parts come this close.
    pub const CONFLICT_DISTANCE: f64 = 2.5;
}

pub mod circle {
    pub const OUTER_RADIUS: f64 = 35.0;
    pub const ISLAND_RADIUS: f64 = 24.5;
    pub const LANE_RADII: [f64; 3] = [33.25, 29.75, 26.25];
    pub const ARM_HALF_WIDTH: f64 = 3.5;
    pub const ARM_END: f64 = 90.0;
    /// Radius where entry and exit curves meet the straight arm.
    pub const FLARE_RADIUS: f64 = 45.0;
    /// Angular offset of merge and diverge points from the arm axis.
    pub const MERGE_OFFSET_DEG: f64 = 25.0;
    pub const FLARE_OFFSET_DEG: f64 = 30.0;
    pub const EGO_START: f64 = 85.0;
    pub const EGO_END: f64 = 80.0;
    pub const TRAFFIC_START: f64 = 75.0;
    /// Entering vehicles stop with their centre at this radius.
    pub const STOP_RADIUS: f64 = 38.0;
    pub const ARM_ANGLES_DEG: [f64; 4] = [-90.0, 0.0, 90.0, 180.0];
}

/// Area the ego centre may occupy.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    /// Convex polygon, vertices counter-clockwise.
    Polygon(Vec<Vec2>),
    Annulus {
        center: Vec2,
        inner: f64,
        outer: f64,
    },
    Disk {
        center: Vec2,
        radius: f64,
    },
    Corridor {
        path: Path,
        half_width: f64,
    },
}

impl Region {
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Region {
        Region::Polygon(vec![Vec2::new(x0, y0), Vec2::new(x1, y0), Vec2::new(x1, y1), Vec2::new(x0, y1)])
    }

    pub fn contains(&self, p: Vec2) -> bool {
        match self {
            Region::Polygon(v) => (0..v.len()).all(|i| (v[(i + 1) % v.len()] - v[i]).cross(p - v[i]) >= 0.0),
            Region::Annulus { center, inner, outer } => {
                let r = p.dist(*center);
                r >= *inner && r <= *outer
            }
            Region::Disk { center, radius } => p.dist(*center) <= *radius,
            Region::Corridor { path, half_width } => {
                let pr = path.project(p);
                p.dist(pr.point) <= *half_width
            }
        }
    }
}

/// Behaviour class of a route.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteRole {
    Ego,
    MainLane(usize),
    Ramp,
    Crossing { approach: usize, movement: usize },
    RoundaboutPass { entry: usize, exit: usize },
    Ring(usize),
}

/// Roundabout entry: where to hold and which point of the ring to watch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub arm: usize,
    pub s_line: f64,
    pub s_joined: f64,
    /// Polar angle of the merge point on the outer lane.
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub path: Path,
    pub role: RouteRole,
    /// Arc-length span inside the intersection conflict zone.
    pub zone: Option<(f64, f64)>,
    pub merge: Option<Merge>,
    /// Arm and arc length where a roundabout route leaves the ring.
    pub exit: Option<(usize, f64)>,
}

impl Route {
    fn plain(path: Path, role: RouteRole) -> Self {
        Route {
            path,
            role,
            zone: None,
            merge: None,
            exit: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub kind: ScenarioKind,
    pub edges: Vec<Segment>,
    pub drivable: Vec<Region>,
    pub blocked: Vec<Region>,
    pub routes: Vec<Route>,
    pub ego_route: usize,
    /// `conflicts[i][j]`: routes i and j cross inside the intersection.
    pub conflicts: Vec<Vec<bool>>,
}

impl Layout {
    pub fn build(cfg: &ScenarioConfig) -> Layout {
        match cfg.kind {
            ScenarioKind::InRamp => build_in_ramp(),
            ScenarioKind::Intersection => build_intersection(cfg.route),
            ScenarioKind::Roundabout => build_roundabout(cfg.exit),
        }
    }

    pub fn is_drivable(&self, p: Vec2) -> bool {
        !self.blocked.iter().any(|r| r.contains(p)) && self.drivable.iter().any(|r| r.contains(p))
    }

    pub fn ego_path(&self) -> &Path {
        &self.routes[self.ego_route].path
    }

    pub fn routes_with(&self, pred: impl Fn(&RouteRole) -> bool) -> Vec<usize> {
        (0..self.routes.len()).filter(|&i| pred(&self.routes[i].role)).collect()
    }
}

fn polyline(points: &[Vec2]) -> Vec<Segment> {
    points.windows(2).map(|w| Segment::new(w[0], w[1])).collect()
}

fn arc_points(center: Vec2, radius: f64, a0: f64, a1: f64, step_deg: f64) -> Vec<Vec2> {
    let n = (((a1 - a0).abs().to_degrees() / step_deg).ceil() as usize).max(1);
    (0..=n)
        .map(|k| center + Vec2::from_angle(a0 + (a1 - a0) * k as f64 / n as f64) * radius)
        .collect()
}

fn offset_polyline(path: &Path, offset: f64) -> Vec<Vec2> {
    let pts = path.points();
    let mut s = 0.0;
    let mut out = Vec::with_capacity(pts.len());
    for (i, p) in pts.iter().enumerate() {
        if i > 0 {
            s += p.dist(pts[i - 1]);
        }
        out.push(*p + Vec2::from_angle(path.heading_at(s)).perp() * offset);
    }
    out
}

fn build_in_ramp() -> Layout {
    use ramp::*;
    let w = LANE_WIDTH / 2.0;
    let lanes: Vec<Path> = LANE_Y
        .iter()
        .map(|&y| Path::builder(Vec2::new(MAIN_START, y), 0.0).line(MAIN_END - MAIN_START).build())
        .collect();
    let ramp_path = Path::builder(Vec2::new(0.0, -25.0), 0.3)
        .bezier_to(Vec2::new(MERGE_START, ACCEL_LANE_Y), 0.0)
        .line(MERGE_END + 2.0 - MERGE_START)
        .build();
    let ego = Path::builder(Vec2::new(0.0, LANE_Y[0]), 0.0).line(EGO_ROUTE_LENGTH).build();

    let mut edges = vec![
        Segment::new(Vec2::new(MAIN_START, LANE_Y[1] + w), Vec2::new(MAIN_END, LANE_Y[1] + w)),
        Segment::new(Vec2::new(MAIN_START, -w), Vec2::new(MERGE_START, -w)),
        Segment::new(Vec2::new(MERGE_END + 2.0, -w), Vec2::new(MAIN_END, -w)),
        Segment::new(
            Vec2::new(MERGE_START, ACCEL_LANE_Y - w),
            Vec2::new(MERGE_END + 2.0, ACCEL_LANE_Y - w),
        ),
        Segment::new(Vec2::new(MERGE_END + 2.0, ACCEL_LANE_Y - w), Vec2::new(MERGE_END + 2.0, -w)),
    ];
    let bend_end = ramp_path.project(Vec2::new(MERGE_START, ACCEL_LANE_Y)).s;
    let bend: Vec<Vec2> = ramp_path.points().iter().copied().filter(|p| p.x <= MERGE_START + 1e-9).collect();
    let bend_path = Path::from_points(bend, false);
    edges.extend(polyline(&offset_polyline(&bend_path, w)));
    edges.extend(polyline(&offset_polyline(&bend_path, -w)));
    debug_assert!(bend_end > 0.0);

    let drivable = vec![
        Region::rect(MAIN_START, -w, MAIN_END, LANE_Y[1] + w),
        Region::rect(MERGE_START - 5.0, ACCEL_LANE_Y - w, MERGE_END + 2.0, -w),
        Region::Corridor {
            path: bend_path,
            half_width: 2.5,
        },
    ];
    let mut routes: Vec<Route> = lanes
        .into_iter()
        .enumerate()
        .map(|(i, p)| Route::plain(p, RouteRole::MainLane(i)))
        .collect();
    routes.push(Route::plain(ramp_path, RouteRole::Ramp));
    routes.push(Route::plain(ego, RouteRole::Ego));
    let n = routes.len();
    Layout {
        kind: ScenarioKind::InRamp,
        edges,
        drivable,
        blocked: vec![],
        ego_route: n - 1,
        routes,
        conflicts: vec![vec![false; n]; n],
    }
}

/// Route through the intersection from the south approach, rotated to
/// `approach` (counter-clockwise quarter turns: south, east, north, west).
fn crossing_path(approach: usize, movement: usize, start: f64) -> Path {
    use cross::*;
    let x = LANE_X[movement];
    let b = Path::builder(Vec2::new(x, -start), FRAC_PI_2);
    let p = match movement {
        0 => b.line(start - (LEFT_RADIUS - x)).arc(LEFT_RADIUS, FRAC_PI_2).line(EXIT_RUN),
        1 => b.line(start + CORNER + EXIT_RUN),
        _ => b.line(start - CORNER).arc(RIGHT_RADIUS, -FRAC_PI_2).line(EXIT_RUN),
    };
    let pts = p.build().points().iter().map(|q| q.rotate(FRAC_PI_2 * approach as f64)).collect();
    Path::from_points(pts, false)
}

fn zone_span(path: &Path, half: f64) -> Option<(f64, f64)> {
    let mut s = 0.0;
    let mut span: Option<(f64, f64)> = None;
    let pts = path.points();
    for (i, p) in pts.iter().enumerate() {
        if i > 0 {
            s += p.dist(pts[i - 1]);
        }
        if p.x.abs() <= half && p.y.abs() <= half {
            span = Some(match span {
                None => (s, s),
                Some((a, _)) => (a, s),
            });
        }
    }
    span
}

fn in_zone_points(path: &Path, half: f64) -> Vec<Vec2> {
    path.points()
        .iter()
        .copied()
        .filter(|p| p.x.abs() <= half && p.y.abs() <= half)
        .collect()
}

fn build_intersection(ego_turn: TurnRoute) -> Layout {
    use cross::*;
    let mut routes = Vec::new();
    for approach in 0..4 {
        for movement in 0..3 {
            let path = crossing_path(approach, movement, TRAFFIC_START);
            let zone = zone_span(&path, ZONE);
            routes.push(Route {
                zone,
                ..Route::plain(path, RouteRole::Crossing { approach, movement })
            });
        }
    }
    let ego_path = crossing_path(0, ego_turn.index(), EGO_START);
    let zone = zone_span(&ego_path, ZONE);
    routes.push(Route {
        zone,
        ..Route::plain(ego_path, RouteRole::Ego)
    });
    let ego_route = routes.len() - 1;

    let approach_of = |r: &Route| match r.role {
        RouteRole::Crossing { approach, .. } => approach,
        _ => 0,
    };
    let pts: Vec<Vec<Vec2>> = routes.iter().map(|r| in_zone_points(&r.path, ZONE)).collect();
    let n = routes.len();
    let mut conflicts = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j || approach_of(&routes[i]) == approach_of(&routes[j]) {
                continue;
            }
            conflicts[i][j] = pts[i].iter().any(|a| pts[j].iter().any(|b| a.dist(*b) < CONFLICT_DISTANCE));
        }
    }

    let mut edges = Vec::new();
    let mut blocked = Vec::new();
    for q in 0..4 {
        let rot = FRAC_PI_2 * q as f64;
        for side in [-1.0, 1.0] {
            let a = Vec2::new(side * ROAD_HALF_WIDTH, -CORNER).rotate(rot);
            let b = Vec2::new(side * ROAD_HALF_WIDTH, -ARM_LENGTH).rotate(rot);
            edges.push(Segment::new(a, b));
        }
        let c = Vec2::new(CORNER, -CORNER).rotate(rot);
        let start = PI + rot;
        edges.extend(polyline(&arc_points(c, CURB_RADIUS, start, start + FRAC_PI_2, 10.0)));
        blocked.push(Region::Disk {
            center: c,
            radius: CURB_RADIUS,
        });
    }
    let drivable = vec![
        Region::rect(-ROAD_HALF_WIDTH, -ARM_LENGTH, ROAD_HALF_WIDTH, ARM_LENGTH),
        Region::rect(-ARM_LENGTH, -ROAD_HALF_WIDTH, ARM_LENGTH, ROAD_HALF_WIDTH),
        Region::rect(-CORNER, -CORNER, CORNER, CORNER),
    ];
    Layout {
        kind: ScenarioKind::Intersection,
        edges,
        drivable,
        blocked,
        routes,
        ego_route,
        conflicts,
    }
}

fn arm_axes(arm: usize) -> (Vec2, Vec2, f64) {
    let theta = circle::ARM_ANGLES_DEG[arm].to_radians();
    let u = Vec2::from_angle(theta);
    (u, u.perp(), theta)
}

/// Route entering the ring from `entry`, leaving `steps` arms later
/// counter-clockwise.
fn roundabout_route(entry: usize, steps: usize, r_start: f64, r_end: f64, role: RouteRole) -> Route {
    use circle::*;
    let (u, p, theta) = arm_axes(entry);
    let exit_arm = (entry + steps) % 4;
    let (ue, pe, theta_e) = arm_axes(exit_arm);
    let lane = LANE_RADII[0];
    let off = MERGE_OFFSET_DEG.to_radians();
    let hw = LANE_WIDTH / 2.0;
    let merge_angle = theta + off;
    let sweep = FRAC_PI_2 * steps as f64 - 2.0 * off;
    let path = Path::builder(u * r_start + p * hw, theta + PI)
        .line(r_start - FLARE_RADIUS)
        .bezier_to(Vec2::from_angle(merge_angle) * lane, merge_angle + FRAC_PI_2)
        .arc(lane, sweep)
        .bezier_to(ue * FLARE_RADIUS - pe * hw, theta_e)
        .line(r_end - FLARE_RADIUS)
        .build();
    let pts = path.points();
    let mut s = 0.0;
    let mut s_line = None;
    let mut s_joined = None;
    let mut s_exit = None;
    for (i, q) in pts.iter().enumerate() {
        if i > 0 {
            s += q.dist(pts[i - 1]);
        }
        let r = q.norm();
        if s_line.is_none() && r <= STOP_RADIUS {
            s_line = Some(s);
        }
        if s_joined.is_none() && (r - lane).abs() < 0.05 {
            s_joined = Some(s);
        }
        if s_joined.is_some() && s_exit.is_none() && r > lane + 0.5 {
            s_exit = Some(s);
        }
    }
    let merge = Merge {
        arm: entry,
        s_line: s_line.expect("entry crosses the stop radius"),
        s_joined: s_joined.expect("entry reaches the ring"),
        angle: merge_angle,
    };
    Route {
        path,
        role,
        zone: None,
        merge: Some(merge),
        exit: Some((exit_arm, s_exit.expect("route leaves the ring"))),
    }
}

fn build_roundabout(exit_steps: usize) -> Layout {
    use circle::*;
    let mut routes = Vec::new();
    for entry in 0..4 {
        for steps in 1..=3 {
            let exit = (entry + steps) % 4;
            routes.push(roundabout_route(
                entry,
                steps,
                TRAFFIC_START,
                ARM_END,
                RouteRole::RoundaboutPass { entry, exit },
            ));
        }
    }
    for (i, &r) in LANE_RADII.iter().enumerate().skip(1) {
        let pts = arc_points(Vec2::default(), r, 0.0, 2.0 * PI, 0.5);
        routes.push(Route::plain(
            Path::from_points(pts[..pts.len() - 1].to_vec(), true),
            RouteRole::Ring(i),
        ));
    }
    routes.push(roundabout_route(0, exit_steps, EGO_START, EGO_END, RouteRole::Ego));
    let ego_route = routes.len() - 1;

    let mut edges = polyline(&arc_points(Vec2::default(), ISLAND_RADIUS, 0.0, 2.0 * PI, 3.0));
    let flare = FLARE_OFFSET_DEG.to_radians();
    let mut drivable = vec![Region::Annulus {
        center: Vec2::default(),
        inner: ISLAND_RADIUS,
        outer: OUTER_RADIUS,
    }];
    for arm in 0..4 {
        let (u, p, theta) = arm_axes(arm);
        let next = arm_axes((arm + 1) % 4).2;
        let next = if next < theta { next + 2.0 * PI } else { next };
        edges.extend(polyline(&arc_points(
            Vec2::default(),
            OUTER_RADIUS,
            theta + flare,
            next - flare,
            3.0,
        )));
        let left = Vec2::from_angle(theta + flare) * OUTER_RADIUS;
        let right = Vec2::from_angle(theta - flare) * OUTER_RADIUS;
        let a = u * FLARE_RADIUS + p * ARM_HALF_WIDTH + u * 5.0;
        let d = u * FLARE_RADIUS - p * ARM_HALF_WIDTH + u * 5.0;
        edges.push(Segment::new(a, left));
        edges.push(Segment::new(d, right));
        edges.push(Segment::new(a, u * ARM_END + p * ARM_HALF_WIDTH));
        edges.push(Segment::new(d, u * ARM_END - p * ARM_HALF_WIDTH));
        drivable.push(Region::Polygon(vec![d, right, left, a].into_iter().rev().collect()));
        drivable.push(Region::Polygon(vec![
            u * (FLARE_RADIUS - 5.0) - p * ARM_HALF_WIDTH,
            u * ARM_END - p * ARM_HALF_WIDTH,
            u * ARM_END + p * ARM_HALF_WIDTH,
            u * (FLARE_RADIUS - 5.0) + p * ARM_HALF_WIDTH,
        ]));
    }
    let n = routes.len();
    Layout {
        kind: ScenarioKind::Roundabout,
        edges,
        drivable,
        blocked: vec![],
        routes,
        ego_route,
        conflicts: vec![vec![false; n]; n],
    }
}
