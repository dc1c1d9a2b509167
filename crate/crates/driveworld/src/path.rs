//! Reference paths as densely sampled polylines with arc-length lookup.

use crate::geometry::{wrap_angle, Vec2};

/// Sampling step of built paths.
pub const PATH_RESOLUTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    points: Vec<Vec2>,
    cum: Vec<f64>,
    closed: bool,
}

/// Closest point of a path to a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub s: f64,
    /// Signed offset, positive to the left of the direction of travel.
    pub lateral: f64,
    pub heading: f64,
    pub point: Vec2,
}

impl Path {
    /// Polyline through `points`; `closed` joins the last point back to the
    /// first.
    pub fn from_points(mut points: Vec<Vec2>, closed: bool) -> Self {
        points.dedup_by(|a, b| a.dist(*b) < 1e-9);
        assert!(points.len() >= 2, "a path needs two distinct points");
        if closed && points[0].dist(*points.last().unwrap()) > 1e-9 {
            points.push(points[0]);
        }
        let mut cum = Vec::with_capacity(points.len());
        cum.push(0.0);
        for w in points.windows(2) {
            cum.push(cum.last().unwrap() + w[0].dist(w[1]));
        }
        Path { points, cum, closed }
    }

    pub fn builder(start: Vec2, heading: f64) -> PathBuilder {
        PathBuilder {
            points: vec![start],
            pos: start,
            heading,
        }
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    /// Arc length normalized into the path's domain (wrapped when closed,
    /// clamped otherwise).
    pub fn normalize_s(&self, s: f64) -> f64 {
        let len = self.length();
        if self.closed {
            s.rem_euclid(len)
        } else {
            s.clamp(0.0, len)
        }
    }

    fn segment_at(&self, s: f64) -> (usize, f64) {
        let s = self.normalize_s(s);
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.points.len() - 2),
        };
        let seg_len = self.cum[i + 1] - self.cum[i];
        let t = if seg_len > 0.0 {
            ((s - self.cum[i]) / seg_len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (i, t)
    }

    pub fn point_at(&self, s: f64) -> Vec2 {
        let (i, t) = self.segment_at(s);
        self.points[i].lerp(self.points[i + 1], t)
    }

    /// Direction of travel at `s`, blended between neighbouring segments so
    /// it varies continuously along curves.
    pub fn heading_at(&self, s: f64) -> f64 {
        let (i, t) = self.segment_at(s);
        let h = |k: usize| (self.points[k + 1] - self.points[k]).angle();
        let here = h(i);
        if t < 0.5 {
            let prev = if i > 0 {
                Some(i - 1)
            } else if self.closed {
                Some(self.points.len() - 2)
            } else {
                None
            };
            match prev {
                Some(p) => here + wrap_angle(h(p) - here) * (0.5 - t),
                None => here,
            }
        } else {
            let next = if i + 2 < self.points.len() {
                Some(i + 1)
            } else if self.closed {
                Some(0)
            } else {
                None
            };
            match next {
                Some(n) => here + wrap_angle(h(n) - here) * (t - 0.5),
                None => here,
            }
        }
    }

    /// Signed curvature estimated from the heading change over `±span`.
    pub fn curvature_at(&self, s: f64, span: f64) -> f64 {
        let (a, b) = if self.closed {
            (s - span, s + span)
        } else {
            ((s - span).max(0.0), (s + span).min(self.length()))
        };
        if b - a < 1e-9 {
            return 0.0;
        }
        wrap_angle(self.heading_at(b) - self.heading_at(a)) / (b - a)
    }

    fn project_segment(&self, i: usize, p: Vec2) -> (f64, f64, Vec2) {
        let a = self.points[i];
        let d = self.points[i + 1] - a;
        let len2 = d.dot(d);
        let t = if len2 > 0.0 { ((p - a).dot(d) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let q = a + d * t;
        (p.dist(q), self.cum[i] + t * len2.sqrt(), q)
    }

    fn projection_from(&self, p: Vec2, s: f64, q: Vec2) -> Projection {
        let heading = self.heading_at(s);
        let lateral = Vec2::from_angle(heading).cross(p - q);
        Projection {
            s,
            lateral,
            heading,
            point: q,
        }
    }

    /// Closest point over the whole path.
    pub fn project(&self, p: Vec2) -> Projection {
        let mut best = (f64::INFINITY, 0.0, self.points[0]);
        for i in 0..self.points.len() - 1 {
            let c = self.project_segment(i, p);
            if c.0 < best.0 {
                best = c;
            }
        }
        self.projection_from(p, best.1, best.2)
    }

    /// Closest point restricted to arc lengths in `[s_lo, s_hi]`.
    pub fn project_window(&self, p: Vec2, s_lo: f64, s_hi: f64) -> Projection {
        if self.closed && s_hi - s_lo >= self.length() {
            return self.project(p);
        }
        let (i0, _) = self.segment_at(s_lo);
        let (i1, _) = self.segment_at(s_hi);
        let n = self.points.len() - 1;
        let mut best = (f64::INFINITY, 0.0, self.points[0]);
        let mut i = i0;
        loop {
            let c = self.project_segment(i, p);
            if c.0 < best.0 {
                best = c;
            }
            if i == i1 {
                break;
            }
            i = (i + 1) % n;
            if !self.closed && i == 0 {
                break;
            }
        }
        self.projection_from(p, best.1, best.2)
    }
}

/// Chains straight, circular and cubic Bezier pieces into a [`Path`].
#[derive(Debug, Clone)]
pub struct PathBuilder {
    points: Vec<Vec2>,
    pos: Vec2,
    heading: f64,
}

impl PathBuilder {
    pub fn position(&self) -> Vec2 {
        self.pos
    }

    pub fn heading(&self) -> f64 {
        self.heading
    }

    pub fn line(mut self, length: f64) -> Self {
        let n = (length / PATH_RESOLUTION).ceil().max(1.0) as usize;
        let dir = Vec2::from_angle(self.heading);
        let start = self.pos;
        for k in 1..=n {
            self.points.push(start + dir * (length * k as f64 / n as f64));
        }
        self.pos = start + dir * length;
        self
    }

    /// Circular arc; positive `angle` turns left.
    pub fn arc(mut self, radius: f64, angle: f64) -> Self {
        let n = ((radius * angle.abs()) / PATH_RESOLUTION).ceil().max(1.0) as usize;
        let side = angle.signum();
        let center = self.pos + Vec2::from_angle(self.heading).perp() * (radius * side);
        let start_angle = (self.pos - center).angle();
        for k in 1..=n {
            let a = start_angle + angle * k as f64 / n as f64;
            self.points.push(center + Vec2::from_angle(a) * radius);
        }
        self.pos = *self.points.last().unwrap();
        self.heading = wrap_angle(self.heading + angle);
        self
    }

    /// Cubic Bezier to `end` arriving with `end_heading`; control arms are a
    /// third of the chord.
    pub fn bezier_to(mut self, end: Vec2, end_heading: f64) -> Self {
        let arm = self.pos.dist(end) / 3.0;
        let p0 = self.pos;
        let p1 = p0 + Vec2::from_angle(self.heading) * arm;
        let p2 = end - Vec2::from_angle(end_heading) * arm;
        let p3 = end;
        let approx = p0.dist(p1) + p1.dist(p2) + p2.dist(p3);
        let n = (approx / PATH_RESOLUTION).ceil().max(2.0) as usize * 2;
        for k in 1..=n {
            let t = k as f64 / n as f64;
            let u = 1.0 - t;
            let p = p0 * (u * u * u) + p1 * (3.0 * u * u * t) + p2 * (3.0 * u * t * t) + p3 * (t * t * t);
            self.points.push(p);
        }
        self.pos = end;
        self.heading = end_heading;
        self
    }

    pub fn build(self) -> Path {
        Path::from_points(self.points, false)
    }
}
