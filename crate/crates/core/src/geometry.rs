//! Planar geometry primitives shared by the track, sensor and collision code.

use std::f64::consts::PI;

pub type Vec2 = nalgebra::Vector2<f64>;

/// 2D cross product (z component of the 3D cross product).
#[inline]
pub fn cross(a: &Vec2, b: &Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Wrap an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    } else if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

#[inline]
pub fn heading_vec(yaw: f64) -> Vec2 {
    Vec2::new(yaw.cos(), yaw.sin())
}

/// Left-pointing unit normal of a heading.
#[inline]
pub fn left_normal(yaw: f64) -> Vec2 {
    Vec2::new(-yaw.sin(), yaw.cos())
}

/// A planar pose: position plus heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Ego-frame point (x forward, y left) to world frame.
    pub fn to_world(&self, local: &Vec2) -> Vec2 {
        let (s, c) = self.yaw.sin_cos();
        Vec2::new(
            self.x + c * local.x - s * local.y,
            self.y + s * local.x + c * local.y,
        )
    }

    pub fn to_local(&self, world: &Vec2) -> Vec2 {
        let (s, c) = self.yaw.sin_cos();
        let d = world - self.position();
        Vec2::new(c * d.x + s * d.y, -s * d.x + c * d.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Vec2,
    pub b: Vec2,
}

impl Segment {
    pub fn new(a: Vec2, b: Vec2) -> Self {
        Self { a, b }
    }

    pub fn distance_to(&self, p: &Vec2) -> f64 {
        let ab = self.b - self.a;
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 {
            ((p - self.a).dot(&ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (self.a + ab * t - p).norm()
    }

    /// Distance along the ray `origin + t·dir` (|dir| = 1) to this segment,
    /// if the ray hits it at t ≥ 0.
    pub fn ray_hit(&self, origin: &Vec2, dir: &Vec2) -> Option<f64> {
        let e = self.b - self.a;
        let denom = cross(dir, &e);
        if denom.abs() < 1e-15 {
            return None;
        }
        let w = self.a - origin;
        let t = cross(&w, &e) / denom;
        let u = cross(&w, dir) / denom;
        if t >= 0.0 && (0.0..=1.0).contains(&u) {
            Some(t)
        } else {
            None
        }
    }
}

/// Rectangle with arbitrary orientation, used for car bodies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Vec2,
    pub yaw: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedBox {
    pub fn new(center: Vec2, yaw: f64, length: f64, width: f64) -> Self {
        Self {
            center,
            yaw,
            half_length: 0.5 * length,
            half_width: 0.5 * width,
        }
    }

    pub fn axes(&self) -> [Vec2; 2] {
        [heading_vec(self.yaw), left_normal(self.yaw)]
    }

    /// Corners in counter-clockwise order starting rear-right.
    pub fn corners(&self) -> [Vec2; 4] {
        let [f, l] = self.axes();
        let x = f * self.half_length;
        let y = l * self.half_width;
        [
            self.center - x - y,
            self.center + x - y,
            self.center + x + y,
            self.center - x + y,
        ]
    }

    pub fn edges(&self) -> [Segment; 4] {
        let c = self.corners();
        [
            Segment::new(c[0], c[1]),
            Segment::new(c[1], c[2]),
            Segment::new(c[2], c[3]),
            Segment::new(c[3], c[0]),
        ]
    }

    fn project_onto(&self, axis: &Vec2) -> (f64, f64) {
        let c = self.corners();
        let mut lo = c[0].dot(axis);
        let mut hi = lo;
        for p in &c[1..] {
            let d = p.dot(axis);
            lo = lo.min(d);
            hi = hi.max(d);
        }
        (lo, hi)
    }

    /// Separating-axis overlap test. Touching boxes do not overlap.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        for axis in self.axes().iter().chain(other.axes().iter()) {
            let (a0, a1) = self.project_onto(axis);
            let (b0, b1) = other.project_onto(axis);
            if a1 <= b0 || b1 <= a0 {
                return false;
            }
        }
        true
    }
}

/// Closed polyline with cumulative arc length, for continuous projection.
#[derive(Debug, Clone)]
pub struct ClosedPolyline {
    points: Vec<Vec2>,
    /// `cum[i]` is the arc length at point i; `cum[n]` is the perimeter.
    cum: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcProjection {
    /// Segment start index.
    pub segment: usize,
    /// Arc length of the foot point, in [0, perimeter).
    pub arc: f64,
    /// Distance from the query point to the foot point.
    pub distance: f64,
    /// Signed lateral offset, positive to the left of travel.
    pub lateral: f64,
}

impl ClosedPolyline {
    pub fn new(points: Vec<Vec2>) -> Self {
        let n = points.len();
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0.0);
        for i in 0..n {
            let d = (points[(i + 1) % n] - points[i]).norm();
            cum.push(cum[i] + d);
        }
        Self { points, cum }
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn perimeter(&self) -> f64 {
        self.cum[self.points.len()]
    }

    pub fn arc_at(&self, i: usize) -> f64 {
        self.cum[i]
    }

    fn project_on_segment(&self, i: usize, p: &Vec2) -> ArcProjection {
        let n = self.points.len();
        let a = self.points[i];
        let b = self.points[(i + 1) % n];
        let ab = b - a;
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 {
            ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let foot = a + ab * t;
        let d = p - foot;
        let lateral = if len2 > 0.0 {
            cross(&ab, &(p - a)) / len2.sqrt()
        } else {
            0.0
        };
        let mut arc = self.cum[i] + t * (self.cum[i + 1] - self.cum[i]);
        if arc >= self.perimeter() {
            arc -= self.perimeter();
        }
        ArcProjection {
            segment: i,
            arc,
            distance: d.norm(),
            lateral,
        }
    }

    /// Exhaustive continuous projection.
    pub fn project(&self, p: &Vec2) -> ArcProjection {
        let mut best = self.project_on_segment(0, p);
        for i in 1..self.points.len() {
            let cand = self.project_on_segment(i, p);
            if cand.distance < best.distance {
                best = cand;
            }
        }
        best
    }

    /// Projection restricted to `window` segments either side of `hint`.
    pub fn project_near(&self, p: &Vec2, hint: usize, window: usize) -> ArcProjection {
        let n = self.points.len();
        if 2 * window + 1 >= n {
            return self.project(p);
        }
        let start = hint + n - window;
        let mut best = self.project_on_segment(start % n, p);
        for k in 1..=2 * window {
            let cand = self.project_on_segment((start + k) % n, p);
            if cand.distance < best.distance {
                best = cand;
            }
        }
        best
    }

    /// Position at arc length `s` (taken modulo the perimeter).
    pub fn point_at(&self, s: f64) -> Vec2 {
        let n = self.points.len();
        let s = s.rem_euclid(self.perimeter());
        let i = match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(n - 1),
            Err(i) => i - 1,
        };
        let seg = self.cum[i + 1] - self.cum[i];
        let t = if seg > 0.0 { (s - self.cum[i]) / seg } else { 0.0 };
        self.points[i] + (self.points[(i + 1) % n] - self.points[i]) * t
    }
}
