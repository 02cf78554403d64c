//! Planar geometry shared by the layout generator, the scenario graph and the simulator.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// Wrap an angle into `(-π, π]`.
pub fn normalize_angle(angle: f64) -> f64 {
    let mut a = angle % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(angle: f64) -> Self {
        Self::new(angle.cos(), angle.sin())
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    /// Counter-clockwise quarter turn.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Position and heading in the world frame. Heading is kept in `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn direction(&self) -> Vec2 {
        Vec2::from_angle(self.heading)
    }

    /// Express a world point in this pose's local frame (x forward, y left).
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        (p - self.position()).rotate(-self.heading)
    }

    /// Map a local point back into the world frame.
    pub fn to_world(&self, p: Vec2) -> Vec2 {
        self.position() + p.rotate(self.heading)
    }

    /// Apply the rigid transform `self` to `other` (compose).
    pub fn compose(&self, other: &Pose2D) -> Pose2D {
        let p = self.to_world(other.position());
        Pose2D::new(p.x, p.y, self.heading + other.heading)
    }
}

/// An oriented rectangle used for vehicle and obstacle footprints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Vec2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(pose: Pose2D, length: f64, width: f64) -> Self {
        Self {
            center: pose.position(),
            heading: pose.heading,
            length,
            width,
        }
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let f = Vec2::from_angle(self.heading) * (self.length / 2.0);
        let l = Vec2::from_angle(self.heading).perp() * (self.width / 2.0);
        let c = self.center;
        [c + f + l, c + f - l, c - f - l, c - f + l]
    }

    /// Separating-axis test between two rectangles. Touching edges count as overlap.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        // Cheap reject on bounding circles.
        let r1 = 0.5 * self.length.hypot(self.width);
        let r2 = 0.5 * other.length.hypot(other.width);
        if self.center.distance(other.center) > r1 + r2 {
            return false;
        }
        let a = self.corners();
        let b = other.corners();
        let axes = [
            Vec2::from_angle(self.heading),
            Vec2::from_angle(self.heading).perp(),
            Vec2::from_angle(other.heading),
            Vec2::from_angle(other.heading).perp(),
        ];
        axes.iter().all(|axis| {
            let (amin, amax) = project(&a, *axis);
            let (bmin, bmax) = project(&b, *axis);
            amax >= bmin && bmax >= amin
        })
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let local = (p - self.center).rotate(-self.heading);
        local.x.abs() <= self.length / 2.0 && local.y.abs() <= self.width / 2.0
    }
}

fn project(corners: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    corners
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
            let d = c.dot(axis);
            (lo.min(d), hi.max(d))
        })
}

/// Arc-length parameterized polyline.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Polyline {
    points: Vec<Vec2>,
    cumulative: Vec<f64>,
}

/// Result of projecting a point onto a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length of the foot point.
    pub station: f64,
    /// Signed lateral offset, positive to the left of the direction of travel.
    pub offset: f64,
    pub heading: f64,
}

impl Polyline {
    /// Consecutive duplicate points are dropped.
    pub fn new(points: Vec<Vec2>) -> Self {
        let mut clean: Vec<Vec2> = Vec::with_capacity(points.len());
        for p in points {
            if clean.last().is_none_or(|q| q.distance(p) > 1e-9) {
                clean.push(p);
            }
        }
        let mut cumulative = Vec::with_capacity(clean.len());
        let mut acc = 0.0;
        for (i, p) in clean.iter().enumerate() {
            if i > 0 {
                acc += p.distance(clean[i - 1]);
            }
            cumulative.push(acc);
        }
        Self {
            points: clean,
            cumulative,
        }
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

    pub fn length(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    fn segment_at(&self, station: f64) -> usize {
        let n = self.points.len();
        if n < 2 {
            return 0;
        }
        match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&station).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        }
    }

    /// Pose at arc length `station`; beyond the ends the first/last segment is extended.
    pub fn pose_at(&self, station: f64) -> Pose2D {
        match self.points.len() {
            0 => Pose2D::default(),
            1 => Pose2D::new(self.points[0].x, self.points[0].y, 0.0),
            _ => {
                let i = self.segment_at(station);
                let a = self.points[i];
                let b = self.points[i + 1];
                let seg = b - a;
                let seg_len = seg.norm();
                let t = station - self.cumulative[i];
                let p = a + seg * (t / seg_len);
                Pose2D::new(p.x, p.y, seg.angle())
            }
        }
    }

    /// Offset point at `station`, `offset` meters to the left.
    pub fn offset_point(&self, station: f64, offset: f64) -> Vec2 {
        let pose = self.pose_at(station);
        pose.position() + pose.direction().perp() * offset
    }

    /// Signed curvature estimated from the heading change over `ds` meters.
    pub fn curvature_at(&self, station: f64, ds: f64) -> f64 {
        let h0 = self.pose_at(station - ds / 2.0).heading;
        let h1 = self.pose_at(station + ds / 2.0).heading;
        normalize_angle(h1 - h0) / ds
    }

    /// Project onto the segments overlapping `[lo, hi]` in arc length.
    pub fn project_within(&self, p: Vec2, lo: f64, hi: f64) -> Projection {
        let n = self.points.len();
        if n < 2 {
            let q = self.points.first().copied().unwrap_or_default();
            return Projection {
                station: 0.0,
                offset: p.distance(q),
                heading: 0.0,
            };
        }
        let first = self.segment_at(lo);
        let last = self.segment_at(hi);
        let mut best: Option<(f64, Projection)> = None;
        for i in first..=last {
            let a = self.points[i];
            let b = self.points[i + 1];
            let seg = b - a;
            let len = seg.norm();
            let dir = seg * (1.0 / len);
            let mut t = (p - a).dot(dir);
            // Only the end segments extend past the polyline.
            if i > 0 {
                t = t.max(0.0);
            }
            if i + 2 < n {
                t = t.min(len);
            }
            let foot = a + dir * t;
            let dist = p.distance(foot);
            if best.as_ref().is_none_or(|(d, _)| dist < *d - 1e-12) {
                best = Some((
                    dist,
                    Projection {
                        station: self.cumulative[i] + t,
                        offset: dir.cross(p - a),
                        heading: dir.angle(),
                    },
                ));
            }
        }
        best.map(|(_, proj)| proj).expect("at least one segment")
    }

    pub fn project(&self, p: Vec2) -> Projection {
        self.project_within(p, 0.0, self.length())
    }
}
