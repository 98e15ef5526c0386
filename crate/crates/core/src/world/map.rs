//! Road geometry: a route centerline with a single drivable corridor around it.

use crate::geometry::{dist, point_in_polygon, Pose2D, Shape, Vec2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapTemplate {
    Straight,
    LeftCurve,
    RightCurve,
    SCurve,
}

impl MapTemplate {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "straight" => Some(Self::Straight),
            "left_curve" => Some(Self::LeftCurve),
            "right_curve" => Some(Self::RightCurve),
            "s_curve" => Some(Self::SCurve),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Straight => "straight",
            Self::LeftCurve => "left_curve",
            Self::RightCurve => "right_curve",
            Self::SCurve => "s_curve",
        }
    }
}

/// One constant-curvature piece of the route, starting at arc length `start`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CurvaturePiece {
    pub start: f64,
    pub curvature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadMap {
    /// Route centerline (ego lane centre), sampled every `spacing` meters.
    pub centerline: Vec<Vec2>,
    /// Heading of the centerline at each sample.
    pub headings: Vec<f64>,
    pub spacing: f64,
    /// Lateral extent of the drivable corridor to the left / right of the route.
    pub left_extent: f64,
    pub right_extent: f64,
    /// Drivable-area polygons (counter-clockwise, not closed).
    pub drivable: Vec<Vec<Vec2>>,
}

impl RoadMap {
    pub(crate) fn from_curvature(
        pieces: &[CurvaturePiece],
        length: f64,
        spacing: f64,
        left_extent: f64,
        right_extent: f64,
    ) -> Self {
        let n = (length / spacing).round() as usize + 1;
        let mut centerline = Vec::with_capacity(n);
        let mut headings = Vec::with_capacity(n);
        let (mut x, mut y, mut th) = (0.0f64, 0.0f64, 0.0f64);
        let kappa_at = |s: f64| {
            pieces
                .iter()
                .rev()
                .find(|p| s >= p.start)
                .map_or(0.0, |p| p.curvature)
        };
        for i in 0..n {
            centerline.push([x, y]);
            headings.push(th);
            let s = i as f64 * spacing;
            // midpoint rule on the heading keeps arcs accurate at coarse spacing
            let k = kappa_at(s + 0.5 * spacing);
            let mid = th + 0.5 * k * spacing;
            x += spacing * mid.cos();
            y += spacing * mid.sin();
            th += k * spacing;
        }
        let mut map = Self {
            centerline,
            headings,
            spacing,
            left_extent,
            right_extent,
            drivable: Vec::new(),
        };
        let left: Vec<Vec2> = (0..n).map(|i| map.offset_point(i, left_extent)).collect();
        let right: Vec<Vec2> = (0..n).map(|i| map.offset_point(i, -right_extent)).collect();
        let mut poly = right;
        poly.extend(left.into_iter().rev());
        map.drivable = vec![poly];
        map
    }

    fn offset_point(&self, i: usize, lateral: f64) -> Vec2 {
        let c = self.centerline[i];
        let th = self.headings[i];
        [c[0] - lateral * th.sin(), c[1] + lateral * th.cos()]
    }

    pub fn length(&self) -> f64 {
        (self.centerline.len() - 1) as f64 * self.spacing
    }

    /// Pose on the route at arc length `s` shifted `lateral` meters to the left.
    pub fn pose_at(&self, s: f64, lateral: f64) -> Pose2D {
        let n = self.centerline.len();
        let u = (s / self.spacing).clamp(0.0, (n - 1) as f64);
        let i = (u.floor() as usize).min(n - 2);
        let f = u - i as f64;
        let (a, b) = (self.centerline[i], self.centerline[i + 1]);
        let th = self.headings[i] + f * (self.headings[i + 1] - self.headings[i]);
        // extrapolate linearly past either end
        let extra = if s < 0.0 {
            s
        } else if s > self.length() {
            s - self.length()
        } else {
            0.0
        };
        let x = a[0] + f * (b[0] - a[0]) + extra * th.cos() - lateral * th.sin();
        let y = a[1] + f * (b[1] - a[1]) + extra * th.sin() + lateral * th.cos();
        Pose2D::new(x, y, th)
    }

    /// Arc length and signed lateral offset of the closest point on the route.
    pub fn project(&self, p: Vec2) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..self.centerline.len() - 1 {
            let (a, b) = (self.centerline[i], self.centerline[i + 1]);
            let e = [b[0] - a[0], b[1] - a[1]];
            let len2 = e[0] * e[0] + e[1] * e[1];
            let u = (((p[0] - a[0]) * e[0] + (p[1] - a[1]) * e[1]) / len2).clamp(0.0, 1.0);
            let q = [a[0] + u * e[0], a[1] + u * e[1]];
            let d = dist(p, q);
            if d < best.0 {
                let side = e[0] * (p[1] - a[1]) - e[1] * (p[0] - a[0]);
                best = (d, (i as f64 + u) * self.spacing, d.copysign(side));
            }
        }
        (best.1, best.2)
    }

    pub fn contains(&self, p: Vec2) -> bool {
        self.drivable.iter().any(|poly| point_in_polygon(p, poly))
    }

    /// Whether a placed footprint lies entirely inside the drivable area.
    pub fn contains_footprint(&self, shape: &Shape, pose: &Pose2D) -> bool {
        match shape.corners(pose) {
            Some(c) => c.iter().all(|p| self.contains(*p)),
            None => self.contains(pose.position()),
        }
    }

    /// Every edge of every drivable polygon.
    pub fn boundary_segments(&self) -> impl Iterator<Item = (Vec2, Vec2)> + '_ {
        self.drivable.iter().flat_map(|poly| {
            (0..poly.len()).map(move |i| (poly[i], poly[(i + 1) % poly.len()]))
        })
    }

    /// Axis-aligned bounds of the drivable polygons as `(min, max)`.
    pub fn bounds(&self) -> (Vec2, Vec2) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in self.drivable.iter().flatten() {
            lo = [lo[0].min(p[0]), lo[1].min(p[1])];
            hi = [hi[0].max(p[0]), hi[1].max(p[1])];
        }
        (lo, hi)
    }

    /// Route curvature between arc lengths `s0` and `s1`, averaged.
    pub fn mean_curvature(&self, s0: f64, s1: f64) -> f64 {
        if s1 <= s0 {
            return 0.0;
        }
        (self.pose_at(s1, 0.0).yaw - self.pose_at(s0, 0.0).yaw) / (s1 - s0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_road_projection() {
        let m = RoadMap::from_curvature(&[], 100.0, 1.0, 5.0, 2.0);
        let (s, l) = m.project([42.3, 1.5]);
        assert!((s - 42.3).abs() < 1e-9 && (l - 1.5).abs() < 1e-9);
        assert!(m.contains([10.0, 4.9]) && !m.contains([10.0, -2.1]));
        let p = m.pose_at(10.5, -1.0);
        assert!((p.x - 10.5).abs() < 1e-12 && (p.y + 1.0).abs() < 1e-12);
    }

    #[test]
    fn arc_follows_radius() {
        let r = 50.0;
        let m = RoadMap::from_curvature(
            &[CurvaturePiece { start: 0.0, curvature: 1.0 / r }],
            60.0,
            1.0,
            5.0,
            2.0,
        );
        // points stay on the circle centred at (0, r)
        for p in &m.centerline {
            let d = dist(*p, [0.0, r]);
            assert!((d - r).abs() < 1e-3, "radius drift {d}");
        }
        let (s, l) = m.project(m.pose_at(30.0, 0.7).position());
        assert!((s - 30.0).abs() < 0.05 && (l - 0.7).abs() < 1e-3);
    }
}
