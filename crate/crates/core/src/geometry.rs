//! Planar geometry: poses, relative movements, shapes, ray casting and
//! overlap tests.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub type Vec2 = [f64; 2];

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn position(&self) -> Vec2 {
        [self.x, self.y]
    }

    /// Expresses a world point in this pose's local frame.
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Maps a point given in this pose's local frame to the world frame.
    pub fn to_world(&self, p: Vec2) -> Vec2 {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Applies a movement expressed in this pose's frame.
    pub fn compose(&self, m: &RelativeMovement) -> Pose2D {
        let p = self.to_world([m.dx, m.dy]);
        Pose2D::new(p[0], p[1], self.yaw + m.dyaw)
    }

    /// Movement that takes `self` to `other`, expressed in `self`'s frame.
    pub fn relative_to(&self, other: &Pose2D) -> RelativeMovement {
        let p = self.to_local(other.position());
        RelativeMovement {
            dx: p[0],
            dy: p[1],
            dyaw: normalize_angle(other.yaw - self.yaw),
        }
    }

    /// Linear interpolation in position, shortest-arc interpolation in yaw.
    pub fn lerp(&self, other: &Pose2D, alpha: f64) -> Pose2D {
        let dyaw = normalize_angle(other.yaw - self.yaw);
        Pose2D::new(
            self.x + alpha * (other.x - self.x),
            self.y + alpha * (other.y - self.y),
            self.yaw + alpha * dyaw,
        )
    }
}

/// Ego motion between consecutive frames, in the earlier frame's coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RelativeMovement {
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
}

impl RelativeMovement {
    pub fn as_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dyaw]
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.dyaw.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Oriented rectangle centred on the pose, `length` along the heading.
    Rect { length: f64, width: f64 },
    Disc { radius: f64 },
}

impl Shape {
    pub fn corners(&self, pose: &Pose2D) -> Option<[Vec2; 4]> {
        match *self {
            Shape::Rect { length, width } => {
                let (hl, hw) = (0.5 * length, 0.5 * width);
                Some([
                    pose.to_world([hl, hw]),
                    pose.to_world([-hl, hw]),
                    pose.to_world([-hl, -hw]),
                    pose.to_world([hl, -hw]),
                ])
            }
            Shape::Disc { .. } => None,
        }
    }

    /// Nearest non-negative ray parameter at which the ray meets the shape
    /// outline. `dir` must be unit length.
    pub fn ray_hit(&self, pose: &Pose2D, origin: Vec2, dir: Vec2) -> Option<f64> {
        match *self {
            Shape::Rect { .. } => {
                let c = self.corners(pose).expect("rect");
                (0..4)
                    .filter_map(|i| ray_segment(origin, dir, c[i], c[(i + 1) % 4]))
                    .min_by(|a, b| a.total_cmp(b))
            }
            Shape::Disc { radius } => ray_circle(origin, dir, pose.position(), radius),
        }
    }
}

/// Ray/segment intersection; returns the ray parameter of the hit.
pub fn ray_segment(origin: Vec2, dir: Vec2, a: Vec2, b: Vec2) -> Option<f64> {
    let e = [b[0] - a[0], b[1] - a[1]];
    let denom = cross(dir, e);
    if denom.abs() < 1e-12 {
        return None;
    }
    let ao = [a[0] - origin[0], a[1] - origin[1]];
    let t = cross(ao, e) / denom;
    let u = cross(ao, dir) / denom;
    if t >= 0.0 && (0.0..=1.0).contains(&u) {
        Some(t)
    } else {
        None
    }
}

/// Ray/circle intersection (first crossing of the circle outline).
pub fn ray_circle(origin: Vec2, dir: Vec2, center: Vec2, radius: f64) -> Option<f64> {
    let oc = [origin[0] - center[0], origin[1] - center[1]];
    let b = dot(oc, dir);
    let c = dot(oc, oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    let t1 = -b + sq;
    if t0 >= 0.0 {
        Some(t0)
    } else if t1 >= 0.0 {
        Some(t1)
    } else {
        None
    }
}

pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn cross(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

pub fn dist(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(p: Vec2, poly: &[Vec2]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn project(poly: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in poly {
        let d = dot(*p, axis);
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (lo, hi)
}

fn rects_overlap(a: &[Vec2; 4], b: &[Vec2; 4]) -> bool {
    for poly in [a, b] {
        for i in 0..2 {
            let e = [poly[i + 1][0] - poly[i][0], poly[i + 1][1] - poly[i][1]];
            let axis = [-e[1], e[0]];
            let (amin, amax) = project(a, axis);
            let (bmin, bmax) = project(b, axis);
            if amax < bmin || bmax < amin {
                return false;
            }
        }
    }
    true
}

fn rect_disc_overlap(rect_pose: &Pose2D, length: f64, width: f64, c: Vec2, r: f64) -> bool {
    let p = rect_pose.to_local(c);
    let qx = p[0].clamp(-0.5 * length, 0.5 * length);
    let qy = p[1].clamp(-0.5 * width, 0.5 * width);
    (p[0] - qx).powi(2) + (p[1] - qy).powi(2) <= r * r
}

/// Closed-set overlap test between two placed shapes.
pub fn shapes_overlap(sa: &Shape, pa: &Pose2D, sb: &Shape, pb: &Pose2D) -> bool {
    match (*sa, *sb) {
        (Shape::Rect { .. }, Shape::Rect { .. }) => {
            rects_overlap(&sa.corners(pa).unwrap(), &sb.corners(pb).unwrap())
        }
        (Shape::Rect { length, width }, Shape::Disc { radius }) => {
            rect_disc_overlap(pa, length, width, pb.position(), radius)
        }
        (Shape::Disc { radius }, Shape::Rect { length, width }) => {
            rect_disc_overlap(pb, length, width, pa.position(), radius)
        }
        (Shape::Disc { radius: ra }, Shape::Disc { radius: rb }) => {
            dist(pa.position(), pb.position()) <= ra + rb
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn angle_wraps_into_half_open_interval() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(0.25) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ray_hits_perpendicular_segment() {
        let t = ray_segment([0.0, 0.0], [1.0, 0.0], [5.0, -1.0], [5.0, 1.0]).unwrap();
        assert!((t - 5.0).abs() < 1e-12);
        assert!(ray_segment([0.0, 0.0], [-1.0, 0.0], [5.0, -1.0], [5.0, 1.0]).is_none());
    }

    #[test]
    fn ray_circle_first_crossing() {
        let t = ray_circle([0.0, 0.0], [1.0, 0.0], [10.0, 0.0], 2.0).unwrap();
        assert!((t - 8.0).abs() < 1e-12);
        let inside = ray_circle([10.0, 0.0], [1.0, 0.0], [10.0, 0.0], 2.0).unwrap();
        assert!((inside - 2.0).abs() < 1e-12);
    }

    #[test]
    fn overlap_tests() {
        let r = Shape::Rect { length: 4.0, width: 2.0 };
        let d = Shape::Disc { radius: 0.5 };
        let o = Pose2D::new(0.0, 0.0, 0.0);
        assert!(shapes_overlap(&r, &o, &r, &Pose2D::new(3.9, 0.0, 0.3)));
        assert!(!shapes_overlap(&r, &o, &r, &Pose2D::new(0.0, 3.0, 0.0)));
        assert!(shapes_overlap(&r, &o, &d, &Pose2D::new(2.4, 0.0, 0.0)));
        assert!(!shapes_overlap(&d, &Pose2D::new(2.6, 0.0, 0.0), &r, &o));
    }

    #[test]
    fn polygon_membership() {
        let sq = [[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]];
        assert!(point_in_polygon([1.0, 1.0], &sq));
        assert!(!point_in_polygon([3.0, 1.0], &sq));
    }

    proptest! {
        #[test]
        fn composing_movements_reproduces_pose_chain(
            poses in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0, -3.0f64..3.0), 2..12)
        ) {
            let chain: Vec<Pose2D> = poses.iter().map(|&(x, y, a)| Pose2D::new(x, y, a)).collect();
            let mut cur = chain[0];
            for w in chain.windows(2) {
                let m = w[0].relative_to(&w[1]);
                cur = cur.compose(&m);
                prop_assert!((cur.x - w[1].x).abs() < 1e-9);
                prop_assert!((cur.y - w[1].y).abs() < 1e-9);
                prop_assert!(normalize_angle(cur.yaw - w[1].yaw).abs() < 1e-9);
            }
        }

        #[test]
        fn local_world_roundtrip(x in -50.0f64..50.0, y in -50.0f64..50.0, a in -3.0f64..3.0,
                                 px in -50.0f64..50.0, py in -50.0f64..50.0) {
            let pose = Pose2D::new(x, y, a);
            let q = pose.to_world(pose.to_local([px, py]));
            prop_assert!((q[0] - px).abs() < 1e-9 && (q[1] - py).abs() < 1e-9);
        }
    }
}
