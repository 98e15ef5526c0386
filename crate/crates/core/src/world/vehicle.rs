//! Kinematic-bicycle ego with a pure-pursuit waypoint tracker.

use super::{Scenario, Trajectory};
use crate::geometry::{dist, dot, normalize_angle, shapes_overlap, Pose2D, Vec2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    pub substeps: usize,
    pub wheelbase: f64,
    pub max_steer: f64,
    pub max_accel: f64,
    pub max_brake: f64,
    pub lookahead_min: f64,
    pub lookahead_gain: f64,
    pub speed_gain: f64,
    pub position_gain: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            substeps: 10,
            wheelbase: 2.7,
            max_steer: 0.6,
            max_accel: 4.0,
            max_brake: 8.0,
            lookahead_min: 3.0,
            lookahead_gain: 0.5,
            speed_gain: 2.0,
            position_gain: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// Ego pose at frame 0, the frame waypoints are expressed in.
    pub origin: Pose2D,
    /// Ego pose at frames `1..=H`.
    pub realized: Vec<Pose2D>,
    /// Speed at frames `0..=H`.
    pub speeds: Vec<f64>,
    pub collided: bool,
    /// First frame (1-based) whose substeps contain a collision.
    pub first_collision_frame: Option<usize>,
    pub offroad_frames: usize,
    /// Longitudinal acceleration per frame interval, m/s^2.
    pub accel: Vec<f64>,
    /// Jerk between consecutive acceleration samples, m/s^3.
    pub jerk: Vec<f64>,
    /// Ego pose after every substep (`H * substeps` entries).
    pub substep_poses: Vec<Pose2D>,
}

/// Time-parameterised reference path through the origin and the waypoints.
struct Reference {
    points: Vec<Vec2>,
    /// Arc length at each point.
    arc: Vec<f64>,
    /// Speed at the centre of each segment.
    seg_speed: Vec<f64>,
    v0: f64,
    dt: f64,
}

impl Reference {
    fn new(start: &Pose2D, v0: f64, traj: &Trajectory, dt: f64) -> Self {
        let mut points = vec![start.position()];
        points.extend(traj.waypoints.iter().map(|w| start.to_world(*w)));
        let mut arc = vec![0.0];
        for w in points.windows(2) {
            arc.push(arc.last().unwrap() + dist(w[0], w[1]));
        }
        let seg_speed = points.windows(2).map(|w| dist(w[0], w[1]) / dt).collect();
        Self {
            points,
            arc,
            seg_speed,
            v0,
            dt,
        }
    }

    fn total_len(&self) -> f64 {
        *self.arc.last().unwrap()
    }

    /// Reference position at time `tau` (piecewise linear in time).
    fn position(&self, tau: f64) -> Vec2 {
        let n = self.points.len() - 1;
        let u = (tau / self.dt).clamp(0.0, n as f64);
        let i = (u.floor() as usize).min(n - 1);
        let f = u - i as f64;
        let (a, b) = (self.points[i], self.points[i + 1]);
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
    }

    /// Reference speed and its time derivative, linear between segment
    /// centres and anchored to the initial speed at `tau = 0`.
    fn speed(&self, tau: f64) -> (f64, f64) {
        let n = self.seg_speed.len();
        let half = 0.5 * self.dt;
        if tau <= half {
            let slope = (self.seg_speed[0] - self.v0) / half;
            return (self.v0 + slope * tau, slope);
        }
        let u = (tau - half) / self.dt;
        if u >= (n - 1) as f64 {
            return (self.seg_speed[n - 1], 0.0);
        }
        let i = u.floor() as usize;
        let f = u - i as f64;
        let slope = (self.seg_speed[i + 1] - self.seg_speed[i]) / self.dt;
        (self.seg_speed[i] + f * (self.seg_speed[i + 1] - self.seg_speed[i]), slope)
    }

    /// Point at arc length `s` along the polyline, extended past the end
    /// along the final non-degenerate direction.
    fn point_at_arc(&self, s: f64) -> Vec2 {
        let total = self.total_len();
        if s >= total {
            let last = *self.points.last().unwrap();
            let dir = self.final_direction();
            return [last[0] + (s - total) * dir[0], last[1] + (s - total) * dir[1]];
        }
        let i = self.arc.partition_point(|&a| a <= s).saturating_sub(1);
        let i = i.min(self.points.len() - 2);
        let seg = self.arc[i + 1] - self.arc[i];
        let f = if seg > 0.0 { (s - self.arc[i]) / seg } else { 0.0 };
        let (a, b) = (self.points[i], self.points[i + 1]);
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
    }

    fn final_direction(&self) -> Vec2 {
        for w in self.points.windows(2).rev() {
            let d = dist(w[0], w[1]);
            if d > 1e-9 {
                return [(w[1][0] - w[0][0]) / d, (w[1][1] - w[0][1]) / d];
            }
        }
        [0.0, 0.0]
    }

    /// Arc length of the closest point on the polyline, searching forward
    /// from segment `from`.
    fn project(&self, p: Vec2, from: usize) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0.0, from);
        for i in from..self.points.len() - 1 {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let e = [b[0] - a[0], b[1] - a[1]];
            let len2 = dot(e, e);
            let u = if len2 > 0.0 {
                (dot([p[0] - a[0], p[1] - a[1]], e) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = [a[0] + u * e[0], a[1] + u * e[1]];
            let d = dist(p, q);
            if d < best.0 {
                best = (d, self.arc[i] + u * (self.arc[i + 1] - self.arc[i]), i);
            }
        }
        (best.1, best.2)
    }
}

/// Tracks `traj` from the scenario's initial ego state with the default
/// controller.
pub fn rollout_controller(scenario: &Scenario, traj: &Trajectory) -> RolloutResult {
    rollout_with(scenario, traj, &ControllerConfig::default())
}

pub fn rollout_with(
    scenario: &Scenario,
    traj: &Trajectory,
    cfg: &ControllerConfig,
) -> RolloutResult {
    let h = scenario.horizon;
    let dt = scenario.frame_dt;
    let sub_dt = dt / cfg.substeps as f64;
    let lr = 0.5 * cfg.wheelbase;
    let ego_shape = scenario.ego_shape();
    let start = scenario.ego_init;
    let reference = Reference::new(&start, scenario.ego_speed, traj, dt);
    let degenerate = !traj.is_finite() || reference.total_len() < 0.5;
    let base_idx = scenario.schedule_index(0) as f64;

    let (mut x, mut y, mut yaw, mut v) = (start.x, start.y, start.yaw, scenario.ego_speed);
    let mut seg = 0usize;
    let mut realized = Vec::with_capacity(h);
    let mut speeds = vec![v];
    let mut substep_poses = Vec::with_capacity(h * cfg.substeps);
    let mut first_collision_frame = None;

    for frame in 1..=h {
        for k in 0..cfg.substeps {
            let tau = ((frame - 1) * cfg.substeps + k) as f64 * sub_dt;
            let (steer, accel) = if degenerate {
                (0.0, -cfg.max_brake)
            } else {
                let pos = [x, y];
                let heading = [yaw.cos(), yaw.sin()];
                let (s_here, s_idx) = reference.project(pos, seg);
                seg = s_idx;
                let ld = (cfg.lookahead_min + cfg.lookahead_gain * v).max(cfg.lookahead_min);
                let target = reference.point_at_arc(s_here + ld);
                let local = Pose2D { x, y, yaw }.to_local(target);
                let d = local[0].hypot(local[1]);
                let steer = if d > 1e-6 {
                    let alpha = local[1].atan2(local[0]);
                    let curvature = 2.0 * alpha.sin() / d;
                    (cfg.wheelbase * curvature).atan()
                } else {
                    0.0
                };
                let (v_ref, a_ff) = reference.speed(tau);
                let r = reference.position(tau);
                let along = dot([r[0] - x, r[1] - y], heading);
                let a = a_ff + cfg.speed_gain * (v_ref - v) + cfg.position_gain * along;
                (steer, a)
            };
            let steer = steer.clamp(-cfg.max_steer, cfg.max_steer);
            let accel = accel.clamp(-cfg.max_brake, cfg.max_accel);
            let beta = (lr / cfg.wheelbase * steer.tan()).atan();
            x += v * (yaw + beta).cos() * sub_dt;
            y += v * (yaw + beta).sin() * sub_dt;
            yaw = normalize_angle(yaw + v / lr * beta.sin() * sub_dt);
            v = (v + accel * sub_dt).max(0.0);
            let pose = Pose2D { x, y, yaw };
            substep_poses.push(pose);
            if first_collision_frame.is_none() {
                let idx = base_idx + (tau + sub_dt) / dt;
                let hit = scenario
                    .agents
                    .iter()
                    .any(|a| shapes_overlap(&ego_shape, &pose, &a.shape, &a.pose_at(idx)));
                if hit {
                    first_collision_frame = Some(frame);
                }
            }
        }
        realized.push(Pose2D { x, y, yaw });
        speeds.push(v);
    }

    let offroad_frames = realized
        .iter()
        .filter(|p| !scenario.map.contains_footprint(&ego_shape, p))
        .count();
    let accel: Vec<f64> = speeds.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    let jerk = accel.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    RolloutResult {
        origin: start,
        realized,
        speeds,
        collided: first_collision_frame.is_some(),
        first_collision_frame,
        offroad_frames,
        accel,
        jerk,
        substep_poses,
    }
}

/// Mean Euclidean distance between realized positions and expert waypoints,
/// both taken in the initial ego frame.
pub fn ade(result: &RolloutResult, expert: &Trajectory) -> f64 {
    let origin = result.origin;
    let n = result.realized.len().min(expert.waypoints.len());
    let total: f64 = result.realized[..n]
        .iter()
        .zip(&expert.waypoints)
        .map(|(p, w)| dist(origin.to_local(p.position()), *w))
        .sum();
    total / n as f64
}

/// Rollout reward `exp(-ADE)`, in `(0, 1]`.
pub fn reward(result: &RolloutResult, expert: &Trajectory) -> f64 {
    (-ade(result, expert)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{build_scenario, ScenarioParams};

    fn scenario() -> Scenario {
        let mut s = build_scenario(4, &ScenarioParams::default()).unwrap();
        s.agents.clear();
        s
    }

    #[test]
    fn trace_lengths() {
        let s = scenario();
        let r = rollout_controller(&s, &s.expert_future);
        let cfg = ControllerConfig::default();
        assert_eq!(r.realized.len(), s.horizon);
        assert_eq!(r.speeds.len(), s.horizon + 1);
        assert_eq!(r.accel.len(), s.horizon);
        assert_eq!(r.jerk.len(), s.horizon - 1);
        assert_eq!(r.substep_poses.len(), s.horizon * cfg.substeps);
        assert_eq!(r.realized.last(), r.substep_poses.last());
    }

    #[test]
    fn speed_follows_waypoint_spacing() {
        let s = scenario();
        let v = s.ego_speed;
        let plan = Trajectory::constant_velocity(v, s.frame_dt, s.horizon);
        let r = rollout_controller(&s, &plan);
        for sp in &r.speeds {
            assert!((sp - v).abs() < 0.5, "{sp} vs {v}");
        }
        let faster = Trajectory::constant_velocity(v + 2.0, s.frame_dt, s.horizon);
        let rf = rollout_controller(&s, &faster);
        assert!(rf.speeds.last().unwrap() > r.speeds.last().unwrap());
    }

    #[test]
    fn non_finite_plan_brakes() {
        let s = scenario();
        let mut plan = s.expert_future.clone();
        plan.waypoints[2][0] = f64::NAN;
        let r = rollout_controller(&s, &plan);
        assert!(r.realized.iter().all(|p| p.x.is_finite() && p.y.is_finite()));
        assert!(r.speeds.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn lateral_offset_steers_toward_it() {
        let s = scenario();
        let plan = Trajectory {
            waypoints: s.expert_future.waypoints.iter().map(|w| [w[0], w[1] + 2.0]).collect(),
        };
        let base = rollout_controller(&s, &s.expert_future);
        let r = rollout_controller(&s, &plan);
        let lat = |p: &Pose2D| r.origin.to_local(p.position())[1];
        assert!(lat(r.realized.last().unwrap()) > lat(base.realized.last().unwrap()) + 1.0);
    }
}
