//! Rollout predicates shared by scenario validation and evaluation scoring.

use super::{RolloutResult, Scenario};
use crate::geometry::{shapes_overlap, Pose2D};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Minimum admissible constant-velocity time-to-collision, seconds.
    pub ttc_horizon: f64,
    /// Projection step used when searching for a time-to-collision, seconds.
    pub ttc_step: f64,
    pub max_accel: f64,
    pub max_jerk: f64,
    /// Expert progress below this many meters counts as full progress.
    pub min_expert_progress: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            ttc_horizon: 1.0,
            ttc_step: 0.1,
            max_accel: 4.0,
            max_jerk: 8.0,
            min_expert_progress: 5.0,
        }
    }
}

fn advance(p: &Pose2D, vel: [f64; 2], tau: f64) -> Pose2D {
    Pose2D {
        x: p.x + vel[0] * tau,
        y: p.y + vel[1] * tau,
        yaw: p.yaw,
    }
}

/// True when, at every realized frame, projecting ego and agents forward at
/// constant velocity yields no overlap before `ttc_horizon`.
pub fn ttc_ok(scenario: &Scenario, result: &RolloutResult, th: &Thresholds) -> bool {
    let ego_shape = scenario.ego_shape();
    let n_steps = (th.ttc_horizon / th.ttc_step).round() as usize;
    for (k, pose) in result.realized.iter().enumerate() {
        let frame = k as i64 + 1;
        let v = result.speeds[k + 1];
        let ego_vel = [v * pose.yaw.cos(), v * pose.yaw.sin()];
        let idx = scenario.schedule_index(frame);
        for agent in &scenario.agents {
            let ap = agent.schedule[idx];
            let av = agent.velocity(idx, scenario.frame_dt);
            for step in 0..n_steps {
                let tau = step as f64 * th.ttc_step;
                if shapes_overlap(
                    &ego_shape,
                    &advance(pose, ego_vel, tau),
                    &agent.shape,
                    &advance(&ap, av, tau),
                ) {
                    return false;
                }
            }
        }
    }
    true
}

pub fn comfort_ok(result: &RolloutResult, th: &Thresholds) -> bool {
    result.accel.iter().all(|a| a.abs() <= th.max_accel)
        && result.jerk.iter().all(|j| j.abs() <= th.max_jerk)
}

/// Fraction of realized frames whose full footprint is drivable.
pub fn drivable_fraction(result: &RolloutResult) -> f64 {
    let n = result.realized.len();
    if n == 0 {
        return 1.0;
    }
    (n - result.offroad_frames) as f64 / n as f64
}

/// Route progress between two poses, meters of arc length.
pub fn route_progress(scenario: &Scenario, from: &Pose2D, to: &Pose2D) -> f64 {
    let (s0, _) = scenario.map.project(from.position());
    let (s1, _) = scenario.map.project(to.position());
    s1 - s0
}

/// Realized progress relative to the expert's, clipped to `[0, 1]`.
pub fn progress_ratio(scenario: &Scenario, result: &RolloutResult, th: &Thresholds) -> f64 {
    let expert_end = scenario.expert_poses.last().copied().unwrap_or(scenario.ego_init);
    let expert = route_progress(scenario, &scenario.ego_init, &expert_end);
    if expert < th.min_expert_progress {
        return 1.0;
    }
    let end = result.realized.last().copied().unwrap_or(scenario.ego_init);
    (route_progress(scenario, &scenario.ego_init, &end) / expert).clamp(0.0, 1.0)
}

/// Collision test of one ego pose against all agents at a fractional
/// schedule index.
pub fn collides_at(scenario: &Scenario, pose: &Pose2D, schedule_idx: f64) -> bool {
    let ego = scenario.ego_shape();
    scenario
        .agents
        .iter()
        .any(|a| shapes_overlap(&ego, pose, &a.shape, &a.pose_at(schedule_idx)))
}
