//! Deterministic 2D driving world: procedurally generated scenarios, ray-cast
//! sensing, trajectory-tracking rollouts and the rollout reward.

mod agents;
pub mod checks;
mod map;
mod scenario;
mod sensing;
mod vehicle;

pub use agents::{
    pedestrian_shape, vehicle_shape, Agent, AgentKind, PEDESTRIAN_RADIUS, VEHICLE_LENGTH,
    VEHICLE_WIDTH,
};
pub use map::{MapTemplate, RoadMap};
pub use scenario::{build_scenario, read_scenarios, write_scenarios, ScenarioParams};
pub use sensing::{cast_rays, sense, Hit};
pub use vehicle::{
    reward, rollout_controller, rollout_with, ade, ControllerConfig, RolloutResult,
};

use crate::error::{input_err, Result};
use crate::geometry::{Pose2D, RelativeMovement, Shape, Vec2};
use serde::{Deserialize, Serialize};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

/// Semantic class of a ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticClass {
    Free = 0,
    Boundary = 1,
    Vehicle = 2,
    Pedestrian = 3,
}

pub const NUM_CLASSES: usize = 4;

impl SemanticClass {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub n_rays: usize,
    pub fov_deg: f64,
    pub r_max: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            n_rays: 64,
            fov_deg: 120.0,
            r_max: 50.0,
        }
    }
}

impl SensorConfig {
    /// Ray bearing relative to the heading; rays sweep left-to-right order
    /// from `-fov/2` to `+fov/2`.
    pub fn ray_angle(&self, k: usize) -> f64 {
        let fov = self.fov_deg.to_radians();
        if self.n_rays == 1 {
            return 0.0;
        }
        -0.5 * fov + fov * k as f64 / (self.n_rays - 1) as f64
    }
}

/// One forward range scan with a semantic label per ray.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub ranges: Vec<f64>,
    pub classes: Vec<SemanticClass>,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// Row-major `K x C` one-hot semantic matrix.
    pub fn one_hot(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.classes.len() * NUM_CLASSES];
        for (k, c) in self.classes.iter().enumerate() {
            m[k * NUM_CLASSES + c.index()] = 1.0;
        }
        m
    }
}

/// Future ego waypoints in the current ego frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Vec2>,
}

impl Trajectory {
    pub fn zeros(h: usize) -> Self {
        Self {
            waypoints: vec![[0.0, 0.0]; h],
        }
    }

    pub fn horizon(&self) -> usize {
        self.waypoints.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.waypoints.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(v: &[f64]) -> Self {
        Self {
            waypoints: v.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.waypoints.iter().flatten().all(|v| v.is_finite())
    }

    /// Straight-line extrapolation at constant speed along the heading.
    pub fn constant_velocity(speed: f64, frame_dt: f64, h: usize) -> Self {
        Self {
            waypoints: (1..=h).map(|k| [speed * frame_dt * k as f64, 0.0]).collect(),
        }
    }

    /// Relative movement implied by the first waypoint, assuming a
    /// constant-curvature arc from the origin (chord angle is half the yaw
    /// change).
    pub fn first_step_movement(&self) -> RelativeMovement {
        let [x, y] = self.waypoints[0];
        let dyaw = if x.hypot(y) > 1e-6 {
            2.0 * y.atan2(x)
        } else {
            0.0
        };
        RelativeMovement {
            dx: x,
            dy: y,
            dyaw: crate::geometry::normalize_angle(dyaw),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryFrame {
    pub pose: Pose2D,
    /// Movement from the previous frame into this one.
    pub movement: RelativeMovement,
}

/// A generated driving episode. Frames are indexed relative to the current
/// frame 0: history covers `-(N-1)..=0`, the expert future `1..=H`, and agent
/// schedules `-N..=H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub v: u32,
    pub seed: u64,
    pub frame_dt: f64,
    pub horizon: usize,
    pub sensor: SensorConfig,
    pub map: RoadMap,
    pub ego_init: Pose2D,
    pub ego_speed: f64,
    pub agents: Vec<Agent>,
    pub history: Vec<HistoryFrame>,
    pub expert_future: Trajectory,
    /// World-frame expert poses for frames `1..=H`.
    pub expert_poses: Vec<Pose2D>,
}

impl Scenario {
    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn first_frame(&self) -> i64 {
        1 - self.history.len() as i64
    }

    pub fn frame_in_horizon(&self, frame: i64) -> bool {
        frame >= -(self.history.len() as i64) && frame <= self.horizon as i64
    }

    /// Index into agent schedules for `frame`.
    pub fn schedule_index(&self, frame: i64) -> usize {
        (frame + self.history.len() as i64) as usize
    }

    /// Logged ego pose at `frame` (history or expert future).
    pub fn ego_pose(&self, frame: i64) -> Result<Pose2D> {
        let n = self.history.len() as i64;
        if frame > 0 && frame <= self.horizon as i64 {
            Ok(self.expert_poses[(frame - 1) as usize])
        } else if frame <= 0 && frame > -n {
            Ok(self.history[(frame + n - 1) as usize].pose)
        } else {
            input_err(format!("frame {frame} outside logged ego poses"))
        }
    }

    /// Movement from `frame - 1` into `frame`.
    pub fn movement(&self, frame: i64) -> Result<RelativeMovement> {
        let n = self.history.len() as i64;
        if frame <= 0 && frame > -n {
            return Ok(self.history[(frame + n - 1) as usize].movement);
        }
        let a = self.ego_pose(frame - 1)?;
        let b = self.ego_pose(frame)?;
        Ok(a.relative_to(&b))
    }

    /// Logged ego future over `H` frames seen from `frame`'s ego frame.
    pub fn future_from(&self, frame: i64) -> Result<Trajectory> {
        let origin = self.ego_pose(frame)?;
        let waypoints = (1..=self.horizon as i64)
            .map(|k| self.ego_pose(frame + k).map(|p| origin.to_local(p.position())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trajectory { waypoints })
    }

    pub fn ego_shape(&self) -> Shape {
        vehicle_shape()
    }
}
