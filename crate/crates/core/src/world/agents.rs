//! Scripted agents. Each agent replays a fixed per-frame pose schedule and
//! never reacts to the ego vehicle.

use super::map::RoadMap;
use crate::geometry::{Pose2D, Shape};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
}

pub const VEHICLE_LENGTH: f64 = 4.5;
pub const VEHICLE_WIDTH: f64 = 1.9;
pub const PEDESTRIAN_RADIUS: f64 = 0.35;

pub fn vehicle_shape() -> Shape {
    Shape::Rect {
        length: VEHICLE_LENGTH,
        width: VEHICLE_WIDTH,
    }
}

pub fn pedestrian_shape() -> Shape {
    Shape::Disc {
        radius: PEDESTRIAN_RADIUS,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub kind: AgentKind,
    pub shape: Shape,
    /// Pose per frame, starting at the scenario's first frame.
    pub schedule: Vec<Pose2D>,
}

impl Agent {
    /// Pose at a fractional schedule index, interpolated between frames.
    pub fn pose_at(&self, idx: f64) -> Pose2D {
        let last = self.schedule.len() - 1;
        let u = idx.clamp(0.0, last as f64);
        let i = (u.floor() as usize).min(last.saturating_sub(1));
        if last == 0 {
            return self.schedule[0];
        }
        self.schedule[i].lerp(&self.schedule[i + 1], u - i as f64)
    }

    /// World-frame velocity at an integer schedule index (forward difference,
    /// backward at the end).
    pub fn velocity(&self, idx: usize, frame_dt: f64) -> [f64; 2] {
        let last = self.schedule.len() - 1;
        let (a, b) = if idx < last {
            (self.schedule[idx], self.schedule[idx + 1])
        } else {
            (self.schedule[last - 1], self.schedule[last])
        };
        [(b.x - a.x) / frame_dt, (b.y - a.y) / frame_dt]
    }
}

/// Continuous-time motion script in route coordinates. Time is measured from
/// the current frame (frame 0).
#[derive(Debug, Clone, Copy)]
pub(crate) enum Script {
    /// Vehicle in the ego lane ahead; cruises and optionally brakes.
    Lead {
        s0: f64,
        v0: f64,
        brake_at: f64,
        decel: f64,
        v_min: f64,
    },
    /// Vehicle in the opposite lane driving toward the ego.
    Oncoming { s0: f64, lateral: f64, v: f64 },
    /// Pedestrian crossing the road at fixed arc length.
    Crossing {
        s: f64,
        lat0: f64,
        lat1: f64,
        speed: f64,
        start: f64,
    },
}

impl Script {
    pub fn kind(&self) -> AgentKind {
        match self {
            Script::Lead { .. } | Script::Oncoming { .. } => AgentKind::Vehicle,
            Script::Crossing { .. } => AgentKind::Pedestrian,
        }
    }

    /// Route position `(s, lateral, heading offset)` and longitudinal speed
    /// along the route at time `t`.
    pub fn state(&self, t: f64) -> (f64, f64, f64, f64) {
        match *self {
            Script::Lead {
                s0,
                v0,
                brake_at,
                decel,
                v_min,
            } => {
                if t <= brake_at || decel <= 0.0 || v0 <= v_min {
                    (s0 + v0 * t, 0.0, 0.0, v0)
                } else {
                    let s_b = s0 + v0 * brake_at;
                    let tau = t - brake_at;
                    let t_stop = (v0 - v_min) / decel;
                    if tau < t_stop {
                        (
                            s_b + v0 * tau - 0.5 * decel * tau * tau,
                            0.0,
                            0.0,
                            v0 - decel * tau,
                        )
                    } else {
                        let s_end = s_b + v0 * t_stop - 0.5 * decel * t_stop * t_stop;
                        (s_end + v_min * (tau - t_stop), 0.0, 0.0, v_min)
                    }
                }
            }
            Script::Oncoming { s0, lateral, v } => {
                (s0 - v * t, lateral, std::f64::consts::PI, -v)
            }
            Script::Crossing {
                s,
                lat0,
                lat1,
                speed,
                start,
            } => {
                let span = (lat1 - lat0).abs();
                let dur = span / speed;
                let u = ((t - start) / dur).clamp(0.0, 1.0);
                let dir = (lat1 - lat0).signum();
                (s, lat0 + u * (lat1 - lat0), dir * FRAC_PI_2, 0.0)
            }
        }
    }

    pub fn pose(&self, map: &RoadMap, t: f64) -> Pose2D {
        let (s, lat, dh, _) = self.state(t);
        let base = map.pose_at(s, lat);
        Pose2D::new(base.x, base.y, base.yaw + dh)
    }

    pub fn shape(&self) -> Shape {
        match self.kind() {
            AgentKind::Vehicle => vehicle_shape(),
            AgentKind::Pedestrian => pedestrian_shape(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn braking_lead_stops_and_stays() {
        let s = Script::Lead {
            s0: 10.0,
            v0: 8.0,
            brake_at: 1.0,
            decel: 4.0,
            v_min: 0.0,
        };
        let (s_stop, _, _, v) = s.state(3.0);
        assert_eq!(v, 0.0);
        assert!((s_stop - (10.0 + 8.0 + 8.0)).abs() < 1e-12);
        assert_eq!(s.state(10.0).0, s_stop);
    }

    #[test]
    fn interpolated_agent_pose() {
        let a = Agent {
            kind: AgentKind::Vehicle,
            shape: vehicle_shape(),
            schedule: vec![Pose2D::new(0.0, 0.0, 0.0), Pose2D::new(2.0, 0.0, 0.0)],
        };
        assert!((a.pose_at(0.25).x - 0.5).abs() < 1e-15);
        assert_eq!(a.velocity(0, 0.5), [4.0, 0.0]);
        assert_eq!(a.velocity(1, 0.5), [4.0, 0.0]);
    }
}
