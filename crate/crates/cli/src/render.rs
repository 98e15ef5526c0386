//! Static SVG frames and the matching CSV trace of one closed-loop rollout.

use drivewm::eval::SubScores;
use drivewm::geometry::{Pose2D, Shape, Vec2};
use drivewm::world::{AgentKind, RolloutResult, Scenario, Trajectory};
use std::fmt::Write as _;

/// The one formatter for coordinates, shared by the SVG and CSV writers.
pub fn coord(v: f64) -> String {
    format!("{v:.4}")
}

fn points(pts: &[Vec2]) -> String {
    pts.iter()
        .map(|p| format!("{},{}", coord(p[0]), coord(p[1])))
        .collect::<Vec<_>>()
        .join(" ")
}

pub struct Rollout<'a> {
    pub scenario: &'a Scenario,
    pub plan: &'a Trajectory,
    pub result: &'a RolloutResult,
}

impl Rollout<'_> {
    /// Planned waypoints in world coordinates.
    pub fn planned_world(&self) -> Vec<Vec2> {
        self.plan.waypoints.iter().map(|w| self.result.origin.to_world(*w)).collect()
    }

    fn expert_world(&self) -> Vec<Vec2> {
        self.scenario.expert_poses.iter().map(Pose2D::position).collect()
    }

    /// One row per future frame: planned, realized and expert positions.
    pub fn trace_csv(&self) -> String {
        let planned = self.planned_world();
        let expert = self.expert_world();
        let mut out = String::from("frame,planned_x,planned_y,realized_x,realized_y,realized_yaw,expert_x,expert_y,speed\n");
        for (k, pose) in self.result.realized.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                k + 1,
                coord(planned[k][0]),
                coord(planned[k][1]),
                coord(pose.x),
                coord(pose.y),
                coord(pose.yaw),
                coord(expert[k][0]),
                coord(expert[k][1]),
                coord(self.result.speeds[k + 1]),
            );
        }
        out
    }

    pub fn score_csv(&self, scores: &SubScores, aggregate: f64, reward: f64) -> String {
        format!(
            "scenario,NC,DAC,EP,TTC,C,aggregate,reward,collided,offroad_frames\n{},{},{},{},{},{},{},{},{},{}\n",
            self.scenario.seed,
            scores.nc,
            scores.dac,
            scores.ep,
            scores.ttc,
            scores.c,
            aggregate,
            reward,
            self.result.collided,
            self.result.offroad_frames
        )
    }

    /// SVG of future frame `frame` (1-based). World y points up; the
    /// flip lives in a group transform so coordinates stay verbatim.
    pub fn svg(&self, frame: usize) -> String {
        let s = self.scenario;
        let (lo, hi) = s.map.bounds();
        let pad = 5.0;
        let (w, h) = (hi[0] - lo[0] + 2.0 * pad, hi[1] - lo[1] + 2.0 * pad);
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{} {} {} {}" width="800" height="{}">"#,
            coord(lo[0] - pad),
            coord(-hi[1] - pad),
            coord(w),
            coord(h),
            (800.0 * h / w).round().max(1.0)
        );
        let _ = writeln!(out, r#"<g transform="scale(1,-1)">"#);
        for poly in &s.map.drivable {
            let _ = writeln!(
                out,
                r##"<polygon class="drivable" points="{}" fill="#e8e8e8" stroke="#555" stroke-width="0.2"/>"##,
                points(poly)
            );
        }
        let idx = s.schedule_index(frame as i64) as f64;
        for agent in &s.agents {
            let pose = agent.pose_at(idx);
            let color = match agent.kind {
                AgentKind::Vehicle => "#3a6ea5",
                AgentKind::Pedestrian => "#c0392b",
            };
            out.push_str(&shape_svg(&agent.shape, &pose, color, "agent"));
        }
        let _ = writeln!(
            out,
            r##"<polyline class="expert" points="{}" fill="none" stroke="#2e8b57" stroke-width="0.3"/>"##,
            points(&self.expert_world())
        );
        let _ = writeln!(
            out,
            r##"<polyline class="planned" points="{}" fill="none" stroke="#e67e22" stroke-width="0.3"/>"##,
            points(&self.planned_world())
        );
        let mut realized = vec![self.result.origin.position()];
        realized.extend(self.result.realized[..frame].iter().map(Pose2D::position));
        let _ = writeln!(
            out,
            r##"<polyline class="realized" points="{}" fill="none" stroke="#111" stroke-width="0.3"/>"##,
            points(&realized)
        );
        out.push_str(&shape_svg(&s.ego_shape(), &self.result.realized[frame - 1], "#f1c40f", "ego"));
        out.push_str("</g>\n</svg>\n");
        out
    }
}

fn shape_svg(shape: &Shape, pose: &Pose2D, color: &str, class: &str) -> String {
    match shape.corners(pose) {
        Some(c) => format!(r#"<polygon class="{class}" points="{}" fill="{color}"/>"#, points(&c)) + "\n",
        None => {
            let r = match shape {
                Shape::Disc { radius } => *radius,
                Shape::Rect { .. } => unreachable!(),
            };
            format!(
                r#"<circle class="{class}" cx="{}" cy="{}" r="{}" fill="{color}"/>"#,
                coord(pose.x),
                coord(pose.y),
                coord(r)
            ) + "\n"
        }
    }
}
