use super::{AgentKind, Observation, Scenario, SemanticClass, SensorConfig};
use crate::error::{Error, Result};
use crate::geometry::{ray_segment, Pose2D, Shape, Vec2};

/// Nearest hit along one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub range: f64,
    pub class: SemanticClass,
}

/// Casts the configured fan of rays from `pose` against boundary segments
/// and placed shapes. Rays without a hit inside `r_max` report `r_max` and
/// class `Free`.
pub fn cast_rays<'a>(
    sensor: &SensorConfig,
    pose: &Pose2D,
    segments: impl Iterator<Item = (Vec2, Vec2)> + Clone,
    shapes: impl Iterator<Item = (&'a Shape, Pose2D, AgentKind)> + Clone,
) -> Observation {
    let origin = pose.position();
    let mut ranges = Vec::with_capacity(sensor.n_rays);
    let mut classes = Vec::with_capacity(sensor.n_rays);
    for k in 0..sensor.n_rays {
        let th = pose.yaw + sensor.ray_angle(k);
        let dir = [th.cos(), th.sin()];
        let mut best = Hit {
            range: f64::INFINITY,
            class: SemanticClass::Free,
        };
        for (a, b) in segments.clone() {
            if let Some(t) = ray_segment(origin, dir, a, b) {
                if t < best.range {
                    best = Hit {
                        range: t,
                        class: SemanticClass::Boundary,
                    };
                }
            }
        }
        for (shape, p, kind) in shapes.clone() {
            if let Some(t) = shape.ray_hit(&p, origin, dir) {
                if t < best.range {
                    best = Hit {
                        range: t,
                        class: match kind {
                            AgentKind::Vehicle => SemanticClass::Vehicle,
                            AgentKind::Pedestrian => SemanticClass::Pedestrian,
                        },
                    };
                }
            }
        }
        if best.range > sensor.r_max || best.range <= 0.0 {
            best = Hit {
                range: sensor.r_max,
                class: SemanticClass::Free,
            };
        }
        ranges.push(best.range);
        classes.push(best.class);
    }
    Observation { ranges, classes }
}

/// Ray-cast scan of the scenario from `pose` with agents at `frame`.
pub fn sense(scenario: &Scenario, pose: &Pose2D, frame: i64) -> Result<Observation> {
    if !scenario.frame_in_horizon(frame) {
        return Err(Error::Input(format!(
            "frame {frame} outside scenario horizon"
        )));
    }
    if !(pose.x.is_finite() && pose.y.is_finite() && pose.yaw.is_finite()) {
        return Err(Error::Sensing("non-finite pose".into()));
    }
    let (lo, hi) = scenario.map.bounds();
    let margin = 10.0;
    if pose.x < lo[0] - margin
        || pose.x > hi[0] + margin
        || pose.y < lo[1] - margin
        || pose.y > hi[1] + margin
    {
        return Err(Error::Sensing(format!(
            "pose ({:.2}, {:.2}) outside map bounds",
            pose.x, pose.y
        )));
    }
    let idx = scenario.schedule_index(frame);
    let r2 = (scenario.sensor.r_max + 5.0).powi(2);
    let near = |p: &Vec2| (p[0] - pose.x).powi(2) + (p[1] - pose.y).powi(2) <= r2;
    // Cheap culling only: segments with both ends far away can still cross
    // the sensing disc when long, so keep any segment whose midpoint or end
    // is near or whose length exceeds the cull radius.
    let segments: Vec<(Vec2, Vec2)> = scenario
        .map
        .boundary_segments()
        .filter(|(a, b)| {
            let len2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
            let mid = [(a[0] + b[0]) * 0.5, (a[1] + b[1]) * 0.5];
            near(a) || near(b) || near(&mid) || len2 > r2
        })
        .collect();
    let placed: Vec<(&Shape, Pose2D, AgentKind)> = scenario
        .agents
        .iter()
        .map(|a| (&a.shape, a.schedule[idx], a.kind))
        .collect();
    Ok(cast_rays(
        &scenario.sensor,
        pose,
        segments.iter().copied(),
        placed.iter().copied(),
    ))
}
