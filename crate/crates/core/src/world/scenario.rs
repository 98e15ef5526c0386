//! Procedural scenario generation with a scripted lane-following expert.

use super::agents::{Script, VEHICLE_LENGTH};
use super::checks::{self, Thresholds};
use super::map::{CurvaturePiece, MapTemplate, RoadMap};
use super::{
    rollout_controller, Agent, HistoryFrame, Scenario, SensorConfig, Trajectory,
    SCENARIO_SCHEMA_VERSION,
};
use crate::error::{config_err, Error, Result};
use crate::geometry::{shapes_overlap, Pose2D};
use crate::rng::{self, tag, Rng};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub sensor: SensorConfig,
    pub horizon: usize,
    pub history: usize,
    pub frame_dt: f64,
    pub speed_cap: f64,
    pub templates: Vec<MapTemplate>,
    pub max_retries: usize,
    /// Maximum ADE of the controller tracking the expert future, meters.
    pub tracking_tolerance: f64,
    pub thresholds: Thresholds,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            sensor: SensorConfig::default(),
            horizon: 8,
            history: 5,
            frame_dt: 0.5,
            speed_cap: 20.0,
            templates: vec![
                MapTemplate::Straight,
                MapTemplate::LeftCurve,
                MapTemplate::RightCurve,
                MapTemplate::SCurve,
            ],
            max_retries: 32,
            tracking_tolerance: TRACKING_TOLERANCE,
            thresholds: Thresholds::default(),
        }
    }
}

/// Controller tracking error on expert futures, measured over generated
/// scenarios and frozen with headroom.
pub const TRACKING_TOLERANCE: f64 = 0.3;

impl ScenarioParams {
    pub fn validate(&self) -> Result<()> {
        if self.sensor.n_rays < 8 {
            return config_err("n_rays must be at least 8");
        }
        if self.horizon < 2 {
            return config_err("horizon must be at least 2");
        }
        if self.history < 1 {
            return config_err("history must be at least 1");
        }
        if self.templates.is_empty() {
            return config_err("at least one map template is required");
        }
        if !(self.frame_dt > 0.0 && self.sensor.r_max > 0.0 && self.sensor.fov_deg > 0.0) {
            return config_err("frame_dt, r_max and fov must be positive");
        }
        if !(self.speed_cap > 0.0 && self.tracking_tolerance > 0.0) {
            return config_err("speed_cap and tracking_tolerance must be positive");
        }
        Ok(())
    }
}

const ROAD_LENGTH: f64 = 280.0;
const LEFT_EXTENT: f64 = 5.25;
const RIGHT_EXTENT: f64 = 2.5;
const ONCOMING_LATERAL: f64 = 3.5;
const EXPERT_SUBSTEPS: usize = 10;

struct Idm {
    v_desired: f64,
    a_max: f64,
    b_comf: f64,
    headway: f64,
    min_gap: f64,
}

impl Idm {
    fn accel(&self, v: f64, lead: Option<(f64, f64)>) -> f64 {
        let free = 1.0 - (v / self.v_desired).powi(4);
        match lead {
            None => self.a_max * free,
            Some((gap, v_lead)) => {
                let dv = v - v_lead;
                let s_star = self.min_gap
                    + (v * self.headway + v * dv / (2.0 * (self.a_max * self.b_comf).sqrt()))
                        .max(0.0);
                let gap = gap.max(0.1);
                self.a_max * (free - (s_star / gap).powi(2))
            }
        }
    }
}

fn random_map(rng: &mut Rng, template: MapTemplate) -> RoadMap {
    let start = rng.random_range(50.0..100.0);
    let radius = rng.random_range(45.0..110.0);
    let arc = rng.random_range(40.0..90.0);
    let pieces = match template {
        MapTemplate::Straight => vec![],
        MapTemplate::LeftCurve | MapTemplate::RightCurve => {
            let sign = if template == MapTemplate::LeftCurve { 1.0 } else { -1.0 };
            vec![
                CurvaturePiece { start, curvature: sign / radius },
                CurvaturePiece { start: start + arc, curvature: 0.0 },
            ]
        }
        MapTemplate::SCurve => {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let arc2 = rng.random_range(40.0..90.0);
            vec![
                CurvaturePiece { start, curvature: sign / radius },
                CurvaturePiece { start: start + arc, curvature: -sign / radius },
                CurvaturePiece { start: start + arc + arc2, curvature: 0.0 },
            ]
        }
    };
    RoadMap::from_curvature(&pieces, ROAD_LENGTH, 1.0, LEFT_EXTENT, RIGHT_EXTENT)
}

fn random_scripts(rng: &mut Rng, s_now: f64, v_now: f64) -> Vec<Script> {
    let mut scripts = Vec::new();
    match rng.random_range(0..5u32) {
        0 => {}
        1 => {
            let v0 = rng.random_range(2.0..(v_now.max(4.0)));
            scripts.push(Script::Lead {
                s0: s_now + rng.random_range(18.0..40.0),
                v0,
                brake_at: f64::INFINITY,
                decel: 0.0,
                v_min: v0,
            });
        }
        2 => {
            let v0 = rng.random_range(5.0..12.0);
            scripts.push(Script::Lead {
                s0: s_now + rng.random_range(20.0..40.0),
                v0,
                brake_at: rng.random_range(-1.0..2.0),
                decel: rng.random_range(1.0..2.5),
                v_min: 0.0,
            });
        }
        3 => {
            let stop = v_now * v_now / (2.0 * 1.5) + 12.0;
            scripts.push(Script::Lead {
                s0: s_now + stop + rng.random_range(0.0..25.0),
                v0: 0.0,
                brake_at: f64::INFINITY,
                decel: 0.0,
                v_min: 0.0,
            });
        }
        _ => {
            let from_right = rng.random_bool(0.5);
            let (lat0, lat1) = if from_right { (-3.5, 6.5) } else { (6.5, -3.5) };
            scripts.push(Script::Crossing {
                s: s_now + rng.random_range(22.0..45.0),
                lat0,
                lat1,
                speed: rng.random_range(1.0..1.6),
                start: rng.random_range(-2.5..1.0),
            });
        }
    }
    for _ in 0..rng.random_range(0..3u32) {
        scripts.push(Script::Oncoming {
            s0: s_now + rng.random_range(10.0..90.0),
            lateral: ONCOMING_LATERAL,
            v: rng.random_range(4.0..12.0),
        });
    }
    scripts
}

/// Longitudinal obstacle for the expert: `(gap, speed)` of the nearest
/// in-lane blocker ahead.
fn nearest_blocker(scripts: &[Script], s: f64, t: f64) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for sc in scripts {
        let cand = match *sc {
            Script::Lead { .. } => {
                let (sl, _, _, vl) = sc.state(t);
                Some((sl - s - VEHICLE_LENGTH, vl))
            }
            Script::Crossing { s: sp, lat0, lat1, .. } => {
                let (_, lat, _, _) = sc.state(t);
                let (_, lat_soon, _, _) = sc.state(t + 3.0);
                let dir = (lat1 - lat0).signum();
                // blocks until it has fully crossed the ego lane band
                let not_past = dir * lat < 3.0;
                let reaches = dir * lat_soon > -3.0;
                if not_past && reaches {
                    Some((sp - s - 0.5 * VEHICLE_LENGTH - 0.5, 0.0))
                } else {
                    None
                }
            }
            Script::Oncoming { .. } => None,
        };
        if let Some((gap, v)) = cand {
            if gap > -VEHICLE_LENGTH && best.is_none_or(|b| gap < b.0) {
                best = Some((gap, v));
            }
        }
    }
    best
}

struct ExpertLog {
    /// Route arc length at every substep from `t = -N dt` to `t = H dt`.
    s: Vec<f64>,
    v: Vec<f64>,
}

fn simulate_expert(
    scripts: &[Script],
    idm: &Idm,
    s_start: f64,
    v_start: f64,
    n_hist: usize,
    horizon: usize,
    dt: f64,
) -> ExpertLog {
    let sub = dt / EXPERT_SUBSTEPS as f64;
    let steps = (n_hist + horizon) * EXPERT_SUBSTEPS;
    let t0 = -(n_hist as f64) * dt;
    let (mut s, mut v, mut a) = (s_start, v_start, 0.0f64);
    let mut log = ExpertLog {
        s: vec![s],
        v: vec![v],
    };
    let jerk_limit = 3.0;
    for i in 0..steps {
        let t = t0 + i as f64 * sub;
        let target = idm.accel(v, nearest_blocker(scripts, s, t)).clamp(-3.5, 1.5);
        a += (target - a).clamp(-jerk_limit * sub, jerk_limit * sub);
        let v_next = (v + a * sub).max(0.0);
        if v_next == 0.0 {
            a = a.max(0.0);
        }
        s += 0.5 * (v + v_next) * sub;
        v = v_next;
        log.s.push(s);
        log.v.push(v);
    }
    log
}

fn try_build(seed: u64, attempt: u64, params: &ScenarioParams) -> std::result::Result<Scenario, String> {
    let mut rng = rng::stream(seed, &[tag::SCENARIO, attempt]);
    let template = params.templates[rng.random_range(0..params.templates.len())];
    let map = random_map(&mut rng, template);
    let dt = params.frame_dt;
    let n = params.history;
    let h = params.horizon;
    let v_start = rng.random_range(5.0..13.0);
    let idm = Idm {
        v_desired: rng.random_range(8.0f64..15.0).min(params.speed_cap),
        a_max: 1.5,
        b_comf: 2.0,
        headway: 1.2,
        min_gap: 4.0,
    };
    let s_start = rng.random_range(8.0..20.0);
    let s_now_guess = s_start + v_start * n as f64 * dt;
    let scripts = random_scripts(&mut rng, s_now_guess, v_start);
    let log = simulate_expert(&scripts, &idm, s_start, v_start, n, h, dt);

    // frame f in -N..=H sits at substep (f + N) * EXPERT_SUBSTEPS
    let at = |f: i64| ((f + n as i64) as usize) * EXPERT_SUBSTEPS;
    let ego_pose = |f: i64| map.pose_at(log.s[at(f)], 0.0);

    let ego_shape = super::vehicle_shape();
    let sub = dt / EXPERT_SUBSTEPS as f64;
    for (i, &s) in log.s.iter().enumerate() {
        let t = -(n as f64) * dt + i as f64 * sub;
        let pose = map.pose_at(s, 0.0);
        if scripts
            .iter()
            .any(|sc| shapes_overlap(&ego_shape, &pose, &sc.shape(), &sc.pose(&map, t)))
        {
            return Err(format!("expert collides at t = {t:.2} s"));
        }
    }
    if log.s.last().copied().unwrap_or(0.0) > map.length() - 60.0 {
        return Err("expert runs off the end of the route".into());
    }

    let agents: Vec<Agent> = scripts
        .iter()
        .map(|sc| Agent {
            kind: sc.kind(),
            shape: sc.shape(),
            schedule: (-(n as i64)..=h as i64)
                .map(|f| sc.pose(&map, f as f64 * dt))
                .collect(),
        })
        .collect();

    let history: Vec<HistoryFrame> = (1 - n as i64..=0)
        .map(|f| {
            let pose = ego_pose(f);
            HistoryFrame {
                pose,
                movement: ego_pose(f - 1).relative_to(&pose),
            }
        })
        .collect();
    let ego_init = ego_pose(0);
    let expert_poses: Vec<Pose2D> = (1..=h as i64).map(ego_pose).collect();
    let expert_future = Trajectory {
        waypoints: expert_poses
            .iter()
            .map(|p| ego_init.to_local(p.position()))
            .collect(),
    };
    let scenario = Scenario {
        v: SCENARIO_SCHEMA_VERSION,
        seed,
        frame_dt: dt,
        horizon: h,
        sensor: params.sensor,
        map,
        ego_init,
        ego_speed: log.v[at(0)],
        agents,
        history,
        expert_future,
        expert_poses,
    };
    validate_expert(&scenario, params)?;
    Ok(scenario)
}

/// Generation-time oracle: the expert future must be drivable, collision
/// free, comfortable and trackable by the controller.
fn validate_expert(scenario: &Scenario, params: &ScenarioParams) -> std::result::Result<(), String> {
    let shape = scenario.ego_shape();
    for f in scenario.first_frame()..=scenario.horizon as i64 {
        let p = scenario.ego_pose(f).map_err(|e| e.to_string())?;
        if !scenario.map.contains_footprint(&shape, &p) {
            return Err(format!("expert leaves drivable area at frame {f}"));
        }
    }
    let mut prev = [0.0, 0.0];
    for w in &scenario.expert_future.waypoints {
        let step = crate::geometry::dist(prev, *w);
        if step / scenario.frame_dt > params.speed_cap {
            return Err("expert exceeds speed cap".into());
        }
        prev = *w;
    }
    let result = rollout_controller(scenario, &scenario.expert_future);
    let th = &params.thresholds;
    if result.collided {
        return Err("expert rollout collides".into());
    }
    if result.offroad_frames > 0 {
        return Err("expert rollout leaves drivable area".into());
    }
    if !checks::ttc_ok(scenario, &result, th) {
        return Err("expert rollout violates time-to-collision".into());
    }
    if !checks::comfort_ok(&result, th) {
        return Err("expert rollout is uncomfortable".into());
    }
    if checks::progress_ratio(scenario, &result, th) < 0.99 {
        return Err("expert rollout lags the expert".into());
    }
    let ade = super::ade(&result, &scenario.expert_future);
    if ade > params.tracking_tolerance {
        return Err(format!("tracking error {ade:.3} m exceeds tolerance"));
    }
    Ok(())
}

/// Builds the scenario for `seed`; deterministic in `(seed, params)`.
pub fn build_scenario(seed: u64, params: &ScenarioParams) -> Result<Scenario> {
    params.validate()?;
    let mut last = String::new();
    for attempt in 0..params.max_retries as u64 {
        match try_build(seed, attempt, params) {
            Ok(s) => return Ok(s),
            Err(reason) => last = reason,
        }
    }
    Err(Error::Generation {
        seed,
        reason: format!("no valid expert after {} attempts ({last})", params.max_retries),
    })
}

/// Writes scenarios as JSON Lines.
pub fn write_scenarios<W: Write>(mut out: W, scenarios: &[Scenario]) -> Result<()> {
    for s in scenarios {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_scenarios<R: BufRead>(input: R) -> Result<Vec<Scenario>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Scenario = serde_json::from_str(&line)?;
        if s.v != SCENARIO_SCHEMA_VERSION {
            return Err(Error::Input(format!(
                "line {}: unsupported scenario schema version {}",
                i + 1,
                s.v
            )));
        }
        out.push(s);
    }
    Ok(out)
}
