//! Closed-loop scoring of planners on held-out scenarios.
//!
//! Unlike training, scoring reads the full simulator state: agent poses for
//! collisions and time-to-collision, the map for drivable area and route
//! progress.

use crate::error::Result;
use crate::heads::{canonical_unscale, movement_input};
use crate::model::{TrainingClip, WorldModel};
use crate::planner::sample_ode;
use crate::rng::{self, tag};
use crate::world::checks::{comfort_ok, drivable_fraction, progress_ratio, ttc_ok, Thresholds};
use crate::world::{reward, rollout_controller, AgentKind, RolloutResult, Scenario, Trajectory};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

/// Per-scenario subscores.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SubScores {
    pub nc: f64,
    pub dac: f64,
    pub ep: f64,
    pub ttc: f64,
    pub c: f64,
}

/// `NC * DAC * (5 EP + 5 TTC + 2 C) / 12`.
pub fn aggregate(s: &SubScores) -> f64 {
    s.nc * s.dac * (5.0 * s.ep + 5.0 * s.ttc + 2.0 * s.c) / 12.0
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

pub fn subscores(scenario: &Scenario, result: &RolloutResult, th: &Thresholds) -> SubScores {
    SubScores {
        nc: indicator(!result.collided),
        dac: drivable_fraction(result),
        ep: progress_ratio(scenario, result, th),
        ttc: indicator(ttc_ok(scenario, result, th)),
        c: indicator(comfort_ok(result, th)),
    }
}

/// Anything that maps a scenario's observable history to a trajectory.
pub trait Planner: Sync {
    fn name(&self) -> String;
    fn plan(&self, scenario: &Scenario) -> Result<Trajectory>;
}

/// Stands still.
pub struct ZeroMotion;

impl Planner for ZeroMotion {
    fn name(&self) -> String {
        "zero-motion".into()
    }
    fn plan(&self, scenario: &Scenario) -> Result<Trajectory> {
        Ok(Trajectory::zeros(scenario.horizon))
    }
}

/// Keeps the speed of the last logged movement, straight ahead.
pub struct ConstantVelocity;

impl Planner for ConstantVelocity {
    fn name(&self) -> String {
        "constant-velocity".into()
    }
    fn plan(&self, scenario: &Scenario) -> Result<Trajectory> {
        let m = scenario.movement(0)?;
        let speed = m.dx.hypot(m.dy) / scenario.frame_dt;
        Ok(Trajectory::constant_velocity(speed, scenario.frame_dt, scenario.horizon))
    }
}

/// Replays the logged expert future.
pub struct Expert;

impl Planner for Expert {
    fn name(&self) -> String {
        "expert".into()
    }
    fn plan(&self, scenario: &Scenario) -> Result<Trajectory> {
        Ok(scenario.expert_future.clone())
    }
}

/// The learned planner: ODE sampling from the last `frames` logged frames,
/// with initial noise keyed by the scenario seed.
pub struct ModelPlanner<'a> {
    pub model: &'a WorldModel,
    pub frames: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Planner for ModelPlanner<'_> {
    fn name(&self) -> String {
        "model".into()
    }
    fn plan(&self, scenario: &Scenario) -> Result<Trajectory> {
        let clip = TrainingClip::latest(scenario, self.frames)?;
        self.model.plan(&clip, self.steps, self.seed, &[tag::EVAL, scenario.seed])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScore {
    pub id: u64,
    pub scores: SubScores,
    pub aggregate: f64,
    /// Rollout reward against the expert, as used for policy optimisation.
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub planner: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub mean: SubScores,
    pub mean_aggregate: f64,
    pub mean_reward: f64,
    pub scenarios: Vec<ScenarioScore>,
}

pub fn score_scenario<P: Planner + ?Sized>(
    planner: &P,
    scenario: &Scenario,
    th: &Thresholds,
) -> Result<ScenarioScore> {
    let traj = planner.plan(scenario)?;
    let result = rollout_controller(scenario, &traj);
    let scores = subscores(scenario, &result, th);
    Ok(ScenarioScore {
        id: scenario.seed,
        aggregate: aggregate(&scores),
        reward: reward(&result, &scenario.expert_future),
        scores,
    })
}

/// Hex SHA-256 of any serialisable configuration.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("configuration serialises");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Scores every scenario (in parallel) and assembles the report in input
/// order.
pub fn run_suite<P: Planner + ?Sized>(
    planner: &P,
    scenarios: &[Scenario],
    th: &Thresholds,
    config_hash: &str,
) -> Result<EvalReport> {
    let rows = scenarios
        .par_iter()
        .map(|s| score_scenario(planner, s, th))
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len().max(1) as f64;
    let mut mean = SubScores::default();
    let (mut agg, mut rew) = (0.0, 0.0);
    for r in &rows {
        mean.nc += r.scores.nc / n;
        mean.dac += r.scores.dac / n;
        mean.ep += r.scores.ep / n;
        mean.ttc += r.scores.ttc / n;
        mean.c += r.scores.c / n;
        agg += r.aggregate / n;
        rew += r.reward / n;
    }
    Ok(EvalReport {
        planner: planner.name(),
        config_hash: config_hash.to_string(),
        seeds: scenarios.iter().map(|s| s.seed).collect(),
        mean,
        mean_aggregate: agg,
        mean_reward: rew,
        scenarios: rows,
    })
}

impl EvalReport {
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("id,NC,DAC,EP,TTC,C,aggregate,reward\n");
        for r in &self.scenarios {
            let s = &r.scores;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.id, s.nc, s.dac, s.ep, s.ttc, s.c, r.aggregate, r.reward
            ));
        }
        out
    }

    /// Writes `scores.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("scores.csv"), self.scores_csv())?;
        let summary = serde_json::json!({
            "planner": self.planner,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "count": self.scenarios.len(),
            "mean": self.mean,
            "mean_aggregate": self.mean_aggregate,
            "mean_reward": self.mean_reward,
        });
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
        Ok(())
    }
}

/// Percentile bootstrap interval of the mean of `values`.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> (f64, f64) {
    use rand::Rng as _;
    let n = values.len();
    let mut r = rng::stream(seed, &[]);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[r.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let lo = ((1.0 - level) / 2.0 * resamples as f64).floor() as usize;
    let hi = (((1.0 + level) / 2.0 * resamples as f64).ceil() as usize).min(resamples - 1);
    (means[lo], means[hi])
}

/// Writes predicted against sensed next-frame scans for every position of
/// each scenario's latest window. The heads receive the movement implied by
/// the planner's own first waypoint.
pub fn dump_forecasts<W: Write>(
    model: &WorldModel,
    scenarios: &[Scenario],
    frames: usize,
    steps: usize,
    seed: u64,
    mut out: W,
) -> Result<()> {
    writeln!(
        out,
        "scenario,position,ray,pred_range,target_range,confidence,pred_vehicle,target_vehicle,pred_pedestrian,target_pedestrian"
    )?;
    let e = model.config.embed_dim;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for s in scenarios {
        let clip = TrainingClip::latest(s, frames)?;
        let reps = model.represent(&clip)?;
        for (i, rep) in reps.iter().enumerate() {
            let cond = rep.cond();
            let mut r = rng::stream(seed, &[tag::EVAL, s.seed, i as u64]);
            let plan = sample_ode(&model.net.planner, &cond, steps, &mut r)?;
            let mv = [movement_input(&plan.first_step_movement())];
            let depth = model.net.heads.depth_rows(&cond, &mv)?.0.remove(0);
            let mut sem = Vec::new();
            for kind in [AgentKind::Vehicle, AgentKind::Pedestrian] {
                let pred = model.net.heads.semantic_rows(&cond, &mv, model.classes.get(kind))?.0.remove(0);
                let target = model.classes.target(&clip.observations[i + 1], kind);
                sem.push((pred.h_hat, target.h));
            }
            let next = &clip.observations[i + 1];
            for k in 0..model.config.n_rays {
                let row = k * e..(k + 1) * e;
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    s.seed,
                    i,
                    k,
                    canonical_unscale(depth.d_hat[k], model.config.r_max),
                    next.ranges[k],
                    depth.c_hat[k],
                    norm(&sem[0].0[row.clone()]),
                    norm(&sem[0].1[row.clone()]),
                    norm(&sem[1].0[row.clone()]),
                    norm(&sem[1].1[row]),
                )?;
            }
        }
    }
    Ok(())
}
