//! The full world model and the data it consumes.
//!
//! Training and planning only ever see [`TrainingClip`]s, which carry
//! observations, ego movements and ego trajectories. Building a clip is the
//! single place where a [`Scenario`] is read.

use crate::backbone::{BackboneConfig, BackboneWeights, FutureRepresentation, TokenSequence};
use crate::encoder::{EncoderSpec, EncoderWeights};
use crate::error::{config_err, input_err, Result};
use crate::geometry::RelativeMovement;
use crate::heads::{movement_input, ClassEmbeddingTable, HeadsConfig, HeadsWeights};
use crate::nn::{self, Params, Tensor};
use crate::planner::{sample_ode, PlannerConfig, PlannerWeights};
use crate::rng::{self, tag};
use crate::world::{sense, Observation, Scenario, SensorConfig, Trajectory};
use serde::{Deserialize, Serialize};

/// Lateral offset of the final waypoint separating turn commands from
/// straight driving, in metres.
pub const COMMAND_LATERAL: f64 = 2.0;
/// Ego movement inputs plus the one-hot command.
pub const ACTION_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NavCommand {
    Left,
    Straight,
    Right,
}

impl NavCommand {
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        match traj.waypoints.last() {
            Some(p) if p[1] > COMMAND_LATERAL => Self::Left,
            Some(p) if p[1] < -COMMAND_LATERAL => Self::Right,
            _ => Self::Straight,
        }
    }

    pub fn one_hot(self) -> [f64; 3] {
        match self {
            Self::Left => [1.0, 0.0, 0.0],
            Self::Straight => [0.0, 1.0, 0.0],
            Self::Right => [0.0, 0.0, 1.0],
        }
    }
}

pub fn action_input(mv: &RelativeMovement, cmd: NavCommand) -> Vec<f64> {
    let mut a = movement_input(mv).to_vec();
    a.extend(cmd.one_hot());
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub init_seed: u64,
    pub encoder_seed: u64,
    pub feature_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_frames: usize,
    pub planner_hidden: usize,
    pub head_hidden: usize,
    pub embed_dim: usize,
    pub c_max: f64,
    pub traj_offset: f64,
    pub traj_scale: [f64; 2],
    pub n_rays: usize,
    pub r_max: f64,
    pub horizon: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let sensor = SensorConfig::default();
        Self {
            init_seed: 0,
            encoder_seed: 0,
            feature_dim: 128,
            width: 256,
            layers: 4,
            heads: 4,
            max_frames: 8,
            planner_hidden: 256,
            head_hidden: 256,
            embed_dim: 16,
            c_max: 100.0,
            traj_offset: 4.5,
            traj_scale: [1.0, 1.8],
            n_rays: sensor.n_rays,
            r_max: sensor.r_max,
            horizon: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return config_err("model width must be a positive multiple of the head count");
        }
        if self.layers == 0 || self.max_frames == 0 || self.horizon == 0 {
            return config_err("layers, max_frames and horizon must be positive");
        }
        if self.planner_hidden < 2 || self.head_hidden < 2 || self.embed_dim == 0 {
            return config_err("hidden sizes must be at least 2");
        }
        if !(self.c_max > 1.0) {
            return config_err("confidence bound must exceed 1");
        }
        if self.traj_scale.iter().any(|s| !(*s > 0.0)) || !self.traj_offset.is_finite() {
            return config_err("trajectory scale must be positive and offset finite");
        }
        Ok(())
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            feature_dim: self.feature_dim,
            action_dim: ACTION_DIM,
            width: self.width,
            layers: self.layers,
            heads: self.heads,
            max_frames: self.max_frames,
            ffn_mult: 4,
        }
    }

    pub fn planner(&self) -> PlannerConfig {
        PlannerConfig {
            cond_dim: 2 * self.width,
            horizon: self.horizon,
            hidden: self.planner_hidden,
            traj_offset: self.traj_offset,
            traj_scale: self.traj_scale,
        }
    }

    pub fn heads(&self) -> HeadsConfig {
        HeadsConfig {
            cond_dim: 2 * self.width,
            feature_dim: self.feature_dim,
            n_rays: self.n_rays,
            embed_dim: self.embed_dim,
            hidden: self.head_hidden,
            c_max: self.c_max,
        }
    }

    pub fn encoder(&self) -> EncoderSpec {
        EncoderSpec {
            seed: self.encoder_seed,
            n_rays: self.n_rays,
            dim: self.feature_dim,
            r_max: self.r_max,
        }
    }
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainable {
    pub backbone: BackboneWeights,
    pub planner: PlannerWeights,
    pub heads: HeadsWeights,
}

impl Params for Trainable {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.backbone.visit(&format!("{prefix}backbone."), f);
        self.planner.visit(&format!("{prefix}planner."), f);
        self.heads.visit(&format!("{prefix}heads."), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.backbone.visit_mut(&format!("{prefix}backbone."), f);
        self.planner.visit_mut(&format!("{prefix}planner."), f);
        self.heads.visit_mut(&format!("{prefix}heads."), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    pub config: ModelConfig,
    pub encoder: EncoderWeights,
    pub classes: ClassEmbeddingTable,
    pub net: Trainable,
}

/// Checksums of the four weight groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checksums {
    pub encoder: String,
    pub backbone: String,
    pub heads: String,
    pub planner: String,
}

impl WorldModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.init_seed, &[tag::INIT]);
        let net = Trainable {
            backbone: BackboneWeights::new(config.backbone(), &mut r),
            planner: PlannerWeights::new(config.planner(), &mut r),
            heads: HeadsWeights::new(config.heads(), &mut r),
        };
        Ok(Self {
            config,
            encoder: EncoderWeights::new(config.encoder())?,
            classes: ClassEmbeddingTable::new(config.encoder_seed, config.embed_dim),
            net,
        })
    }

    pub fn checksums(&self) -> Checksums {
        Checksums {
            encoder: self.encoder.checksum(),
            backbone: nn::checksum(&self.net.backbone),
            heads: nn::checksum(&self.net.heads),
            planner: nn::checksum(&self.net.planner),
        }
    }

    pub fn param_count(&self) -> usize {
        nn::param_count(&self.net)
    }

    /// Token sequence for the first `frames` positions of a clip.
    pub fn tokens(&self, clip: &TrainingClip, frames: usize) -> Result<TokenSequence> {
        if frames == 0 || frames > clip.frames() {
            return input_err(format!("clip has {} frames, {frames} requested", clip.frames()));
        }
        let features = clip.observations[..frames]
            .iter()
            .map(|o| self.encoder.encode(o).map(|f| f.values))
            .collect::<Result<Vec<_>>>()?;
        let actions = (0..frames)
            .map(|i| action_input(&clip.movements[i], clip.commands[i]))
            .collect();
        Ok(TokenSequence { features, actions })
    }

    /// Backbone outputs at every clip position.
    pub fn represent(&self, clip: &TrainingClip) -> Result<Vec<FutureRepresentation>> {
        self.net.backbone.forward(&self.tokens(clip, clip.frames())?)
    }

    /// Conditioning at the clip's last position.
    pub fn condition(&self, clip: &TrainingClip) -> Result<Vec<f64>> {
        Ok(self.represent(clip)?.last().unwrap().cond())
    }

    /// Deterministic plan from the clip's last frame.
    pub fn plan(&self, clip: &TrainingClip, steps: usize, seed: u64, key: &[u64]) -> Result<Trajectory> {
        let cond = self.condition(clip)?;
        let mut r = rng::stream(seed, key);
        sample_ode(&self.net.planner, &cond, steps, &mut r)
    }
}

/// Consecutive frames of logged driving in the form training consumes.
///
/// For `N` frames: `observations` and `movements` cover the `N` frames
/// plus the following one (the forecasting target), `futures` and
/// `commands` cover the `N` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingClip {
    pub observations: Vec<Observation>,
    pub movements: Vec<RelativeMovement>,
    pub futures: Vec<Trajectory>,
    pub commands: Vec<NavCommand>,
}

impl TrainingClip {
    pub fn frames(&self) -> usize {
        self.futures.len()
    }

    /// Sense the logged frames `first..first + frames` (and the next one).
    pub fn from_scenario(scenario: &Scenario, first: i64, frames: usize) -> Result<Self> {
        let last = first + frames as i64;
        if frames == 0 || first < scenario.first_frame() || last > 1 {
            return input_err(format!(
                "window of {frames} frames from {first} leaves the logged range"
            ));
        }
        let mut observations = Vec::with_capacity(frames + 1);
        let mut movements = Vec::with_capacity(frames + 1);
        for f in first..=last {
            let pose = scenario.ego_pose(f)?;
            observations.push(sense(scenario, &pose, f)?);
            movements.push(scenario.movement(f)?);
        }
        let futures = (first..last)
            .map(|f| scenario.future_from(f))
            .collect::<Result<Vec<_>>>()?;
        let commands = futures.iter().map(NavCommand::from_trajectory).collect();
        Ok(Self {
            observations,
            movements,
            futures,
            commands,
        })
    }

    /// The `frames` frames ending at the current frame 0.
    pub fn latest(scenario: &Scenario, frames: usize) -> Result<Self> {
        Self::from_scenario(scenario, 1 - frames as i64, frames)
    }

    /// Logged future from the last clip frame.
    pub fn target(&self) -> &Trajectory {
        self.futures.last().unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{build_scenario, ScenarioParams};

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 16,
            width: 16,
            layers: 1,
            heads: 2,
            planner_hidden: 16,
            head_hidden: 16,
            embed_dim: 4,
            n_rays: 9,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn commands_follow_lateral_offset() {
        let mk = |y| Trajectory { waypoints: vec![[1.0, 0.0], [20.0, y]] };
        assert_eq!(NavCommand::from_trajectory(&mk(3.0)), NavCommand::Left);
        assert_eq!(NavCommand::from_trajectory(&mk(-3.0)), NavCommand::Right);
        assert_eq!(NavCommand::from_trajectory(&mk(0.5)), NavCommand::Straight);
    }

    #[test]
    fn clip_window_bounds() {
        let params = ScenarioParams::default();
        let s = build_scenario(3, &params).unwrap();
        let clip = TrainingClip::from_scenario(&s, -4, 5).unwrap();
        assert_eq!(clip.frames(), 5);
        assert_eq!(clip.observations.len(), 6);
        assert_eq!(clip.target(), &s.expert_future);
        assert!(TrainingClip::from_scenario(&s, -5, 5).is_err());
        assert!(TrainingClip::from_scenario(&s, -3, 5).is_err());
        let latest = TrainingClip::latest(&s, 4).unwrap();
        assert_eq!(latest.frames(), 4);
    }

    #[test]
    fn plan_is_seeded() {
        let params = ScenarioParams {
            sensor: SensorConfig { n_rays: 9, ..SensorConfig::default() },
            ..ScenarioParams::default()
        };
        let s = build_scenario(4, &params).unwrap();
        let m = WorldModel::new(small_config()).unwrap();
        let clip = TrainingClip::latest(&s, 4).unwrap();
        let a = m.plan(&clip, 8, 1, &[2]).unwrap();
        assert_eq!(a, m.plan(&clip, 8, 1, &[2]).unwrap());
        assert_eq!(a.horizon(), 8);
        assert_ne!(a, m.plan(&clip, 8, 1, &[3]).unwrap());
    }
}
