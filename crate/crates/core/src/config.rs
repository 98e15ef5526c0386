//! Flat, human-editable run configuration covering scenario generation,
//! model shape, both training stages and evaluation.

use crate::error::{config_err, Error, Result};
use crate::model::ModelConfig;
use crate::train::{DepthTarget, TrainConfig};
use crate::world::checks::Thresholds;
use crate::world::{MapTemplate, ScenarioParams, SensorConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Every key of a run. Unknown keys are rejected; missing keys take the
/// defaults shown by `RunConfig::default()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // scenarios
    pub n_rays: usize,
    pub fov_deg: f64,
    pub r_max: f64,
    pub horizon: usize,
    pub history: usize,
    pub frame_dt: f64,
    pub speed_cap: f64,
    pub templates: Vec<String>,
    pub max_retries: usize,
    pub tracking_tolerance: f64,
    pub ttc_horizon: f64,
    pub max_accel: f64,
    pub max_jerk: f64,
    pub min_expert_progress: f64,
    pub train_seed: u64,
    pub train_count: usize,
    pub eval_seed: u64,
    pub eval_count: usize,
    // model
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
    pub traj_offset_x: f64,
    pub traj_scale_x: f64,
    pub traj_scale_y: f64,
    // training
    pub seed: u64,
    pub stage1_steps: u64,
    pub stage2_iters: u64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub batch_size: usize,
    pub stage2_batch: usize,
    pub grad_clip: f64,
    pub stage1_frames: usize,
    pub stage2_frames: usize,
    pub flow_draws: usize,
    pub lambda_c: f64,
    pub depth_target: DepthTarget,
    pub use_img: bool,
    pub use_depth: bool,
    pub use_sem: bool,
    pub group: usize,
    pub gamma: f64,
    pub lambda_il: f64,
    pub noise_level: f64,
    pub sde_steps: usize,
    pub il_states: usize,
    // evaluation
    pub eval_steps: usize,
    pub eval_frames: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sp = ScenarioParams::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            n_rays: sp.sensor.n_rays,
            fov_deg: sp.sensor.fov_deg,
            r_max: sp.sensor.r_max,
            horizon: sp.horizon,
            history: sp.history,
            frame_dt: sp.frame_dt,
            speed_cap: sp.speed_cap,
            templates: sp.templates.iter().map(|t| t.name().to_string()).collect(),
            max_retries: sp.max_retries,
            tracking_tolerance: sp.tracking_tolerance,
            ttc_horizon: sp.thresholds.ttc_horizon,
            max_accel: sp.thresholds.max_accel,
            max_jerk: sp.thresholds.max_jerk,
            min_expert_progress: sp.thresholds.min_expert_progress,
            train_seed: 0,
            train_count: 256,
            eval_seed: 1_000_000,
            eval_count: 64,
            init_seed: m.init_seed,
            encoder_seed: m.encoder_seed,
            feature_dim: m.feature_dim,
            width: m.width,
            layers: m.layers,
            heads: m.heads,
            max_frames: m.max_frames,
            planner_hidden: m.planner_hidden,
            head_hidden: m.head_hidden,
            embed_dim: m.embed_dim,
            c_max: m.c_max,
            traj_offset_x: m.traj_offset,
            traj_scale_x: m.traj_scale[0],
            traj_scale_y: m.traj_scale[1],
            seed: t.seed,
            stage1_steps: t.stage1_steps,
            stage2_iters: t.stage2_iters,
            lr_stage1: t.lr_stage1,
            lr_stage2: t.lr_stage2,
            batch_size: t.batch_size,
            stage2_batch: t.stage2_batch,
            grad_clip: t.grad_clip,
            stage1_frames: t.stage1_frames,
            stage2_frames: t.stage2_frames,
            flow_draws: t.flow_draws,
            lambda_c: t.lambda_c,
            depth_target: t.depth_target,
            use_img: t.use_img,
            use_depth: t.use_depth,
            use_sem: t.use_sem,
            group: t.group,
            gamma: t.gamma,
            lambda_il: t.lambda_il,
            noise_level: t.noise_level,
            sde_steps: t.sde_steps,
            il_states: t.il_states,
            eval_steps: 32,
            eval_frames: 4,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serialises")
    }

    /// Overrides one key from its textual value, parsed as a TOML value
    /// (bare words fall back to strings).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("round trip");
        if !table.contains_key(key) {
            return config_err(format!("unknown configuration key `{key}`"));
        }
        let parsed: toml::Value = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        let next: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario_params()?.validate()?;
        self.model().validate()?;
        self.train().validate()?;
        if self.eval_steps == 0 || self.eval_frames == 0 {
            return config_err("eval_steps and eval_frames must be positive");
        }
        if self.stage1_frames > self.history || self.stage2_frames > self.history || self.eval_frames > self.history {
            return config_err("window lengths cannot exceed the logged history");
        }
        if self.stage1_frames.max(self.stage2_frames).max(self.eval_frames) > self.max_frames {
            return config_err("window lengths cannot exceed max_frames");
        }
        Ok(())
    }

    pub fn scenario_params(&self) -> Result<ScenarioParams> {
        let templates = self
            .templates
            .iter()
            .map(|t| MapTemplate::parse(t).ok_or_else(|| Error::Config(format!("unknown map template `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(ScenarioParams {
            sensor: SensorConfig {
                n_rays: self.n_rays,
                fov_deg: self.fov_deg,
                r_max: self.r_max,
            },
            horizon: self.horizon,
            history: self.history,
            frame_dt: self.frame_dt,
            speed_cap: self.speed_cap,
            templates,
            max_retries: self.max_retries,
            tracking_tolerance: self.tracking_tolerance,
            thresholds: self.thresholds(),
        })
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            ttc_horizon: self.ttc_horizon,
            max_accel: self.max_accel,
            max_jerk: self.max_jerk,
            min_expert_progress: self.min_expert_progress,
            ..Thresholds::default()
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            init_seed: self.init_seed,
            encoder_seed: self.encoder_seed,
            feature_dim: self.feature_dim,
            width: self.width,
            layers: self.layers,
            heads: self.heads,
            max_frames: self.max_frames,
            planner_hidden: self.planner_hidden,
            head_hidden: self.head_hidden,
            embed_dim: self.embed_dim,
            c_max: self.c_max,
            traj_offset: self.traj_offset_x,
            traj_scale: [self.traj_scale_x, self.traj_scale_y],
            n_rays: self.n_rays,
            r_max: self.r_max,
            horizon: self.horizon,
        }
    }

    /// Replaces every model key with the values of `m` (used when a
    /// checkpoint fixes the architecture).
    pub fn set_model(&mut self, m: &ModelConfig) {
        self.init_seed = m.init_seed;
        self.encoder_seed = m.encoder_seed;
        self.feature_dim = m.feature_dim;
        self.width = m.width;
        self.layers = m.layers;
        self.heads = m.heads;
        self.max_frames = m.max_frames;
        self.planner_hidden = m.planner_hidden;
        self.head_hidden = m.head_hidden;
        self.embed_dim = m.embed_dim;
        self.c_max = m.c_max;
        self.traj_offset_x = m.traj_offset;
        self.traj_scale_x = m.traj_scale[0];
        self.traj_scale_y = m.traj_scale[1];
        self.n_rays = m.n_rays;
        self.r_max = m.r_max;
        self.horizon = m.horizon;
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            stage1_steps: self.stage1_steps,
            stage2_iters: self.stage2_iters,
            lr_stage1: self.lr_stage1,
            lr_stage2: self.lr_stage2,
            batch_size: self.batch_size,
            stage2_batch: self.stage2_batch,
            grad_clip: self.grad_clip,
            stage1_frames: self.stage1_frames,
            stage2_frames: self.stage2_frames,
            flow_draws: self.flow_draws,
            lambda_c: self.lambda_c,
            depth_target: self.depth_target,
            use_img: self.use_img,
            use_depth: self.use_depth,
            use_sem: self.use_sem,
            group: self.group,
            gamma: self.gamma,
            lambda_il: self.lambda_il,
            noise_level: self.noise_level,
            sde_steps: self.sde_steps,
            il_states: self.il_states,
        }
    }
}
