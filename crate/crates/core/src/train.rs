//! Two-stage optimisation: joint world-model pretraining with the planner
//! and the three forecasting losses, then planner-only group-relative
//! policy optimisation against rollout rewards.
//!
//! All randomness is drawn from streams keyed by `(seed, stage, step, slot)`
//! and per-sample gradients are reduced in batch order, so results depend
//! on neither the worker count nor whether a run was resumed.

use crate::backbone::FutureRepresentation;
use crate::error::{config_err, input_err, Error, Result};
use crate::grpo::{grpo_loss, group_sample, GrpoConfig, RewardOracle};
use crate::heads::{canonical_scale, depth_loss, movement_input, semantic_loss};
use crate::model::{Trainable, TrainingClip, WorldModel};
use crate::nn::{add_scaled, zeros_like, Adam};
use crate::planner::{PlannerWeights, T_MIN};
use crate::rng::{self, tag};
use crate::world::AgentKind;
use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Which scan supervises the depth head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthTarget {
    /// The scan of the next frame (the forecasting setting).
    Future,
    /// The scan of the current frame.
    Present,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
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
    /// Noise/time draws per position for the trajectory loss.
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
}

impl Default for TrainConfig {
    fn default() -> Self {
        let g = GrpoConfig::default();
        Self {
            seed: 0,
            stage1_steps: 20_000,
            stage2_iters: 500,
            lr_stage1: 3e-4,
            lr_stage2: 1e-5,
            batch_size: 16,
            stage2_batch: 8,
            grad_clip: 1.0,
            stage1_frames: 5,
            stage2_frames: 4,
            flow_draws: 1,
            lambda_c: 0.1,
            depth_target: DepthTarget::Future,
            use_img: true,
            use_depth: true,
            use_sem: true,
            group: g.group,
            gamma: g.gamma,
            lambda_il: g.lambda_il,
            noise_level: g.a,
            sde_steps: g.steps,
            il_states: g.il_states,
        }
    }
}

impl TrainConfig {
    pub fn grpo(&self) -> GrpoConfig {
        GrpoConfig {
            group: self.group,
            gamma: self.gamma,
            lambda_il: self.lambda_il,
            a: self.noise_level,
            steps: self.sde_steps,
            eps_std: 1e-8,
            il_states: self.il_states,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.stage2_batch == 0 {
            return config_err("batch sizes must be positive");
        }
        if self.stage1_frames == 0 || self.stage2_frames == 0 || self.flow_draws == 0 {
            return config_err("window lengths and flow draws must be positive");
        }
        if !(self.lr_stage1 > 0.0 && self.lr_stage2 > 0.0) {
            return config_err("learning rates must be positive");
        }
        if !(self.lambda_c > 0.0) {
            return config_err("confidence weight must be positive");
        }
        if !(self.grad_clip >= 0.0) {
            return config_err("gradient clip must be non-negative");
        }
        self.grpo().validate()
    }
}

/// Per-term stage-1 losses, each a mean over frame positions in the batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stage1Losses {
    pub traj: f64,
    pub img: f64,
    pub depth: f64,
    pub sem: f64,
    pub total: f64,
}

impl Stage1Losses {
    fn add(&mut self, o: &Stage1Losses) {
        self.traj += o.traj;
        self.img += o.img;
        self.depth += o.depth;
        self.sem += o.sem;
    }

    fn finish(mut self) -> Self {
        self.total = self.traj + self.img + self.depth + self.sem;
        self
    }

    pub fn csv_header() -> &'static str {
        "step,loss_traj,loss_img,loss_d,loss_s,total"
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{}",
            self.traj, self.img, self.depth, self.sem, self.total
        )
    }
}

/// Losses of one clip scaled by `scale`, with gradients of the scaled sum.
fn clip_grads(
    model: &WorldModel,
    clip: &TrainingClip,
    cfg: &TrainConfig,
    scale: f64,
    key: &[u64],
) -> Result<(Stage1Losses, Trainable)> {
    let n = cfg.stage1_frames;
    if clip.frames() < n {
        return input_err(format!("clip has {} frames, window needs {n}", clip.frames()));
    }
    let net = &model.net;
    let seq = model.tokens(clip, n)?;
    let (reps, cache) = net.backbone.forward_cached(&seq)?;
    let cd = 2 * model.config.width;
    let cond: Vec<f64> = reps.iter().flat_map(|r| r.cond()).collect();
    let mut grads = zeros_like(net);
    let mut dcond = vec![0.0; n * cd];
    let mut add_dcond = |d: &[f64]| dcond.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    let mut r = rng::stream(cfg.seed, key);
    let mut out = Stage1Losses::default();

    let pcfg = &net.planner.config;
    // `flow_draws` independent (noise, time) pairs per position, averaged.
    let draws = cfg.flow_draws;
    let x0: Vec<f64> = clip.futures[..n].iter().flat_map(|f| pcfg.encode(f)).collect::<Vec<_>>().repeat(draws);
    let x1 = rng::normal_vec(&mut r, x0.len());
    let t: Vec<f64> = (0..n * draws).map(|_| r.random_range(T_MIN..=1.0)).collect();
    let ws = scale / draws as f64;
    let (lt, dc) = net.planner.traj_loss_rows(&cond.repeat(draws), &x0, &x1, &t, ws, &mut grads.planner)?;
    for d in dc.chunks_exact(n * cd) {
        add_dcond(d);
    }
    out.traj = ws * lt.iter().sum::<f64>();

    let mv: Vec<[f64; 3]> = (1..=n).map(|i| movement_input(&clip.movements[i])).collect();
    let next_obs = &clip.observations[1..=n];

    if cfg.use_img {
        let f_next = next_obs
            .iter()
            .map(|o| model.encoder.encode(o).map(|f| f.values))
            .collect::<Result<Vec<_>>>()?
            .concat();
        let eps = rng::normal_vec(&mut r, f_next.len());
        let ti: Vec<f64> = (0..n).map(|_| r.random_range(T_MIN..=1.0)).collect();
        let (li, dc) = net
            .heads
            .img_flow_loss_rows(&cond, &mv, &f_next, &ti, &eps, scale, &mut grads.heads)?;
        add_dcond(&dc);
        out.img = scale * li.iter().sum::<f64>();
    }

    if cfg.use_depth {
        let (preds, dcache) = net.heads.depth_rows(&cond, &mv)?;
        let r_max = model.config.r_max;
        let mut dd = Vec::with_capacity(n * model.config.n_rays);
        let mut dcf = Vec::with_capacity(n * model.config.n_rays);
        for (i, p) in preds.iter().enumerate() {
            let obs = match cfg.depth_target {
                DepthTarget::Future => &clip.observations[i + 1],
                DepthTarget::Present => &clip.observations[i],
            };
            let target = obs
                .ranges
                .iter()
                .map(|&d| canonical_scale(d, r_max))
                .collect::<Result<Vec<_>>>()?;
            let (l, gd, gc) = depth_loss(p, &target, cfg.lambda_c)?;
            out.depth += scale * l;
            dd.extend(gd.into_iter().map(|g| g * scale));
            dcf.extend(gc.into_iter().map(|g| g * scale));
        }
        add_dcond(&net.heads.depth_backward(&dcache, &dd, &dcf, &mut grads.heads));
    }

    if cfg.use_sem {
        let kinds = [AgentKind::Vehicle, AgentKind::Pedestrian];
        let per_class = scale / kinds.len() as f64;
        for kind in kinds {
            let emb = model.classes.get(kind);
            let h_text: Vec<f64> = (0..n).flat_map(|_| emb.iter().copied()).collect();
            let (preds, scache) = net.heads.semantic_rows(&cond, &mv, &h_text)?;
            let mut dh = Vec::new();
            for (p, obs) in preds.iter().zip(next_obs) {
                let (l, g) = semantic_loss(p, &model.classes.target(obs, kind))?;
                out.sem += per_class * l;
                dh.extend(g.into_iter().map(|v| v * per_class));
            }
            add_dcond(&net.heads.semantic_backward(&scache, &dh, &mut grads.heads));
        }
    }

    let w = model.config.width;
    let out_grads: Vec<FutureRepresentation> = dcond
        .chunks_exact(cd)
        .map(|c| FutureRepresentation {
            f_prime: c[..w].to_vec(),
            da_prime: c[w..].to_vec(),
        })
        .collect();
    net.backbone.backward(&cache, &out_grads, &mut grads.backbone)?;
    Ok((out.finish(), grads))
}

/// Losses and summed gradients of a batch, reduced in batch order.
pub fn stage1_grads(
    model: &WorldModel,
    batch: &[&TrainingClip],
    cfg: &TrainConfig,
    step: u64,
) -> Result<(Stage1Losses, Trainable)> {
    if batch.is_empty() {
        return input_err("empty batch");
    }
    let scale = 1.0 / (batch.len() * cfg.stage1_frames) as f64;
    let parts = batch
        .par_iter()
        .enumerate()
        .map(|(slot, clip)| clip_grads(model, clip, cfg, scale, &[tag::STAGE1, step, slot as u64]))
        .collect::<Result<Vec<_>>>()?;
    let mut losses = Stage1Losses::default();
    let mut grads = zeros_like(&model.net);
    for (l, g) in &parts {
        losses.add(l);
        add_scaled(&mut grads, g, 1.0);
    }
    Ok((losses.finish(), grads))
}

/// One Adam update of every trainable tensor on the unit-weighted loss sum.
pub fn stage1_step(
    model: &mut WorldModel,
    adam: &mut Adam<Trainable>,
    batch: &[&TrainingClip],
    cfg: &TrainConfig,
    step: u64,
) -> Result<Stage1Losses> {
    let (losses, grads) = stage1_grads(model, batch, cfg, step)?;
    if !losses.total.is_finite() || !crate::nn::is_finite(&grads) {
        return Err(Error::Numerical(format!("non-finite stage-1 loss at step {step}")));
    }
    adam.update(&mut model.net, &grads, cfg.lr_stage1, cfg.grad_clip);
    Ok(losses)
}

/// Batch indices for `step`, drawn without replacement.
pub fn batch_indices(seed: u64, stream: u64, step: u64, pool: usize, size: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, &[tag::BATCH, stream, step]);
    if size >= pool {
        return (0..pool).collect();
    }
    let mut idx = sample(&mut r, pool, size).into_vec();
    idx.sort_unstable();
    idx
}

/// Optimiser state of a stage-1 run.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1State {
    pub step: u64,
    pub adam: Adam<Trainable>,
}

impl Stage1State {
    pub fn new(model: &WorldModel) -> Self {
        Self {
            step: 0,
            adam: Adam::new(&model.net),
        }
    }
}

/// Runs stage-1 steps until `state.step == until`, calling `log` after each.
pub fn train_stage1(
    model: &mut WorldModel,
    state: &mut Stage1State,
    clips: &[TrainingClip],
    cfg: &TrainConfig,
    until: u64,
    mut log: impl FnMut(u64, &Stage1Losses),
) -> Result<()> {
    cfg.validate()?;
    if clips.is_empty() {
        return input_err("no training clips");
    }
    while state.step < until {
        let idx = batch_indices(cfg.seed, tag::STAGE1, state.step, clips.len(), cfg.batch_size);
        let batch: Vec<&TrainingClip> = idx.iter().map(|&i| &clips[i]).collect();
        let losses = stage1_step(model, &mut state.adam, &batch, cfg, state.step)?;
        state.step += 1;
        log(state.step, &losses);
    }
    Ok(())
}

/// Frozen-backbone inputs of one stage-2 scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Item {
    /// Stable identifier used to key the item's random streams.
    pub id: u64,
    pub cond: Vec<f64>,
    /// Expert trajectory in planner space.
    pub x0: Vec<f64>,
}

impl Stage2Item {
    pub fn new(model: &WorldModel, id: u64, clip: &TrainingClip) -> Result<Self> {
        Ok(Self {
            id,
            cond: model.condition(clip)?,
            x0: model.net.planner.config.encode(clip.target()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stage2Stats {
    pub mean_reward: f64,
    pub reward_std: f64,
    pub rl_loss: f64,
    pub il_loss: f64,
}

impl Stage2Stats {
    pub fn csv_header() -> &'static str {
        "iter,mean_reward,reward_std,rl_loss,il_loss"
    }

    pub fn csv_row(&self, iter: u64) -> String {
        format!(
            "{iter},{},{},{},{}",
            self.mean_reward, self.reward_std, self.rl_loss, self.il_loss
        )
    }
}

/// One planner update from group rollouts on a batch of scenarios. The
/// backbone, encoder and heads are not touched.
pub fn stage2_step<R: RewardOracle + Sync>(
    planner: &mut PlannerWeights,
    adam: &mut Adam<PlannerWeights>,
    batch: &[(&Stage2Item, &R)],
    cfg: &TrainConfig,
    iter: u64,
) -> Result<Stage2Stats> {
    if batch.is_empty() {
        return input_err("empty batch");
    }
    let gcfg = cfg.grpo();
    let frozen: &PlannerWeights = planner;
    let parts = batch
        .par_iter()
        .map(|(item, oracle)| {
            let group = group_sample(frozen, &item.cond, *oracle, &gcfg, cfg.seed, &[tag::STAGE2, iter, item.id])?;
            let mut grad = zeros_like(frozen);
            let mut r = rng::stream(cfg.seed, &[tag::IL_SUBSET, iter, item.id]);
            let l = grpo_loss(&group, frozen, &item.cond, &item.x0, &gcfg, &mut r, &mut grad)?;
            Ok((group.rewards, l, grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let b = batch.len() as f64;
    let mut grads = zeros_like(frozen);
    let mut rewards = Vec::new();
    let mut stats = Stage2Stats::default();
    for (rw, l, g) in &parts {
        add_scaled(&mut grads, g, 1.0 / b);
        rewards.extend_from_slice(rw);
        stats.rl_loss += l.rl / b;
        stats.il_loss += l.il / b;
    }
    let n = rewards.len() as f64;
    stats.mean_reward = rewards.iter().sum::<f64>() / n;
    stats.reward_std = (rewards.iter().map(|r| (r - stats.mean_reward).powi(2)).sum::<f64>() / n).sqrt();
    if !(stats.rl_loss.is_finite() && stats.il_loss.is_finite()) || !crate::nn::is_finite(&grads) {
        return Err(Error::Numerical(format!("non-finite stage-2 loss at iteration {iter}")));
    }
    adam.update(planner, &grads, cfg.lr_stage2, cfg.grad_clip);
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2State {
    pub iter: u64,
    pub adam: Adam<PlannerWeights>,
}

impl Stage2State {
    pub fn new(model: &WorldModel) -> Self {
        Self {
            iter: 0,
            adam: Adam::new(&model.net.planner),
        }
    }
}

/// Runs stage-2 iterations until `state.iter == until`.
pub fn train_stage2<R: RewardOracle + Sync>(
    model: &mut WorldModel,
    state: &mut Stage2State,
    items: &[Stage2Item],
    oracles: &[R],
    cfg: &TrainConfig,
    until: u64,
    mut log: impl FnMut(u64, &Stage2Stats),
) -> Result<()> {
    cfg.validate()?;
    if items.is_empty() || items.len() != oracles.len() {
        return input_err("stage-2 items and reward oracles must be non-empty and aligned");
    }
    while state.iter < until {
        let idx = batch_indices(cfg.seed, tag::STAGE2, state.iter, items.len(), cfg.stage2_batch);
        let batch: Vec<(&Stage2Item, &R)> = idx.iter().map(|&i| (&items[i], &oracles[i])).collect();
        let stats = stage2_step(&mut model.net.planner, &mut state.adam, &batch, cfg, state.iter)?;
        state.iter += 1;
        log(state.iter, &stats);
    }
    Ok(())
}
