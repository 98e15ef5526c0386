//! Group-relative policy optimisation over SDE denoising chains.

use crate::error::{config_err, input_err, Result};
use crate::planner::{sample_sde, step_coeffs, step_mean, NoiseSchedule, PlannerWeights, T_MIN};
pub use crate::planner::DenoisingChain;
use crate::rng::{self, Rng};
use crate::world::{reward, rollout_controller, Scenario, Trajectory};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group: usize,
    pub gamma: f64,
    pub lambda_il: f64,
    pub a: f64,
    pub steps: usize,
    pub eps_std: f64,
    /// Chain states per chain used by the imitation term.
    pub il_states: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group: 8,
            gamma: 0.9,
            lambda_il: 1.0,
            a: 0.35,
            steps: 8,
            eps_std: 1e-8,
            il_states: 2,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group < 2 {
            return config_err("group size must be at least 2");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return config_err("discount must lie in (0, 1]");
        }
        if !(self.lambda_il >= 0.0) || !(self.eps_std > 0.0) {
            return config_err("imitation weight must be >= 0 and the std guard > 0");
        }
        self.schedule().validate()
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule {
            a: self.a,
            steps: self.steps,
            ..NoiseSchedule::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRollout {
    pub chains: Vec<DenoisingChain>,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Population-standardised rewards with denominator `max(std, eps_std)`.
///
/// Rewards are first expressed relative to the first entry; this is
/// algebraically a no-op but makes the result exactly invariant to shifts
/// and power-of-two scalings that are themselves exact in floating point.
pub fn advantages(rewards: &[f64], eps_std: f64) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return input_err("advantages need at least two rewards");
    }
    let d: Vec<f64> = rewards.iter().map(|r| r - rewards[0]).collect();
    let mean = d.iter().sum::<f64>() / g as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / g as f64;
    let std = var.sqrt().max(eps_std);
    Ok(d.iter().map(|v| (v - mean) / std).collect())
}

/// Log-density of an isotropic Gaussian with standard deviation `s`.
pub fn step_log_prob(x_next: &[f64], mu: &[f64], s: f64) -> Result<f64> {
    if !(s > 0.0) {
        return input_err(format!("noise scale {s} must be positive"));
    }
    let n = x_next.len() as f64;
    let sq: f64 = x_next.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-sq / (2.0 * s * s) - n * s.ln() - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

fn tile(cond: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(cond.len() * n);
    for _ in 0..n {
        out.extend_from_slice(cond);
    }
    out
}

/// Discounted chain policy loss. Means are recomputed under the current
/// weights with the stored states held fixed; transition `k = 0` consumes
/// the initial noise and carries weight `gamma^0`. Gradients accumulate
/// into `grad`.
pub fn rl_loss(
    w: &PlannerWeights,
    cond: &[f64],
    group: &GroupRollout,
    gamma: f64,
    grad: &mut PlannerWeights,
) -> Result<f64> {
    let g = group.chains.len() as f64;
    let p = w.config.traj_dim();
    // rows for every transition of every chain with a non-zero advantage
    let mut xs = Vec::new();
    let mut ts = Vec::new();
    let mut meta = Vec::new();
    for (ci, chain) in group.chains.iter().enumerate() {
        if group.advantages[ci] == 0.0 {
            continue;
        }
        for k in 0..chain.steps() {
            xs.extend_from_slice(&chain.states[k]);
            ts.push(chain.times[k]);
            meta.push((ci, k));
        }
    }
    if meta.is_empty() {
        return Ok(0.0);
    }
    let (v, cache) = w.velocity_rows(&tile(cond, meta.len()), &xs, &ts);
    let mut loss = 0.0;
    let mut dv = vec![0.0; v.len()];
    for (r, &(ci, k)) in meta.iter().enumerate() {
        let chain = &group.chains[ci];
        let c = step_coeffs(chain.times[k], chain.dt, chain.a)?;
        let x = &chain.states[k];
        let mu = step_mean(x, &v[r * p..(r + 1) * p], &c);
        let next = &chain.states[k + 1];
        let lp = step_log_prob(next, &mu, c.scale)?;
        let coef = -gamma.powi(k as i32) * group.advantages[ci] / (g * chain.steps() as f64);
        loss += coef * lp;
        for j in 0..p {
            let dmu = coef * (next[j] - mu[j]) / (c.scale * c.scale);
            dv[r * p + j] = dmu * c.kv;
        }
    }
    w.velocity_backward(&cache, &dv, grad);
    Ok(loss)
}

/// Imitation regulariser `|v(cond, x_t, t) - (x_t - x0) / t|^2` (coordinate
/// mean) summed over rows, gradients of `weight * sum` into `grad`.
pub fn il_loss_rows(
    w: &PlannerWeights,
    cond: &[f64],
    x0: &[f64],
    xt: &[f64],
    t: &[f64],
    weight: f64,
    grad: &mut PlannerWeights,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = w.config.traj_dim();
    let n = t.len();
    if let Some(bad) = t.iter().find(|&&t| t < T_MIN || t > 1.0) {
        return input_err(format!("imitation time {bad} outside [{T_MIN}, 1]"));
    }
    if x0.len() != p || xt.len() != n * p || cond.len() != w.config.cond_dim {
        return input_err("imitation loss input shapes do not match");
    }
    let (v, cache) = w.velocity_rows(&tile(cond, n), xt, t);
    let mut losses = vec![0.0; n];
    let mut dv = vec![0.0; n * p];
    for r in 0..n {
        for j in 0..p {
            let target = (xt[r * p + j] - x0[j]) / t[r];
            let e = v[r * p + j] - target;
            losses[r] += e * e / p as f64;
            dv[r * p + j] = weight * 2.0 * e / p as f64;
        }
    }
    let dcond_rows = w.velocity_backward(&cache, &dv, grad);
    let cd = w.config.cond_dim;
    let mut dcond = vec![0.0; cd];
    for r in 0..n {
        for j in 0..cd {
            dcond[j] += dcond_rows[r * cd + j];
        }
    }
    Ok((losses, dcond))
}

pub fn il_loss(
    w: &PlannerWeights,
    cond: &[f64],
    x0: &[f64],
    xt: &[f64],
    t: f64,
    grad: &mut PlannerWeights,
) -> Result<(f64, Vec<f64>)> {
    let (l, dc) = il_loss_rows(w, cond, x0, xt, &[t], 1.0, grad)?;
    Ok((l[0], dc))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GrpoLosses {
    pub rl: f64,
    pub il: f64,
    pub total: f64,
}

/// `L_rl + lambda_il * mean(L_il)` where the imitation term is evaluated at
/// `il_states` chain states per chain, drawn from `rng` among the states
/// that start a transition. Only planner gradients are produced.
pub fn grpo_loss(
    group: &GroupRollout,
    w: &PlannerWeights,
    cond: &[f64],
    x0: &[f64],
    cfg: &GrpoConfig,
    rng: &mut Rng,
    grad: &mut PlannerWeights,
) -> Result<GrpoLosses> {
    let rl = rl_loss(w, cond, group, cfg.gamma, grad)?;
    if cfg.lambda_il == 0.0 || cfg.il_states == 0 {
        return Ok(GrpoLosses { rl, il: 0.0, total: rl });
    }
    let mut xt = Vec::new();
    let mut ts = Vec::new();
    for chain in &group.chains {
        for _ in 0..cfg.il_states {
            let k = rng.random_range(0..chain.steps());
            xt.extend_from_slice(&chain.states[k]);
            ts.push(chain.times[k]);
        }
    }
    let n = ts.len() as f64;
    let (ls, _) = il_loss_rows(w, cond, x0, &xt, &ts, cfg.lambda_il / n, grad)?;
    let il = ls.iter().sum::<f64>() / n;
    Ok(GrpoLosses {
        rl,
        il,
        total: rl + cfg.lambda_il * il,
    })
}

/// Scores a planned trajectory. Training sees rewards only through this.
pub trait RewardOracle {
    fn reward(&self, traj: &Trajectory) -> f64;
}

/// Rolls the trajectory through the tracking controller and compares the
/// realised path with the expert.
impl RewardOracle for Scenario {
    fn reward(&self, traj: &Trajectory) -> f64 {
        reward(&rollout_controller(self, traj), &self.expert_future)
    }
}

/// Draws `G` SDE chains (chain `g` seeded from `(seed, key.., g)`) and
/// scores each terminal trajectory with `oracle`.
pub fn group_sample<R: RewardOracle + ?Sized>(
    w: &PlannerWeights,
    cond: &[f64],
    oracle: &R,
    cfg: &GrpoConfig,
    seed: u64,
    key: &[u64],
) -> Result<GroupRollout> {
    cfg.validate()?;
    let sched = cfg.schedule();
    let mut chains = Vec::with_capacity(cfg.group);
    let mut trajectories = Vec::with_capacity(cfg.group);
    let mut rewards = Vec::with_capacity(cfg.group);
    for g in 0..cfg.group {
        let mut tags = key.to_vec();
        tags.push(g as u64);
        let mut r = rng::stream(seed, &tags);
        let chain = sample_sde(w, cond, w.config.traj_dim(), &sched, &mut r)?;
        let traj = w.config.decode(chain.terminal());
        rewards.push(oracle.reward(&traj));
        trajectories.push(traj);
        chains.push(chain);
    }
    let advantages = advantages(&rewards, cfg.eps_std)?;
    Ok(GroupRollout {
        chains,
        trajectories,
        rewards,
        advantages,
    })
}
