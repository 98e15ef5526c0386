//! Auxiliary forecasting heads conditioned on the backbone output and the
//! next controlling movement: next-feature flow, next-scan depth with
//! per-ray confidence, and class-queried semantic features.

use crate::error::{config_err, input_err, Error, Result};
use crate::geometry::RelativeMovement;
use crate::nn::{self, sigmoid, time_embedding, Mlp, MlpCache, Params, Tensor};
use crate::planner::noisy;
use crate::rng::{self, tag, Rng};
use crate::world::{AgentKind, Observation, SemanticClass};
use serde::{Deserialize, Serialize};

/// Divisors bringing `(dx, dy, dyaw)` of one frame to order one.
pub const MOVEMENT_SCALE: [f64; 3] = [10.0, 2.0, 0.2];
const IMG_TIME_DIM: usize = 32;

pub fn movement_input(m: &RelativeMovement) -> [f64; 3] {
    [
        m.dx / MOVEMENT_SCALE[0],
        m.dy / MOVEMENT_SCALE[1],
        m.dyaw / MOVEMENT_SCALE[2],
    ]
}

/// Metric range to canonical units (fraction of sensor range).
pub fn canonical_scale(d: f64, r_max: f64) -> Result<f64> {
    if !(d > 0.0 && d <= r_max) {
        return input_err(format!("range {d} outside (0, {r_max}]"));
    }
    Ok(d / r_max)
}

pub fn canonical_unscale(c: f64, r_max: f64) -> f64 {
    c * r_max
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadsConfig {
    pub cond_dim: usize,
    pub feature_dim: usize,
    pub n_rays: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub c_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthPrediction {
    pub d_hat: Vec<f64>,
    pub c_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticPrediction {
    /// `K x E`, row-major.
    pub h_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTarget {
    pub h: Vec<f64>,
}

/// Fixed unit-norm embeddings standing in for text prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddingTable {
    vehicle: Vec<f64>,
    pedestrian: Vec<f64>,
}

impl ClassEmbeddingTable {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut r = rng::stream(seed, &[tag::CLASS_TABLE]);
        let mut unit = || {
            let v = rng::normal_vec(&mut r, dim);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let vehicle = unit();
        let pedestrian = unit();
        Self { vehicle, pedestrian }
    }

    pub fn dim(&self) -> usize {
        self.vehicle.len()
    }

    pub fn get(&self, kind: AgentKind) -> &[f64] {
        match kind {
            AgentKind::Vehicle => &self.vehicle,
            AgentKind::Pedestrian => &self.pedestrian,
        }
    }

    /// Lookup by semantic class; only agent classes have embeddings.
    pub fn for_class(&self, class: SemanticClass) -> Result<&[f64]> {
        match class {
            SemanticClass::Vehicle => Ok(&self.vehicle),
            SemanticClass::Pedestrian => Ok(&self.pedestrian),
            other => input_err(format!("no embedding for class {other:?}")),
        }
    }

    /// Per-ray target: the class embedding where the ray sees `kind`.
    pub fn target(&self, obs: &Observation, kind: AgentKind) -> SemanticTarget {
        let class = match kind {
            AgentKind::Vehicle => SemanticClass::Vehicle,
            AgentKind::Pedestrian => SemanticClass::Pedestrian,
        };
        let emb = self.get(kind);
        let mut h = Vec::with_capacity(obs.len() * emb.len());
        for &c in &obs.classes {
            if c == class {
                h.extend_from_slice(emb);
            } else {
                h.extend(std::iter::repeat_n(0.0, emb.len()));
            }
        }
        SemanticTarget { h }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadsWeights {
    pub config: HeadsConfig,
    pub img: Mlp,
    pub depth: Mlp,
    pub sem: Mlp,
}

pub struct HeadCache {
    n: usize,
    in_width: usize,
    cond_dim: usize,
    mlp: MlpCache,
}

impl HeadCache {
    /// Slice the conditioning part out of an input gradient.
    fn dcond(&self, din: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * self.cond_dim);
        for r in 0..self.n {
            out.extend_from_slice(&din[r * self.in_width..r * self.in_width + self.cond_dim]);
        }
        out
    }
}

pub struct DepthCache {
    head: HeadCache,
    c_hat: Vec<f64>,
}

impl HeadsWeights {
    pub fn new(config: HeadsConfig, rng: &mut Rng) -> Self {
        let c = config.cond_dim + 3;
        let h = config.hidden;
        let mut out = Self {
            config,
            img: Mlp::new(c + IMG_TIME_DIM + config.feature_dim, h, config.feature_dim, rng),
            depth: Mlp::new(c, h, 2 * config.n_rays, rng),
            sem: Mlp::new(c + config.embed_dim, h, config.n_rays * config.embed_dim, rng),
        };
        nn::round_to_f32(&mut out);
        out
    }

    fn stack(&self, cond: &[f64], mv: &[[f64; 3]], extra: &[&[f64]]) -> (Vec<f64>, usize) {
        let n = mv.len();
        let cd = self.config.cond_dim;
        let extra_w: usize = extra.iter().map(|e| e.len() / n).sum();
        let width = cd + 3 + extra_w;
        let mut x = Vec::with_capacity(n * width);
        for r in 0..n {
            x.extend_from_slice(&cond[r * cd..(r + 1) * cd]);
            x.extend_from_slice(&mv[r]);
            for e in extra {
                let w = e.len() / n;
                x.extend_from_slice(&e[r * w..(r + 1) * w]);
            }
        }
        (x, width)
    }

    fn check_rows(&self, cond: &[f64], mv: &[[f64; 3]]) -> Result<usize> {
        let n = mv.len();
        if n == 0 || cond.len() != n * self.config.cond_dim {
            return input_err("head conditioning shape mismatch");
        }
        Ok(n)
    }

    /// Next-feature flow loss over rows: each row is the coordinate mean of
    /// `|v(cond, mv, t, F^t) - (eps - F)|^2` with `F^t = (1-t) F + t eps`.
    /// Gradients of `weight * sum` accumulate into `grad`.
    #[allow(clippy::too_many_arguments)]
    pub fn img_flow_loss_rows(
        &self,
        cond: &[f64],
        mv: &[[f64; 3]],
        f_next: &[f64],
        t: &[f64],
        eps: &[f64],
        weight: f64,
        grad: &mut HeadsWeights,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.check_rows(cond, mv)?;
        let d = self.config.feature_dim;
        if f_next.len() != n * d || eps.len() != n * d || t.len() != n {
            return input_err("feature flow input shape mismatch");
        }
        if ![cond, f_next, eps, t].iter().all(|v| v.iter().all(|x| x.is_finite())) {
            return Err(Error::Numerical("non-finite feature flow input".into()));
        }
        let mut ft = Vec::with_capacity(n * d);
        let mut temb = Vec::with_capacity(n * IMG_TIME_DIM);
        for r in 0..n {
            ft.extend(noisy(&f_next[r * d..(r + 1) * d], &eps[r * d..(r + 1) * d], t[r])?);
            temb.extend(time_embedding(t[r], IMG_TIME_DIM));
        }
        let (x, width) = self.stack(cond, mv, &[&temb, &ft]);
        let (v, mlp) = self.img.forward(&x, n);
        let mut losses = vec![0.0; n];
        let mut dv = vec![0.0; n * d];
        for r in 0..n {
            for j in r * d..(r + 1) * d {
                let e = v[j] - (eps[j] - f_next[j]);
                losses[r] += e * e / d as f64;
                dv[j] = weight * 2.0 * e / d as f64;
            }
        }
        let cache = HeadCache {
            n,
            in_width: width,
            cond_dim: self.config.cond_dim,
            mlp,
        };
        let din = self.img.backward(&cache.mlp, &dv, &mut grad.img);
        Ok((losses, cache.dcond(&din)))
    }

    pub fn depth_rows(&self, cond: &[f64], mv: &[[f64; 3]]) -> Result<(Vec<DepthPrediction>, DepthCache)> {
        let n = self.check_rows(cond, mv)?;
        let k = self.config.n_rays;
        let cm = self.config.c_max;
        let (x, width) = self.stack(cond, mv, &[]);
        let (y, mlp) = self.depth.forward(&x, n);
        let offset = (cm - 1.0).ln();
        let mut preds = Vec::with_capacity(n);
        let mut all_c = Vec::with_capacity(n * k);
        for r in 0..n {
            let row = &y[r * 2 * k..(r + 1) * 2 * k];
            let c_hat: Vec<f64> = row[k..].iter().map(|&z| cm * sigmoid(z - offset)).collect();
            all_c.extend_from_slice(&c_hat);
            preds.push(DepthPrediction {
                d_hat: row[..k].to_vec(),
                c_hat,
            });
        }
        let cache = DepthCache {
            head: HeadCache {
                n,
                in_width: width,
                cond_dim: self.config.cond_dim,
                mlp,
            },
            c_hat: all_c,
        };
        Ok((preds, cache))
    }

    pub fn depth_head(&self, cond: &[f64], mv: &RelativeMovement) -> Result<DepthPrediction> {
        Ok(self.depth_rows(cond, &[movement_input(mv)])?.0.remove(0))
    }

    /// Backward through the depth head given gradients on `d_hat` and
    /// `c_hat` for every row; returns the conditioning gradient.
    pub fn depth_backward(
        &self,
        cache: &DepthCache,
        dd: &[f64],
        dc: &[f64],
        grad: &mut HeadsWeights,
    ) -> Vec<f64> {
        let k = self.config.n_rays;
        let cm = self.config.c_max;
        let n = cache.head.n;
        let mut dy = vec![0.0; n * 2 * k];
        for r in 0..n {
            for j in 0..k {
                dy[r * 2 * k + j] = dd[r * k + j];
                let c = cache.c_hat[r * k + j];
                dy[r * 2 * k + k + j] = dc[r * k + j] * c * (1.0 - c / cm);
            }
        }
        let din = self.depth.backward(&cache.head.mlp, &dy, &mut grad.depth);
        cache.head.dcond(&din)
    }

    pub fn semantic_rows(
        &self,
        cond: &[f64],
        mv: &[[f64; 3]],
        h_text: &[f64],
    ) -> Result<(Vec<SemanticPrediction>, HeadCache)> {
        let n = self.check_rows(cond, mv)?;
        if h_text.len() != n * self.config.embed_dim {
            return input_err("class embedding shape mismatch");
        }
        let (x, width) = self.stack(cond, mv, &[h_text]);
        let (y, mlp) = self.sem.forward(&x, n);
        let ke = self.config.n_rays * self.config.embed_dim;
        let preds = y
            .chunks_exact(ke)
            .map(|c| SemanticPrediction { h_hat: c.to_vec() })
            .collect();
        Ok((
            preds,
            HeadCache {
                n,
                in_width: width,
                cond_dim: self.config.cond_dim,
                mlp,
            },
        ))
    }

    pub fn semantic_head(
        &self,
        cond: &[f64],
        mv: &RelativeMovement,
        h_text: &[f64],
    ) -> Result<SemanticPrediction> {
        Ok(self.semantic_rows(cond, &[movement_input(mv)], h_text)?.0.remove(0))
    }

    pub fn semantic_backward(&self, cache: &HeadCache, dh: &[f64], grad: &mut HeadsWeights) -> Vec<f64> {
        let din = self.sem.backward(&cache.mlp, dh, &mut grad.sem);
        cache.dcond(&din)
    }
}

impl Params for HeadsWeights {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.img.visit(&format!("{prefix}img"), f);
        self.depth.visit(&format!("{prefix}depth"), f);
        self.sem.visit(&format!("{prefix}sem"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.img.visit_mut(&format!("{prefix}img"), f);
        self.depth.visit_mut(&format!("{prefix}depth"), f);
        self.sem.visit_mut(&format!("{prefix}sem"), f);
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Confidence-weighted L1 depth loss plus L1 matching of first differences
/// along the scan. Returns `(loss, d loss/d d_hat, d loss/d c_hat)`.
pub fn depth_loss(pred: &DepthPrediction, target: &[f64], lambda_c: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if lambda_c <= 0.0 {
        return config_err("confidence weight must be positive");
    }
    let k = target.len();
    if pred.d_hat.len() != k || pred.c_hat.len() != k || k == 0 {
        return input_err("depth prediction and target differ in length");
    }
    let kf = k as f64;
    let mut loss = 0.0;
    let mut dd = vec![0.0; k];
    let mut dc = vec![0.0; k];
    for j in 0..k {
        let e = pred.d_hat[j] - target[j];
        let c = pred.c_hat[j];
        loss += (c * e.abs() - lambda_c * c.ln()) / kf;
        dd[j] += c * sign(e) / kf;
        dc[j] = (e.abs() - lambda_c / c) / kf;
    }
    if k > 1 {
        let m = (k - 1) as f64;
        for j in 0..k - 1 {
            let g = (pred.d_hat[j + 1] - pred.d_hat[j]) - (target[j + 1] - target[j]);
            loss += g.abs() / m;
            let s = sign(g) / m;
            dd[j + 1] += s;
            dd[j] -= s;
        }
    }
    Ok((loss, dd, dc))
}

/// Mean squared error over all `K x E` entries with its gradient.
pub fn semantic_loss(pred: &SemanticPrediction, target: &SemanticTarget) -> Result<(f64, Vec<f64>)> {
    let n = target.h.len();
    if pred.h_hat.len() != n || n == 0 {
        return input_err("semantic prediction and target differ in shape");
    }
    let mut loss = 0.0;
    let mut g = vec![0.0; n];
    for j in 0..n {
        let e = pred.h_hat[j] - target.h[j];
        loss += e * e / n as f64;
        g[j] = 2.0 * e / n as f64;
    }
    Ok((loss, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{numeric_grad, rel_err};
    use crate::nn::{flatten, unflatten, zeros_like};
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn tiny(r: &mut Rng) -> HeadsWeights {
        HeadsWeights::new(
            HeadsConfig {
                cond_dim: 6,
                feature_dim: 8,
                n_rays: 4,
                embed_dim: 4,
                hidden: 8,
                c_max: 100.0,
            },
            r,
        )
    }

    fn perturb(w: &mut HeadsWeights, r: &mut Rng) {
        // break the zero-bias symmetry so bias gradients are non-trivial
        w.visit_mut("", &mut |_, t| t.data.iter_mut().for_each(|v| *v += 0.05 * rng::normal(r)));
    }

    #[test]
    fn canonical_scaling() {
        assert_eq!(canonical_scale(50.0, 50.0).unwrap(), 1.0);
        assert_eq!(canonical_scale(25.0, 50.0).unwrap(), 0.5);
        assert!(canonical_scale(0.0, 50.0).is_err());
        assert!(canonical_scale(50.1, 50.0).is_err());
        for d in [0.01, 3.3, 17.77, 49.999] {
            assert!((canonical_unscale(canonical_scale(d, 50.0).unwrap(), 50.0) - d).abs() < 1e-12);
        }
    }

    #[test]
    fn img_flow_gradients() {
        let mut r = rng::stream(20, &[]);
        let mut w = tiny(&mut r);
        perturb(&mut w, &mut r);
        let cond = rng::normal_vec(&mut r, 6);
        let mv = [[0.3, -0.1, 0.2]];
        let f = rng::normal_vec(&mut r, 8);
        let eps = rng::normal_vec(&mut r, 8);
        let t = [0.42];
        let mut g = zeros_like(&w);
        let (_, dcond) = w.img_flow_loss_rows(&cond, &mv, &f, &t, &eps, 1.0, &mut g).unwrap();
        let loss = |ww: &HeadsWeights, c: &[f64]| {
            ww.img_flow_loss_rows(c, &mv, &f, &t, &eps, 1.0, &mut zeros_like(ww)).unwrap().0[0]
        };
        let num = numeric_grad(&flatten(&w), 1e-6, |p| {
            let mut ww = w.clone();
            unflatten(&mut ww, p);
            loss(&ww, &cond)
        });
        // depth and semantic tensors have zero gradient on both sides
        assert!(rel_err(&flatten(&g), &num) <= 1e-5);
        let numc = numeric_grad(&cond, 1e-6, |c| loss(&w, c));
        assert!(rel_err(&dcond, &numc) <= 1e-5);
        assert!(w
            .img_flow_loss_rows(&cond, &mv, &f, &t, &[f64::NAN; 8], 1.0, &mut g)
            .is_err());
    }

    #[test]
    fn img_flow_zero_when_velocity_matches() {
        // zero the output layer and add the target as bias
        let mut r = rng::stream(21, &[]);
        let mut w = tiny(&mut r);
        let f = rng::normal_vec(&mut r, 8);
        let eps = rng::normal_vec(&mut r, 8);
        let last = w.img.layers.last_mut().unwrap();
        last.w.data.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..8 {
            last.b.data[j] = eps[j] - f[j];
        }
        let cond = rng::normal_vec(&mut r, 6);
        let mut g = zeros_like(&w);
        let (l, _) = w
            .img_flow_loss_rows(&cond, &[[0.0; 3]], &f, &[0.7], &eps, 1.0, &mut g)
            .unwrap();
        assert!(l[0] < 1e-28);
    }

    #[test]
    fn depth_head_range_and_gradients() {
        let mut r = rng::stream(22, &[]);
        let mut w = tiny(&mut r);
        perturb(&mut w, &mut r);
        let cond = rng::normal_vec(&mut r, 6);
        let mv = RelativeMovement { dx: 4.0, dy: 0.1, dyaw: 0.02 };
        let p = w.depth_head(&cond, &mv).unwrap();
        assert_eq!(p.d_hat.len(), 4);
        assert!(p.c_hat.iter().all(|&c| c > 0.0 && c <= 100.0));
        assert_eq!(p, w.depth_head(&cond, &mv).unwrap());
        let target: Vec<f64> = (0..4).map(|j| 0.2 + 0.15 * j as f64).collect();
        let total = |ww: &HeadsWeights, c: &[f64]| {
            let p = ww.depth_head(c, &mv).unwrap();
            depth_loss(&p, &target, 0.1).unwrap().0
        };
        let (preds, cache) = w.depth_rows(&cond, &[movement_input(&mv)]).unwrap();
        let (_, dd, dc) = depth_loss(&preds[0], &target, 0.1).unwrap();
        let mut g = zeros_like(&w);
        let dcond = w.depth_backward(&cache, &dd, &dc, &mut g);
        let num = numeric_grad(&flatten(&w), 1e-6, |q| {
            let mut ww = w.clone();
            unflatten(&mut ww, q);
            total(&ww, &cond)
        });
        assert!(rel_err(&flatten(&g), &num) <= 1e-5);
        assert!(rel_err(&dcond, &numeric_grad(&cond, 1e-6, |c| total(&w, c))) <= 1e-5);
    }

    #[test]
    fn initial_confidence_is_one() {
        let mut r = rng::stream(23, &[]);
        let mut w = tiny(&mut r);
        w.depth.layers[2].w.data.iter_mut().for_each(|v| *v = 0.0);
        let p = w.depth_head(&[0.0; 6], &RelativeMovement::default()).unwrap();
        for c in p.c_hat {
            assert!((c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_loss_identities() {
        let d = vec![0.1, 0.5, 0.4, 0.9];
        let exact = DepthPrediction { d_hat: d.clone(), c_hat: vec![1.0; 4] };
        assert_eq!(depth_loss(&exact, &d, 0.1).unwrap().0, 0.0);
        assert!(depth_loss(&exact, &d, 0.0).is_err());
        // constant offset: only the confidence term remains
        let shifted = DepthPrediction { d_hat: d.iter().map(|v| v + 0.3).collect(), c_hat: vec![2.0; 4] };
        let l = depth_loss(&shifted, &d, 0.1).unwrap().0;
        let expect = 2.0 * 0.3 - 0.1 * 2f64.ln();
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn confidence_optimum() {
        let lambda = 0.1;
        let c_max = 100.0;
        for e in [0.1, 1.0, 10.0, 1e-4] {
            let f = |c: f64| {
                let p = DepthPrediction { d_hat: vec![e; 3], c_hat: vec![c; 3] };
                depth_loss(&p, &[0.0; 3], lambda).unwrap().0
            };
            let (mut lo, mut hi) = (1e-9, c_max);
            let phi = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..200 {
                let a = hi - phi * (hi - lo);
                let b = lo + phi * (hi - lo);
                if f(a) < f(b) {
                    hi = b;
                } else {
                    lo = a;
                }
            }
            let c_star = 0.5 * (lo + hi);
            let expect = (lambda / e).min(c_max);
            assert!((c_star - expect).abs() < 1e-3, "e={e}: {c_star} vs {expect}");
        }
    }

    #[test]
    fn semantic_head_and_loss() {
        let mut r = rng::stream(24, &[]);
        let mut w = tiny(&mut r);
        perturb(&mut w, &mut r);
        let table = ClassEmbeddingTable::new(5, 4);
        assert_ne!(table.get(AgentKind::Vehicle), table.get(AgentKind::Pedestrian));
        assert!(table.for_class(SemanticClass::Boundary).is_err());
        let cond = rng::normal_vec(&mut r, 6);
        let mv = RelativeMovement { dx: 3.0, dy: 0.0, dyaw: 0.0 };
        let pv = w.semantic_head(&cond, &mv, table.get(AgentKind::Vehicle)).unwrap();
        let pp = w.semantic_head(&cond, &mv, table.get(AgentKind::Pedestrian)).unwrap();
        assert_eq!(pv.h_hat.len(), 16);
        assert_ne!(pv, pp);

        let obs = Observation {
            ranges: vec![10.0, 5.0, 7.0, 50.0],
            classes: vec![
                SemanticClass::Vehicle,
                SemanticClass::Pedestrian,
                SemanticClass::Boundary,
                SemanticClass::Free,
            ],
        };
        let target = table.target(&obs, AgentKind::Vehicle);
        assert_eq!(&target.h[..4], table.get(AgentKind::Vehicle));
        assert!(target.h[4..].iter().all(|v| *v == 0.0));
        assert_eq!(semantic_loss(&SemanticPrediction { h_hat: target.h.clone() }, &target).unwrap().0, 0.0);

        let emb = table.get(AgentKind::Vehicle).to_vec();
        let total = |ww: &HeadsWeights, c: &[f64]| {
            let p = ww.semantic_head(c, &mv, &emb).unwrap();
            semantic_loss(&p, &target).unwrap().0
        };
        let (preds, cache) = w.semantic_rows(&cond, &[movement_input(&mv)], &emb).unwrap();
        let (_, dh) = semantic_loss(&preds[0], &target).unwrap();
        let mut g = zeros_like(&w);
        let dcond = w.semantic_backward(&cache, &dh, &mut g);
        let num = numeric_grad(&flatten(&w), 1e-6, |q| {
            let mut ww = w.clone();
            unflatten(&mut ww, q);
            total(&ww, &cond)
        });
        assert!(rel_err(&flatten(&g), &num) <= 1e-5);
        assert!(rel_err(&dcond, &numeric_grad(&cond, 1e-6, |c| total(&w, c))) <= 1e-5);
    }

    proptest! {
        #[test]
        fn semantic_loss_is_mean_square_offset(u in proptest::collection::vec(-2.0f64..2.0, 16)) {
            let target = SemanticTarget { h: vec![0.5; 16] };
            let pred = SemanticPrediction { h_hat: u.iter().map(|v| 0.5 + v).collect() };
            let l = semantic_loss(&pred, &target).unwrap().0;
            let expect = u.iter().map(|v| v * v).sum::<f64>() / 16.0;
            prop_assert!((l - expect).abs() < 1e-12);
        }

        #[test]
        fn confidence_loss_convex_in_c(e in 0.01f64..10.0, c in 0.01f64..99.0) {
            let f = |c: f64| depth_loss(&DepthPrediction { d_hat: vec![e], c_hat: vec![c] }, &[0.0], 0.1).unwrap().0;
            let h = 1e-3;
            prop_assert!(f(c + h) + f(c - h) - 2.0 * f(c) > 0.0);
        }
    }
}
