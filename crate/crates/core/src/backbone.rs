//! Causal transformer over interleaved feature and action tokens.
//!
//! Input order is `[F_1, A_1, F_2, A_2, ...]`; the output at the position of
//! `F_i` is the inferred future feature representation `F_i'` and the output
//! at `A_i` is `A_i'`. Every row only attends to itself and earlier rows.

use crate::error::{input_err, Result};
use crate::nn::{self, gelu, gelu_grad, LayerNorm, LayerNormCache, Linear, Params, Tensor};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub feature_dim: usize,
    pub action_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_frames: usize,
    pub ffn_mult: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            feature_dim: 128,
            action_dim: 6,
            width: 256,
            layers: 4,
            heads: 4,
            max_frames: 8,
            ffn_mult: 4,
        }
    }
}

/// Per-frame tokens before embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub features: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl TokenSequence {
    pub fn frames(&self) -> usize {
        self.features.len()
    }
}

/// Backbone output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FutureRepresentation {
    pub f_prime: Vec<f64>,
    pub da_prime: Vec<f64>,
}

impl FutureRepresentation {
    /// Concatenation `[F', A']` consumed by the heads.
    pub fn cond(&self) -> Vec<f64> {
        let mut c = self.f_prime.clone();
        c.extend_from_slice(&self.da_prime);
        c
    }

    pub fn from_cond(cond: &[f64]) -> Self {
        let w = cond.len() / 2;
        Self {
            f_prime: cond[..w].to_vec(),
            da_prime: cond[w..].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneWeights {
    pub config: BackboneConfig,
    pub feat_in: Linear,
    pub act_in: Linear,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

struct BlockCache {
    ln1: LayerNormCache,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head, row-major `n x n` attention probabilities (lower triangle).
    probs: Vec<Vec<f64>>,
    att: Vec<f64>,
    ln2: LayerNormCache,
    h2: Vec<f64>,
    z: Vec<f64>,
    a: Vec<f64>,
}

pub struct BackboneCache {
    n: usize,
    tokens_f: Vec<f64>,
    tokens_a: Vec<f64>,
    blocks: Vec<BlockCache>,
    ln_f: LayerNormCache,
}

/// Gradients with respect to the raw per-frame inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads {
    pub features: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl BackboneWeights {
    pub fn new(config: BackboneConfig, rng: &mut Rng) -> Self {
        let w = config.width;
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1: LayerNorm::new(w),
                attn: Attention {
                    q: Linear::new(w, w, rng),
                    k: Linear::new(w, w, rng),
                    v: Linear::new(w, w, rng),
                    o: Linear::new(w, w, rng),
                },
                ln2: LayerNorm::new(w),
                ff1: Linear::new(w, config.ffn_mult * w, rng),
                ff2: Linear::new(config.ffn_mult * w, w, rng),
            })
            .collect();
        let mut out = Self {
            config,
            feat_in: Linear::new(config.feature_dim, w, rng),
            act_in: Linear::new(config.action_dim, w, rng),
            pos: Tensor::randn(&[2 * config.max_frames, w], 0.02, rng),
            blocks,
            ln_f: LayerNorm::new(w),
        };
        nn::round_to_f32(&mut out);
        out
    }

    fn check(&self, seq: &TokenSequence) -> Result<usize> {
        let n = seq.frames();
        if n == 0 {
            return input_err("empty token sequence");
        }
        if n > self.config.max_frames {
            return input_err(format!(
                "{n} frames exceeds backbone maximum {}",
                self.config.max_frames
            ));
        }
        if seq.actions.len() != n {
            return input_err("feature and action token counts differ");
        }
        if seq.features.iter().any(|f| f.len() != self.config.feature_dim)
            || seq.actions.iter().any(|a| a.len() != self.config.action_dim)
        {
            return input_err("token width does not match backbone configuration");
        }
        Ok(n)
    }

    pub fn forward(&self, seq: &TokenSequence) -> Result<Vec<FutureRepresentation>> {
        Ok(self.forward_cached(seq)?.0)
    }

    pub fn forward_cached(
        &self,
        seq: &TokenSequence,
    ) -> Result<(Vec<FutureRepresentation>, BackboneCache)> {
        let n = self.check(seq)?;
        let w = self.config.width;
        let rows = 2 * n;
        let tokens_f: Vec<f64> = seq.features.concat();
        let tokens_a: Vec<f64> = seq.actions.concat();
        let ef = self.feat_in.forward(&tokens_f, n);
        let ea = self.act_in.forward(&tokens_a, n);
        let mut x = vec![0.0; rows * w];
        for i in 0..n {
            for j in 0..w {
                x[2 * i * w + j] = ef[i * w + j] + self.pos.data[2 * i * w + j];
                x[(2 * i + 1) * w + j] = ea[i * w + j] + self.pos.data[(2 * i + 1) * w + j];
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (x_next, c) = self.block_forward(block, x, rows);
            caches.push(c);
            x = x_next;
        }
        let (y, ln_f) = self.ln_f.forward(&x, rows);
        let outs = (0..n)
            .map(|i| FutureRepresentation {
                f_prime: y[2 * i * w..(2 * i + 1) * w].to_vec(),
                da_prime: y[(2 * i + 1) * w..(2 * i + 2) * w].to_vec(),
            })
            .collect();
        Ok((
            outs,
            BackboneCache {
                n,
                tokens_f,
                tokens_a,
                blocks: caches,
                ln_f,
            },
        ))
    }

    fn block_forward(&self, b: &Block, x_in: Vec<f64>, rows: usize) -> (Vec<f64>, BlockCache) {
        let w = self.config.width;
        let heads = self.config.heads;
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (h1, ln1) = b.ln1.forward(&x_in, rows);
        let q = b.attn.q.forward(&h1, rows);
        let k = b.attn.k.forward(&h1, rows);
        let v = b.attn.v.forward(&h1, rows);
        let mut att = vec![0.0; rows * w];
        let mut probs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let off = hd * dh;
            let mut p = vec![0.0; rows * rows];
            for i in 0..rows {
                let qi = &q[i * w + off..i * w + off + dh];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &k[j * w + off..j * w + off + dh];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    p[i * rows + j] = s;
                    mx = mx.max(s);
                }
                let mut z = 0.0;
                for j in 0..=i {
                    let e = (p[i * rows + j] - mx).exp();
                    p[i * rows + j] = e;
                    z += e;
                }
                for j in 0..=i {
                    p[i * rows + j] /= z;
                }
                let out = &mut att[i * w + off..i * w + off + dh];
                for j in 0..=i {
                    let pij = p[i * rows + j];
                    let vj = &v[j * w + off..j * w + off + dh];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += pij * vv;
                    }
                }
            }
            probs.push(p);
        }
        let o = b.attn.o.forward(&att, rows);
        let x_mid: Vec<f64> = x_in.iter().zip(&o).map(|(a, b)| a + b).collect();
        let (h2, ln2) = b.ln2.forward(&x_mid, rows);
        let z = b.ff1.forward(&h2, rows);
        let a: Vec<f64> = z.iter().map(|&v| gelu(v)).collect();
        let f = b.ff2.forward(&a, rows);
        let x_out = x_mid.iter().zip(&f).map(|(a, b)| a + b).collect();
        (
            x_out,
            BlockCache {
                ln1,
                h1,
                q,
                k,
                v,
                probs,
                att,
                ln2,
                h2,
                z,
                a,
            },
        )
    }

    fn block_backward(
        &self,
        b: &Block,
        c: &BlockCache,
        dx_out: Vec<f64>,
        rows: usize,
        g: &mut Block,
    ) -> Vec<f64> {
        let w = self.config.width;
        let heads = self.config.heads;
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        // feed-forward branch
        let mut da = b.ff2.backward(&c.a, &dx_out, rows, &mut g.ff2);
        for (d, z) in da.iter_mut().zip(&c.z) {
            *d *= gelu_grad(*z);
        }
        let dh2 = b.ff1.backward(&c.h2, &da, rows, &mut g.ff1);
        let dmid_ln = b.ln2.backward(&c.ln2, &dh2, rows, &mut g.ln2);
        let dx_mid: Vec<f64> = dx_out.iter().zip(&dmid_ln).map(|(a, b)| a + b).collect();
        // attention branch
        let datt = b.attn.o.backward(&c.att, &dx_mid, rows, &mut g.attn.o);
        let mut dq = vec![0.0; rows * w];
        let mut dk = vec![0.0; rows * w];
        let mut dv = vec![0.0; rows * w];
        for hd in 0..heads {
            let off = hd * dh;
            let p = &c.probs[hd];
            for i in 0..rows {
                let dai = &datt[i * w + off..i * w + off + dh];
                let mut dp = vec![0.0; i + 1];
                for j in 0..=i {
                    let vj = &c.v[j * w + off..j * w + off + dh];
                    dp[j] = dai.iter().zip(vj).map(|(a, b)| a * b).sum();
                    let pij = p[i * rows + j];
                    let dvj = &mut dv[j * w + off..j * w + off + dh];
                    for (d, a) in dvj.iter_mut().zip(dai) {
                        *d += pij * a;
                    }
                }
                let dot: f64 = (0..=i).map(|j| p[i * rows + j] * dp[j]).sum();
                for j in 0..=i {
                    let ds = p[i * rows + j] * (dp[j] - dot) * scale;
                    for t in 0..dh {
                        dq[i * w + off + t] += ds * c.k[j * w + off + t];
                        dk[j * w + off + t] += ds * c.q[i * w + off + t];
                    }
                }
            }
        }
        let dh1_q = b.attn.q.backward(&c.h1, &dq, rows, &mut g.attn.q);
        let dh1_k = b.attn.k.backward(&c.h1, &dk, rows, &mut g.attn.k);
        let dh1_v = b.attn.v.backward(&c.h1, &dv, rows, &mut g.attn.v);
        let dh1: Vec<f64> = (0..rows * w).map(|i| dh1_q[i] + dh1_k[i] + dh1_v[i]).collect();
        let dx_ln = b.ln1.backward(&c.ln1, &dh1, rows, &mut g.ln1);
        dx_mid.iter().zip(&dx_ln).map(|(a, b)| a + b).collect()
    }

    /// Exact gradients of `sum <output_grads, forward(seq)>`; parameter
    /// gradients accumulate into `grad`.
    pub fn backward(
        &self,
        cache: &BackboneCache,
        output_grads: &[FutureRepresentation],
        grad: &mut BackboneWeights,
    ) -> Result<InputGrads> {
        let n = cache.n;
        let w = self.config.width;
        if output_grads.len() != n
            || output_grads
                .iter()
                .any(|g| g.f_prime.len() != w || g.da_prime.len() != w)
        {
            return input_err("output gradient shape does not match forward outputs");
        }
        let rows = 2 * n;
        let mut dy = vec![0.0; rows * w];
        for (i, g) in output_grads.iter().enumerate() {
            dy[2 * i * w..(2 * i + 1) * w].copy_from_slice(&g.f_prime);
            dy[(2 * i + 1) * w..(2 * i + 2) * w].copy_from_slice(&g.da_prime);
        }
        let mut dx = self.ln_f.backward(&cache.ln_f, &dy, rows, &mut grad.ln_f);
        for (bi, block) in self.blocks.iter().enumerate().rev() {
            dx = self.block_backward(block, &cache.blocks[bi], dx, rows, &mut grad.blocks[bi]);
        }
        let mut def = vec![0.0; n * w];
        let mut dea = vec![0.0; n * w];
        for i in 0..n {
            for j in 0..w {
                let gf = dx[2 * i * w + j];
                let ga = dx[(2 * i + 1) * w + j];
                def[i * w + j] = gf;
                dea[i * w + j] = ga;
                grad.pos.data[2 * i * w + j] += gf;
                grad.pos.data[(2 * i + 1) * w + j] += ga;
            }
        }
        let dtf = self.feat_in.backward(&cache.tokens_f, &def, n, &mut grad.feat_in);
        let dta = self.act_in.backward(&cache.tokens_a, &dea, n, &mut grad.act_in);
        let fd = self.config.feature_dim;
        let ad = self.config.action_dim;
        Ok(InputGrads {
            features: dtf.chunks_exact(fd).map(|c| c.to_vec()).collect(),
            actions: dta.chunks_exact(ad).map(|c| c.to_vec()).collect(),
        })
    }
}

impl Params for BackboneWeights {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.feat_in.visit(&format!("{prefix}feat_in"), f);
        self.act_in.visit(&format!("{prefix}act_in"), f);
        f(format!("{prefix}pos"), &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("{prefix}block{i}");
            b.ln1.visit(&format!("{p}.ln1"), f);
            b.attn.q.visit(&format!("{p}.q"), f);
            b.attn.k.visit(&format!("{p}.k"), f);
            b.attn.v.visit(&format!("{p}.v"), f);
            b.attn.o.visit(&format!("{p}.o"), f);
            b.ln2.visit(&format!("{p}.ln2"), f);
            b.ff1.visit(&format!("{p}.ff1"), f);
            b.ff2.visit(&format!("{p}.ff2"), f);
        }
        self.ln_f.visit(&format!("{prefix}ln_f"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.feat_in.visit_mut(&format!("{prefix}feat_in"), f);
        self.act_in.visit_mut(&format!("{prefix}act_in"), f);
        f(format!("{prefix}pos"), &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("{prefix}block{i}");
            b.ln1.visit_mut(&format!("{p}.ln1"), f);
            b.attn.q.visit_mut(&format!("{p}.q"), f);
            b.attn.k.visit_mut(&format!("{p}.k"), f);
            b.attn.v.visit_mut(&format!("{p}.v"), f);
            b.attn.o.visit_mut(&format!("{p}.o"), f);
            b.ln2.visit_mut(&format!("{p}.ln2"), f);
            b.ff1.visit_mut(&format!("{p}.ff1"), f);
            b.ff2.visit_mut(&format!("{p}.ff2"), f);
        }
        self.ln_f.visit_mut(&format!("{prefix}ln_f"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{numeric_grad, rel_err};
    use crate::nn::{flatten, unflatten, zeros_like};
    use crate::rng;

    fn small() -> BackboneConfig {
        BackboneConfig {
            feature_dim: 5,
            action_dim: 3,
            width: 16,
            layers: 1,
            heads: 4,
            max_frames: 4,
            ffn_mult: 2,
        }
    }

    fn random_seq(r: &mut Rng, cfg: &BackboneConfig, n: usize) -> TokenSequence {
        TokenSequence {
            features: (0..n).map(|_| rng::normal_vec(r, cfg.feature_dim)).collect(),
            actions: (0..n).map(|_| rng::normal_vec(r, cfg.action_dim)).collect(),
        }
    }

    /// Random linear functional of the outputs, used as a scalar loss.
    fn probe(outs: &[FutureRepresentation], dirs: &[FutureRepresentation]) -> f64 {
        outs.iter()
            .zip(dirs)
            .map(|(o, d)| {
                o.f_prime.iter().zip(&d.f_prime).map(|(a, b)| a * b).sum::<f64>()
                    + o.da_prime.iter().zip(&d.da_prime).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum()
    }

    fn randomize(w: &mut BackboneWeights, r: &mut Rng) {
        // perturb LN gains/biases away from identity so their gradients are exercised
        w.visit_mut("", &mut |name, t| {
            if name.contains("ln") {
                for v in t.data.iter_mut() {
                    *v += 0.3 * rng::normal(r);
                }
            }
        });
    }

    #[test]
    fn single_frame_shape() {
        let mut r = rng::stream(1, &[]);
        let w = BackboneWeights::new(small(), &mut r);
        let out = w.forward(&random_seq(&mut r, &small(), 1)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].f_prime.len(), 16);
        let empty = TokenSequence { features: vec![], actions: vec![] };
        assert!(w.forward(&empty).is_err());
    }

    #[test]
    fn prefix_consistency() {
        let mut r = rng::stream(2, &[]);
        let w = BackboneWeights::new(small(), &mut r);
        let seq = random_seq(&mut r, &small(), 3);
        let prefix = TokenSequence {
            features: seq.features[..2].to_vec(),
            actions: seq.actions[..2].to_vec(),
        };
        let full = w.forward(&seq).unwrap();
        let part = w.forward(&prefix).unwrap();
        assert_eq!(&full[..2], &part[..]);
    }

    #[test]
    fn later_frames_do_not_leak() {
        let mut r = rng::stream(3, &[]);
        let w = BackboneWeights::new(small(), &mut r);
        let seq = random_seq(&mut r, &small(), 4);
        let base = w.forward(&seq).unwrap();
        let mut pert = seq.clone();
        pert.features[2] = rng::normal_vec(&mut r, 5);
        pert.actions[3] = rng::normal_vec(&mut r, 3);
        let out = w.forward(&pert).unwrap();
        assert_eq!(&base[..2], &out[..2]);
        assert_ne!(base[2], out[2]);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut r = rng::stream(4, &[]);
        let mut w = BackboneWeights::new(small(), &mut r);
        randomize(&mut w, &mut r);
        let seq = random_seq(&mut r, &small(), 2);
        let dirs: Vec<FutureRepresentation> = (0..2)
            .map(|_| FutureRepresentation {
                f_prime: rng::normal_vec(&mut r, 16),
                da_prime: rng::normal_vec(&mut r, 16),
            })
            .collect();
        let (_, cache) = w.forward_cached(&seq).unwrap();
        let mut g = zeros_like(&w);
        let ig = w.backward(&cache, &dirs, &mut g).unwrap();
        let p0 = flatten(&w);
        let num = numeric_grad(&p0, 1e-5, |p| {
            let mut ww = w.clone();
            unflatten(&mut ww, p);
            probe(&ww.forward(&seq).unwrap(), &dirs)
        });
        let analytic = flatten(&g);
        assert!(rel_err(&analytic, &num) <= 1e-5, "rel err {}", rel_err(&analytic, &num));

        let f0 = seq.features.concat();
        let numf = numeric_grad(&f0, 1e-5, |f| {
            let mut s = seq.clone();
            s.features = f.chunks(5).map(|c| c.to_vec()).collect();
            probe(&w.forward(&s).unwrap(), &dirs)
        });
        assert!(rel_err(&ig.features.concat(), &numf) <= 1e-5);
    }

    #[test]
    fn zero_output_grads_give_zero_weight_grads() {
        let mut r = rng::stream(5, &[]);
        let w = BackboneWeights::new(small(), &mut r);
        let seq = random_seq(&mut r, &small(), 3);
        let (_, cache) = w.forward_cached(&seq).unwrap();
        let zeros = vec![
            FutureRepresentation { f_prime: vec![0.0; 16], da_prime: vec![0.0; 16] };
            3
        ];
        let mut g = zeros_like(&w);
        w.backward(&cache, &zeros, &mut g).unwrap();
        assert!(flatten(&g).iter().all(|v| *v == 0.0));
        assert!(w.backward(&cache, &zeros[..2], &mut g).is_err());
    }

    #[test]
    fn frame_one_outputs_ignore_frame_two_inputs() {
        let mut r = rng::stream(6, &[]);
        let w = BackboneWeights::new(small(), &mut r);
        let seq = random_seq(&mut r, &small(), 2);
        let (_, cache) = w.forward_cached(&seq).unwrap();
        let grads = vec![
            FutureRepresentation {
                f_prime: rng::normal_vec(&mut r, 16),
                da_prime: rng::normal_vec(&mut r, 16),
            },
            FutureRepresentation { f_prime: vec![0.0; 16], da_prime: vec![0.0; 16] },
        ];
        let mut g = zeros_like(&w);
        let ig = w.backward(&cache, &grads, &mut g).unwrap();
        assert!(ig.features[1].iter().all(|v| *v == 0.0));
        assert!(ig.actions[1].iter().all(|v| *v == 0.0));
    }
}
