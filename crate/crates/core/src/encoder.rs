//! Frozen observation encoder: a fixed random affine projection of the
//! normalised range scan and its one-hot semantics.

use crate::error::{config_err, input_err, Result};
use crate::nn::{Params, Tensor};
use crate::rng::{self, tag};
use crate::world::{Observation, NUM_CLASSES};
use serde::{Deserialize, Serialize};

/// Encoded observation `F_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureToken {
    pub values: Vec<f64>,
}

/// Immutable after construction; nothing in the crate exposes a mutable
/// handle to the projection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    seed: u64,
    n_rays: usize,
    dim: usize,
    r_max: f64,
    /// `[dim, n_rays * (1 + C)]`, rows of unit norm.
    proj: Tensor,
    bias: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub seed: u64,
    pub n_rays: usize,
    pub dim: usize,
    pub r_max: f64,
}

impl EncoderWeights {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        if spec.dim < 8 {
            return config_err("encoder dimension must be at least 8");
        }
        let d_in = spec.n_rays * (1 + NUM_CLASSES);
        let mut r = rng::stream(spec.seed, &[tag::ENCODER]);
        let mut proj = Tensor::randn(&[spec.dim, d_in], 1.0, &mut r);
        for row in proj.data.chunks_exact_mut(d_in) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let bias = Tensor::randn(&[spec.dim], 0.1, &mut r);
        Ok(Self {
            seed: spec.seed,
            n_rays: spec.n_rays,
            dim: spec.dim,
            r_max: spec.r_max,
            proj,
            bias,
        })
    }

    pub fn spec(&self) -> EncoderSpec {
        EncoderSpec {
            seed: self.seed,
            n_rays: self.n_rays,
            dim: self.dim,
            r_max: self.r_max,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input_dim(&self) -> usize {
        self.n_rays * (1 + NUM_CLASSES)
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias.data
    }

    /// Flattened encoder input: ranges over `r_max`, then the one-hot matrix.
    pub fn input_vector(&self, obs: &Observation) -> Result<Vec<f64>> {
        if obs.len() != self.n_rays || obs.classes.len() != self.n_rays {
            return input_err(format!(
                "observation has {} rays, encoder expects {}",
                obs.len(),
                self.n_rays
            ));
        }
        let mut x: Vec<f64> = obs.ranges.iter().map(|r| r / self.r_max).collect();
        x.extend(obs.one_hot());
        Ok(x)
    }

    /// Affine map applied to an already flattened input.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d_in = self.input_dim();
        if x.len() != d_in {
            return input_err(format!("encoder input has {} values, expects {d_in}", x.len()));
        }
        Ok(self
            .proj
            .data
            .chunks_exact(d_in)
            .zip(&self.bias.data)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect())
    }

    pub fn encode(&self, obs: &Observation) -> Result<FeatureToken> {
        Ok(FeatureToken {
            values: self.project(&self.input_vector(obs)?)?,
        })
    }

    pub fn checksum(&self) -> String {
        crate::nn::checksum(self)
    }
}

/// Read-only parameter view (for checksums); the mutable visitor is a no-op
/// so optimisers cannot touch the projection.
impl Params for EncoderWeights {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}proj"), &self.proj);
        f(format!("{prefix}bias"), &self.bias);
    }
    fn visit_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Tensor)) {}
}
