//! Binary checkpoints: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then every tensor as little-endian `f32` in header
//! order.
//!
//! Parameters and optimiser moments are kept `f32`-representable during
//! training, so the narrowing is lossless and a loaded run resumes exactly.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Trainable, WorldModel};
use crate::nn::{Adam, Params, Tensor};
use crate::planner::PlannerWeights;
use crate::train::{Stage1State, Stage2State, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"DRIVEWM\x01";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: WorldModel,
    pub train: TrainConfig,
    pub stage1: Option<Stage1State>,
    pub stage2: Option<Stage2State>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    encoder_checksum: String,
    stage1_step: Option<u64>,
    stage2_iter: Option<u64>,
    adam1_step: Option<u64>,
    adam2_step: Option<u64>,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

fn ckpt_err<T>(field: &str, reason: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint {
        field: field.to_string(),
        reason: reason.into(),
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Visits every stored tensor in file order.
fn visit_all<'a>(ck: &'a Checkpoint, f: &mut dyn FnMut(String, &'a Tensor)) {
    ck.model.net.visit("", f);
    if let Some(s) = &ck.stage1 {
        s.adam.m.visit("adam1.m.", f);
        s.adam.v.visit("adam1.v.", f);
    }
    if let Some(s) = &ck.stage2 {
        s.adam.m.visit("adam2.m.planner.", f);
        s.adam.v.visit("adam2.v.planner.", f);
    }
}

fn visit_all_mut(ck: &mut Checkpoint, f: &mut dyn FnMut(String, &mut Tensor)) {
    ck.model.net.visit_mut("", f);
    if let Some(s) = &mut ck.stage1 {
        s.adam.m.visit_mut("adam1.m.", f);
        s.adam.v.visit_mut("adam1.v.", f);
    }
    if let Some(s) = &mut ck.stage2 {
        s.adam.m.visit_mut("adam2.m.planner.", f);
        s.adam.v.visit_mut("adam2.v.planner.", f);
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        visit_all(self, &mut |name, t| {
            tensors.push(TensorEntry {
                name,
                shape: t.shape.clone(),
            });
            for v in &t.data {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        });
        let header = Header {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            model: self.model.config,
            train: self.train.clone(),
            encoder_checksum: self.model.encoder.checksum(),
            stage1_step: self.stage1.as_ref().map(|s| s.step),
            stage2_iter: self.stage2.as_ref().map(|s| s.iter),
            adam1_step: self.stage1.as_ref().map(|s| s.adam.step),
            adam2_step: self.stage2.as_ref().map(|s| s.adam.step),
            tensors,
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return ckpt_err("magic", "not a checkpoint file");
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + hlen {
            return ckpt_err("header", "truncated header");
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])
            .or_else(|e| ckpt_err("header", e.to_string()))?;
        if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return ckpt_err(
                "schema_version",
                format!("found {}, expected {CHECKPOINT_SCHEMA_VERSION}", header.schema_version),
            );
        }
        let payload = &bytes[16 + hlen..];
        if hex(&Sha256::digest(payload)) != header.payload_sha256 {
            return ckpt_err("payload", "length or checksum does not match the header");
        }
        let model = WorldModel::new(header.model).or_else(|e| ckpt_err("model", e.to_string()))?;
        if model.encoder.checksum() != header.encoder_checksum {
            return ckpt_err("encoder_checksum", "encoder rebuilt from its seed differs");
        }
        let stage1 = match (header.stage1_step, header.adam1_step) {
            (Some(step), Some(adam_step)) => {
                let mut adam: Adam<Trainable> = Adam::new(&model.net);
                adam.step = adam_step;
                Some(Stage1State { step, adam })
            }
            (None, None) => None,
            _ => return ckpt_err("stage1_step", "step and optimiser state disagree"),
        };
        let stage2 = match (header.stage2_iter, header.adam2_step) {
            (Some(iter), Some(adam_step)) => {
                let mut adam: Adam<PlannerWeights> = Adam::new(&model.net.planner);
                adam.step = adam_step;
                Some(Stage2State { iter, adam })
            }
            (None, None) => None,
            _ => return ckpt_err("stage2_iter", "iteration and optimiser state disagree"),
        };
        let mut ck = Checkpoint {
            model,
            train: header.train,
            stage1,
            stage2,
        };
        let mut entries = header.tensors.iter();
        let mut offset = 0usize;
        let mut failure: Option<Error> = None;
        visit_all_mut(&mut ck, &mut |name, t| {
            if failure.is_some() {
                return;
            }
            match entries.next() {
                Some(e) if e.name == name && e.shape == t.shape => {
                    let n = t.data.len() * 4;
                    if offset + n > payload.len() {
                        failure = Some(Error::Checkpoint { field: name, reason: "payload truncated".into() });
                        return;
                    }
                    for (v, c) in t.data.iter_mut().zip(payload[offset..offset + n].chunks_exact(4)) {
                        *v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
                    }
                    offset += n;
                }
                Some(e) => {
                    failure = Some(Error::Checkpoint {
                        field: e.name.clone(),
                        reason: format!("expected tensor `{name}` with shape {:?}", t.shape),
                    })
                }
                None => {
                    failure = Some(Error::Checkpoint { field: name, reason: "missing from header".into() })
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = entries.next() {
            return ckpt_err(&extra.name, "unexpected tensor");
        }
        if offset != payload.len() {
            return ckpt_err("payload", "trailing bytes");
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
