//! JSON model checkpoints.
//!
//! ```text
//! {
//!   "format": "multfree-checkpoint",
//!   "version": 1,
//!   "architecture": [784, 256, 256, 10],
//!   "seed": 1,
//!   "sampler_word_pos": ["0", "1048576", ...],   // per layer, decimal u128
//!   "layers": [
//!     { "wbar": {"rows": M, "cols": N, "data": [...]},
//!       "bias": {"rows": M, "cols": 1, "data": [...]},
//!       "relu": true,
//!       "bn": { "gamma": .., "beta": .., "eps": 1e-5, "momentum": 0.1,
//!               "running_mean": .., "running_var": .. } | null }
//!   ]
//! }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Block, DenseLayer, Mlp};
use crate::rng::Prng;
use crate::tensor::Matrix;

pub const CHECKPOINT_FORMAT: &str = "multfree-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BnRecord {
    gamma: Matrix,
    beta: Matrix,
    eps: f32,
    momentum: f32,
    running_mean: Matrix,
    running_var: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    wbar: Matrix,
    bias: Matrix,
    relu: bool,
    bn: Option<BnRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    architecture: Vec<usize>,
    seed: u64,
    sampler_word_pos: Vec<String>,
    layers: Vec<LayerRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &Mlp) -> Self {
        let layers = model
            .blocks()
            .iter()
            .map(|b| LayerRecord {
                wbar: b.dense.wbar().clone(),
                bias: b.dense.bias().clone(),
                relu: b.relu,
                bn: b.bn.as_ref().map(|bn| BnRecord {
                    gamma: bn.gamma.clone(),
                    beta: bn.beta.clone(),
                    eps: bn.eps,
                    momentum: bn.momentum,
                    running_mean: bn.running_mean.clone(),
                    running_var: bn.running_var.clone(),
                }),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: model.architecture().to_vec(),
            seed: model.seed(),
            sampler_word_pos: model.samplers().iter().map(|p| p.word_pos().to_string()).collect(),
            layers,
        }
    }

    pub fn into_model(self) -> Result<Mlp> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let mut samplers = Vec::with_capacity(self.layers.len());
        for (i, pos) in self.sampler_word_pos.iter().enumerate() {
            let pos: u128 = pos
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad sampler position {pos:?}")))?;
            let mut p = Prng::for_layer(self.seed, i);
            p.set_word_pos(pos);
            samplers.push(p);
        }
        let blocks = self
            .layers
            .into_iter()
            .map(|l| {
                let dense = DenseLayer::from_parts(l.wbar, l.bias)?;
                let bn = l.bn.map(|r| {
                    let mut bn = BatchNorm::new(r.gamma.rows());
                    bn.gamma = r.gamma;
                    bn.beta = r.beta;
                    bn.eps = r.eps;
                    bn.momentum = r.momentum;
                    bn.running_mean = r.running_mean;
                    bn.running_var = r.running_var;
                    bn
                });
                Ok(Block::new(dense, bn, l.relu))
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Mlp::from_blocks(blocks, self.seed, samplers)?;
        if model.architecture() != self.architecture.as_slice() {
            return Err(Error::Checkpoint(format!(
                "declared architecture {:?} but layers chain as {:?}",
                self.architecture,
                model.architecture()
            )));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
