// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only pre-norm sparse-MoE transformer.
//!
//! Each block computes
//!
//! ```text
//! a_l     = Attention(RMSNorm(h_l))
//! ĥ_l     = h_l + a_l
//! m_l     = MoE(RMSNorm(ĥ_l))          (optionally + shared expert)
//! h_{l+1} = ĥ_l + m_l
//! ```
//!
//! and the forward pass records `h_l`, `a_l`, `m_l` and `h_{l+1}` for every
//! requested layer and position in a [`ResidualTrace`].

mod container;
mod forward;
mod trace;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use container::{load_weights, read_weights, save_weights, write_weights};
pub use forward::{attention_sublayer, moe_sublayer, route, ForwardOutput, Skip};
pub use trace::{LayerTrace, ResidualTrace, TraceSpec};

/// Standard deviation used for every projection matrix at initialization.
pub const INIT_STD: f64 = 0.02;

/// Hyperparameters of the transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub d_ff: usize,
    pub has_shared_expert: bool,
    pub rope_base: f64,
    pub norm_eps: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            n_kv_heads: 2,
            d_head: 8,
            vocab_size: 512,
            n_experts: 4,
            top_k: 2,
            d_ff: 64,
            has_shared_expert: false,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Param(m));
        if self.n_layers < 1 {
            return fail("n_layers must be at least 1".into());
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2".into());
        }
        if self.n_heads == 0 || self.d_head == 0 || self.d_model != self.n_heads * self.d_head {
            return fail(format!(
                "d_model ({}) must equal n_heads ({}) x d_head ({})",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if !self.d_head.is_multiple_of(2) {
            return fail(format!("d_head must be even for rotary encoding, got {}", self.d_head));
        }
        if self.n_kv_heads == 0 || self.n_kv_heads > self.n_heads || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return fail(format!(
                "n_kv_heads ({}) must divide n_heads ({})",
                self.n_kv_heads, self.n_heads
            ));
        }
        if self.top_k < 1 || self.top_k > self.n_experts {
            return fail(format!(
                "top_k ({}) must lie in 1..={} (n_experts)",
                self.top_k, self.n_experts
            ));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if self.rope_base.is_nan() || self.rope_base <= 0.0 || self.norm_eps.is_nan() || self.norm_eps <= 0.0 {
            return fail("rope_base and norm_eps must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    /// Every tensor name with its expected shape, in container order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let q_dim = self.n_heads * self.d_head;
        let kv_dim = self.n_kv_heads * self.d_head;
        let mut out = vec![("embed".to_string(), vec![self.vocab_size, d])];
        for l in 0..self.n_layers {
            let p = format!("layers.{l}");
            out.push((format!("{p}.attn.norm"), vec![d]));
            out.push((format!("{p}.attn.wq"), vec![d, q_dim]));
            out.push((format!("{p}.attn.wk"), vec![d, kv_dim]));
            out.push((format!("{p}.attn.wv"), vec![d, kv_dim]));
            out.push((format!("{p}.attn.wo"), vec![q_dim, d]));
            out.push((format!("{p}.moe.norm"), vec![d]));
            out.push((format!("{p}.moe.router"), vec![d, self.n_experts]));
            for i in 0..self.n_experts {
                out.push((format!("{p}.moe.expert.{i}.gate"), vec![d, self.d_ff]));
                out.push((format!("{p}.moe.expert.{i}.up"), vec![d, self.d_ff]));
                out.push((format!("{p}.moe.expert.{i}.down"), vec![self.d_ff, d]));
            }
            if self.has_shared_expert {
                out.push((format!("{p}.moe.shared.gate"), vec![d, self.d_ff]));
                out.push((format!("{p}.moe.shared.up"), vec![d, self.d_ff]));
                out.push((format!("{p}.moe.shared.down"), vec![self.d_ff, d]));
            }
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("unembed".to_string(), vec![d, self.vocab_size]));
        out
    }
}

/// Gated-linear feed-forward network: `down(silu(gate·x) ⊙ up·x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub gate: Tensor,
    pub up: Tensor,
    pub down: Tensor,
}

/// Parameters of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub moe_norm: Tensor,
    pub router: Tensor,
    pub experts: Vec<Ffn>,
    pub shared: Option<Ffn>,
}

/// All parameter tensors of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub unembed: Tensor,
}

impl Weights {
    /// Deterministic random initialization.
    ///
    /// Norm gains are ones; every other tensor is drawn from `N(0, 0.02²)`
    /// with a ChaCha stream keyed by `(config.seed, tensor name)`, so a
    /// tensor's values do not depend on which other tensors exist.
    pub fn init_random(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut named = BTreeMap::new();
        for (name, shape) in config.tensor_shapes() {
            let n: usize = shape.iter().product();
            let data = if is_gain(&name) {
                vec![1.0f32; n]
            } else {
                let mut rng = ChaCha8Rng::from_seed(tensor_seed(config.seed, &name));
                let normal = Normal::new(0.0, INIT_STD).expect("valid std");
                (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
            };
            named.insert(name, Tensor::new(shape, data)?);
        }
        Self::from_named(config, named)
    }

    /// Assembles weights from a name → tensor map, checking every shape.
    pub fn from_named(config: &ModelConfig, mut named: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected: BTreeMap<String, Vec<usize>> = config.tensor_shapes().into_iter().collect();
        if let Some(extra) = named.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Format(format!("unknown tensor `{extra}`")));
        }
        for (name, shape) in &expected {
            match named.get(name) {
                None => return Err(Error::Format(format!("missing tensor `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Format(format!(
                        "tensor `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        let mut take = |name: String| named.remove(&name).expect("checked above");
        let ffn = |take: &mut dyn FnMut(String) -> Tensor, p: &str| Ffn {
            gate: take(format!("{p}.gate")),
            up: take(format!("{p}.up")),
            down: take(format!("{p}.down")),
        };
        let embed = take("embed".into());
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("layers.{l}");
            let attn_norm = take(format!("{p}.attn.norm"));
            let wq = take(format!("{p}.attn.wq"));
            let wk = take(format!("{p}.attn.wk"));
            let wv = take(format!("{p}.attn.wv"));
            let wo = take(format!("{p}.attn.wo"));
            let moe_norm = take(format!("{p}.moe.norm"));
            let router = take(format!("{p}.moe.router"));
            let experts = (0..config.n_experts)
                .map(|i| ffn(&mut take, &format!("{p}.moe.expert.{i}")))
                .collect();
            let shared = config
                .has_shared_expert
                .then(|| ffn(&mut take, &format!("{p}.moe.shared")));
            layers.push(LayerWeights {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                moe_norm,
                router,
                experts,
                shared,
            });
        }
        let final_norm = take("final_norm".into());
        let unembed = take("unembed".into());
        Ok(Self {
            embed,
            layers,
            final_norm,
            unembed,
        })
    }

    /// `(name, tensor)` pairs in container order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, lw) in self.layers.iter().enumerate() {
            let p = format!("layers.{l}");
            out.push((format!("{p}.attn.norm"), &lw.attn_norm));
            out.push((format!("{p}.attn.wq"), &lw.wq));
            out.push((format!("{p}.attn.wk"), &lw.wk));
            out.push((format!("{p}.attn.wv"), &lw.wv));
            out.push((format!("{p}.attn.wo"), &lw.wo));
            out.push((format!("{p}.moe.norm"), &lw.moe_norm));
            out.push((format!("{p}.moe.router"), &lw.router));
            for (i, e) in lw.experts.iter().enumerate() {
                out.push((format!("{p}.moe.expert.{i}.gate"), &e.gate));
                out.push((format!("{p}.moe.expert.{i}.up"), &e.up));
                out.push((format!("{p}.moe.expert.{i}.down"), &e.down));
            }
            if let Some(s) = &lw.shared {
                out.push((format!("{p}.moe.shared.gate"), &s.gate));
                out.push((format!("{p}.moe.shared.up"), &s.up));
                out.push((format!("{p}.moe.shared.down"), &s.down));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }
}

fn is_gain(name: &str) -> bool {
    name.ends_with("norm")
}

fn tensor_seed(seed: u64, name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.finalize().into()
}

/// A configuration together with matching weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
}

impl Model {
    /// Pairs a config with weights after checking every tensor shape.
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let expected = config.tensor_shapes();
        let actual = weights.named_tensors();
        if expected.len() != actual.len() {
            return Err(Error::Shape(format!(
                "config expects {} tensors, weights hold {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((name, shape), (_, t)) in expected.iter().zip(&actual) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            t.check_finite("weight load")?;
        }
        Ok(Self { config, weights })
    }

    /// Config plus [`Weights::init_random`].
    pub fn random(config: ModelConfig) -> Result<Self> {
        let weights = Weights::init_random(&config)?;
        Self::new(config, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Mutable access for surgery in experiments and tests. Shapes must be
    /// preserved.
    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// Zeroes the output projections of block `layer` (attention `wo`, every
    /// expert `down` and the shared `down`), making the block a no-op.
    pub fn zero_block_outputs(&mut self, layer: usize) -> Result<()> {
        let lw = self
            .weights
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::Param(format!("layer {layer} out of range")))?;
        lw.wo.data_mut().fill(0.0);
        for e in lw.experts.iter_mut().chain(lw.shared.iter_mut()) {
            e.down.data_mut().fill(0.0);
        }
        Ok(())
    }

    /// SHA-256 over the serialized weight container.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        write_weights(self, &mut buf).expect("in-memory write");
        hex::encode(Sha256::digest(&buf))
    }
}
