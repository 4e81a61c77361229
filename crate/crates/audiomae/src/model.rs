//! The asymmetric masked-autoencoder network and its all-tokens baseline.
//!
//! Two variants share one parameter store and interface:
//! - `MaeAst`: the encoder runs only over unmasked tokens (projection +
//!   sinusoidal position embedding at their original flattened indices);
//!   the decoder reassembles the full-length sequence with one shared
//!   learned embedding standing in at masked slots, re-adds the position
//!   embedding to every slot, and applies two single-layer heads to the
//!   masked-position outputs.
//! - `WithMaskTokens`: no separate encoder; every position (mask embedding
//!   at masked slots) passes through the full block stack. This is the
//!   all-tokens reference the speedup benchmarks compare against.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::MaskPlan;
use crate::nn::init::trunc_normal;
use crate::nn::{
    sinusoidal_pe, transformer_block, BlockNodes, Element, Graph, NnError, NodeId, ParamMap, Tensor,
};
use crate::tokenize::{TokenBatch, D_IN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    MaeAst,
    WithMaskTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d: usize,
    pub heads: usize,
    pub mode: crate::tokenize::TokenizeMode,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 6,
            dec_layers: 2,
            d: 768,
            heads: 12,
            mode: crate::tokenize::TokenizeMode::Patch,
            variant: Variant::MaeAst,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.d % 2 != 0 {
            return Err(ModelError::BadConfig(format!(
                "width d={} must be positive and even",
                self.d
            )));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "width d={} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.variant == Variant::WithMaskTokens && self.enc_layers != 0 {
            return Err(ModelError::BadConfig(format!(
                "the all-tokens variant runs its whole depth in the decoder path; enc_layers must be 0, got {}",
                self.enc_layers
            )));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in construction order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d;
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("input_proj.w".into(), vec![D_IN, d]),
            ("input_proj.b".into(), vec![d]),
            ("mask_embed".into(), vec![1, d]),
        ];
        let block = |prefix: String, out: &mut Vec<(String, Vec<usize>)>| {
            out.push((format!("{prefix}.ln1.g"), vec![d]));
            out.push((format!("{prefix}.ln1.b"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("{prefix}.attn.{w}"), vec![d, d]));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                out.push((format!("{prefix}.attn.{b}"), vec![d]));
            }
            out.push((format!("{prefix}.ln2.g"), vec![d]));
            out.push((format!("{prefix}.ln2.b"), vec![d]));
            out.push((format!("{prefix}.mlp.w1"), vec![d, 4 * d]));
            out.push((format!("{prefix}.mlp.b1"), vec![4 * d]));
            out.push((format!("{prefix}.mlp.w2"), vec![4 * d, d]));
            out.push((format!("{prefix}.mlp.b2"), vec![d]));
        };
        for i in 0..self.enc_layers {
            block(format!("enc.{i:02}"), &mut out);
        }
        for i in 0..self.dec_layers {
            block(format!("dec.{i:02}"), &mut out);
        }
        out.push(("recon_head.w".into(), vec![d, D_IN]));
        out.push(("recon_head.b".into(), vec![D_IN]));
        out.push(("class_head.w".into(), vec![d, D_IN]));
        out.push(("class_head.b".into(), vec![D_IN]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Parameters of the token projection plus encoder blocks only — the
    /// part a fine-tuned classifier keeps.
    pub fn encoder_param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .filter(|(n, _)| n.starts_with("input_proj.") || n.starts_with("enc."))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config: {0}")]
    BadConfig(String),
    #[error("mask plan covers {plan} tokens but the clip has {batch}")]
    PlanMismatch { plan: usize, batch: usize },
    #[error("no unmasked tokens to encode")]
    EmptyUnmasked,
    #[error("no masked positions to predict")]
    EmptyMasked,
    #[error("encoder output has {got} rows but the plan lists {want} unmasked slots")]
    LengthMismatch { got: usize, want: usize },
    #[error("operation requires the {want:?} variant, model is configured as {got:?}")]
    WrongVariant { want: Variant, got: Variant },
    #[error("empty token batch")]
    EmptyClip,
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error("parameter '{name}' has shape {got:?}, expected {want:?}")]
    BadParamShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Graph node ids of one pretraining forward pass. `assembled` (the
/// full-length decoder input) and `enc_out` are exposed so tests can
/// instrument per-layer sequence lengths and the reassembly itself.
#[derive(Debug, Clone, Copy)]
pub struct PretrainNodes {
    pub recon_pred: NodeId,
    pub class_pred: NodeId,
    pub targets: NodeId,
    pub assembled: NodeId,
    pub enc_out: Option<NodeId>,
}

/// Values of one pretraining forward pass, rows ordered by ascending
/// masked index.
#[derive(Debug)]
pub struct PretrainOutput<E: Element> {
    pub recon_pred: Tensor<E>,
    pub class_pred: Tensor<E>,
    pub targets: Tensor<E>,
}

pub struct Model<E: Element> {
    pub cfg: ModelConfig,
    pub params: ParamMap<E>,
}

impl<E: Element> Model<E> {
    /// Fresh parameters: truncated-normal (std 0.02) projections and the
    /// shared mask embedding, unit LayerNorm gains, zero biases. All draws
    /// come from one seeded stream in `param_shapes` order, so equal seeds
    /// give bitwise-equal models.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamMap::new();
        for (name, shape) in cfg.param_shapes() {
            let t = if name.ends_with(".g") {
                Tensor::filled(&shape, E::ONE) // LayerNorm gains
            } else if shape.len() == 1 {
                Tensor::zeros(&shape) // every 1-D parameter is a bias
            } else {
                trunc_normal(&mut rng, &shape, 0.02)
            };
            params.insert(name, Arc::new(t));
        }
        Ok(Model { cfg, params })
    }

    /// Wraps an existing parameter store (e.g. a loaded checkpoint),
    /// verifying that every architectural parameter is present with the
    /// right shape. Extra entries (such as a classifier head) are kept.
    pub fn from_params(cfg: ModelConfig, params: ParamMap<E>) -> Result<Self, ModelError> {
        cfg.validate()?;
        for (name, shape) in cfg.param_shapes() {
            let t = params
                .get(&name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::BadParamShape {
                    name,
                    got: t.shape().to_vec(),
                    want: shape,
                });
            }
        }
        Ok(Model { cfg, params })
    }

    fn param_node(&self, g: &mut Graph<E>, name: &str) -> Result<NodeId, ModelError> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.into()))?;
        Ok(g.param_named(name, Arc::clone(t)))
    }

    fn block_nodes(&self, g: &mut Graph<E>, prefix: &str) -> Result<BlockNodes, ModelError> {
        Ok(BlockNodes {
            ln1_g: self.param_node(g, &format!("{prefix}.ln1.g"))?,
            ln1_b: self.param_node(g, &format!("{prefix}.ln1.b"))?,
            wq: self.param_node(g, &format!("{prefix}.attn.wq"))?,
            bq: self.param_node(g, &format!("{prefix}.attn.bq"))?,
            wk: self.param_node(g, &format!("{prefix}.attn.wk"))?,
            bk: self.param_node(g, &format!("{prefix}.attn.bk"))?,
            wv: self.param_node(g, &format!("{prefix}.attn.wv"))?,
            bv: self.param_node(g, &format!("{prefix}.attn.bv"))?,
            wo: self.param_node(g, &format!("{prefix}.attn.wo"))?,
            bo: self.param_node(g, &format!("{prefix}.attn.bo"))?,
            ln2_g: self.param_node(g, &format!("{prefix}.ln2.g"))?,
            ln2_b: self.param_node(g, &format!("{prefix}.ln2.b"))?,
            w1: self.param_node(g, &format!("{prefix}.mlp.w1"))?,
            b1: self.param_node(g, &format!("{prefix}.mlp.b1"))?,
            w2: self.param_node(g, &format!("{prefix}.mlp.w2"))?,
            b2: self.param_node(g, &format!("{prefix}.mlp.b2"))?,
        })
    }

    fn run_blocks(
        &self,
        g: &mut Graph<E>,
        mut h: NodeId,
        prefix: &str,
        count: usize,
    ) -> Result<NodeId, ModelError> {
        for i in 0..count {
            let nodes = self.block_nodes(g, &format!("{prefix}.{i:02}"))?;
            h = transformer_block(g, h, self.cfg.heads, &nodes)?;
        }
        Ok(h)
    }

    fn check_plan(&self, tb: &TokenBatch, plan: &MaskPlan) -> Result<(), ModelError> {
        if plan.n_tokens() != tb.n_tokens() {
            return Err(ModelError::PlanMismatch {
                plan: plan.n_tokens(),
                batch: tb.n_tokens(),
            });
        }
        if plan.unmasked.is_empty() {
            return Err(ModelError::EmptyUnmasked);
        }
        if plan.masked.is_empty() {
            return Err(ModelError::EmptyMasked);
        }
        Ok(())
    }

    /// Rows `idx` of the clip's tokens as a graph input leaf. Only the
    /// listed rows are ever copied out of the batch, which is what makes
    /// encoder outputs structurally independent of masked content.
    fn token_rows(&self, g: &mut Graph<E>, tb: &TokenBatch, idx: &[usize]) -> NodeId {
        let mut t = Tensor::<E>::zeros(&[idx.len(), D_IN]);
        for (r, &i) in idx.iter().enumerate() {
            for (c, &v) in tb.token(i).iter().enumerate() {
                *t.at_mut(r, c) = E::from_f64(v as f64);
            }
        }
        g.input(t)
    }

    /// Sinusoidal position embedding rows for the given original indices.
    fn pe_rows(&self, g: &mut Graph<E>, n_total: usize, idx: &[usize]) -> NodeId {
        let full = sinusoidal_pe::<E>(n_total, self.cfg.d);
        let mut t = Tensor::<E>::zeros(&[idx.len(), self.cfg.d]);
        for (r, &i) in idx.iter().enumerate() {
            t.row_mut(r).copy_from_slice(full.row(i));
        }
        g.input(t)
    }

    /// Unmasked tokens → projection + position embedding at their original
    /// indices → encoder blocks. Masked token content is never read.
    pub fn encode_nodes(
        &self,
        g: &mut Graph<E>,
        tb: &TokenBatch,
        plan: &MaskPlan,
    ) -> Result<NodeId, ModelError> {
        self.check_plan(tb, plan)?;
        let x = self.token_rows(g, tb, &plan.unmasked);
        let w = self.param_node(g, "input_proj.w")?;
        let b = self.param_node(g, "input_proj.b")?;
        let proj = g.linear(x, w, b)?;
        let pe = self.pe_rows(g, tb.n_tokens(), &plan.unmasked);
        let h = g.add(proj, pe)?;
        self.run_blocks(g, h, "enc", self.cfg.enc_layers)
    }

    /// Reassembles the full-length sequence (encoder outputs at unmasked
    /// slots, the shared learned embedding at masked slots), re-adds the
    /// position embedding to every slot, runs the decoder blocks, and
    /// applies both heads to the masked-position outputs.
    pub fn decode_nodes(
        &self,
        g: &mut Graph<E>,
        enc_out: NodeId,
        tb: &TokenBatch,
        plan: &MaskPlan,
    ) -> Result<PretrainNodes, ModelError> {
        self.check_plan(tb, plan)?;
        let got = g.value(enc_out).dim2().0;
        if got != plan.unmasked.len() {
            return Err(ModelError::LengthMismatch {
                got,
                want: plan.unmasked.len(),
            });
        }
        let embed = self.param_node(g, "mask_embed")?;
        let masked = Arc::new(plan.masked.clone());
        let unmasked = Arc::new(plan.unmasked.clone());
        let assembled = g.assemble(enc_out, embed, Arc::clone(&masked), unmasked)?;
        let pe = g.input(sinusoidal_pe::<E>(tb.n_tokens(), self.cfg.d));
        let h = g.add(assembled, pe)?;
        let h = self.run_blocks(g, h, "dec", self.cfg.dec_layers)?;
        let h_masked = g.gather_rows(h, masked)?;

        let rw = self.param_node(g, "recon_head.w")?;
        let rb = self.param_node(g, "recon_head.b")?;
        let recon_pred = g.linear(h_masked, rw, rb)?;
        let cw = self.param_node(g, "class_head.w")?;
        let cb = self.param_node(g, "class_head.b")?;
        let class_pred = g.linear(h_masked, cw, cb)?;
        let targets = self.token_rows(g, tb, &plan.masked);
        Ok(PretrainNodes {
            recon_pred,
            class_pred,
            targets,
            assembled,
            enc_out: Some(enc_out),
        })
    }

    /// Baseline forward: every position — mask embedding at masked slots,
    /// projected content at unmasked slots — plus position embedding runs
    /// through the full stack; per-layer sequence length is N throughout.
    pub fn forward_with_mask_tokens_nodes(
        &self,
        g: &mut Graph<E>,
        tb: &TokenBatch,
        plan: &MaskPlan,
    ) -> Result<PretrainNodes, ModelError> {
        if self.cfg.variant != Variant::WithMaskTokens {
            return Err(ModelError::WrongVariant {
                want: Variant::WithMaskTokens,
                got: self.cfg.variant,
            });
        }
        self.check_plan(tb, plan)?;
        let x = self.token_rows(g, tb, &plan.unmasked);
        let w = self.param_node(g, "input_proj.w")?;
        let b = self.param_node(g, "input_proj.b")?;
        let proj = g.linear(x, w, b)?;
        let embed = self.param_node(g, "mask_embed")?;
        let masked = Arc::new(plan.masked.clone());
        let unmasked = Arc::new(plan.unmasked.clone());
        let assembled = g.assemble(proj, embed, Arc::clone(&masked), unmasked)?;
        let pe = g.input(sinusoidal_pe::<E>(tb.n_tokens(), self.cfg.d));
        let h = g.add(assembled, pe)?;
        let h = self.run_blocks(g, h, "dec", self.cfg.dec_layers)?;
        let h_masked = g.gather_rows(h, masked)?;

        let rw = self.param_node(g, "recon_head.w")?;
        let rb = self.param_node(g, "recon_head.b")?;
        let recon_pred = g.linear(h_masked, rw, rb)?;
        let cw = self.param_node(g, "class_head.w")?;
        let cb = self.param_node(g, "class_head.b")?;
        let class_pred = g.linear(h_masked, cw, cb)?;
        let targets = self.token_rows(g, tb, &plan.masked);
        Ok(PretrainNodes {
            recon_pred,
            class_pred,
            targets,
            assembled,
            enc_out: None,
        })
    }

    /// Variant-appropriate full pretraining forward pass in one graph.
    pub fn pretrain_nodes(
        &self,
        g: &mut Graph<E>,
        tb: &TokenBatch,
        plan: &MaskPlan,
    ) -> Result<PretrainNodes, ModelError> {
        match self.cfg.variant {
            Variant::MaeAst => {
                let enc = self.encode_nodes(g, tb, plan)?;
                self.decode_nodes(g, enc, tb, plan)
            }
            Variant::WithMaskTokens => self.forward_with_mask_tokens_nodes(g, tb, plan),
        }
    }

    /// All tokens through projection + position embedding + encoder blocks,
    /// mean-pooled into a single `[1 × d]` clip embedding. This is the shared
    /// trunk of every classification pass; the decoder is not touched.
    pub fn pooled_encoding(&self, g: &mut Graph<E>, tb: &TokenBatch) -> Result<NodeId, ModelError> {
        if tb.n_tokens() == 0 {
            return Err(ModelError::EmptyClip);
        }
        let all: Vec<usize> = (0..tb.n_tokens()).collect();
        let x = self.token_rows(g, tb, &all);
        let w = self.param_node(g, "input_proj.w")?;
        let b = self.param_node(g, "input_proj.b")?;
        let proj = g.linear(x, w, b)?;
        let pe = g.input(sinusoidal_pe::<E>(tb.n_tokens(), self.cfg.d));
        let h = g.add(proj, pe)?;
        let h = self.run_blocks(g, h, "enc", self.cfg.enc_layers)?;
        Ok(g.mean_rows(h)?)
    }

    /// Pooled clip embedding through a classifier head: `[1 × n_classes]`.
    pub fn finetune_logits(
        &self,
        g: &mut Graph<E>,
        tb: &TokenBatch,
        head_w: NodeId,
        head_b: NodeId,
    ) -> Result<NodeId, ModelError> {
        let pooled = self.pooled_encoding(g, tb)?;
        Ok(g.linear(pooled, head_w, head_b)?)
    }

    // ---- value-level wrappers ----

    pub fn encode(&self, tb: &TokenBatch, plan: &MaskPlan) -> Result<Tensor<E>, ModelError> {
        let mut g = Graph::new();
        let out = self.encode_nodes(&mut g, tb, plan)?;
        Ok(g.value(out).clone())
    }

    pub fn decode(
        &self,
        enc_out: Tensor<E>,
        tb: &TokenBatch,
        plan: &MaskPlan,
    ) -> Result<PretrainOutput<E>, ModelError> {
        let mut g = Graph::new();
        let enc = g.input(enc_out);
        let nodes = self.decode_nodes(&mut g, enc, tb, plan)?;
        Ok(PretrainOutput {
            recon_pred: g.value(nodes.recon_pred).clone(),
            class_pred: g.value(nodes.class_pred).clone(),
            targets: g.value(nodes.targets).clone(),
        })
    }

    pub fn forward_with_mask_tokens(
        &self,
        tb: &TokenBatch,
        plan: &MaskPlan,
    ) -> Result<PretrainOutput<E>, ModelError> {
        let mut g = Graph::new();
        let nodes = self.forward_with_mask_tokens_nodes(&mut g, tb, plan)?;
        Ok(PretrainOutput {
            recon_pred: g.value(nodes.recon_pred).clone(),
            class_pred: g.value(nodes.class_pred).clone(),
            targets: g.value(nodes.targets).clone(),
        })
    }

    pub fn finetune_forward(
        &self,
        tb: &TokenBatch,
        head_w: &Arc<Tensor<E>>,
        head_b: &Arc<Tensor<E>>,
    ) -> Result<Tensor<E>, ModelError> {
        let mut g = Graph::new();
        let w = g.param(Arc::clone(head_w));
        let b = g.param(Arc::clone(head_b));
        let out = self.finetune_logits(&mut g, tb, w, b)?;
        Ok(g.value(out).clone())
    }
}

/// Forward FLOPs under the standard transformer cost model: per layer over
/// length L, attention ≈ 8Ld² + 4L²d and the MLP ≈ 16Ld². The asymmetric
/// variant runs enc_layers at L=(1−p)·N plus dec_layers at L=N; the
/// all-tokens variant runs its whole depth at L=N. Backward is modeled as
/// 2× forward by callers.
pub fn flops_estimate(cfg: &ModelConfig, n: usize, p: f64) -> f64 {
    let d = cfg.d as f64;
    let per_layer = |l: f64| 24.0 * l * d * d + 4.0 * l * l * d;
    let n = n as f64;
    match cfg.variant {
        Variant::MaeAst => {
            cfg.enc_layers as f64 * per_layer((1.0 - p) * n) + cfg.dec_layers as f64 * per_layer(n)
        }
        Variant::WithMaskTokens => (cfg.enc_layers + cfg.dec_layers) as f64 * per_layer(n),
    }
}
