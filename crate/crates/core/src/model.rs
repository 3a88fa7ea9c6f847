//! LLaMA-style decoder with an MoE block in place of every feed-forward layer.
//!
//! Pre-norm residual blocks: rmsnorm → rotary multi-head causal attention →
//! residual add → rmsnorm → MoE → residual add. Output projection is untied
//! from the embedding table.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::moe::{moe_forward, ExpertBank, ExpertParams};
use crate::numerics::{ParamBindings, Scalar, Tape, Tensor, Var, RMS_EPS};
use crate::router::{RouterDecision, RouterParams, RoutingPolicy};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub context: usize,
    pub experts: usize,
    pub policy: RoutingPolicy,
    pub ffn_dim: usize,
    pub init_std: f64,
}

impl ModelConfig {
    /// Desk-scale default: 4 layers, d=128, 4×32 heads, byte vocabulary,
    /// 8 experts routed top-p at 0.4.
    pub fn micro() -> Self {
        ModelConfig {
            layers: 4,
            hidden: 128,
            heads: 4,
            head_dim: 32,
            vocab: 256,
            context: 256,
            experts: 8,
            policy: RoutingPolicy::TopP { threshold: 0.4 },
            ffn_dim: 256,
            init_std: 0.006,
        }
    }

    /// Full-size configuration (24 layers, d=1024, 16 experts).
    pub fn full_scale() -> Self {
        ModelConfig {
            layers: 24,
            hidden: 1024,
            heads: 16,
            head_dim: 64,
            vocab: 32_000,
            context: 2048,
            experts: 16,
            policy: RoutingPolicy::TopP { threshold: 0.4 },
            ffn_dim: 2816,
            init_std: 0.006,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden_dim", self.hidden),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab),
            ("context_length", self.context),
            ("experts", self.experts),
            ("ffn_dim", self.ffn_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.heads * self.head_dim != self.hidden {
            return Err(Error::config(
                "heads",
                format!(
                    "heads ({}) x head_dim ({}) must equal hidden_dim ({})",
                    self.heads, self.head_dim, self.hidden
                ),
            ));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::config(
                "head_dim",
                "must be even for rotary embeddings",
            ));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config(
                "init_std",
                "must be a positive finite number",
            ));
        }
        self.policy.validate(self.experts)
    }
}

#[derive(Clone, Debug)]
pub struct Block<F> {
    pub attn_norm: Tensor<F>,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub ffn_norm: Tensor<F>,
    pub router: RouterParams<F>,
    pub experts: ExpertBank<F>,
}

#[derive(Clone, Debug)]
pub struct ModelState<F> {
    pub config: ModelConfig,
    pub embedding: Tensor<F>,
    pub blocks: Vec<Block<F>>,
    pub final_norm: Tensor<F>,
    pub output: Tensor<F>,
}

/// Which parameters belong to experts, for activated-parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Shared,
    Expert { layer: usize, expert: usize },
}

pub fn init_model<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelState<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal =
        Normal::new(0.0, cfg.init_std).map_err(|e| Error::config("init_std", e.to_string()))?;
    let mut draw =
        |shape: &[usize]| Tensor::from_fn(shape, |_| F::from_f64(normal.sample(&mut rng)));
    let d = cfg.hidden;
    let embedding = draw(&[cfg.vocab, d]);
    let mut blocks = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let wq = draw(&[d, d]);
        let wk = draw(&[d, d]);
        let wv = draw(&[d, d]);
        let wo = draw(&[d, d]);
        let router = RouterParams::new(draw(&[cfg.experts, d]))?;
        let experts = (0..cfg.experts)
            .map(|_| ExpertParams {
                w_gate: draw(&[cfg.ffn_dim, d]),
                w_up: draw(&[cfg.ffn_dim, d]),
                w_down: draw(&[d, cfg.ffn_dim]),
            })
            .collect();
        blocks.push(Block {
            attn_norm: Tensor::full(&[d], F::one()),
            wq,
            wk,
            wv,
            wo,
            ffn_norm: Tensor::full(&[d], F::one()),
            router,
            experts: ExpertBank::new(experts)?,
        });
    }
    let output = draw(&[cfg.vocab, d]);
    Ok(ModelState {
        config: cfg.clone(),
        embedding,
        blocks,
        final_norm: Tensor::full(&[d], F::one()),
        output,
    })
}

/// Routing surfaced by one MoE layer during a forward pass.
pub struct LayerTrace {
    pub probs: Var,
    pub decisions: Vec<RouterDecision>,
}

pub struct ForwardOutput {
    /// `[B·T × V]` next-token logits, sequence-major.
    pub logits: Var,
    pub layers: Vec<LayerTrace>,
}

impl<F: Scalar> ModelState<F> {
    /// All parameters with stable names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &b.attn_norm));
            out.push((format!("layers.{l}.wq"), &b.wq));
            out.push((format!("layers.{l}.wk"), &b.wk));
            out.push((format!("layers.{l}.wv"), &b.wv));
            out.push((format!("layers.{l}.wo"), &b.wo));
            out.push((format!("layers.{l}.ffn_norm"), &b.ffn_norm));
            out.push((format!("layers.{l}.router"), &b.router.weight));
            for (e, p) in b.experts.experts().iter().enumerate() {
                out.push((format!("layers.{l}.experts.{e}.w_gate"), &p.w_gate));
                out.push((format!("layers.{l}.experts.{e}.w_up"), &p.w_up));
                out.push((format!("layers.{l}.experts.{e}.w_down"), &p.w_down));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("output".to_string(), &self.output));
        out
    }

    /// Mutable parameters in the same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.embedding];
        for b in &mut self.blocks {
            out.push(&mut b.attn_norm);
            out.push(&mut b.wq);
            out.push(&mut b.wk);
            out.push(&mut b.wv);
            out.push(&mut b.wo);
            out.push(&mut b.ffn_norm);
            out.push(&mut b.router.weight);
            for p in b.experts.experts_mut() {
                out.push(&mut p.w_gate);
                out.push(&mut p.w_up);
                out.push(&mut p.w_down);
            }
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.output);
        out
    }

    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let mut out = vec![ParamKind::Shared];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend([ParamKind::Shared; 7]);
            for e in 0..b.experts.len() {
                out.extend(
                    [ParamKind::Expert {
                        layer: l,
                        expert: e,
                    }; 3],
                );
            }
        }
        out.extend([ParamKind::Shared; 2]);
        out
    }

    /// Rebuilds a model from tensors listed in [`named_params`] order.
    pub fn from_params(config: &ModelConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        let mut shell = init_shape_only::<F>(config)?;
        let slots = shell.params_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "model needs {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "tensor shape {:?} where {:?} was expected",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(shell)
    }

    /// All-zero model with the extents of `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        init_shape_only(config)
    }

    pub fn cast<G: Scalar>(&self) -> ModelState<G> {
        let tensors = self
            .named_params()
            .into_iter()
            .map(|(_, t)| t.cast())
            .collect();
        ModelState::from_params(&self.config, tensors).expect("same config, same shapes")
    }

    /// SHA-256 over parameter names and values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Forward pass with the configured routing policy.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a, F>,
        bindings: &mut ParamBindings,
        tokens: &[u32],
        batch: usize,
    ) -> Result<ForwardOutput> {
        self.forward_with_policy(tape, bindings, tokens, batch, self.config.policy)
    }

    /// Forward pass over `batch` sequences laid out back to back in `tokens`.
    pub fn forward_with_policy<'a>(
        &'a self,
        tape: &mut Tape<'a, F>,
        bindings: &mut ParamBindings,
        tokens: &[u32],
        batch: usize,
        policy: RoutingPolicy,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(Error::Contract(format!(
                "{} tokens do not split into {batch} sequences",
                tokens.len()
            )));
        }
        let seq = tokens.len() / batch;
        if seq > cfg.context {
            return Err(Error::Contract(format!(
                "sequence length {seq} exceeds context length {}",
                cfg.context
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab
            )));
        }
        policy.validate(cfg.experts)?;

        let emb = bindings.bind(tape, &self.embedding);
        let mut x = tape.gather_rows(emb, tokens.iter().map(|&t| t as usize).collect())?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let g = bindings.bind(tape, &block.attn_norm);
            let h = tape.rmsnorm(x, g, RMS_EPS)?;
            let wq = bindings.bind(tape, &block.wq);
            let wk = bindings.bind(tape, &block.wk);
            let wv = bindings.bind(tape, &block.wv);
            let wo = bindings.bind(tape, &block.wo);
            let q = tape.matmul_t(h, wq)?;
            let k = tape.matmul_t(h, wk)?;
            let v = tape.matmul_t(h, wv)?;
            let q = tape.rope(q, seq, cfg.heads)?;
            let k = tape.rope(k, seq, cfg.heads)?;
            let a = tape.causal_attention(q, k, v, batch, seq, cfg.heads)?;
            let a = tape.matmul_t(a, wo)?;
            x = tape.add(x, a)?;

            let g = bindings.bind(tape, &block.ffn_norm);
            let h = tape.rmsnorm(x, g, RMS_EPS)?;
            let moe = moe_forward(tape, bindings, h, &block.experts, &block.router, policy)?;
            x = tape.add(x, moe.output)?;
            layers.push(LayerTrace {
                probs: moe.probs,
                decisions: moe.decisions,
            });
        }
        let g = bindings.bind(tape, &self.final_norm);
        let h = tape.rmsnorm(x, g, RMS_EPS)?;
        let w_out = bindings.bind(tape, &self.output);
        let logits = tape.matmul_t(h, w_out)?;
        Ok(ForwardOutput { logits, layers })
    }
}

/// Zero-valued model with the right extents; used as a template when loading.
fn init_shape_only<F: Scalar>(cfg: &ModelConfig) -> Result<ModelState<F>> {
    cfg.validate()?;
    let d = cfg.hidden;
    let z = |shape: &[usize]| Tensor::<F>::zeros(shape);
    let blocks = (0..cfg.layers)
        .map(|_| {
            Ok(Block {
                attn_norm: z(&[d]),
                wq: z(&[d, d]),
                wk: z(&[d, d]),
                wv: z(&[d, d]),
                wo: z(&[d, d]),
                ffn_norm: z(&[d]),
                router: RouterParams::new(z(&[cfg.experts, d]))?,
                experts: ExpertBank::new(
                    (0..cfg.experts)
                        .map(|_| ExpertParams {
                            w_gate: z(&[cfg.ffn_dim, d]),
                            w_up: z(&[cfg.ffn_dim, d]),
                            w_down: z(&[d, cfg.ffn_dim]),
                        })
                        .collect(),
                )?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelState {
        config: cfg.clone(),
        embedding: z(&[cfg.vocab, d]),
        blocks,
        final_norm: z(&[d]),
        output: z(&[cfg.vocab, d]),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterCounts {
    pub total: usize,
    /// Attention, norms, routers, embedding and output projection.
    pub shared: usize,
    /// Parameters of a single expert.
    pub per_expert: usize,
    /// Shared parameters plus, per layer, mean activated experts × per-expert size.
    pub activated: f64,
}

/// Total and per-token activated parameter counts. `mean_experts_per_layer`
/// defaults to `K` under top-k; top-p needs measured means.
pub fn count_parameters<F: Scalar>(
    state: &ModelState<F>,
    mean_experts_per_layer: Option<&[f64]>,
) -> Result<ParameterCounts> {
    let cfg = &state.config;
    let mut total = 0;
    let mut shared = 0;
    for ((_, t), kind) in state.named_params().into_iter().zip(state.param_kinds()) {
        total += t.numel();
        if kind == ParamKind::Shared {
            shared += t.numel();
        }
    }
    let per_expert = state.blocks[0].experts.experts()[0].num_params();
    let means: Vec<f64> = match (mean_experts_per_layer, cfg.policy) {
        (Some(m), _) => {
            if m.len() != cfg.layers {
                return Err(Error::Shape(format!(
                    "{} per-layer means for {} layers",
                    m.len(),
                    cfg.layers
                )));
            }
            m.to_vec()
        }
        (None, RoutingPolicy::TopK { k }) => vec![k as f64; cfg.layers],
        (None, RoutingPolicy::TopP { .. }) => {
            return Err(Error::Contract(
                "top-p activation depends on the data; pass measured per-layer means".into(),
            ))
        }
    };
    let activated = shared as f64 + means.iter().map(|m| m * per_expert as f64).sum::<f64>();
    Ok(ParameterCounts {
        total,
        shared,
        per_expert,
        activated,
    })
}
