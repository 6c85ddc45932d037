//! Transformer building blocks: linear and layer-norm layers, scaled
//! dot-product attention, multi-head attention, and the pre-norm residual
//! block used throughout the model.
//!
//! Blocks run on single sequences (`[tokens, dim]` matrices); batching is a
//! loop one level up. Every block is exactly the identity at initialization:
//! the attention output projection and the second MLP linear start at zero,
//! so each residual branch contributes nothing until training moves it.
//! The blocks are deterministic — the `dropout` knob is accepted for config
//! compatibility but must be 0.

use crate::config::ConfigError;
use crate::tensor::{Scalar, Tensor, TensorError};

/// Affine map `x · W + b` with `W: [in, out]`, `b: [out]`.
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// Weights i.i.d. normal(0, 0.02²), zero bias.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl rand::Rng) -> Self {
        Linear {
            weight: Tensor::randn(&[in_dim, out_dim], 0.0, 0.02, rng).trainable(),
            bias: Tensor::zeros(&[out_dim]).trainable(),
        }
    }

    /// All-zero weights and bias (for residual-branch outputs).
    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[in_dim, out_dim]).trainable(),
            bias: Tensor::zeros(&[out_dim]).trainable(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        x.matmul(&self.weight)?.add(&self.bias)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

/// Layer normalization over the last axis with learned scale and shift.
pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(&[dim], T::one()).trainable(),
            beta: Tensor::zeros(&[dim]).trainable(),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        vec![
            (format!("{prefix}.gamma"), self.gamma.clone()),
            (format!("{prefix}.beta"), self.beta.clone()),
        ]
    }
}

/// `softmax(q kᵀ / √d_k) v` for `q: [n, d_k]`, `k: [m, d_k]`, `v: [m, d_v]`.
/// The softmax runs over the `m` key positions of each query row, so the
/// result is invariant (up to rounding) to permuting the key/value rows
/// together.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let d_k = *q.shape().last().ok_or(TensorError::Invalid {
        op: "scaled_dot_attention",
        msg: "query must be a [n, d_k] matrix".into(),
    })?;
    let scale = T::cast(1.0 / (d_k as f64).sqrt());
    let scores = q.matmul(&k.transpose()?)?.mul_scalar(scale)?;
    scores.softmax(1)?.matmul(v)
}

/// Multi-head attention: per-head column slices of shared Q/K/V projections,
/// heads concatenated and mixed by a zero-initialized output projection.
pub struct MultiHeadAttention<T: Scalar> {
    num_heads: usize,
    wq: Linear<T>,
    wk: Linear<T>,
    wv: Linear<T>,
    wo: Linear<T>,
}

impl<T: Scalar> MultiHeadAttention<T> {
    /// `dim` must be divisible by `num_heads`.
    pub fn new(
        dim: usize,
        num_heads: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, TensorError> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(TensorError::Invalid {
                op: "multi_head_attention",
                msg: format!("dim {dim} is not divisible by {num_heads} heads"),
            });
        }
        Ok(MultiHeadAttention {
            num_heads,
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::zeroed(dim, dim),
        })
    }

    /// Attend from `query_tokens: [n, dim]` over `kv_tokens: [m, dim]`.
    /// Self-attention passes the same tensor for both.
    pub fn forward(
        &self,
        query_tokens: &Tensor<T>,
        kv_tokens: &Tensor<T>,
    ) -> Result<Tensor<T>, TensorError> {
        let q = self.wq.forward(query_tokens)?;
        let k = self.wk.forward(kv_tokens)?;
        let v = self.wv.forward(kv_tokens)?;
        let dim = q.shape()[1];
        let head_dim = dim / self.num_heads;
        let mut heads = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let col = h * head_dim;
            heads.push(scaled_dot_attention(
                &q.narrow(1, col, head_dim)?,
                &k.narrow(1, col, head_dim)?,
                &v.narrow(1, col, head_dim)?,
            )?);
        }
        self.wo.forward(&Tensor::concat(1, &heads)?)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        out.extend(self.wq.named_params(&format!("{prefix}.wq")));
        out.extend(self.wk.named_params(&format!("{prefix}.wk")));
        out.extend(self.wv.named_params(&format!("{prefix}.wv")));
        out.extend(self.wo.named_params(&format!("{prefix}.wo")));
        out
    }
}

/// Two-layer GELU MLP; the second linear starts at zero.
pub struct Mlp<T: Scalar> {
    fc1: Linear<T>,
    fc2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(dim: usize, hidden: usize, rng: &mut impl rand::Rng) -> Self {
        Mlp {
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::zeroed(hidden, dim),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = self.fc1.named_params(&format!("{prefix}.fc1"));
        out.extend(self.fc2.named_params(&format!("{prefix}.fc2")));
        out
    }
}

/// Shape of one transformer block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    /// MLP hidden width as a multiple of `hidden_dim`.
    pub mlp_ratio: usize,
    /// Accepted for config compatibility; must be 0 (blocks are
    /// deterministic).
    pub dropout: f64,
}

impl BlockConfig {
    pub fn validate(&self, path: &str) -> Result<(), ConfigError> {
        if self.hidden_dim == 0 {
            return Err(ConfigError::schema(
                format!("{path}.hidden_dim"),
                "must be positive",
            ));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(ConfigError::schema(
                format!("{path}.num_heads"),
                format!(
                    "hidden_dim {} is not divisible by {} heads",
                    self.hidden_dim, self.num_heads
                ),
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(ConfigError::schema(
                format!("{path}.mlp_ratio"),
                "must be positive",
            ));
        }
        if self.dropout != 0.0 {
            return Err(ConfigError::schema(
                format!("{path}.dropout"),
                format!(
                    "got {}; this implementation is deterministic and supports only 0",
                    self.dropout
                ),
            ));
        }
        Ok(())
    }
}

/// Pre-norm residual block: optional cross-attention over context tokens,
/// then self-attention, then the MLP.
///
/// ```text
/// x ← x + cross_attn(norm(x), context)   (if built with cross-attention)
/// x ← x + self_attn(norm(x))
/// x ← x + mlp(norm(x))
/// ```
pub struct TransformerBlock<T: Scalar> {
    cross: Option<(LayerNorm<T>, MultiHeadAttention<T>)>,
    self_norm: LayerNorm<T>,
    self_attn: MultiHeadAttention<T>,
    mlp_norm: LayerNorm<T>,
    mlp: Mlp<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new(
        cfg: &BlockConfig,
        with_cross: bool,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, ConfigError> {
        cfg.validate("block")?;
        let attn = |rng: &mut _| {
            MultiHeadAttention::new(cfg.hidden_dim, cfg.num_heads, rng)
                .expect("validated dims")
        };
        Ok(TransformerBlock {
            cross: with_cross.then(|| (LayerNorm::new(cfg.hidden_dim), attn(rng))),
            self_norm: LayerNorm::new(cfg.hidden_dim),
            self_attn: attn(rng),
            mlp_norm: LayerNorm::new(cfg.hidden_dim),
            mlp: Mlp::new(cfg.hidden_dim, cfg.hidden_dim * cfg.mlp_ratio, rng),
        })
    }

    pub fn has_cross(&self) -> bool {
        self.cross.is_some()
    }

    /// Run the block on `x: [tokens, hidden_dim]`. `context` must be given
    /// exactly when the block was built with cross-attention.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        context: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>, TensorError> {
        let mut x = x.clone();
        match (&self.cross, context) {
            (Some((norm, attn)), Some(ctx)) => {
                x = x.add(&attn.forward(&norm.forward(&x)?, ctx)?)?;
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(TensorError::Invalid {
                    op: "transformer_block",
                    msg: "block has cross-attention but no context tokens were given".into(),
                })
            }
            (None, Some(_)) => {
                return Err(TensorError::Invalid {
                    op: "transformer_block",
                    msg: "context tokens given to a block without cross-attention".into(),
                })
            }
        }
        let h = self.self_norm.forward(&x)?;
        x = x.add(&self.self_attn.forward(&h, &h)?)?;
        x = x.add(&self.mlp.forward(&self.mlp_norm.forward(&x)?)?)?;
        Ok(x)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        if let Some((norm, attn)) = &self.cross {
            out.extend(norm.named_params(&format!("{prefix}.cross.norm")));
            out.extend(attn.named_params(&format!("{prefix}.cross")));
        }
        out.extend(self.self_norm.named_params(&format!("{prefix}.self.norm")));
        out.extend(self.self_attn.named_params(&format!("{prefix}.self")));
        out.extend(self.mlp_norm.named_params(&format!("{prefix}.mlp.norm")));
        out.extend(self.mlp.named_params(&format!("{prefix}.mlp")));
        out
    }
}
