//! Scaled dot-product attention, multi-head self-attention and the pre-norm
//! transformer encoder.
//!
//! Token sequences travel as `[batch x tokens x d_model]` tensors. All
//! learnable weights live in a [`ParamStore`]; the structs here only hold
//! their ids.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::init::truncated_normal;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Fully connected layer `x W + b` acting on the last axis.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            truncated_normal(&[d_in, d_out], INIT_STD, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Affine pair of a layer normalization.
#[derive(Debug, Clone, Copy)]
pub struct LayerNormWeights {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormWeights {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// `softmax(Q K^T / sqrt(d_k)) V` over `[B x n x d_k]` operands (rank-2
/// operands are treated as a batch of one). Returns `(output, weights)`;
/// each row of `weights` is a distribution over the key tokens.
pub fn scaled_dot_product_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var)> {
    let lift = |g: &mut Graph<T>, x: Var| -> Result<(Var, bool)> {
        match g.shape(x).len() {
            3 => Ok((x, false)),
            2 => {
                let s = g.shape(x).to_vec();
                Ok((g.reshape(x, &[1, s[0], s[1]])?, true))
            }
            _ => Err(Error::shape(format!("attention operand {:?}", g.shape(x)))),
        }
    };
    let (q, squeeze) = lift(g, q)?;
    let (k, _) = lift(g, k)?;
    let (v, _) = lift(g, v)?;
    if g.shape(k)[1] != g.shape(v)[1] {
        return Err(Error::shape(
            "attention keys and values have different token counts",
        ));
    }
    let d_k = g.shape(q)[2];
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, T::one() / T::from_usize_lossy(d_k).sqrt());
    let weights = g.softmax(scores)?;
    let out = g.batch_matmul(weights, v, false)?;
    if squeeze {
        let s = g.shape(out).to_vec();
        let out = g.reshape(out, &[s[1], s[2]])?;
        let ws = g.shape(weights).to_vec();
        let weights = g.reshape(weights, &[ws[1], ws[2]])?;
        return Ok((out, weights));
    }
    Ok((out, weights))
}

/// Projections of a multi-head self-attention layer. Queries, keys and
/// values each project `d_model -> heads * key_dim`; the concatenated head
/// outputs project back to `d_model`.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadWeights {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub heads: usize,
    pub key_dim: usize,
    pub d_model: usize,
}

impl MultiHeadWeights {
    /// `key_dim` defaults to `d_model / heads`, which then must divide evenly.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        key_dim: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let key_dim = resolve_key_dim(d_model, heads, key_dim)?;
        let inner = heads * key_dim;
        Ok(Self {
            query: Dense::new(store, &format!("{name}.query"), d_model, inner, rng),
            key: Dense::new(store, &format!("{name}.key"), d_model, inner, rng),
            value: Dense::new(store, &format!("{name}.value"), d_model, inner, rng),
            output: Dense::new(store, &format!("{name}.output"), inner, d_model, rng),
            heads,
            key_dim,
            d_model,
        })
    }
}

pub(crate) fn resolve_key_dim(
    d_model: usize,
    heads: usize,
    key_dim: Option<usize>,
) -> Result<usize> {
    if heads == 0 {
        return Err(Error::config("heads", "must be at least 1"));
    }
    match key_dim {
        Some(0) => Err(Error::config("key_dim", "must be at least 1")),
        Some(k) => Ok(k),
        None if d_model.is_multiple_of(heads) => Ok(d_model / heads),
        None => Err(Error::config(
            "heads",
            format!("d_model {d_model} is not divisible by {heads} heads"),
        )),
    }
}

/// Multi-head self-attention over `x [B x n x d_model]`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    w: &MultiHeadWeights,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != w.d_model {
        return Err(Error::shape(format!(
            "attention input {shape:?} for d_model {}",
            w.d_model
        )));
    }
    let (b, n) = (shape[0], shape[1]);
    let (h, dk) = (w.heads, w.key_dim);
    let split = |g: &mut Graph<T>, proj: &Dense| -> Result<Var> {
        let y = proj.forward(g, store, x)?;
        let y = g.reshape(y, &[b, n, h, dk])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        g.reshape(y, &[b * h, n, dk])
    };
    let q = split(g, &w.query)?;
    let k = split(g, &w.key)?;
    let v = split(g, &w.value)?;
    let (heads_out, _) = scaled_dot_product_attention(g, q, k, v)?;
    let merged = g.reshape(heads_out, &[b, h, n, dk])?;
    let merged = g.permute(merged, &[0, 2, 1, 3])?;
    let merged = g.reshape(merged, &[b, n, h * dk])?;
    w.output.forward(g, store, merged)
}

/// One pre-norm encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct EncoderBlockWeights {
    pub mha: MultiHeadWeights,
    pub norm1: LayerNormWeights,
    pub norm2: LayerNormWeights,
    pub mlp_in: Dense,
    pub mlp_out: Dense,
    pub dropout_rate: f64,
}

impl EncoderBlockWeights {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        key_dim: Option<usize>,
        d_mlp: usize,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if d_mlp < d_model {
            return Err(Error::config(
                "d_mlp",
                format!("{d_mlp} is smaller than d_model {d_model}"),
            ));
        }
        Ok(Self {
            norm1: LayerNormWeights::new(store, &format!("{name}.norm1"), d_model),
            mha: MultiHeadWeights::new(
                store,
                &format!("{name}.attn"),
                d_model,
                heads,
                key_dim,
                rng,
            )?,
            norm2: LayerNormWeights::new(store, &format!("{name}.norm2"), d_model),
            mlp_in: Dense::new(store, &format!("{name}.mlp_in"), d_model, d_mlp, rng),
            mlp_out: Dense::new(store, &format!("{name}.mlp_out"), d_mlp, d_model, rng),
            dropout_rate,
        })
    }
}

/// `x1 = x + dropout(MHA(norm1(x)))`, `out = x1 + dropout(MLP(norm2(x1)))`.
pub fn encoder_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    w: &EncoderBlockWeights,
) -> Result<Var> {
    let h = w.norm1.forward(g, store, x)?;
    let h = multi_head_attention(g, store, h, &w.mha)?;
    let h = g.dropout(h, w.dropout_rate)?;
    let x1 = g.add(x, h)?;

    let h = w.norm2.forward(g, store, x1)?;
    let h = w.mlp_in.forward(g, store, h)?;
    let h = g.relu(h);
    let h = w.mlp_out.forward(g, store, h)?;
    let h = g.dropout(h, w.dropout_rate)?;
    g.add(x1, h)
}

/// `L` encoder layers followed by a final layer normalization.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub blocks: Vec<EncoderBlockWeights>,
    pub final_norm: LayerNormWeights,
}

impl EncoderStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        layers: usize,
        d_model: usize,
        heads: usize,
        key_dim: Option<usize>,
        d_mlp: usize,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::config("encoder_layers", "must be at least 1"));
        }
        let blocks = (0..layers)
            .map(|i| {
                EncoderBlockWeights::new(
                    store,
                    &format!("encoder.{i}"),
                    d_model,
                    heads,
                    key_dim,
                    d_mlp,
                    dropout_rate,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNormWeights::new(store, "encoder.final_norm", d_model);
        Ok(Self { blocks, final_norm })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        encoder_stack(g, store, x, &self.blocks, &self.final_norm)
    }
}

pub fn encoder_stack<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    blocks: &[EncoderBlockWeights],
    final_norm: &LayerNormWeights,
) -> Result<Var> {
    if blocks.is_empty() {
        return Err(Error::config("encoder_layers", "must be at least 1"));
    }
    let mut y = x;
    for block in blocks {
        y = encoder_block(g, store, y, block)?;
    }
    final_norm.forward(g, store, y)
}
