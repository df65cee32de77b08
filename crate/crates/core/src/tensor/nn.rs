//! Parameterized layers expressed as compositions of tape ops.

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// `x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        frozen: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (inputs as f64).sqrt();
        let weight = store.add_normal(format!("{name}.weight"), vec![inputs, outputs], std, frozen, rng)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![outputs]), frozen)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b)?;
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).tensor.shape()[0]
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).tensor.shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, frozen: bool) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(vec![dim], 1.0), frozen)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![dim]), frozen)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain)?;
        let bias = g.param(self.bias)?;
        g.layer_norm(x, gain, bias, self.eps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// Two linear layers with an activation between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        activation: Activation,
        frozen: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), inputs, hidden, true, frozen, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, outputs, true, frozen, rng)?,
            activation,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = match self.activation {
            Activation::Relu => g.relu(h)?,
            Activation::Gelu => g.gelu(h)?,
        };
        self.fc2.forward(g, h)
    }
}

/// Projected keys and values for one attention layer, reusable across
/// queries (e.g. every decoding step against one scene).
#[derive(Clone, Copy, Debug)]
pub struct KeyValue {
    pub keys: Var,
    pub values: Var,
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        frozen: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!("model dim {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, true, frozen, rng)?,
            wk: Linear::new(store, &format!("{name}.wk"), kv_dim, dim, true, frozen, rng)?,
            wv: Linear::new(store, &format!("{name}.wv"), kv_dim, dim, true, frozen, rng)?,
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, true, frozen, rng)?,
            heads,
            dim,
        })
    }

    pub fn key_value(&self, g: &mut Graph, source: Var) -> Result<KeyValue> {
        Ok(KeyValue { keys: self.wk.forward(g, source)?, values: self.wv.forward(g, source)? })
    }

    pub fn forward(&self, g: &mut Graph, query: Var, source: Var, causal: bool) -> Result<Var> {
        let kv = self.key_value(g, source)?;
        self.attend(g, query, kv, causal)
    }

    /// Attend `query` rows over precomputed keys/values. With `causal`, query
    /// row `i` sees key rows `0..=i + (keys - queries)`, i.e. the last query
    /// is aligned with the last key.
    pub fn attend(&self, g: &mut Graph, query: Var, kv: KeyValue, causal: bool) -> Result<Var> {
        let q = self.wq.forward(g, query)?;
        let out = attention(g, q, kv.keys, kv.values, self.heads, causal)?;
        self.wo.forward(g, out)
    }
}

/// Per-head `softmax(Q Kᵀ / √d_k) V` over already-projected inputs, heads
/// concatenated along columns.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
    let dim = g.value(q).cols();
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::invalid(format!("model dim {dim} not divisible by {heads} heads")));
    }
    if g.value(k).cols() != dim || g.value(v).cols() != dim || g.value(k).rows() != g.value(v).rows() {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", g.value(q).shape(), g.value(k).shape(), g.value(v).shape()),
        ));
    }
    let dk = dim / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let offset = g.value(k).rows().saturating_sub(g.value(q).rows());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dk, dk)?, g.slice_cols(k, h * dk, dk)?, g.slice_cols(v, h * dk, dk)?)
        };
        let scores = g.matmul_t(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let probs = if causal { g.causal_softmax(scores, offset)? } else { g.softmax(scores, 1)? };
        outs.push(g.matmul(probs, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Pre-norm transformer encoder block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        frozen: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, frozen)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, heads, frozen, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, frozen)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim, Activation::Gelu, frozen, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, false)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}
