//! Transformer building blocks shared by the denoiser and the condition encoders.

use candle_core::{Module, Tensor, D};

use crate::error::Result;
use crate::params::ParamStore;

/// Additive attention bias for masked keys.
const MASKED: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct Linear {
    inner: candle_nn::Linear,
}

impl Linear {
    /// Uniform init in `±1/sqrt(fan_in)`, as the usual default.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.uniform(&format!("{name}.weight"), &[fan_out, fan_in], bound)?;
        let b = store.uniform(&format!("{name}.bias"), &[fan_out], bound)?;
        Ok(Self {
            inner: candle_nn::Linear::new(w, Some(b)),
        })
    }

    /// Gaussian weights with the given deviation and zero bias.
    pub fn normal(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
    ) -> Result<Self> {
        let w = store.normal(&format!("{name}.weight"), &[fan_out, fan_in], std)?;
        let b = store.constant(&format!("{name}.bias"), &[fan_out], 0.0, true)?;
        Ok(Self {
            inner: candle_nn::Linear::new(w, Some(b)),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
    dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, dim: usize) -> Result<Self> {
        let table = store.normal(name, &[rows, dim], 1.0 / (dim as f64).sqrt())?;
        Ok(Self { table, dim })
    }

    pub fn rows(&self) -> usize {
        self.table.dim(0).unwrap_or(0)
    }

    /// `ids` is a u32 tensor of any shape; the output appends the embedding axis.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut shape = ids.dims().to_vec();
        shape.push(self.dim);
        let flat = ids.flatten_all()?;
        Ok(self.table.index_select(&flat, 0)?.reshape(shape)?)
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }
}

/// Layer norm over the last axis without affine parameters.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

/// `[B, M]` key mask of ones and zeros to an additive bias `[B, 1, 1, M]`.
pub fn key_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, m) = mask.dims2()?;
    let bias = ((mask.ones_like()? - mask)? * MASKED)?;
    Ok(bias.reshape((b, 1, 1, m))?)
}

#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query` `[B, N, d]` attends to `context` `[B, M, d]`; `bias` is from [`key_bias`].
    pub fn forward(
        &self,
        query: &Tensor,
        context: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, n, d) = query.dims3()?;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(context)?)?;
        let v = self.split(&self.v.forward(context)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.o.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu_erf()?)
    }
}

/// Pre-norm transformer encoder block used by the graph and text encoders.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    attn: Attention,
    ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, dim * ffn_mult)?,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let h = layer_norm(x)?;
        let x = (x + self.attn.forward(&h, &h, bias)?)?;
        let h = layer_norm(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }
}

/// Sinusoidal features `[sin(t f_k), cos(t f_k)]` with geometric frequencies,
/// as plain values (used for timesteps).
pub fn sinusoid(t: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(max_period.ln()) * k as f64 / half as f64).exp();
        out[k] = (t * freq).sin();
        out[half + k] = (t * freq).cos();
    }
    out
}

/// Scales `x` `[B, N, d]` by `(1 + scale)` and adds `shift`, both `[B, 1, d]`.
pub fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
}
