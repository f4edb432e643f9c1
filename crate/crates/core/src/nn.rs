//! Small differentiable building blocks on top of candle tensors.

use candle_core::{DType, Tensor, D};

use crate::error::Result;
use crate::params::{Builder, Init};

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &Builder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: b.get((out_dim, in_dim), "weight", Init::Uniform(bound))?,
            bias: Some(b.get(out_dim, "bias", Init::Zeros)?),
        })
    }

    pub fn no_bias(b: &Builder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: b.get((out_dim, in_dim), "weight", Init::Uniform(bound))?,
            bias: None,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Applies to the last dimension of an input of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().unwrap();
        let rows = x.elem_count() / in_dim;
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        b: &Builder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            weight: b.get((out_ch, in_ch, kernel, kernel), "weight", Init::Uniform(bound))?,
            bias: b.get(out_ch, "bias", Init::Zeros)?,
            stride,
            padding,
        })
    }

    /// `x`: (B, C_in, H, W).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(b: &Builder, count: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: b.get((count, dim), "weight", Init::Normal(0.5))?,
        })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn lookup(&self, ids: &[u32]) -> Result<Tensor> {
        let idx = Tensor::new(ids, self.table.device())?;
        Ok(self.table.index_select(&idx, 0)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(b: &Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: b.get(dim, "weight", Init::Ones)?,
            bias: b.get(dim, "bias", Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(b: &Builder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&b.pp("fc1"), dim, hidden)?,
            fc2: Linear::new(&b.pp("fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Multi-head attention. Queries come from `x`, keys and values from `ctx`.
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(b: &Builder, dim: usize, ctx_dim: usize, heads: usize) -> Result<Self> {
        assert!(dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        Ok(Self {
            q: Linear::new(&b.pp("q"), dim, dim)?,
            k: Linear::new(&b.pp("k"), ctx_dim, dim)?,
            v: Linear::new(&b.pp("v"), ctx_dim, dim)?,
            o: Linear::new(&b.pp("o"), dim, dim)?,
            heads,
        })
    }

    /// `x`: (B, Lq, D); `ctx`: (B, Lk, Dc); `bias`: additive, broadcastable to (B, H, Lq, Lk).
    pub fn forward(&self, x: &Tensor, ctx: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, lq, d) = x.dims3()?;
        let lk = ctx.dim(1)?;
        let dh = d / self.heads;
        let split = |t: Tensor, l: usize| -> Result<Tensor> {
            Ok(t.reshape((b, l, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?, lq)?;
        let k = split(self.k.forward(ctx)?, lk)?;
        let v = split(self.v.forward(ctx)?, lk)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let scores = match bias {
            Some(m) => scores.broadcast_add(m)?,
            None => scores,
        };
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, lq, d))?;
        self.o.forward(&out)
    }
}

/// Additive mask with large negative entries above the diagonal, shape (1, 1, L, L).
pub fn causal_bias(len: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut m = vec![0f32; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            m[i * len + j] = -1e9;
        }
    }
    Ok(Tensor::from_vec(m, (1, 1, len, len), device)?.to_dtype(dtype)?)
}

/// Sinusoidal embedding of integer timesteps, (B, dim).
pub fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
        for _ in (2 * half)..dim {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

/// Reads a scalar tensor of any float dtype as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
