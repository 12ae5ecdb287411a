//! Transformer building blocks written against primitive tensor ops so every
//! path supports reverse-mode differentiation.

use candle_core::{DType, IndexOp, Tensor, D};

use crate::error::{Error, Result};
use crate::params::{Ctx, Group, Init, Param};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, group: Group, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = init.trunc_normal(format!("{name}.weight"), group, &[in_dim, out_dim], 0.02)?;
        let bias = if bias {
            Some(init.constant(format!("{name}.bias"), group, &[out_dim], 0.0)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn copy_of(init: &mut Init, name: &str, group: Group, src: &Linear) -> Result<Self> {
        Ok(Linear {
            weight: init.copy_of(format!("{name}.weight"), group, &src.weight)?,
            bias: match &src.bias {
                Some(b) => Some(init.copy_of(format!("{name}.bias"), group, b)?),
                None => None,
            },
        })
    }

    /// Applies `x · W + b` over the last axis of a tensor of any rank.
    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| Error::Shape("linear on scalar".into()))?;
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let w = ctx.t(&self.weight);
        let mut y = x.reshape((rows, in_dim))?.matmul(&w)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(&ctx.t(b))?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = w.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, group: Group, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: init.constant(format!("{name}.gamma"), group, &[dim], 1.0)?,
            beta: init.constant(format!("{name}.beta"), group, &[dim], 0.0)?,
        })
    }

    pub fn copy_of(init: &mut Init, name: &str, group: Group, src: &LayerNorm) -> Result<Self> {
        Ok(LayerNorm {
            gamma: init.copy_of(format!("{name}.gamma"), group, &src.gamma)?,
            beta: init.copy_of(format!("{name}.beta"), group, &src.beta)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&ctx.t(&self.gamma))?
            .broadcast_add(&ctx.t(&self.beta))?)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(init: &mut Init, name: &str, group: Group, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::config(format!("token_dim {dim} not divisible by {heads} heads")));
        }
        Ok(Attention {
            q: Linear::new(init, &format!("{name}.q"), group, dim, dim, true)?,
            k: Linear::new(init, &format!("{name}.k"), group, dim, dim, true)?,
            v: Linear::new(init, &format!("{name}.v"), group, dim, dim, true)?,
            out: Linear::new(init, &format!("{name}.out"), group, dim, dim, true)?,
            heads,
        })
    }

    pub fn copy_of(init: &mut Init, name: &str, group: Group, src: &Attention) -> Result<Self> {
        Ok(Attention {
            q: Linear::copy_of(init, &format!("{name}.q"), group, &src.q)?,
            k: Linear::copy_of(init, &format!("{name}.k"), group, &src.k)?,
            v: Linear::copy_of(init, &format!("{name}.v"), group, &src.v)?,
            out: Linear::copy_of(init, &format!("{name}.out"), group, &src.out)?,
            heads: src.heads,
        })
    }

    /// `x`: [B, T, D]. `causal` masks attention to later positions.
    pub fn forward(&self, ctx: &Ctx, x: &Tensor, causal: bool) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let hd = d / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(ctx, x)?)?;
        let k = split(self.k.forward(ctx, x)?)?;
        let v = split(self.v.forward(ctx, x)?)?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        if causal {
            let mask: Vec<f32> = (0..t)
                .flat_map(|i| (0..t).map(move |j| if j > i { -1e9 } else { 0.0 }))
                .collect();
            let mask = Tensor::from_vec(mask, (t, t), x.device())?.to_dtype(x.dtype())?;
            scores = scores.broadcast_add(&mask)?;
        }
        let attn = softmax_last(&scores)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        self.out.forward(ctx, &y)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new(init: &mut Init, name: &str, group: Group, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), group, dim)?,
            attn: Attention::new(init, &format!("{name}.attn"), group, dim, heads)?,
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), group, dim)?,
            fc1: Linear::new(init, &format!("{name}.fc1"), group, dim, dim * mlp_ratio, true)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), group, dim * mlp_ratio, dim, true)?,
        })
    }

    /// Structural clone with independent parameters.
    pub fn copy_of(init: &mut Init, name: &str, group: Group, src: &Block) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::copy_of(init, &format!("{name}.ln1"), group, &src.ln1)?,
            attn: Attention::copy_of(init, &format!("{name}.attn"), group, &src.attn)?,
            ln2: LayerNorm::copy_of(init, &format!("{name}.ln2"), group, &src.ln2)?,
            fc1: Linear::copy_of(init, &format!("{name}.fc1"), group, &src.fc1)?,
            fc2: Linear::copy_of(init, &format!("{name}.fc2"), group, &src.fc2)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor, causal: bool) -> Result<Tensor> {
        let h = (x + self.attn.forward(ctx, &self.ln1.forward(ctx, x)?, causal)?)?;
        let m = self.fc1.forward(ctx, &self.ln2.forward(ctx, &h)?)?.gelu_erf()?;
        Ok((&h + self.fc2.forward(ctx, &m)?)?)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.ln1.gamma, &self.ln1.beta, &self.ln2.gamma, &self.ln2.beta];
        for l in [&self.attn.q, &self.attn.k, &self.attn.v, &self.attn.out, &self.fc1, &self.fc2] {
            v.push(&l.weight);
            if let Some(b) = &l.bias {
                v.push(b);
            }
        }
        v
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Numerically stable log-softmax over the last axis.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row-wise unit-ℓ2 normalization over the last axis. Rows with norm below
/// `eps` map to the zero vector.
pub fn l2_normalize_guarded(x: &Tensor, eps: f64) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let keep = norm.ge(eps)?.to_dtype(x.dtype())?;
    let inv = keep.div(&norm.maximum(eps)?)?;
    Ok(x.broadcast_mul(&inv)?)
}

/// Row-wise unit-ℓ2 normalization, failing on zero-norm rows.
pub fn l2_normalize_strict(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let min = norm.flatten_all()?.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !(min > 0.0) || !min.is_finite() {
        return Err(Error::Contract("zero-norm vector in cosine similarity".into()));
    }
    Ok(x.broadcast_div(&norm)?)
}

pub fn all_finite(x: &Tensor) -> Result<bool> {
    let flat = x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(flat.iter().all(|v| v.is_finite()))
}

/// Selects position 0 along axis 1 of a [B, T, D] tensor.
pub fn class_token(x: &Tensor) -> Result<Tensor> {
    Ok(x.i((.., 0, ..))?.contiguous()?)
}

pub fn to_f64_rows(x: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(x.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}
