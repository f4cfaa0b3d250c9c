//! Small neural-network toolkit on top of candle: a seeded parameter store,
//! linear maps, layer normalization, multi-head attention and a forward
//! context carrying the train/eval switch and the dropout/noise RNG.
//!
//! Everything runs in `f64` on the CPU so that analytic gradients can be
//! compared against finite differences.

use std::cell::RefCell;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const DTYPE: DType = DType::F64;

/// Additive mask value for disallowed attention positions.
pub const NEG_INF: f64 = -1e30;

pub fn device() -> Device {
    Device::Cpu
}

/// Ordered collection of named trainable variables.
///
/// Insertion order is preserved so that checkpoints and optimizer state
/// are laid out identically across runs.
#[derive(Debug)]
pub struct ParamStore {
    entries: Vec<(String, Var)>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, name: String, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &device())?)?;
        self.entries.push((name, var.clone()));
        Ok(var)
    }

    /// Glorot-uniform initialized matrix of shape `[rows, cols]`.
    pub fn glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<Var> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        self.push(name.into(), data, &[rows, cols])
    }

    /// Normal(0, std) initialized tensor.
    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64) -> Result<Var> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.push(name.into(), data, shape)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.push(name.into(), vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }
}

/// `y = x W^T + b` over the last dimension of `x`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.glorot(format!("{name}.weight"), out_dim, in_dim)?;
        let bias = store.constant(format!("{name}.bias"), &[out_dim], 0.0)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.glorot(format!("{name}.weight"), out_dim, in_dim)?;
        Ok(Self { weight, bias: None })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::Shape("scalar input to linear".into()))?;
        if last != self.in_dim() {
            return Err(Error::Shape(format!(
                "linear expects width {}, got {last}",
                self.in_dim()
            )));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, last))?;
        let mut y = flat.matmul(&self.weight.as_tensor().t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b.as_tensor())?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Var,
    pub bias: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.constant(format!("{name}.gain"), &[dim], 1.0)?,
            bias: store.constant(format!("{name}.bias"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gain.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// Softmax over the last dimension. The max shift is detached: softmax is
/// invariant to it, so the gradient is unaffected.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Additive attention mask from a boolean keep-mask: 0 where kept,
/// [`NEG_INF`] elsewhere.
pub fn additive_mask(keep: &[bool], shape: &[usize]) -> Result<Tensor> {
    let data: Vec<f64> = keep.iter().map(|&k| if k { 0.0 } else { NEG_INF }).collect();
    Ok(Tensor::from_vec(data, shape, &device())?)
}

/// Lower-triangular causal mask of shape `[t, t]`.
pub fn causal_mask(t: usize) -> Result<Tensor> {
    let keep: Vec<bool> = (0..t * t).map(|i| i % t <= i / t).collect();
    additive_mask(&keep, &[t, t])
}

pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DTYPE)?.flatten_all()?.to_vec1::<f64>()?.into_iter().sum())
}

/// Forward-pass context: train/eval switch plus the RNG used for dropout
/// masks and reparameterization noise.
#[derive(Debug)]
pub struct Ctx {
    train: bool,
    dropout: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            dropout: 0.0,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn train(seed: u64, dropout: f64) -> Self {
        Self {
            train: true,
            dropout,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn dropout(&self, x: &Tensor) -> Result<Tensor> {
        if !self.train || self.dropout <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.dropout;
        let n = x.elem_count();
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.dims(), x.device())?;
        Ok(x.mul(&mask)?)
    }

    /// Standard-normal noise in train mode, `None` in eval mode.
    pub fn gaussian_noise(&self, n: usize) -> Option<Vec<f64>> {
        if !self.train {
            return None;
        }
        let mut rng = self.rng.borrow_mut();
        Some((0..n).map(|_| rng.sample(StandardNormal)).collect())
    }
}

/// Multi-head scaled dot-product attention with input/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide model width {dim}"
            )));
        }
        Ok(Self {
            heads,
            dim,
            query: Linear::new(store, &format!("{name}.q"), dim, dim)?,
            key: Linear::new(store, &format!("{name}.k"), dim, dim)?,
            value: Linear::new(store, &format!("{name}.v"), dim, dim)?,
            output: Linear::new(store, &format!("{name}.o"), dim, dim)?,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        Ok(x
            .reshape((b, t, self.heads, self.dim / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query` is `[B, Tq, d]`, `memory` is `[B, Tk, d]`; `mask` is additive
    /// and must broadcast to `[B, H, Tq, Tk]`.
    ///
    /// Returns the projected output `[B, Tq, d]` and the attention weights
    /// `[B, H, Tq, Tk]`.
    pub fn forward(
        &self,
        query: &Tensor,
        memory: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (b, tq, _) = query.dims3()?;
        let head_dim = self.dim / self.heads;
        let q = self.split_heads(&self.query.forward(query)?)?;
        let k = self.split_heads(&self.key.forward(memory)?)?;
        let v = self.split_heads(&self.value.forward(memory)?)?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? / (head_dim as f64).sqrt())?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let weights = softmax(&scores)?;
        let ctx = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, self.dim))?;
        Ok((self.output.forward(&ctx)?, weights))
    }

    /// Value projection followed by the output projection, i.e. what
    /// attention returns when all weight sits on one memory row.
    pub fn value_path(&self, memory: &Tensor) -> Result<Tensor> {
        self.output.forward(&self.value.forward(memory)?)
    }
}

pub fn tensor_from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (r, c), &device())?)
}

pub fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DTYPE)?.to_vec2::<f64>()?)
}

pub fn to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DTYPE)?.flatten_all()?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-5.0, 0.0, 5.0]], &device()).unwrap();
        let s = to_rows(&softmax(&x).unwrap()).unwrap();
        for row in s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_positions_get_zero_weight() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0]], &device()).unwrap();
        let m = additive_mask(&[true, false, true], &[1, 3]).unwrap();
        let s = to_vec(&softmax(&(x + m).unwrap()).unwrap()).unwrap();
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = to_rows(&causal_mask(3).unwrap()).unwrap();
        assert_eq!(m[0][0], 0.0);
        assert_eq!(m[0][1], NEG_INF);
        assert_eq!(m[2][1], 0.0);
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let mut store = ParamStore::new(1);
        let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 4.0, 9.0]], &device()).unwrap();
        let y = to_vec(&ln.forward(&x).unwrap()).unwrap();
        let mean = y.iter().sum::<f64>() / 4.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn param_store_is_seeded() {
        let mut a = ParamStore::new(7);
        let mut b = ParamStore::new(7);
        let wa = a.glorot("w", 3, 3).unwrap();
        let wb = b.glorot("w", 3, 3).unwrap();
        assert_eq!(to_vec(wa.as_tensor()).unwrap(), to_vec(wb.as_tensor()).unwrap());
        assert!(a.glorot("w", 1, 1).is_err());
    }

    #[test]
    fn eval_ctx_dropout_is_identity() {
        let ctx = Ctx::eval();
        let x = Tensor::new(&[1.0f64, 2.0], &device()).unwrap();
        assert_eq!(to_vec(&ctx.dropout(&x).unwrap()).unwrap(), vec![1.0, 2.0]);
        assert!(ctx.gaussian_noise(3).is_none());
    }
}
