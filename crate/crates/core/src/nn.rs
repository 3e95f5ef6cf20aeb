//! Named parameter storage and the small set of differentiable building blocks
//! the networks are assembled from.
//!
//! Every network in the crate is a config plus a [`ParamStore`]; forward passes
//! look parameters up by name. A frozen store hands out detached tensors, so no
//! gradient is ever produced for it and no optimizer can reach it.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{invalid, numeric, Result};

#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    frozen: bool,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self { vars: BTreeMap::new(), frozen: false, dtype, device: device.clone() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Shares the underlying variables but refuses to produce gradients.
    pub fn frozen_view(&self) -> Self {
        let mut out = self.clone();
        out.frozen = true;
        out
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let t = t.to_dtype(self.dtype)?.to_device(&self.device)?;
        self.vars.insert(name.into(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| invalid!("missing parameter `{name}`"))?;
        Ok(if self.frozen { v.as_tensor().detach() } else { v.as_tensor().clone() })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Trainable variables; empty when frozen.
    pub fn trainable(&self) -> Vec<Var> {
        if self.frozen {
            Vec::new()
        } else {
            self.vars.values().cloned().collect()
        }
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Copies every tensor into fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self { vars, frozen: self.frozen, dtype: self.dtype, device: self.device.clone() })
    }

    /// Converts every parameter to `dtype`, producing an independent store.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new(dtype, &self.device);
        out.frozen = self.frozen;
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().detach())?;
        }
        Ok(out)
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().detach())).collect()
    }

    /// Overwrites the value of an existing parameter, keeping its shape.
    pub fn assign(&self, name: &str, t: &Tensor) -> Result<()> {
        let v = self.vars.get(name).ok_or_else(|| invalid!("missing parameter `{name}`"))?;
        if v.dims() != t.dims() {
            return Err(invalid!("shape mismatch assigning `{name}`: {:?} vs {:?}", v.dims(), t.dims()));
        }
        v.set(&t.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// SHA-256 over names, shapes and raw little-endian values, in name order.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.vars {
            h.update(k.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let flat = v.as_tensor().flatten_all()?;
            match self.dtype {
                DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|x| h.update(x.to_le_bytes())),
                _ => flat
                    .to_dtype(DType::F32)?
                    .to_vec1::<f32>()?
                    .iter()
                    .for_each(|x| h.update(x.to_le_bytes())),
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            if !is_finite(v.as_tensor())? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Gaussian tensor from a seeded stream; candle's own CPU RNG is not seedable.
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64, device: &Device) -> Result<Tensor> {
    let count: usize = shape.iter().product();
    let data: Vec<f64> = (0..count)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v * std
        })
        .collect();
    Ok(Tensor::from_vec(data, shape, device)?)
}

pub fn init_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    input: usize,
    output: usize,
    gain: f64,
) -> Result<()> {
    let dev = store.device().clone();
    let w = randn(rng, &[output, input], gain / (input as f64).sqrt(), &dev)?;
    store.insert(format!("{prefix}.weight"), w)?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(output, DType::F64, &dev)?)?;
    Ok(())
}

pub fn init_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    input: usize,
    output: usize,
    kernel: usize,
    gain: f64,
) -> Result<()> {
    let dev = store.device().clone();
    let fan_in = (input * kernel * kernel) as f64;
    let w = randn(rng, &[output, input, kernel, kernel], gain / fan_in.sqrt(), &dev)?;
    store.insert(format!("{prefix}.weight"), w)?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(output, DType::F64, &dev)?)?;
    Ok(())
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
    let dev = store.device().clone();
    store.insert(format!("{prefix}.gamma"), Tensor::ones(dim, DType::F64, &dev)?)?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros(dim, DType::F64, &dev)?)?;
    Ok(())
}

/// `x · Wᵀ + b` over the last dimension of an input of any rank.
pub fn linear(store: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = store.get(&format!("{prefix}.weight"))?;
    let b = store.get(&format!("{prefix}.bias"))?;
    let dims = x.dims().to_vec();
    let input = *dims.last().ok_or_else(|| invalid!("linear on a scalar"))?;
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let y = x.reshape((rows, input))?.matmul(&w.t()?)?.broadcast_add(&b)?;
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = w.dim(0)?;
    Ok(y.reshape(out_dims)?)
}

/// Same-padded convolution with bias.
pub fn conv2d(store: &ParamStore, prefix: &str, x: &Tensor, stride: usize) -> Result<Tensor> {
    let w = store.get(&format!("{prefix}.weight"))?;
    let b = store.get(&format!("{prefix}.bias"))?;
    let y = conv2d_same(x, &w, stride)?;
    Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?)
}

/// Zero-padded "same" convolution without bias, written as shifted slices and
/// one matrix product so that its backward pass is matrix products as well.
pub fn conv2d_same(x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, ci, k, k2) = w.dims4()?;
    if ci != c || k != k2 || k % 2 == 0 {
        return Err(invalid!("conv weight {:?} does not fit input {:?}", w.dims(), x.dims()));
    }
    if stride == 0 || h % stride != 0 || wd % stride != 0 {
        return Err(invalid!("stride {stride} does not divide {h}x{wd}"));
    }
    let cols = if k == 1 {
        x.reshape((b, c, h * wd))?
    } else {
        let p = k / 2;
        let xp = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
        let mut shifted = Vec::with_capacity(k * k);
        for dy in 0..k {
            for dx in 0..k {
                shifted.push(xp.narrow(2, dy, h)?.narrow(3, dx, wd)?);
            }
        }
        Tensor::stack(&shifted, 2)?.reshape((b, c * k * k, h * wd))?
    };
    let y = w.reshape((o, c * k * k))?.broadcast_matmul(&cols)?.reshape((b, o, h, wd))?;
    if stride == 1 {
        return Ok(y);
    }
    let (hs, ws) = (h / stride, wd / stride);
    Ok(y.reshape((b, o, hs, stride, ws, stride))?
        .narrow(3, 0, 1)?
        .narrow(5, 0, 1)?
        .reshape((b, o, hs, ws))?)
}


/// Nearest-neighbour upsampling by an integer factor, built from a broadcast
/// so that its gradient is a plain sum.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, factor, w, factor))?
        .reshape((b, c, h * factor, w * factor))?)
}
pub fn layer_norm(store: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let gamma = store.get(&format!("{prefix}.gamma"))?;
    let beta = store.get(&format!("{prefix}.beta"))?;
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
}

/// `max(x, slope·x)` for `0 ≤ slope ≤ 1`; slope 1 is the identity.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    if slope == 1.0 {
        return Ok(x.clone());
    }
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// Numerically stable log-softmax over the last dimension.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    Ok(log_softmax(x)?.exp()?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    // max(x, 0) + log(1 + exp(-|x|))
    let pos = x.relu()?;
    let neg_abs = x.abs()?.neg()?;
    Ok((pos + (neg_abs.exp()? + 1.0)?.log()?)?)
}

pub fn is_finite(t: &Tensor) -> Result<bool> {
    let s = t.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    Ok(s.is_finite())
}

pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    if is_finite(t)? {
        Ok(())
    } else {
        Err(numeric!("{what} contains non-finite values"))
    }
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
