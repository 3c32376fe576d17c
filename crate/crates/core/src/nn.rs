//! Minimal convolutional building blocks on top of candle tensors: a named
//! parameter registry with frozen flags, seeded initialization, and the
//! conv / group-norm / residual / attention blocks of the autoencoder.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub frozen: bool,
}

/// Named parameters of one network, ordered by name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    device: Device,
    dtype: DType,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual conv default.
    Uniform { fan_in: usize },
}

impl ParamStore {
    pub fn new(device: Device, dtype: DType) -> Self {
        Self {
            params: BTreeMap::new(),
            device,
            dtype,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(k, p)| (k.clone(), p.var.clone()))
            .collect()
    }

    pub fn builder<'a>(&'a mut self, rng: &'a mut ChaCha8Rng) -> ParamBuilder<'a> {
        ParamBuilder {
            store: self,
            rng,
            prefix: String::new(),
            frozen: false,
        }
    }

    /// Overwrites parameter values in place; every name must exist with a
    /// matching shape.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in &self.params {
            let v = values
                .get(name)
                .ok_or_else(|| Error::shape(format!("missing parameter {name}")))?;
            if v.dims() != p.var.dims() {
                return Err(Error::shape(format!(
                    "{name}: stored {:?}, model {:?}",
                    v.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&v.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Deep copy of the current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .iter()
            .map(|(k, p)| Ok((k.clone(), p.var.as_tensor().copy()?)))
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values of the selected
    /// parameters.
    pub fn digest(&self, filter: impl Fn(&str, &Param) -> bool) -> Result<String> {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(k, p)| filter(k, p)) {
            hash_tensor(&mut h, name, p.var.as_tensor())?;
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn frozen_digest(&self) -> Result<String> {
        self.digest(|_, p| p.frozen)
    }

    pub fn full_digest(&self) -> Result<String> {
        self.digest(|_, _| true)
    }
}

pub(crate) fn hash_tensor(h: &mut Sha256, name: &str, t: &Tensor) -> Result<()> {
    h.update(name.as_bytes());
    for d in t.dims() {
        h.update((*d as u64).to_le_bytes());
    }
    match t.dtype() {
        DType::F64 => {
            for v in t.flatten_all()?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        _ => {
            for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
    }
    Ok(())
}

pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    frozen: bool,
}

impl<'a> ParamBuilder<'a> {
    /// Child builder whose parameter names are prefixed with `name.`.
    pub fn pp(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
            frozen: self.frozen,
        }
    }

    pub fn frozen(mut self, frozen: bool) -> Self {
        self.frozen = frozen;
        self
    }

    /// Registers a parameter. Frozen parameters come back detached so no
    /// gradient is ever recorded through them.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
        };
        self.param_values(name, shape, values)
    }

    /// Registers a parameter with explicit initial values.
    pub fn param_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        if self.store.params.contains_key(&full) {
            return Err(Error::Config(format!("duplicate parameter {full}")));
        }
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = if self.frozen {
            var.as_detached_tensor()
        } else {
            var.as_tensor().clone()
        };
        self.store.params.insert(
            full,
            Param {
                var,
                frozen: self.frozen,
            },
        );
        Ok(out)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        b: &mut ParamBuilder,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = b.param("weight", &[c_out, c_in, kernel, kernel], Init::Uniform { fan_in })?;
        let bias = b.param("bias", &[c_out], Init::Uniform { fan_in })?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride,
            padding,
        })
    }

    /// 1x1 projection whose weight and bias start at zero.
    pub fn zero_1x1(b: &mut ParamBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        let weight = b.param("weight", &[c_out, c_in, 1, 1], Init::Zeros)?;
        let bias = b.param("bias", &[c_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride: 1,
            padding: 0,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dims1()?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl GroupNorm {
    pub fn new(b: &mut ParamBuilder, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "{channels} channels not divisible into {groups} norm groups"
            )));
        }
        Ok(Self {
            groups,
            gamma: b.param("weight", &[channels], Init::Ones)?,
            beta: b.param("bias", &[channels], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .reshape((n, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct ResnetBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResnetBlock {
    pub fn new(b: &mut ParamBuilder, groups: usize, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut b.pp("norm1"), groups, c_in)?,
            conv1: Conv2d::new(&mut b.pp("conv1"), c_in, c_out, 3, 1, 1)?,
            norm2: GroupNorm::new(&mut b.pp("norm2"), groups, c_out)?,
            conv2: Conv2d::new(&mut b.pp("conv2"), c_out, c_out, 3, 1, 1)?,
            shortcut: if c_in != c_out {
                Some(Conv2d::new(&mut b.pp("nin_shortcut"), c_in, c_out, 1, 1, 0)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Single-head spatial self-attention over all positions.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
}

impl AttnBlock {
    pub fn new(b: &mut ParamBuilder, groups: usize, c: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut b.pp("norm"), groups, c)?,
            q: Conv2d::new(&mut b.pp("q"), c, c, 1, 1, 0)?,
            k: Conv2d::new(&mut b.pp("k"), c, c, 1, 1, 0)?,
            v: Conv2d::new(&mut b.pp("v"), c, c, 1, 1, 0)?,
            proj: Conv2d::new(&mut b.pp("proj_out"), c, c, 1, 1, 0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let hn = self.norm.forward(x)?;
        let q = self.q.forward(&hn)?.reshape((n, c, h * w))?.transpose(1, 2)?;
        let k = self.k.forward(&hn)?.reshape((n, c, h * w))?;
        let v = self.v.forward(&hn)?.reshape((n, c, h * w))?;
        let scores = (q.contiguous()?.matmul(&k.contiguous()?)? / (c as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let out = v.contiguous()?.matmul(&attn.transpose(1, 2)?.contiguous()?)?;
        let out = self.proj.forward(&out.reshape((n, c, h, w))?)?;
        Ok((x + out)?)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

#[derive(Debug, Clone)]
pub struct Downsample {
    conv: Conv2d,
}

impl Downsample {
    pub fn new(b: &mut ParamBuilder, c: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut b.pp("conv"), c, c, 3, 2, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(x)
    }
}

#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new(b: &mut ParamBuilder, c: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut b.pp("conv"), c, c, 3, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.conv.forward(&x.upsample_nearest2d(h * 2, w * 2)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_do_not_track_gradients() {
        let mut store = ParamStore::new(Device::Cpu, DType::F64);
        let mut rng = seeded_rng(0);
        let mut b = store.builder(&mut rng);
        let frozen = b.pp("enc").frozen(true).param("w", &[2], Init::Ones).unwrap();
        let live = b.pp("dec").param("w", &[2], Init::Ones).unwrap();
        let loss = (frozen * &live).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let enc = store.get("enc.w").unwrap();
        let dec = store.get("dec.w").unwrap();
        assert!(enc.frozen && !dec.frozen);
        assert!(grads.get(&enc.var).is_none());
        assert!(grads.get(&dec.var).is_some());
        assert_eq!(store.trainable().len(), 1);
    }

    #[test]
    fn assign_updates_detached_views() {
        let mut store = ParamStore::new(Device::Cpu, DType::F32);
        let mut rng = seeded_rng(0);
        let view = store
            .builder(&mut rng)
            .frozen(true)
            .param("w", &[3], Init::Zeros)
            .unwrap();
        let before = store.frozen_digest().unwrap();
        let mut vals = BTreeMap::new();
        vals.insert("w".to_string(), Tensor::new(&[1f32, 2., 3.], &Device::Cpu).unwrap());
        store.assign(&vals).unwrap();
        assert_eq!(view.to_vec1::<f32>().unwrap(), vec![1., 2., 3.]);
        assert_ne!(before, store.frozen_digest().unwrap());
    }

    #[test]
    fn group_norm_normalizes_groups() {
        let mut store = ParamStore::new(Device::Cpu, DType::F64);
        let mut rng = seeded_rng(1);
        let gn = GroupNorm::new(&mut store.builder(&mut rng), 2, 4).unwrap();
        let x = Tensor::arange(0f64, 32., &Device::Cpu)
            .unwrap()
            .reshape((1, 4, 2, 4))
            .unwrap();
        let y = gn.forward(&x).unwrap();
        let g = y.reshape((2, 16)).unwrap();
        let means: Vec<f64> = g.mean(1).unwrap().to_vec1().unwrap();
        for m in means {
            assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1f64, 2., 3.], [-1., 0., 50.]], &Device::Cpu).unwrap();
        let s: Vec<f64> = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
