//! Seeded parameter storage and the small layer types built on it.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::ops;

/// Named learnable parameters, initialised from a seeded stream so that two
/// stores built with the same seed are bitwise identical.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite every parameter whose name matches `pred` with `value`.
    pub fn fill_where(&self, pred: impl Fn(&str) -> bool, value: f64) -> Result<()> {
        for (name, var) in &self.vars {
            if pred(name) {
                let t = (var.zeros_like()? + value)?;
                var.set(&t)?;
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Replace values from `tensors`; names and shapes must match exactly.
    pub fn assign(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| shape_err!("missing parameter `{name}`"))?;
            if t.dims() != var.dims() {
                return Err(shape_err!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                ));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !self.vars.contains_key(*k)) {
            return Err(shape_err!("unexpected parameter `{extra}`"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.tensors(), path)
            .map_err(|e| Error::load(path, e))
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        let tensors =
            candle_core::safetensors::load(path, &self.device).map_err(|e| Error::load(path, e))?;
        self.assign(&tensors)
    }

    fn create(&mut self, name: String, dims: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(shape_err!("parameter `{name}` declared twice"));
        }
        let n: usize = dims.iter().product();
        let values: Vec<f64> = match init {
            Init::Uniform(bound) => (0..n)
                .map(|_| self.rng.random_range(-bound..=bound))
                .collect(),
            Init::Const(c) => vec![c; n],
        };
        let t = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Const(f64),
}

/// Prefix-scoped view into a [`ParamStore`].
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl ParamBuilder<'_> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: self.store,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, dims: &[usize], bound: f64) -> Result<Tensor> {
        let full = self.full(name);
        self.store.create(full, dims, Init::Uniform(bound))
    }

    pub fn constant(&mut self, name: &str, dims: &[usize], value: f64) -> Result<Tensor> {
        let full = self.full(name);
        self.store.create(full, dims, Init::Const(value))
    }
}

/// 2-D convolution with bias over [N, C, H, W] inputs.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::with_gain(pb, in_channels, out_channels, kernel, stride, padding, 1.0 / 3f64.sqrt())
    }

    /// Weights uniform in +-gain * sqrt(3 / fan_in); `new` uses gain
    /// 1/sqrt(3), a ReLU-preserving init uses sqrt(2). Biases stay
    /// uniform in +-1/sqrt(fan_in).
    pub fn with_gain(
        pb: &mut ParamBuilder<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let w_bound = gain * (3.0 / fan_in).sqrt();
        let weight = pb.uniform("weight", &[out_channels, in_channels, kernel, kernel], w_bound)?;
        let bias = pb.uniform("bias", &[out_channels], 1.0 / fan_in.sqrt())?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        out_channels * in_channels * kernel * kernel + out_channels
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    /// Spatial output size for an input of `size` pixels along one axis.
    pub fn output_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel()) / self.stride + 1
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(x, &self.weight, self.padding, self.stride)?;
        let b = self.bias.reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Affine map over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = pb.uniform("weight", &[out_dim, in_dim], bound)?;
        let bias = pb.uniform("bias", &[out_dim], bound)?;
        Ok(Self { weight, bias })
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// Layer normalisation over the channel (last) dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        let gamma = pb.constant("weight", &[dim], 1.0)?;
        let beta = pb.constant("bias", &[dim], 0.0)?;
        Ok(Self {
            gamma,
            beta,
            eps: Self::EPS,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn gamma(&self) -> &Tensor {
        &self.gamma
    }

    pub fn beta(&self) -> &Tensor {
        &self.beta
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm_last(x, &self.gamma, &self.beta, self.eps)
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, hidden: usize) -> Result<Self> {
        let fc1 = Linear::new(&mut pb.pp("fc1"), dim, hidden)?;
        let fc2 = Linear::new(&mut pb.pp("fc2"), hidden, dim)?;
        Ok(Self { fc1, fc2 })
    }

    pub fn param_count(dim: usize, hidden: usize) -> usize {
        Linear::param_count(dim, hidden) + Linear::param_count(hidden, dim)
    }

    pub fn fc1(&self) -> &Linear {
        &self.fc1
    }

    pub fn fc2(&self) -> &Linear {
        &self.fc2
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}
