//! Named parameters, layer primitives and their seeded initialisation.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Pretrained and frozen.
    Backbone,
    /// Feature reduction shared by the support and query paths.
    Shared,
    Support,
    Query,
}

impl ParamGroup {
    pub fn from_name(name: &str) -> Option<Self> {
        match name.split('.').next()? {
            "backbone" => Some(Self::Backbone),
            "shared" => Some(Self::Shared),
            "support" => Some(Self::Support),
            "query" => Some(Self::Query),
            _ => None,
        }
    }

    pub fn trainable(self) -> bool {
        self != ParamGroup::Backbone
    }
}

/// All model parameters keyed by dotted name (`support.enc0.a.weight`, ...).
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(device: Device, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
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

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(&str, &Var)> {
        self.vars
            .iter()
            .filter(|(n, _)| ParamGroup::from_name(n).is_some_and(ParamGroup::trainable))
            .map(|(n, v)| (n.as_str(), v))
            .collect()
    }

    pub fn group(&self, group: ParamGroup) -> Vec<(&str, &Var)> {
        self.vars
            .iter()
            .filter(|(n, _)| ParamGroup::from_name(n) == Some(group))
            .map(|(n, v)| (n.as_str(), v))
            .collect()
    }

    /// Bit-level fingerprint of a parameter group.
    pub fn fingerprint(&self, group: ParamGroup) -> Result<u64> {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, var) in self.group(group) {
            name.hash(&mut h);
            let flat = var
                .as_tensor()
                .flatten_all()?
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?;
            for v in flat {
                v.to_bits().hash(&mut h);
            }
        }
        Ok(h.finish())
    }

    fn insert(&mut self, name: String, tensor: Tensor) -> Result<Tensor> {
        if ParamGroup::from_name(&name).is_none() {
            return Err(Error::Config(format!("parameter {name} has no group prefix")));
        }
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&tensor)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(t)
    }

    /// Overwrites a parameter's value in place.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }
}

/// Seeded parameter factory writing into a [`ParamStore`].
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name` appended to the current prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() {
            name.to_string()
        } else {
            format!("{saved}.{name}")
        };
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let t = Tensor::from_vec(data, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let full = self.full_name(name);
        self.store.insert(full, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = (Tensor::ones(shape, self.store.dtype, &self.store.device)? * value)?;
        let full = self.full_name(name);
        self.store.insert(full, t)
    }

    /// Kaiming-normal convolution with zero bias.
    pub fn conv(&mut self, name: &str, spec: ConvSpec) -> Result<Conv> {
        self.scoped(name, |init| {
            let fan_in = spec.in_channels * spec.kernel * spec.kernel;
            let weight = init.normal(
                "weight",
                &[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
                (2.0 / fan_in as f64).sqrt(),
            )?;
            let bias = if spec.bias {
                Some(init.constant("bias", &[spec.out_channels], 0.0)?)
            } else {
                None
            };
            Ok(Conv { weight, bias, spec })
        })
    }

    /// 2×2 stride-2 transposed convolution.
    pub fn up_conv(&mut self, name: &str, in_channels: usize, out_channels: usize) -> Result<UpConv> {
        self.scoped(name, |init| {
            let weight = init.normal(
                "weight",
                &[in_channels, out_channels, 2, 2],
                (2.0 / in_channels as f64).sqrt(),
            )?;
            let bias = init.constant("bias", &[out_channels], 0.0)?;
            Ok(UpConv { weight, bias })
        })
    }

    /// Batch norm in inference form (identity statistics until loaded).
    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<FrozenBatchNorm> {
        self.scoped(name, |init| {
            Ok(FrozenBatchNorm {
                weight: init.constant("weight", &[channels], 1.0)?,
                bias: init.constant("bias", &[channels], 0.0)?,
                running_mean: init.constant("running_mean", &[channels], 0.0)?,
                running_var: init.constant("running_var", &[channels], 1.0)?,
            })
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Same-size 3×3 convolution.
    pub fn k3(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            dilation: 1,
            bias: true,
        }
    }

    pub fn k1(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel: 1,
            padding: 0,
            ..Self::k3(in_channels, out_channels)
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn kernel(mut self, kernel: usize) -> Self {
        self.kernel = kernel;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    spec: ConvSpec,
}

impl Conv {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = &self.spec;
        let y = x.conv2d(&self.weight, s.padding, s.stride, s.dilation, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, s.out_channels, 1, 1))?)?,
            None => y,
        })
    }

    pub fn forward_relu(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.relu()?)
    }
}

#[derive(Clone, Debug)]
pub struct UpConv {
    weight: Tensor,
    bias: Tensor,
}

impl UpConv {
    /// Doubles the spatial size.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, 0, 0, 2, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct FrozenBatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
}

impl FrozenBatchNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.weight.dim(0)?;
        let scale = (&self.weight / (&self.running_var + 1e-5)?.sqrt()?)?;
        let shift = (&self.bias - (&self.running_mean * &scale)?)?;
        Ok(x
            .broadcast_mul(&scale.reshape((1, c, 1, 1))?)?
            .broadcast_add(&shift.reshape((1, c, 1, 1))?)?)
    }
}
