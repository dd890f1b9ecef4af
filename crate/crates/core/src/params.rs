//! Tunable parameter storage with seeded, order-deterministic initialisation.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, VcpError};
use crate::ops::{Conv2d, ConvSpec, LayerNorm, Linear};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Normal resampled inside two standard deviations.
    TruncNormal(f64),
    /// `N(0, sqrt(2 / fan_out))`, the usual transformer-encoder convolution init.
    ConvFanOut,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform,
    Uniform(f64),
}

pub(crate) fn sample(rng: &mut ChaCha8Rng, init: Init, shape: &[usize]) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal(std) => (0..n).map(|_| std * normal(rng)).collect(),
        Init::TruncNormal(std) => (0..n)
            .map(|_| loop {
                let z = normal(rng);
                if z.abs() <= 2.0 {
                    break std * z;
                }
            })
            .collect(),
        Init::ConvFanOut => {
            let fan_out = shape[0] * shape[2..].iter().product::<usize>();
            let std = (2.0 / fan_out as f64).sqrt();
            (0..n).map(|_| std * normal(rng)).collect()
        }
        Init::FanInUniform => {
            let fan_in: usize = shape[1..].iter().product();
            let b = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-b..=b)).collect()
        }
        Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
    }
}

/// Owns every trainable variable of a model.
pub struct ParamStore {
    varmap: VarMap,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    order: Vec<String>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            varmap: VarMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
            order: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut data = self.varmap.data().lock().expect("parameter map poisoned");
        if data.contains_key(name) {
            return Err(VcpError::Config(format!("parameter `{name}` declared twice")));
        }
        let values = sample(&mut self.rng, init, shape);
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        self.order.push(name.to_string());
        Ok(out)
    }

    pub fn linear(&mut self, prefix: &str, inp: usize, out: usize, bias: bool) -> Result<Linear> {
        let weight = self.tensor(&format!("{prefix}.weight"), &[out, inp], Init::TruncNormal(0.02))?;
        let bias = if bias {
            Some(self.tensor(&format!("{prefix}.bias"), &[out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn conv(&mut self, prefix: &str, spec: ConvSpec, bias: bool) -> Result<Conv2d> {
        let weight = self.tensor(&format!("{prefix}.weight"), &spec.weight_shape(), Init::FanInUniform)?;
        let bias = if bias {
            Some(self.tensor(&format!("{prefix}.bias"), &[spec.out_channels], Init::Zeros)?)
        } else {
            None
        };
        Ok(Conv2d { spec, weight, bias })
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize, eps: f64) -> Result<LayerNorm> {
        Ok(LayerNorm {
            weight: self.tensor(&format!("{prefix}.weight"), &[dim], Init::Ones)?,
            bias: self.tensor(&format!("{prefix}.bias"), &[dim], Init::Zeros)?,
            eps,
        })
    }

    /// Names in declaration order.
    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.varmap.data().lock().expect("parameter map poisoned").get(name).cloned()
    }

    /// All variables in declaration order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("parameter map poisoned");
        self.order.iter().map(|n| (n.clone(), data[n].clone())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Parameter count grouped by the first dotted component of each name.
    pub fn count_by_module(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, var) in self.vars() {
            let module = name.split('.').next().unwrap_or("").to_string();
            *out.entry(module).or_insert(0) += var.elem_count();
        }
        out
    }

    /// Overwrites a variable in place, keeping every existing handle valid.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .var(name)
            .ok_or_else(|| VcpError::Checkpoint(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(VcpError::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, checkpoint holds {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }
}
