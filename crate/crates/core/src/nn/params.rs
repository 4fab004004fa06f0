use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Linear};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Host copy of a tensor: row-major `f32` values plus shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorData {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(TensorData {
            shape: t.dims().to_vec(),
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.shape.as_slice(), device)?)
    }

    /// Bitwise equality (distinguishes -0.0 / NaN payloads).
    pub fn bit_eq(&self, other: &TensorData) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub type TensorMap = BTreeMap<String, TensorData>;

pub fn tensor_maps_bit_eq(a: &TensorMap, b: &TensorMap) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
}

/// Named trainable parameters with seeded, construction-order
/// initialization.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn add(&mut self, name: String, shape: &[usize], values: Vec<f32>) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(t)
    }

    fn uniform(&mut self, n: usize, bound: f64) -> Vec<f32> {
        (0..n)
            .map(|_| self.rng.random_range(-bound..bound) as f32)
            .collect()
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        cfg: Conv2dConfig,
    ) -> Result<Conv2d> {
        let fan_in = c_in * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(c_out * fan_in, bound);
        let w = self.add(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], w)?;
        let b = self.uniform(c_out, bound);
        let b = self.add(format!("{name}.bias"), &[c_out], b)?;
        Ok(Conv2d::new(w, Some(b), cfg))
    }

    /// Convolution whose weights start at zero (residual-branch outputs).
    pub fn conv2d_zero(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        cfg: Conv2dConfig,
    ) -> Result<Conv2d> {
        let w = vec![0.0; c_out * c_in * kernel * kernel];
        let w = self.add(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], w)?;
        let b = self.add(format!("{name}.bias"), &[c_out], vec![0.0; c_out])?;
        Ok(Conv2d::new(w, Some(b), cfg))
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = self.uniform(d_out * d_in, bound);
        let w = self.add(format!("{name}.weight"), &[d_out, d_in], w)?;
        let b = self.uniform(d_out, bound);
        let b = self.add(format!("{name}.bias"), &[d_out], b)?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn group_norm(&mut self, name: &str, channels: usize, groups: usize) -> Result<GroupNorm> {
        let groups = groups.min(channels);
        if channels % groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "{name}: {channels} channels not divisible into {groups} groups"
            )));
        }
        let w = self.add(format!("{name}.weight"), &[channels], vec![1.0; channels])?;
        let b = self.add(format!("{name}.bias"), &[channels], vec![0.0; channels])?;
        Ok(GroupNorm::new(w, b, channels, groups, 1e-5)?)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn snapshot(&self) -> Result<TensorMap> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), TensorData::from_tensor(v.as_tensor())?)))
            .collect()
    }

    /// Overwrites every parameter from `map`; names and shapes must match.
    pub fn load(&self, map: &TensorMap) -> Result<()> {
        if map.len() != self.vars.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint has {} parameter tensors, model has {}",
                map.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let td = map.get(name).ok_or_else(|| {
                Error::IncompatibleCheckpoint(format!("parameter {name} missing"))
            })?;
            if td.shape != var.dims() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    td.shape,
                    var.dims()
                )));
            }
            var.set(&td.to_tensor(&self.device)?)?;
        }
        Ok(())
    }
}
