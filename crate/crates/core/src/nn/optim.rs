use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::params::{ParamStore, TensorData, TensorMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: TensorMap,
    pub v: TensorMap,
}

/// Adam with optional global gradient-norm clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: Option<f64>,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, max_grad_norm: Option<f64>) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        let mut gs = Vec::new();
        for (name, var) in params.vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                gs.push((name, var, g.detach()));
            }
        }
        let mut scale = 1.0;
        if let Some(max) = self.max_grad_norm {
            let mut sq = 0.0f64;
            for (_, _, g) in &gs {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
            let norm = sq.sqrt();
            if !norm.is_finite() {
                return Err(Error::TrainingDiverged { epoch: 0, step: self.step as usize });
            }
            if norm > max {
                scale = max / norm;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var, g) in gs {
            let g = if scale != 1.0 { g.affine(scale, 0.0)? } else { g };
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let next = (var.as_tensor().detach() - (update * self.lr)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn state(&self) -> Result<AdamState> {
        let dump = |map: &BTreeMap<String, Tensor>| -> Result<TensorMap> {
            map.iter()
                .map(|(k, t)| Ok((k.clone(), TensorData::from_tensor(t)?)))
                .collect()
        };
        Ok(AdamState {
            step: self.step,
            m: dump(&self.m)?,
            v: dump(&self.v)?,
        })
    }

    pub fn load_state(&mut self, state: &AdamState, params: &ParamStore) -> Result<()> {
        let device = params.device().clone();
        let restore = |map: &TensorMap| -> Result<BTreeMap<String, Tensor>> {
            map.iter()
                .map(|(k, td)| {
                    let var = params.vars().get(k).ok_or_else(|| {
                        Error::IncompatibleCheckpoint(format!("optimizer state for unknown {k}"))
                    })?;
                    if var.dims() != td.shape.as_slice() {
                        return Err(Error::IncompatibleCheckpoint(format!(
                            "optimizer state shape mismatch for {k}"
                        )));
                    }
                    Ok((k.clone(), td.to_tensor(&device)?))
                })
                .collect()
        };
        self.m = restore(&state.m)?;
        self.v = restore(&state.v)?;
        self.step = state.step;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlateauMode {
    Min,
    Max,
}

/// Multiplies the learning rate by `factor` (never below `min_lr`) after
/// `patience` epochs without relative improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub mode: PlateauMode,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(mode: PlateauMode, lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Plateau {
            mode,
            factor,
            patience,
            min_lr,
            lr,
            best: None,
            bad_epochs: 0,
        }
    }

    fn improves(&self, metric: f64) -> bool {
        const REL: f64 = 1e-4;
        match (self.best, self.mode) {
            (None, _) => true,
            (Some(b), PlateauMode::Min) => metric < b - REL * b.abs(),
            (Some(b), PlateauMode::Max) => metric > b + REL * b.abs(),
        }
    }

    /// Records one epoch's metric and returns the learning rate to use next.
    pub fn observe(&mut self, metric: f64) -> f64 {
        if self.improves(metric) {
            self.best = Some(metric);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
