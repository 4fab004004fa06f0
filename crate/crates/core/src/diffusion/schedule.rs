use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            timesteps: 1000,
            kind: ScheduleKind::Linear,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.timesteps, self.kind, self.beta_min, self.beta_max)
    }
}

/// β, α and ᾱ tables; timestep `t` in `1..=T` indexes entry `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn build_schedule(
    timesteps: usize,
    kind: ScheduleKind,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::InvalidSchedule("T must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }
    let n = timesteps as f64;
    let betas = match kind {
        ScheduleKind::Linear => (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (n - 1.0)
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            // cosine ᾱ curve, offset s = 0.008, betas clipped into the bounds
            let f = |t: f64| {
                let x = (t / n + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            (1..=timesteps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(beta_min, beta_max))
                .collect()
        }
    };
    NoiseSchedule::from_betas(kind, betas)
}

impl NoiseSchedule {
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("empty beta table".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            kind,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::InvalidTimestep {
                t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior variance β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Evenly strided subsequence of `steps` timesteps, ascending, ending at T.
    pub fn strided_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.timesteps();
        if steps == 0 || steps > t_max {
            return Err(Error::InvalidSteps { steps, max: t_max });
        }
        let mut ts: Vec<usize> = (1..=steps)
            .map(|k| ((k as f64 * t_max as f64 / steps as f64).round() as usize).clamp(1, t_max))
            .collect();
        ts.dedup();
        Ok(ts)
    }

    /// Schedule over the subsequence `ts` (ascending) whose ᾱ'_k = ᾱ_{ts[k]}.
    pub fn respaced(&self, ts: &[usize]) -> Result<NoiseSchedule> {
        let mut prev = 1.0;
        let mut last = 0;
        let mut betas = Vec::with_capacity(ts.len());
        for &t in ts {
            self.check_t(t)?;
            if t <= last {
                return Err(Error::InvalidSchedule("respacing timesteps must ascend".into()));
            }
            let ab = self.alpha_bar(t);
            betas.push(1.0 - ab / prev);
            prev = ab;
            last = t;
        }
        NoiseSchedule::from_betas(self.kind, betas)
    }
}
