use candle_core::{Device, Tensor};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::denoiser::Denoiser;
use super::process::{clamp_x0, reverse_step};
use super::schedule::NoiseSchedule;
use super::train::{cond_tensor, DiffusionCheckpoint};
use crate::error::{Error, Result};

/// Ancestral sampling over `steps` evenly strided timesteps. Each sample
/// draws its noise from its own seed, so results do not depend on batching.
/// `cond` is `(B,3,H,W)` in the diffusion domain; returns `(B,1,H,W)`
/// clamped to `[-1, 1]`.
pub fn synthesize_batch(
    net: &Denoiser,
    sched: &NoiseSchedule,
    cond: &Tensor,
    steps: usize,
    seeds: &[u64],
) -> Result<Tensor> {
    let (b, _, h, w) = cond.dims4()?;
    if seeds.len() != b {
        return Err(Error::shape(format!("{} seeds for batch of {b}", seeds.len())));
    }
    let ts = sched.strided_timesteps(steps)?;
    let sub = sched.respaced(&ts)?;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let draw = |rngs: &mut [ChaCha8Rng]| -> Result<Tensor> {
        let mut v = Vec::with_capacity(b * h * w);
        for r in rngs.iter_mut() {
            v.extend((0..h * w).map(|_| r.sample::<f32, _>(StandardNormal)));
        }
        Ok(Tensor::from_vec(v, (b, 1, h, w), &Device::Cpu)?)
    };
    let mut x = draw(&mut rngs)?;
    for k in (1..=ts.len()).rev() {
        let t = ts[k - 1];
        let eps = net.forward(&x, &vec![t; b], cond)?;
        let noise = if k > 1 { draw(&mut rngs)? } else { x.zeros_like()? };
        x = reverse_step(&x, k, &eps, &sub, &noise)?.detach();
    }
    clamp_x0(&x)
}

/// Loaded denoiser plus schedule for repeated synthesis.
pub struct Synthesizer {
    net: Denoiser,
    sched: NoiseSchedule,
    intensity_scale: f64,
    image_size: (usize, usize),
}

impl Synthesizer {
    pub fn new(ckpt: &DiffusionCheckpoint) -> Result<Self> {
        Ok(Synthesizer {
            net: ckpt.denoiser()?,
            sched: ckpt.schedule()?,
            intensity_scale: ckpt.meta.train.intensity_scale,
            image_size: ckpt.meta.image_size,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.sched.timesteps()
    }

    pub fn intensity_scale(&self) -> f64 {
        self.intensity_scale
    }

    /// Synthesizes one image per conditioning stack (z-scores, `[3,H,W]`);
    /// outputs are in the diffusion domain `[-1, 1]`.
    pub fn synthesize_many(
        &self,
        conds: &[&Array3<f32>],
        steps: usize,
        seeds: &[u64],
        batch: usize,
    ) -> Result<Vec<Array2<f32>>> {
        if conds.len() != seeds.len() {
            return Err(Error::shape(format!("{} inputs, {} seeds", conds.len(), seeds.len())));
        }
        let max = self.sched.timesteps();
        if steps == 0 || steps > max {
            return Err(Error::InvalidSteps { steps, max });
        }
        let mut out = Vec::with_capacity(conds.len());
        for (cs, ss) in conds.chunks(batch.max(1)).zip(seeds.chunks(batch.max(1))) {
            for c in cs {
                let (ch, h, w) = c.dim();
                if ch != 3 || (h, w) != self.image_size {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "conditioning {:?} does not match checkpoint image size {:?}",
                        c.dim(),
                        self.image_size
                    )));
                }
            }
            let cond = cond_tensor(cs, self.intensity_scale)?;
            let x = synthesize_batch(&self.net, &self.sched, &cond, steps, ss)?;
            let (b, _, h, w) = x.dims4()?;
            let flat = x.flatten_all()?.to_vec1::<f32>()?;
            for i in 0..b {
                out.push(Array2::from_shape_vec((h, w), flat[i * h * w..(i + 1) * h * w].to_vec()).map_err(|e| Error::shape(e.to_string()))?);
            }
        }
        Ok(out)
    }

    pub fn synthesize(&self, c: &Array3<f32>, steps: usize, seed: u64) -> Result<Array2<f32>> {
        Ok(self.synthesize_many(&[c], steps, &[seed], 1)?.remove(0))
    }
}

/// Synthesizes T1ce for one conditioning stack; output in `[-1, 1]`.
pub fn synthesize_t1ce(ckpt: &DiffusionCheckpoint, c: &Array3<f32>, steps: usize, seed: u64) -> Result<Array2<f32>> {
    Synthesizer::new(ckpt)?.synthesize(c, steps, seed)
}
