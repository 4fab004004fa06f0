//! Conditional noise-prediction network: a small U-shaped encoder-decoder
//! with sinusoidal timestep embedding, residual blocks and self-attention
//! at the deepest resolution.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Linear};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_width: usize,
    pub levels: usize,
    pub groups: usize,
    pub attention: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_width: 32,
            levels: 3,
            groups: 8,
            attention: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.levels == 0 || self.groups == 0 {
            return Err(Error::InvalidConfig(
                "denoiser width, levels and groups must be positive".into(),
            ));
        }
        if self.base_width % self.groups.min(self.base_width) != 0 {
            return Err(Error::InvalidConfig(format!(
                "denoiser width {} not divisible by {} groups",
                self.base_width, self.groups
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_width << level
    }
}

fn conv3(p: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Conv2d> {
    p.conv2d(name, c_in, c_out, 3, Conv2dConfig { padding: 1, ..Default::default() })
}

fn conv1(p: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Conv2d> {
    p.conv2d(name, c_in, c_out, 1, Conv2dConfig::default())
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(p: &mut ParamStore, name: &str, c_in: usize, c_out: usize, t_dim: usize, groups: usize) -> Result<Self> {
        Ok(ResBlock {
            norm1: p.group_norm(&format!("{name}.norm1"), c_in, groups)?,
            conv1: conv3(p, &format!("{name}.conv1"), c_in, c_out)?,
            temb: p.linear(&format!("{name}.temb"), t_dim, c_out)?,
            norm2: p.group_norm(&format!("{name}.norm2"), c_out, groups)?,
            conv2: p.conv2d_zero(
                &format!("{name}.conv2"),
                c_out,
                c_out,
                3,
                Conv2dConfig { padding: 1, ..Default::default() },
            )?,
            skip: if c_in != c_out {
                Some(conv1(p, &format!("{name}.skip"), c_in, c_out)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.temb.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

struct Attention {
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
    channels: usize,
}

impl Attention {
    fn new(p: &mut ParamStore, name: &str, c: usize, groups: usize) -> Result<Self> {
        Ok(Attention {
            norm: p.group_norm(&format!("{name}.norm"), c, groups)?,
            qkv: conv1(p, &format!("{name}.qkv"), c, 3 * c)?,
            proj: p.conv2d_zero(&format!("{name}.proj"), c, c, 1, Conv2dConfig::default())?,
            channels: c,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?.reshape((b, 3, c, h * w))?;
        let q = qkv.narrow(1, 0, 1)?.squeeze(1)?.transpose(1, 2)?.contiguous()?;
        let k = qkv.narrow(1, 1, 1)?.squeeze(1)?.contiguous()?;
        let v = qkv.narrow(1, 2, 1)?.squeeze(1)?.contiguous()?;
        let scale = 1.0 / (self.channels as f64).sqrt();
        let attn = candle_nn::ops::softmax_last_dim(&(q.matmul(&k)? * scale)?)?;
        // (b, c, n) x (b, n, n)^T
        let out = v.matmul(&attn.transpose(1, 2)?.contiguous()?)?.reshape((b, c, h, w))?;
        Ok((x + self.proj.forward(&out)?)?)
    }
}

/// Sinusoidal embedding of integer timesteps, shape `(B, dim)`.
pub fn timestep_embedding(ts: &[usize], dim: usize, device: &candle_core::Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let mut row = vec![0f32; dim];
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            let a = t as f64 * freq;
            row[k] = a.sin() as f32;
            row[half + k] = a.cos() as f32;
        }
        v.extend(row);
    }
    Ok(Tensor::from_vec(v, (ts.len(), dim), device)?)
}

pub struct Denoiser {
    pub config: DenoiserConfig,
    params: ParamStore,
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    down: Vec<ResBlock>,
    downsample: Vec<Conv2d>,
    mid1: ResBlock,
    attn: Option<Attention>,
    mid2: ResBlock,
    up: Vec<ResBlock>,
    upsample: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new(seed);
        let (w, g, l) = (config.base_width, config.groups, config.levels);
        let t_dim = 4 * w;
        let conv_in = conv3(&mut p, "conv_in", 4, w)?;
        let time1 = p.linear("time.fc1", w, t_dim)?;
        let time2 = p.linear("time.fc2", t_dim, t_dim)?;
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut c_prev = w;
        for i in 0..l {
            let c = config.channels(i);
            down.push(ResBlock::new(&mut p, &format!("down{i}.res"), c_prev, c, t_dim, g)?);
            if i + 1 < l {
                downsample.push(p.conv2d(
                    &format!("down{i}.pool"),
                    c,
                    c,
                    3,
                    Conv2dConfig { padding: 1, stride: 2, ..Default::default() },
                )?);
            }
            c_prev = c;
        }
        let c_mid = config.channels(l - 1);
        let mid1 = ResBlock::new(&mut p, "mid.res1", c_mid, c_mid, t_dim, g)?;
        let attn = if config.attention {
            Some(Attention::new(&mut p, "mid.attn", c_mid, g)?)
        } else {
            None
        };
        let mid2 = ResBlock::new(&mut p, "mid.res2", c_mid, c_mid, t_dim, g)?;
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for i in 0..l {
            let c = config.channels(i);
            up.push(ResBlock::new(&mut p, &format!("up{i}.res"), 2 * c, c, t_dim, g)?);
            if i > 0 {
                upsample.push(conv3(&mut p, &format!("up{i}.conv"), c, config.channels(i - 1))?);
            }
        }
        let norm_out = p.group_norm("out.norm", w, g)?;
        let conv_out = p.conv2d_zero("out.conv", w, 1, 3, Conv2dConfig { padding: 1, ..Default::default() })?;
        Ok(Denoiser {
            config: config.clone(),
            params: p,
            conv_in,
            time1,
            time2,
            down,
            downsample,
            mid1,
            attn,
            mid2,
            up,
            upsample,
            norm_out,
            conv_out,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// ε̂ for `x_t: (B,1,H,W)`, `cond: (B,3,H,W)`, one timestep per sample.
    pub fn forward(&self, x_t: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        let (b, c1, h, w) = x_t.dims4()?;
        let (b2, c3, h2, w2) = cond.dims4()?;
        if c1 != 1 || c3 != 3 || (b, h, w) != (b2, h2, w2) || ts.len() != b {
            return Err(Error::shape(format!(
                "denoiser input {:?}, conditioning {:?}, {} timesteps",
                x_t.dims(),
                cond.dims(),
                ts.len()
            )));
        }
        let x = Tensor::cat(&[x_t, &cond.to_dtype(x_t.dtype())?], 1)?.to_dtype(DType::F32)?;
        let temb = timestep_embedding(ts, self.config.base_width, x.device())?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;

        let mut hs = self.conv_in.forward(&x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, block) in self.down.iter().enumerate() {
            hs = block.forward(&hs, &temb)?;
            skips.push(hs.clone());
            if let Some(ds) = self.downsample.get(i) {
                hs = ds.forward(&hs)?;
            }
        }
        hs = self.mid1.forward(&hs, &temb)?;
        if let Some(a) = &self.attn {
            hs = a.forward(&hs)?;
        }
        hs = self.mid2.forward(&hs, &temb)?;
        for i in (0..self.up.len()).rev() {
            let skip = &skips[i];
            hs = Tensor::cat(&[&hs, skip], 1)?;
            hs = self.up[i].forward(&hs, &temb)?;
            if i > 0 {
                let (sh, sw) = (skips[i - 1].dim(2)?, skips[i - 1].dim(3)?);
                hs = self.upsample[i - 1].forward(&hs.upsample_nearest2d(sh, sw)?)?;
            }
        }
        let out = self.conv_out.forward(&self.norm_out.forward(&hs)?.silu()?)?;
        debug_assert_eq!(out.dim(D::Minus1)?, w);
        Ok(out)
    }
}

/// ε̂_θ(x_t, t | c) for a single image: `x_t: (H,W)`, `c: (3,H,W)`.
pub fn predict_noise(
    net: &Denoiser,
    x_t: &Tensor,
    t: usize,
    c: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    let (h, w) = x_t.dims2()?;
    let (cc, ch, cw) = c.dims3()?;
    if cc != 3 || (h, w) != (ch, cw) {
        return Err(Error::shape(format!("x_t {:?} vs conditioning {:?}", x_t.dims(), c.dims())));
    }
    let out = net.forward(&x_t.reshape((1, 1, h, w))?, &[t], &c.unsqueeze(0)?)?;
    Ok(out.reshape((1, h, w))?)
}

#[cfg(test)]
mod tests {
    use candle_core::Device;

    use super::*;

    fn small() -> DenoiserConfig {
        DenoiserConfig { base_width: 8, levels: 3, groups: 4, attention: true }
    }

    #[test]
    fn shape_and_determinism() {
        let net = Denoiser::new(&small(), 1).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::arange(0f32, 2.0 * 18.0 * 18.0, &dev).unwrap().reshape((2, 1, 18, 18)).unwrap();
        let x = (x * 0.001).unwrap();
        let c = Tensor::ones((2, 3, 18, 18), DType::F32, &dev).unwrap();
        let a = net.forward(&x, &[3, 77], &c).unwrap();
        assert_eq!(a.dims(), &[2, 1, 18, 18]);
        let b = Denoiser::new(&small(), 1).unwrap().forward(&x, &[3, 77], &c).unwrap();
        let (a, b) = (a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_conditioning() {
        let net = Denoiser::new(&small(), 1).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::zeros((1, 1, 8, 8), DType::F32, &dev).unwrap();
        let c = Tensor::zeros((1, 2, 8, 8), DType::F32, &dev).unwrap();
        assert!(matches!(net.forward(&x, &[1], &c), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn embedding_distinguishes_timesteps() {
        let e = timestep_embedding(&[1, 2], 8, &Device::Cpu).unwrap().to_vec2::<f32>().unwrap();
        assert_ne!(e[0], e[1]);
        assert!((e[0][0] - 1f32.sin()).abs() < 1e-6);
    }
}
