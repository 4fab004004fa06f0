use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, DenoiserConfig};
use super::process::{clamp_x0, forward_marginal_batch, predict_x0_batch};
use super::schedule::{NoiseSchedule, ScheduleConfig};
use crate::data::{augment, AugmentParams, SlicePair};
use crate::error::{Error, Result};
use crate::losses::{recon_loss, simple_loss, to_unit};
use crate::nn::archive::{pack_training_archive, unpack_training_archive};
use crate::nn::{Adam, AdamState, Archive, Plateau, PlateauMode, TensorMap};
use crate::seeding::{derive_seed, rng_for};

pub const COMPONENT: &str = "diffusion";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub lr_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub grad_clip: Option<f64>,
    /// z-scores are divided by this and clamped to [-1, 1].
    pub intensity_scale: f64,
    pub augment: AugmentParams,
    /// Train on tumor-bearing slices only; otherwise on every cached slice.
    pub tumor_slices_only: bool,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            epochs: 100,
            batch_size: 4,
            lr: 3e-4,
            min_lr: 1.5e-4,
            lr_factor: 0.5,
            plateau_patience: 5,
            early_stop_patience: 15,
            gamma: 0.1,
            lambda1: 0.5,
            lambda2: 0.5,
            grad_clip: Some(1.0),
            intensity_scale: 4.0,
            augment: AugmentParams::default(),
            tumor_slices_only: false,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("diffusion epochs and batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.min_lr > 0.0 && self.min_lr <= self.lr) {
            return bad("diffusion learning rates must satisfy 0 < min_lr <= lr");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("lr_factor must lie in (0, 1)");
        }
        if self.gamma < 0.0 || self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if !(self.intensity_scale > 0.0) {
            return bad("intensity_scale must be positive");
        }
        if !(0.0..=1.0).contains(&self.augment.apply_prob) {
            return bad("augment.apply_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_simple: f64,
    pub val_recon: f64,
    pub val_total: f64,
}

/// Per-epoch streams are derived from `(seed, epoch)`, so `next_epoch`
/// fully determines the RNG position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionMeta {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: DiffusionTrainConfig,
    pub image_size: (usize, usize),
    pub epochs_completed: usize,
    pub best_epoch: usize,
    pub best_score: Option<f64>,
    pub history: Vec<DiffusionEpoch>,
    pub plateau: Plateau,
    pub rng: RngState,
    pub finished: bool,
}

/// Trained or in-progress diffusion state. `params` holds the best
/// parameters so far; `current` and `optimizer` hold the resume point.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionCheckpoint {
    pub meta: DiffusionMeta,
    pub params: TensorMap,
    pub current: TensorMap,
    pub optimizer: AdamState,
}

impl DiffusionCheckpoint {
    pub fn to_archive(&self) -> Result<Archive> {
        pack_training_archive(COMPONENT, &self.meta, &self.params, &self.current, &self.optimizer)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.component != COMPONENT {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected a {COMPONENT} checkpoint, found {}",
                a.component
            )));
        }
        let (meta, params, current, optimizer) = unpack_training_archive(a)?;
        Ok(DiffusionCheckpoint { meta, params, current, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.meta.schedule.build()
    }

    /// Denoiser carrying the best parameters.
    pub fn denoiser(&self) -> Result<Denoiser> {
        let net = Denoiser::new(&self.meta.denoiser, 0)?;
        net.params().load(&self.params)?;
        Ok(net)
    }
}

/// z-score to diffusion domain.
pub fn to_domain(v: f32, scale: f64) -> f32 {
    ((v as f64 / scale) as f32).clamp(-1.0, 1.0)
}

pub(crate) fn cond_tensor(conds: &[&Array3<f32>], scale: f64) -> Result<Tensor> {
    let (c, h, w) = conds[0].dim();
    let mut v = Vec::with_capacity(conds.len() * c * h * w);
    for a in conds {
        if a.dim() != (c, h, w) {
            return Err(Error::shape(format!("conditioning {:?} vs {:?}", a.dim(), (c, h, w))));
        }
        v.extend(a.iter().map(|&x| to_domain(x, scale)));
    }
    Ok(Tensor::from_vec(v, (conds.len(), c, h, w), &Device::Cpu)?)
}

pub(crate) fn image_tensor(imgs: &[&Array2<f32>], scale: f64) -> Result<Tensor> {
    let (h, w) = imgs[0].dim();
    let mut v = Vec::with_capacity(imgs.len() * h * w);
    for a in imgs {
        if a.dim() != (h, w) {
            return Err(Error::shape(format!("image {:?} vs {:?}", a.dim(), (h, w))));
        }
        v.extend(a.iter().map(|&x| to_domain(x, scale)));
    }
    Ok(Tensor::from_vec(v, (imgs.len(), 1, h, w), &Device::Cpu)?)
}

fn gaussian(rng: &mut impl Rng, shape: (usize, usize, usize, usize)) -> Result<Tensor> {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

struct BatchLoss {
    simple: Tensor,
    recon: Tensor,
    total: Tensor,
}

fn batch_loss(
    net: &Denoiser,
    sched: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
    items: &[&SlicePair],
    ts: &[usize],
    noise: &Tensor,
) -> Result<BatchLoss> {
    let conds: Vec<&Array3<f32>> = items.iter().map(|s| &s.conditioning).collect();
    let targets: Vec<&Array2<f32>> = items.iter().map(|s| &s.target).collect();
    let cond = cond_tensor(&conds, cfg.intensity_scale)?;
    let x0 = image_tensor(&targets, cfg.intensity_scale)?;
    let x_t = forward_marginal_batch(&x0, ts, sched, noise)?;
    let eps_hat = net.forward(&x_t, ts, &cond)?;
    let simple = simple_loss(noise, &eps_hat)?;
    let x0_hat = clamp_x0(&predict_x0_batch(&x_t, ts, &eps_hat, sched)?)?;
    let recon = recon_loss(&to_unit(&x0_hat)?, &to_unit(&x0)?, cfg.lambda1, cfg.lambda2)?;
    let total = (&simple + (&recon * cfg.gamma)?)?;
    Ok(BatchLoss { simple, recon, total })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Validation losses on a fixed (t, noise) draw per sample.
fn validate(
    net: &Denoiser,
    sched: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
    val: &[SlicePair],
    seed: u64,
) -> Result<(f64, f64, f64)> {
    let mut rng = rng_for(seed, "diffusion-val", 0);
    let t_max = sched.timesteps();
    let (h, w) = val[0].target.dim();
    let draws: Vec<(usize, Tensor)> = val
        .iter()
        .map(|_| Ok((rng.random_range(1..=t_max), gaussian(&mut rng, (1, 1, h, w))?)))
        .collect::<Result<_>>()?;
    let (mut s, mut r, mut n) = (0.0, 0.0, 0usize);
    let chunk = 16;
    for (items, d) in val.chunks(chunk).zip(draws.chunks(chunk)) {
        let refs: Vec<&SlicePair> = items.iter().collect();
        let ts: Vec<usize> = d.iter().map(|(t, _)| *t).collect();
        let noise = Tensor::cat(&d.iter().map(|(_, n)| n).collect::<Vec<_>>(), 0)?;
        let l = batch_loss(net, sched, cfg, &refs, &ts, &noise)?;
        s += scalar(&l.simple)? * items.len() as f64;
        r += scalar(&l.recon)? * items.len() as f64;
        n += items.len();
    }
    let (s, r) = (s / n as f64, r / n as f64);
    Ok((s, r, s + cfg.gamma * r))
}

/// Everything needed to start a run.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSetup {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: DiffusionTrainConfig,
    pub seed: u64,
}

/// Trains until `epochs`, early stopping, or `on_epoch` returning `false`.
/// `resume` continues from a checkpoint's recorded epoch.
pub fn train_diffusion(
    train: &[SlicePair],
    val: &[SlicePair],
    setup: &DiffusionSetup,
    resume: Option<DiffusionCheckpoint>,
    mut on_epoch: impl FnMut(&DiffusionCheckpoint) -> Result<bool>,
) -> Result<DiffusionCheckpoint> {
    if train.is_empty() {
        return Err(Error::Precondition("diffusion training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Precondition("diffusion validation set is empty".into()));
    }
    let cfg = &setup.train;
    cfg.validate()?;
    let sched = setup.schedule.build()?;
    let image_size = train[0].target.dim();
    if let Some(sp) = train.iter().chain(val).find(|sp| sp.target.dim() != image_size) {
        return Err(Error::shape(format!(
            "slice {}:{} is {:?}, expected {:?}",
            sp.subject_id,
            sp.slice_index,
            sp.target.dim(),
            image_size
        )));
    }
    let net = Denoiser::new(&setup.denoiser, derive_seed(setup.seed, "denoiser-init", 0))?;
    let mut opt = Adam::new(cfg.lr, cfg.grad_clip);

    let mut ckpt = match resume {
        Some(c) => {
            if c.meta.denoiser != setup.denoiser
                || c.meta.schedule != setup.schedule
                || c.meta.image_size != image_size
            {
                return Err(Error::IncompatibleCheckpoint(
                    "resume checkpoint was trained with a different architecture, schedule or image size".into(),
                ));
            }
            net.params().load(&c.current)?;
            opt.load_state(&c.optimizer, net.params())?;
            opt.lr = c.meta.plateau.lr;
            c
        }
        None => DiffusionCheckpoint {
            meta: DiffusionMeta {
                denoiser: setup.denoiser.clone(),
                schedule: setup.schedule,
                train: cfg.clone(),
                image_size,
                epochs_completed: 0,
                best_epoch: 0,
                best_score: None,
                history: Vec::new(),
                plateau: Plateau::new(PlateauMode::Min, cfg.lr, cfg.lr_factor, cfg.plateau_patience, cfg.min_lr),
                rng: RngState { seed: setup.seed, next_epoch: 1 },
                finished: false,
            },
            params: net.params().snapshot()?,
            current: net.params().snapshot()?,
            optimizer: opt.state()?,
        },
    };
    let seed = ckpt.meta.rng.seed;
    let t_max = sched.timesteps();
    let (h, w) = image_size;

    while !ckpt.meta.finished && ckpt.meta.epochs_completed < cfg.epochs {
        let epoch = ckpt.meta.rng.next_epoch;
        let mut rng = rng_for(seed, "diffusion-epoch", epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<SlicePair> = idx
                .iter()
                .map(|&i| augment(&train[i], rng.random(), &cfg.augment))
                .collect();
            let refs: Vec<&SlicePair> = items.iter().collect();
            let ts: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=t_max)).collect();
            let noise = gaussian(&mut rng, (idx.len(), 1, h, w))?;
            let l = batch_loss(&net, &sched, cfg, &refs, &ts, &noise)?;
            let total = scalar(&l.total)?;
            if !total.is_finite() {
                return Err(Error::TrainingDiverged { epoch, step });
            }
            loss_sum += total * idx.len() as f64;
            let grads = l.total.backward()?;
            opt.step(net.params(), &grads).map_err(|e| match e {
                Error::TrainingDiverged { .. } => Error::TrainingDiverged { epoch, step },
                e => e,
            })?;
        }
        let (vs, vr, vt) = validate(&net, &sched, cfg, val, seed)?;
        if !vt.is_finite() {
            return Err(Error::TrainingDiverged { epoch, step: usize::MAX });
        }
        let lr_used = opt.lr;
        opt.lr = ckpt.meta.plateau.observe(vt);
        let meta = &mut ckpt.meta;
        meta.history.push(DiffusionEpoch {
            epoch,
            lr: lr_used,
            train_loss: loss_sum / train.len() as f64,
            val_simple: vs,
            val_recon: vr,
            val_total: vt,
        });
        log::info!(
            "diffusion epoch {epoch}: train {:.5} val simple {vs:.5} recon {vr:.5} total {vt:.5} lr {lr_used:.2e}",
            loss_sum / train.len() as f64
        );
        let current = net.params().snapshot()?;
        if meta.best_score.is_none_or(|b| vt < b) {
            meta.best_score = Some(vt);
            meta.best_epoch = epoch;
            ckpt.params = current.clone();
        }
        meta.epochs_completed = epoch;
        meta.rng.next_epoch = epoch + 1;
        if epoch - meta.best_epoch >= cfg.early_stop_patience || meta.epochs_completed >= cfg.epochs {
            meta.finished = true;
        }
        ckpt.current = current;
        ckpt.optimizer = opt.state()?;
        if !on_epoch(&ckpt)? {
            break;
        }
    }
    Ok(ckpt)
}
