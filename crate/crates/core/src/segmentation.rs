//! Four-channel 2D U-Net producing whole-tumor probabilities, its training
//! loop and thresholding.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm};
use ndarray::{Array, Array2, Array3, ArrayView, Axis, Dimension};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::augment::augment_channels;
use crate::data::AugmentParams;
use crate::diffusion::train::RngState;
use crate::error::{Error, Result};
use crate::losses::{seg_loss, BCE_CLAMP};
use crate::metrics::dice;
use crate::nn::archive::{pack_training_archive, unpack_training_archive};
use crate::nn::{Adam, AdamState, Archive, ParamStore, Plateau, PlateauMode, TensorMap};
use crate::residual::{ResidualSource, SegInput};
use crate::seeding::{derive_seed, rng_for};

pub const COMPONENT: &str = "segmentation";
pub const INPUT_CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegConfig {
    pub base_width: usize,
    pub levels: usize,
    pub groups: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            base_width: 32,
            levels: 4,
            groups: 8,
        }
    }
}

struct DoubleConv {
    c1: Conv2d,
    n1: GroupNorm,
    c2: Conv2d,
    n2: GroupNorm,
}

impl DoubleConv {
    fn new(p: &mut ParamStore, name: &str, c_in: usize, c_out: usize, groups: usize) -> Result<Self> {
        let cfg = Conv2dConfig { padding: 1, ..Default::default() };
        Ok(DoubleConv {
            c1: p.conv2d(&format!("{name}.conv1"), c_in, c_out, 3, cfg)?,
            n1: p.group_norm(&format!("{name}.norm1"), c_out, groups)?,
            c2: p.conv2d(&format!("{name}.conv2"), c_out, c_out, 3, cfg)?,
            n2: p.group_norm(&format!("{name}.norm2"), c_out, groups)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.n1.forward(&self.c1.forward(x)?)?.relu()?;
        Ok(self.n2.forward(&self.c2.forward(&h)?)?.relu()?)
    }
}

pub struct SegModel {
    pub config: SegConfig,
    params: ParamStore,
    down: Vec<DoubleConv>,
    up: Vec<DoubleConv>,
    head: Conv2d,
}

impl SegModel {
    pub fn new(config: &SegConfig, seed: u64) -> Result<Self> {
        if config.base_width == 0 || config.levels == 0 || config.groups == 0 {
            return Err(Error::InvalidConfig("segmentation width, levels and groups must be positive".into()));
        }
        let mut p = ParamStore::new(seed);
        let ch = |i: usize| config.base_width << i;
        let mut down = Vec::new();
        let mut c_prev = INPUT_CHANNELS;
        for i in 0..config.levels {
            down.push(DoubleConv::new(&mut p, &format!("down{i}"), c_prev, ch(i), config.groups)?);
            c_prev = ch(i);
        }
        let mut up = Vec::new();
        for i in 0..config.levels.saturating_sub(1) {
            up.push(DoubleConv::new(&mut p, &format!("up{i}"), ch(i + 1) + ch(i), ch(i), config.groups)?);
        }
        let head = p.conv2d("head", ch(0), 1, 1, Conv2dConfig::default())?;
        Ok(SegModel {
            config: config.clone(),
            params: p,
            down,
            up,
            head,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Probabilities `(B,1,H,W)` in `[1e-7, 1 − 1e-7]` for input `(B,4,H,W)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != INPUT_CHANNELS {
            return Err(Error::shape(format!("segmentation input has {c} channels, expected 4")));
        }
        let mut h = x.to_dtype(DType::F32)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, block) in self.down.iter().enumerate() {
            if i > 0 {
                h = h.max_pool2d(2)?;
            }
            h = block.forward(&h)?;
            skips.push(h.clone());
        }
        for i in (0..self.up.len()).rev() {
            let skip = &skips[i];
            let up = h.upsample_nearest2d(skip.dim(2)?, skip.dim(3)?)?;
            h = self.up[i].forward(&Tensor::cat(&[&up, skip], 1)?)?;
        }
        let logits = self.head.forward(&h)?;
        Ok(candle_nn::ops::sigmoid(&logits)?.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)?)
    }
}

pub(crate) fn input_tensor(inputs: &[&Array3<f32>]) -> Result<Tensor> {
    let (c, h, w) = inputs[0].dim();
    let mut v = Vec::with_capacity(inputs.len() * c * h * w);
    for a in inputs {
        if a.dim() != (c, h, w) {
            return Err(Error::shape(format!("input {:?} vs {:?}", a.dim(), (c, h, w))));
        }
        v.extend(a.iter().copied());
    }
    Ok(Tensor::from_vec(v, (inputs.len(), c, h, w), &Device::Cpu)?)
}

fn tensor_to_maps(t: &Tensor) -> Result<Vec<Array2<f32>>> {
    let (b, _, h, w) = t.dims4()?;
    let flat = t.flatten_all()?.to_vec1::<f32>()?;
    (0..b)
        .map(|i| {
            Array2::from_shape_vec((h, w), flat[i * h * w..(i + 1) * h * w].to_vec())
                .map_err(|e| Error::shape(e.to_string()))
        })
        .collect()
}

/// Probability map for one four-channel input.
pub fn seg_forward(model: &SegModel, x: &SegInput) -> Result<Array2<f32>> {
    let (c, _, _) = x.channels.dim();
    if c != INPUT_CHANNELS {
        return Err(Error::shape(format!("segmentation input has {c} channels, expected 4")));
    }
    Ok(tensor_to_maps(&model.forward(&input_tensor(&[&x.channels])?)?)?.remove(0))
}

/// Batched inference over `[4,H,W]` stacks.
pub fn predict_many(model: &SegModel, inputs: &[&Array3<f32>], batch: usize) -> Result<Vec<Array2<f32>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch.max(1)) {
        out.extend(tensor_to_maps(&model.forward(&input_tensor(chunk)?)?.detach())?);
    }
    Ok(out)
}

/// `1` where `p ≥ τ`.
pub fn binarize<D: Dimension>(p: ArrayView<f32, D>, tau: f64) -> Result<Array<u8, D>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidThreshold(tau));
    }
    Ok(p.mapv(|v| u8::from(v as f64 >= tau)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub lr_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub grad_clip: Option<f64>,
    /// Threshold for validation Dice.
    pub val_tau: f64,
    pub augment: AugmentParams,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            epochs: 100,
            batch_size: 4,
            lr: 3e-4,
            min_lr: 1.5e-4,
            lr_factor: 0.5,
            plateau_patience: 5,
            early_stop_patience: 15,
            lambda1: 0.5,
            lambda2: 0.5,
            grad_clip: Some(1.0),
            val_tau: 0.3,
            augment: AugmentParams::default(),
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return bad("segmentation loss weights must be non-negative");
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return bad("segmentation loss weights lambda1 = lambda2 = 0 give no learning signal");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("segmentation epochs and batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.min_lr > 0.0 && self.min_lr <= self.lr) {
            return bad("segmentation learning rates must satisfy 0 < min_lr <= lr");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("lr_factor must lie in (0, 1)");
        }
        if !(self.val_tau > 0.0 && self.val_tau < 1.0) {
            return Err(Error::InvalidThreshold(self.val_tau));
        }
        if !(0.0..=1.0).contains(&self.augment.apply_prob) {
            return bad("augment.apply_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One training example: assembled input plus its ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub input: SegInput,
    pub mask: Array2<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMeta {
    pub model: SegConfig,
    pub train: SegTrainConfig,
    pub residual_source: ResidualSource,
    pub image_size: (usize, usize),
    pub epochs_completed: usize,
    pub best_epoch: usize,
    pub best_score: Option<f64>,
    pub history: Vec<SegEpoch>,
    pub plateau: Plateau,
    pub rng: RngState,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegCheckpoint {
    pub meta: SegMeta,
    pub params: TensorMap,
    pub current: TensorMap,
    pub optimizer: AdamState,
}

impl SegCheckpoint {
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
        Ok(SegCheckpoint { meta, params, current, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }

    /// Model carrying the best parameters.
    pub fn model(&self) -> Result<SegModel> {
        let m = SegModel::new(&self.meta.model, 0)?;
        m.params().load(&self.params)?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSetup {
    pub model: SegConfig,
    pub train: SegTrainConfig,
    pub residual_source: ResidualSource,
    pub seed: u64,
}

/// Validation loss and mean per-subject pooled Dice at `tau`.
fn validate(model: &SegModel, cfg: &SegTrainConfig, val: &[SegSample]) -> Result<(f64, f64)> {
    let inputs: Vec<&Array3<f32>> = val.iter().map(|s| &s.input.channels).collect();
    let probs = predict_many(model, &inputs, 32)?;
    let mut loss = 0.0;
    let mut pooled: BTreeMap<&str, (Vec<u8>, Vec<u8>)> = BTreeMap::new();
    for (s, p) in val.iter().zip(&probs) {
        let pt = Tensor::from_slice(p.as_slice().expect("standard layout"), p.dim(), &Device::Cpu)?;
        let y: Vec<f32> = s.mask.iter().map(|&v| v as f32).collect();
        let yt = Tensor::from_vec(y, s.mask.dim(), &Device::Cpu)?;
        loss += seg_loss(&pt, &yt, cfg.lambda1, cfg.lambda2)?.to_scalar::<f32>()? as f64;
        let b = binarize(p.view(), cfg.val_tau)?;
        let e = pooled.entry(s.input.subject_id.as_str()).or_default();
        e.0.extend(b.iter());
        e.1.extend(s.mask.iter());
    }
    let mut dsum = 0.0;
    for (pred, gt) in pooled.values() {
        dsum += dice(
            ndarray::ArrayView1::from(pred.as_slice()),
            ndarray::ArrayView1::from(gt.as_slice()),
        )?;
    }
    Ok((loss / val.len() as f64, dsum / pooled.len() as f64))
}

/// Trains with early stopping on validation Dice; mirrors the diffusion
/// loop's resume and callback contract.
pub fn train_segmentation(
    train: &[SegSample],
    val: &[SegSample],
    setup: &SegSetup,
    resume: Option<SegCheckpoint>,
    mut on_epoch: impl FnMut(&SegCheckpoint) -> Result<bool>,
) -> Result<SegCheckpoint> {
    let cfg = &setup.train;
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Precondition("segmentation training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Precondition("segmentation validation set is empty".into()));
    }
    let image_size = train[0].mask.dim();
    for s in train.iter().chain(val) {
        let (c, h, w) = s.input.channels.dim();
        if c != INPUT_CHANNELS || (h, w) != image_size || s.mask.dim() != image_size {
            return Err(Error::shape(format!(
                "sample {}:{} has input {:?} and mask {:?}, expected 4x{:?}",
                s.input.subject_id,
                s.input.slice_index,
                s.input.channels.dim(),
                s.mask.dim(),
                image_size
            )));
        }
    }
    let model = SegModel::new(&setup.model, derive_seed(setup.seed, "seg-init", 0))?;
    let mut opt = Adam::new(cfg.lr, cfg.grad_clip);
    let mut ckpt = match resume {
        Some(c) => {
            if c.meta.model != setup.model || c.meta.image_size != image_size || c.meta.residual_source != setup.residual_source {
                return Err(Error::IncompatibleCheckpoint(
                    "resume checkpoint was trained with a different model, image size or residual source".into(),
                ));
            }
            model.params().load(&c.current)?;
            opt.load_state(&c.optimizer, model.params())?;
            opt.lr = c.meta.plateau.lr;
            c
        }
        None => SegCheckpoint {
            meta: SegMeta {
                model: setup.model.clone(),
                train: cfg.clone(),
                residual_source: setup.residual_source,
                image_size,
                epochs_completed: 0,
                best_epoch: 0,
                best_score: None,
                history: Vec::new(),
                plateau: Plateau::new(PlateauMode::Max, cfg.lr, cfg.lr_factor, cfg.plateau_patience, cfg.min_lr),
                rng: RngState { seed: setup.seed, next_epoch: 1 },
                finished: false,
            },
            params: model.params().snapshot()?,
            current: model.params().snapshot()?,
            optimizer: opt.state()?,
        },
    };
    let seed = ckpt.meta.rng.seed;

    while !ckpt.meta.finished && ckpt.meta.epochs_completed < cfg.epochs {
        let epoch = ckpt.meta.rng.next_epoch;
        let mut rng = rng_for(seed, "seg-epoch", epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut xs = Vec::with_capacity(idx.len());
            let mut ys = Vec::with_capacity(idx.len());
            for &i in idx {
                let s = &train[i];
                let (x, y) = augment_channels(&s.input.channels, 3, &s.mask, rng.random(), &cfg.augment);
                xs.push(x);
                ys.push(y);
            }
            let x = input_tensor(&xs.iter().collect::<Vec<_>>())?;
            let (h, w) = image_size;
            let yv: Vec<f32> = ys.iter().flat_map(|m| m.iter().map(|&v| v as f32)).collect();
            let y = Tensor::from_vec(yv, (idx.len(), 1, h, w), &Device::Cpu)?;
            let p = model.forward(&x)?;
            let loss = seg_loss(&p, &y, cfg.lambda1, cfg.lambda2)?;
            let lv = loss.to_scalar::<f32>()? as f64;
            if !lv.is_finite() {
                return Err(Error::TrainingDiverged { epoch, step });
            }
            loss_sum += lv * idx.len() as f64;
            opt.step(model.params(), &loss.backward()?).map_err(|e| match e {
                Error::TrainingDiverged { .. } => Error::TrainingDiverged { epoch, step },
                e => e,
            })?;
        }
        let (val_loss, val_dice) = validate(&model, cfg, val)?;
        if !val_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, step: usize::MAX });
        }
        let lr_used = opt.lr;
        opt.lr = ckpt.meta.plateau.observe(val_dice);
        let meta = &mut ckpt.meta;
        meta.history.push(SegEpoch {
            epoch,
            lr: lr_used,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_dice,
        });
        log::info!(
            "segmentation epoch {epoch}: train {:.5} val loss {val_loss:.5} dice {val_dice:.4} lr {lr_used:.2e}",
            loss_sum / train.len() as f64
        );
        let current = model.params().snapshot()?;
        if meta.best_score.is_none_or(|b| val_dice > b) {
            meta.best_score = Some(val_dice);
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

/// Stacks per-slice masks into a `[n, H, W]` volume.
pub fn stack_masks(masks: &[Array2<u8>]) -> Result<Array3<u8>> {
    let views: Vec<_> = masks.iter().map(|m| m.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_is_lightweight() {
        let m = SegModel::new(&SegConfig::default(), 0).unwrap();
        let n = m.params().num_parameters();
        assert!(n <= 2_000_000, "{n} parameters");
        assert!(n > 1_000_000);
    }

    #[test]
    fn forward_shape_range_and_channel_check() {
        let m = SegModel::new(&SegConfig { base_width: 8, levels: 4, groups: 4 }, 1).unwrap();
        let x = Array3::from_shape_fn((4, 20, 20), |(c, y, x)| ((c + y * x) % 7) as f32 * 0.3 - 1.0);
        let input = SegInput { channels: x, subject_id: "s".into(), slice_index: 0, source: ResidualSource::Zero };
        let p = seg_forward(&m, &input).unwrap();
        assert_eq!(p.dim(), (20, 20));
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p, seg_forward(&m, &input).unwrap());
        let bad = SegInput { channels: Array3::zeros((3, 20, 20)), ..input };
        assert!(matches!(seg_forward(&m, &bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn binarize_boundaries() {
        let p = ndarray::array![[0.31f32, 0.29, 0.3]];
        assert_eq!(binarize(p.view(), 0.3).unwrap(), ndarray::array![[1u8, 0, 1]]);
        for tau in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(matches!(binarize(p.view(), tau), Err(Error::InvalidThreshold(_))));
        }
    }

    #[test]
    fn zero_loss_weights_rejected() {
        let cfg = SegTrainConfig { lambda1: 0.0, lambda2: 0.0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}
