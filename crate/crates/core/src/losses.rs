//! Differentiable losses built from tensor ops. Rank-4 `(B, C, H, W)` inputs
//! get per-sample soft Dice averaged over the batch; any other rank is
//! treated as one sample.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

pub const BCE_CLAMP: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;
const RANGE_TOL: f64 = 1e-6;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn rows(t: &Tensor) -> Result<Tensor> {
    let b = if t.rank() == 4 { t.dim(0)? } else { 1 };
    Ok(t.reshape((b, ()))?)
}

/// Mean squared error over all elements.
pub fn simple_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    same_shape(eps, eps_hat)?;
    Ok((eps_hat - eps)?.sqr()?.mean_all()?)
}

/// Mean binary cross-entropy with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(p: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(p, y)?;
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let one_minus_p = p.affine(-1.0, 1.0)?;
    let one_minus_y = y.affine(-1.0, 1.0)?;
    let ll = ((y * p.log()?)? + (one_minus_y * one_minus_p.log()?)?)?;
    Ok(ll.mean_all()?.neg()?)
}

/// Soft Dice coefficient `(2 Σpy + 1) / (Σp + Σy + 1)`.
pub fn soft_dice(p: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(p, y)?;
    let (p, y) = (rows(p)?, rows(y)?);
    let inter = (&p * &y)?.sum(1)?;
    let num = inter.affine(2.0, DICE_SMOOTH)?;
    let den = (p.sum(1)? + y.sum(1)?)?.affine(1.0, DICE_SMOOTH)?;
    Ok((num / den)?.mean_all()?)
}

/// `λ1·BCE + λ2·(1 − softDice)`.
pub fn compound_loss(p: &Tensor, y: &Tensor, lambda1: f64, lambda2: f64) -> Result<Tensor> {
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "loss weights must be non-negative, got ({lambda1}, {lambda2})"
        )));
    }
    let b = bce(p, y)?;
    let d = soft_dice(p, y)?.affine(-1.0, 1.0)?;
    Ok(((b * lambda1)? + (d * lambda2)?)?)
}

/// Fails with `RangeViolation` if any element lies outside `[0, 1]` by more
/// than 1e-6.
pub fn check_unit_range(t: &Tensor, what: &str) -> Result<()> {
    let flat = t.flatten_all()?.to_dtype(DType::F64)?;
    let lo = flat.min(0)?.to_scalar::<f64>()?;
    let hi = flat.max(0)?.to_scalar::<f64>()?;
    if !(lo >= -RANGE_TOL && hi <= 1.0 + RANGE_TOL) {
        return Err(Error::RangeViolation(format!(
            "{what} spans [{lo}, {hi}], expected [0, 1]"
        )));
    }
    Ok(())
}

/// Affine map from `[-1, 1]` to `[0, 1]`.
pub fn to_unit(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.5)?)
}

/// Reconstruction loss between images already mapped to `[0, 1]`.
pub fn recon_loss(x0_hat: &Tensor, x0: &Tensor, lambda1: f64, lambda2: f64) -> Result<Tensor> {
    same_shape(x0_hat, x0)?;
    check_unit_range(x0_hat, "reconstruction")?;
    check_unit_range(x0, "reference")?;
    compound_loss(x0_hat, x0, lambda1, lambda2)
}

/// Segmentation loss between probabilities and a binary mask.
pub fn seg_loss(y_hat: &Tensor, y: &Tensor, lambda1: f64, lambda2: f64) -> Result<Tensor> {
    compound_loss(y_hat, y, lambda1, lambda2)
}

#[cfg(test)]
mod tests {
    use candle_core::Device;

    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, (1, 1, 1, v.len()), &Device::Cpu).unwrap()
    }

    fn scalar(t: Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn simple_loss_examples() {
        let e = t(&[0.0, 0.0, 0.0]);
        assert_eq!(scalar(simple_loss(&e, &e).unwrap()), 0.0);
        assert_eq!(scalar(simple_loss(&e, &t(&[1.0, 1.0, 1.0])).unwrap()), 1.0);
        assert!(matches!(simple_loss(&e, &t(&[1.0])), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn perfect_binary_reconstruction_is_near_zero() {
        let y = t(&[0.0, 1.0, 1.0, 0.0]);
        let l = scalar(recon_loss(&y, &y, 0.5, 0.5).unwrap());
        assert!(l >= 0.0 && l < 1e-6, "{l}");
        let dice_only = scalar(seg_loss(&y, &y, 0.0, 1.0).unwrap());
        assert!(dice_only.abs() < 1e-12);
    }

    #[test]
    fn bce_only_weighting() {
        let p = t(&[0.2, 0.7, 0.9]);
        let y = t(&[0.0, 1.0, 0.5]);
        let a = scalar(recon_loss(&p, &y, 1.0, 0.0).unwrap());
        let b = scalar(bce(&p, &y).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_range_reconstruction() {
        let p = t(&[0.2, 1.1]);
        let y = t(&[0.0, 1.0]);
        assert!(matches!(recon_loss(&p, &y, 0.5, 0.5), Err(Error::RangeViolation(_))));
        let p = t(&[0.2, 1.0 + 5e-7]);
        assert!(recon_loss(&p, &y, 0.5, 0.5).is_ok());
    }
}
