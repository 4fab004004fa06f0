//! Forward corruption, x0 recovery and ancestral reverse steps. Scalar-`t`
//! functions act on a whole tensor; `_batch` variants take one timestep per
//! leading-dimension entry.

use candle_core::Tensor;

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Per-sample coefficients shaped `(B, 1, .., 1)` to broadcast against `like`.
fn coef(vals: &[f64], like: &Tensor) -> Result<Tensor> {
    if like.rank() == 0 || like.dim(0)? != vals.len() {
        return Err(Error::shape(format!(
            "{} timesteps for batch of shape {:?}",
            vals.len(),
            like.dims()
        )));
    }
    let mut shape = vec![1usize; like.rank()];
    shape[0] = vals.len();
    Ok(Tensor::from_slice(vals, shape.as_slice(), like.device())?.to_dtype(like.dtype())?)
}

/// `√(1−β)·x_prev + √β·noise` for an explicit β ∈ [0, 1].
pub fn forward_step_with_beta(x_prev: &Tensor, beta: f64, noise: &Tensor) -> Result<Tensor> {
    same_shape(x_prev, noise)?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidSchedule(format!("beta {beta} outside [0, 1]")));
    }
    Ok((x_prev.affine((1.0 - beta).sqrt(), 0.0)? + noise.affine(beta.sqrt(), 0.0)?)?)
}

pub fn forward_step(x_prev: &Tensor, t: usize, sched: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    sched.check_t(t)?;
    forward_step_with_beta(x_prev, sched.beta(t), noise)
}

/// `√ᾱ·x0 + √(1−ᾱ)·noise` for an explicit ᾱ ∈ [0, 1].
pub fn forward_marginal_with_alpha_bar(x0: &Tensor, alpha_bar: f64, noise: &Tensor) -> Result<Tensor> {
    same_shape(x0, noise)?;
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::InvalidSchedule(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    Ok((x0.affine(alpha_bar.sqrt(), 0.0)? + noise.affine((1.0 - alpha_bar).sqrt(), 0.0)?)?)
}

pub fn forward_marginal(x0: &Tensor, t: usize, sched: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    sched.check_t(t)?;
    forward_marginal_with_alpha_bar(x0, sched.alpha_bar(t), noise)
}

pub fn forward_marginal_batch(
    x0: &Tensor,
    ts: &[usize],
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    same_shape(x0, noise)?;
    for &t in ts {
        sched.check_t(t)?;
    }
    let a: Vec<f64> = ts.iter().map(|&t| sched.alpha_bar(t).sqrt()).collect();
    let s: Vec<f64> = ts.iter().map(|&t| (1.0 - sched.alpha_bar(t)).sqrt()).collect();
    Ok((x0.broadcast_mul(&coef(&a, x0)?)? + noise.broadcast_mul(&coef(&s, x0)?)?)?)
}

/// `(x_t − √(1−ᾱ)·ε̂)/√ᾱ`, unclamped.
pub fn predict_x0_with_alpha_bar(x_t: &Tensor, alpha_bar: f64, eps_hat: &Tensor) -> Result<Tensor> {
    same_shape(x_t, eps_hat)?;
    let inv = 1.0 / alpha_bar.sqrt();
    Ok((x_t.affine(inv, 0.0)? - eps_hat.affine((1.0 - alpha_bar).sqrt() * inv, 0.0)?)?)
}

/// Unclamped x0 estimate; see [`clamp_x0`].
pub fn predict_x0(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    if ab <= 0.0 {
        return Err(Error::DegenerateTimestep(t));
    }
    predict_x0_with_alpha_bar(x_t, ab, eps_hat)
}

pub fn predict_x0_batch(
    x_t: &Tensor,
    ts: &[usize],
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape(x_t, eps_hat)?;
    let mut inv = Vec::with_capacity(ts.len());
    let mut s = Vec::with_capacity(ts.len());
    for &t in ts {
        sched.check_t(t)?;
        let ab = sched.alpha_bar(t);
        if ab <= 0.0 {
            return Err(Error::DegenerateTimestep(t));
        }
        inv.push(1.0 / ab.sqrt());
        s.push((1.0 - ab).sqrt() / ab.sqrt());
    }
    Ok((x_t.broadcast_mul(&coef(&inv, x_t)?)? - eps_hat.broadcast_mul(&coef(&s, x_t)?)?)?)
}

/// Clamp to the diffusion intensity range `[-1, 1]`.
pub fn clamp_x0(x: &Tensor) -> Result<Tensor> {
    Ok(x.clamp(-1.0, 1.0)?)
}

/// Mean of the reverse transition, `(x_t − β/√(1−ᾱ)·ε̂)/√α`.
pub fn reverse_mean(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    same_shape(x_t, eps_hat)?;
    let beta = sched.beta(t);
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let k = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    Ok((x_t.affine(inv_sqrt_alpha, 0.0)? - eps_hat.affine(k * inv_sqrt_alpha, 0.0)?)?)
}

/// Ancestral step `μ + σ_t·noise`; at t = 1 returns μ.
pub fn reverse_step(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    let mu = reverse_mean(x_t, t, eps_hat, sched)?;
    if t == 1 {
        return Ok(mu);
    }
    same_shape(x_t, noise)?;
    let sigma = sched.posterior_variance(t).sqrt();
    Ok((mu + noise.affine(sigma, 0.0)?)?)
}

#[cfg(test)]
mod tests {
    use candle_core::Device;

    use super::*;
    use crate::diffusion::schedule::{build_schedule, ScheduleKind};

    fn img(v: f64, n: usize) -> Tensor {
        Tensor::full(v, (n, n), &Device::Cpu).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn forward_step_limits() {
        let x = Tensor::arange(0.0f64, 9.0, &Device::Cpu).unwrap().reshape((3, 3)).unwrap();
        let n = img(0.7, 3);
        assert_eq!(vals(&forward_step_with_beta(&x, 0.0, &n).unwrap()), vals(&x));
        assert_eq!(vals(&forward_step_with_beta(&x, 1.0, &n).unwrap()), vals(&n));
        let out = forward_step_with_beta(&img(0.0, 4), 0.25, &img(1.0, 4)).unwrap();
        assert!(vals(&out).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn forward_marginal_limits() {
        let x = img(0.3, 2);
        let n = img(-1.2, 2);
        assert_eq!(vals(&forward_marginal_with_alpha_bar(&x, 1.0, &n).unwrap()), vals(&x));
        assert_eq!(vals(&forward_marginal_with_alpha_bar(&x, 0.0, &n).unwrap()), vals(&n));
        assert_eq!(vals(&predict_x0_with_alpha_bar(&x, 1.0, &n).unwrap()), vals(&x));
    }

    #[test]
    fn timestep_range_checked() {
        let s = build_schedule(10, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let x = img(0.0, 2);
        assert!(matches!(forward_step(&x, 0, &s, &x), Err(Error::InvalidTimestep { t: 0, max: 10 })));
        assert!(matches!(forward_marginal(&x, 11, &s, &x), Err(Error::InvalidTimestep { .. })));
        assert!(matches!(reverse_step(&x, 11, &x, &s, &x), Err(Error::InvalidTimestep { .. })));
    }

    #[test]
    fn final_reverse_step_is_mean() {
        let s = build_schedule(10, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let x = img(0.4, 3);
        let e = img(0.1, 3);
        let noise = img(5.0, 3);
        let a = reverse_step(&x, 1, &e, &s, &noise).unwrap();
        let m = reverse_mean(&x, 1, &e, &s).unwrap();
        assert_eq!(vals(&a), vals(&m));
    }

    #[test]
    fn tiny_beta_reverse_step_is_near_identity() {
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![1e-12, 1e-12]).unwrap();
        let x = img(0.4, 3);
        let out = reverse_step(&x, 2, &img(1.0, 3), &s, &img(1.0, 3)).unwrap();
        assert!(vals(&out).iter().all(|v| (v - 0.4).abs() < 1e-5));
    }

    #[test]
    fn batch_matches_scalar() {
        let s = build_schedule(100, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let x0 = Tensor::arange(0.0f64, 8.0, &Device::Cpu).unwrap().reshape((2, 1, 2, 2)).unwrap();
        let n = x0.affine(-0.3, 0.1).unwrap();
        let ts = [7, 90];
        let b = forward_marginal_batch(&x0, &ts, &s, &n).unwrap();
        let p = predict_x0_batch(&b, &ts, &n, &s).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let xi = x0.get(i).unwrap();
            let ni = n.get(i).unwrap();
            let single = forward_marginal(&xi, t, &s, &ni).unwrap();
            assert_eq!(vals(&b.get(i).unwrap()), vals(&single));
            for (a, e) in vals(&p.get(i).unwrap()).iter().zip(vals(&xi)) {
                assert!((a - e).abs() < 1e-9);
            }
        }
    }
}
