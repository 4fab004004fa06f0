//! Synthesis residuals, their percentile calibration and the four-channel
//! segmentation input.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::percentiles;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualSource {
    Dynamic,
    Static,
    Zero,
}

impl ResidualSource {
    pub const ALL: [ResidualSource; 3] = [ResidualSource::Dynamic, ResidualSource::Static, ResidualSource::Zero];

    pub fn as_str(self) -> &'static str {
        match self {
            ResidualSource::Dynamic => "dynamic",
            ResidualSource::Static => "static",
            ResidualSource::Zero => "zero",
        }
    }
}

impl fmt::Display for ResidualSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ResidualSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dynamic" => Ok(ResidualSource::Dynamic),
            "static" => Ok(ResidualSource::Static),
            "zero" => Ok(ResidualSource::Zero),
            _ => Err(Error::InvalidConfig(format!("unknown residual source {s:?}"))),
        }
    }
}

/// Fitted calibration: clip to `[p_low, p_high]`, then min-max.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub low_pct: f64,
    pub high_pct: f64,
    pub p_low: f64,
    pub p_high: f64,
    pub raw_min: f64,
    pub raw_max: f64,
    /// Set when `p_low == p_high`; calibrated values are then all zero.
    pub constant: bool,
}

impl Calibration {
    /// Fits percentiles over every value yielded by `values`.
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a f32>, low_pct: f64, high_pct: f64) -> Result<Self> {
        if !(0.0..=100.0).contains(&low_pct) || !(0.0..=100.0).contains(&high_pct) || low_pct > high_pct {
            return Err(Error::InvalidConfig(format!(
                "calibration percentiles ({low_pct}, {high_pct}) must satisfy 0 <= low <= high <= 100"
            )));
        }
        let mut vals = Vec::new();
        for &v in values {
            if !(v >= 0.0) {
                return Err(Error::RangeViolation(format!("residual value {v} is negative or NaN")));
            }
            vals.push(v as f64);
        }
        if vals.is_empty() {
            return Err(Error::Precondition("cannot calibrate an empty residual".into()));
        }
        let (raw_min, raw_max) = vals
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let p = percentiles(vals, &[low_pct, high_pct]);
        let (p_low, p_high) = (p[0], p[1]);
        Ok(Calibration {
            low_pct,
            high_pct,
            p_low,
            p_high,
            raw_min,
            raw_max,
            constant: p_high <= p_low,
        })
    }

    pub fn apply(&self, raw: ArrayView2<f32>) -> Array2<f32> {
        if self.constant {
            return Array2::zeros(raw.dim());
        }
        let span = self.p_high - self.p_low;
        raw.mapv(|v| (((v as f64).clamp(self.p_low, self.p_high) - self.p_low) / span) as f32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap {
    pub values: Array2<f32>,
    pub calibration: Calibration,
    pub source: ResidualSource,
}

fn same_dims(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `|synth − real|` per pixel.
pub fn compute_residual(real: ArrayView2<f32>, synth: ArrayView2<f32>) -> Result<Array2<f32>> {
    same_dims(real, synth)?;
    Ok(Zip::from(&real).and(&synth).map_collect(|&r, &s| (s - r).abs()))
}

/// `|real − mean(flair, t1, t2)|` per pixel.
pub fn static_residual(
    flair: ArrayView2<f32>,
    t1: ArrayView2<f32>,
    t2: ArrayView2<f32>,
    real: ArrayView2<f32>,
) -> Result<Array2<f32>> {
    same_dims(flair, real)?;
    same_dims(t1, real)?;
    same_dims(t2, real)?;
    Ok(Zip::from(&flair)
        .and(&t1)
        .and(&t2)
        .and(&real)
        .map_collect(|&f, &a, &b, &r| (r - (f + a + b) / 3.0).abs()))
}

/// Percentile clip then min-max to `[0, 1]` for a single image.
pub fn calibrate_residual(
    raw: ArrayView2<f32>,
    low_pct: f64,
    high_pct: f64,
    source: ResidualSource,
) -> Result<ResidualMap> {
    let calibration = Calibration::fit(raw.iter(), low_pct, high_pct)?;
    Ok(ResidualMap {
        values: calibration.apply(raw),
        calibration,
        source,
    })
}

/// Calibrates several images with one calibration fitted on all of them.
pub fn calibrate_stack(
    raws: &[Array2<f32>],
    low_pct: f64,
    high_pct: f64,
    source: ResidualSource,
) -> Result<Vec<ResidualMap>> {
    let calibration = Calibration::fit(raws.iter().flat_map(|r| r.iter()), low_pct, high_pct)?;
    Ok(raws
        .iter()
        .map(|r| ResidualMap {
            values: calibration.apply(r.view()),
            calibration,
            source,
        })
        .collect())
}

/// All-zero residual (the prior is dropped).
pub fn zero_residual(height: usize, width: usize) -> ResidualMap {
    ResidualMap {
        values: Array2::zeros((height, width)),
        calibration: Calibration {
            low_pct: 0.0,
            high_pct: 100.0,
            p_low: 0.0,
            p_high: 0.0,
            raw_min: 0.0,
            raw_max: 0.0,
            constant: true,
        },
        source: ResidualSource::Zero,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegInput {
    /// `[4, H, W]`: FLAIR, T1, T2, residual.
    pub channels: Array3<f32>,
    pub subject_id: String,
    pub slice_index: usize,
    pub source: ResidualSource,
}

pub fn assemble_seg_input(
    flair: ArrayView2<f32>,
    t1: ArrayView2<f32>,
    t2: ArrayView2<f32>,
    residual: &ResidualMap,
    subject_id: &str,
    slice_index: usize,
) -> Result<SegInput> {
    let r = residual.values.view();
    same_dims(flair, r)?;
    same_dims(t1, r)?;
    same_dims(t2, r)?;
    let (h, w) = r.dim();
    let mut channels = Array3::zeros((4, h, w));
    for (k, img) in [flair, t1, t2, r].into_iter().enumerate() {
        channels.index_axis_mut(Axis(0), k).assign(&img);
    }
    Ok(SegInput {
        channels,
        subject_id: subject_id.to_string(),
        slice_index,
        source: residual.source,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn residual_examples() {
        let a = array![[0.0f32, 1.0], [2.0, -3.0]];
        assert!(compute_residual(a.view(), a.view()).unwrap().iter().all(|&v| v == 0.0));
        let z = Array2::<f32>::zeros((2, 2));
        let c = Array2::from_elem((2, 2), -0.7f32);
        assert!(compute_residual(z.view(), c.view()).unwrap().iter().all(|&v| (v - 0.7).abs() < 1e-7));
        let b = Array2::<f32>::zeros((3, 2));
        assert!(matches!(compute_residual(a.view(), b.view()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn static_examples() {
        let a = array![[0.3f32, -1.0]];
        assert!(static_residual(a.view(), a.view(), a.view(), a.view()).unwrap().iter().all(|&v| v.abs() < 1e-7));
        let z = Array2::<f32>::zeros((1, 2));
        let r = Array2::from_elem((1, 2), 0.25f32);
        assert_eq!(static_residual(z.view(), z.view(), z.view(), r.view()).unwrap(), r);
    }

    #[test]
    fn constant_residual_flagged() {
        let raw = Array2::from_elem((4, 4), 0.2f32);
        let m = calibrate_residual(raw.view(), 1.0, 99.0, ResidualSource::Dynamic).unwrap();
        assert!(m.calibration.constant);
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_input_rejected() {
        let raw = array![[0.1f32, -0.1]];
        assert!(matches!(
            calibrate_residual(raw.view(), 1.0, 99.0, ResidualSource::Static),
            Err(Error::RangeViolation(_))
        ));
    }

    #[test]
    fn assembly_order() {
        let f = Array2::from_elem((2, 3), 1.0f32);
        let t1 = Array2::from_elem((2, 3), 2.0f32);
        let t2 = Array2::from_elem((2, 3), 3.0f32);
        let raw = array![[0.0f32, 0.5, 1.0], [0.2, 0.4, 0.9]];
        let r = calibrate_residual(raw.view(), 0.0, 100.0, ResidualSource::Dynamic).unwrap();
        let s = assemble_seg_input(f.view(), t1.view(), t2.view(), &r, "s", 4).unwrap();
        assert_eq!(s.channels.dim(), (4, 2, 3));
        assert_eq!(s.channels.index_axis(Axis(0), 3), r.values);
        assert_eq!(s.channels[[1, 0, 0]], 2.0);
        let swapped = assemble_seg_input(t1.view(), f.view(), t2.view(), &r, "s", 4).unwrap();
        assert_ne!(swapped.channels, s.channels);
    }

    #[test]
    fn stack_uses_shared_calibration() {
        let a = array![[0.0f32, 1.0]];
        let b = array![[2.0f32, 4.0]];
        let maps = calibrate_stack(&[a, b], 0.0, 100.0, ResidualSource::Dynamic).unwrap();
        assert_eq!(maps[0].values, array![[0.0f32, 0.25]]);
        assert_eq!(maps[1].values, array![[0.5f32, 1.0]]);
    }
}
