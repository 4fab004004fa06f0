//! Synthetic multi-modal "brain" volumes with an ellipsoidal tumor.
//!
//! Every modality shares a smooth anatomical field and a pair of
//! ventricle-like CSF pockets, mixed with modality-specific weights (the
//! tissue field darkens FLAIR/T2 where it brightens T1/T1ce). A second
//! field modulates FLAIR and T2 only. The T1ce background follows T1, so it
//! is predictable from the other three sequences but not from their mean.
//! Tumor tissue displaces CSF. Inside the tumor, FLAIR/T2/T1 carry only a
//! faint contrast change while T1ce carries a strong, spatially
//! heterogeneous enhancement whose texture is independent of the observed
//! modalities. The tumor mask is exactly the set of voxel centres inside
//! the blob ellipsoid.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::volume::{Modality, MriVolume};
use crate::error::{Error, Result};

/// Axis-aligned ellipsoid in voxel coordinates `(depth, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        if self.radii.iter().any(|&r| r <= 0.0) {
            return false;
        }
        let p = [z as f64, y as f64, x as f64];
        let q: f64 = (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum();
        q <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomOptions {
    /// Multiplies the sampled tumor radii; 0 produces tumor-free subjects.
    pub tumor_scale: f64,
    /// Tumor radius range as a fraction of each axis length.
    pub min_radius_frac: f64,
    pub max_radius_frac: f64,
    /// Relative tumor contrast in FLAIR / T2 / T1 (T1 darkens).
    pub flair_contrast: f64,
    pub t2_contrast: f64,
    pub t1_contrast: f64,
    /// Mean relative T1ce enhancement inside the tumor.
    pub enhancement: f64,
    /// Amplitude of the enhancement texture (relative to `enhancement`).
    pub enhancement_texture: f64,
    /// Per-voxel Gaussian noise, relative to tissue intensity.
    pub noise: f64,
}

impl Default for PhantomOptions {
    fn default() -> Self {
        PhantomOptions {
            tumor_scale: 1.0,
            min_radius_frac: 0.14,
            max_radius_frac: 0.24,
            flair_contrast: 0.08,
            t2_contrast: 0.05,
            t1_contrast: 0.04,
            enhancement: 0.6,
            enhancement_texture: 0.6,
            noise: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: MriVolume,
    pub tumor: Ellipsoid,
}

/// Sum of random plane waves, roughly in [-1, 1].
struct WaveField {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl WaveField {
    fn new(rng: &mut ChaCha8Rng, count: usize, min_freq: f64, max_freq: f64) -> Self {
        let waves = (0..count)
            .map(|_| {
                let mut dir = [0.0; 3];
                for d in &mut dir {
                    *d = StandardNormal.sample(rng);
                }
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
                let freq = rng.random_range(min_freq..max_freq);
                for d in &mut dir {
                    *d *= freq / norm;
                }
                (dir, rng.random_range(0.0..2.0 * PI), 1.0 / count as f64)
            })
            .collect();
        WaveField { waves }
    }

    fn at(&self, u: [f64; 3]) -> f64 {
        self.waves
            .iter()
            .map(|(k, phase, amp)| amp * (k[0] * u[0] + k[1] * u[1] + k[2] * u[2] + phase).sin())
            .sum()
    }
}

fn in_unit_ellipsoid(u: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|i| ((u[i] - c[i]) / r[i]).powi(2)).sum::<f64>() <= 1.0
}

pub fn generate_phantom(
    subject_id: &str,
    shape: (usize, usize, usize),
    rng: &mut ChaCha8Rng,
    opts: &PhantomOptions,
) -> Result<Phantom> {
    let (d, h, w) = shape;
    let dims = [d as f64, h as f64, w as f64];

    let jitter = |rng: &mut ChaCha8Rng| 1.0 + rng.random_range(-0.05..0.05);
    let brain_r = [0.9 * jitter(rng), 0.85 * jitter(rng), 0.8 * jitter(rng)];
    let anatomy = WaveField::new(rng, 3, 1.5, 3.5);
    let texture = WaveField::new(rng, 4, 5.0, 9.0);
    let structure = WaveField::new(rng, 3, 2.0, 4.5);
    let vent_shift = rng.random_range(0.14..0.22);
    let vent_r = [0.35, 0.28, 0.09];

    let radius = |rng: &mut ChaCha8Rng, n: f64| {
        rng.random_range(opts.min_radius_frac..=opts.max_radius_frac) * n * opts.tumor_scale
    };
    let radii = [radius(rng, dims[0]), radius(rng, dims[1]), radius(rng, dims[2])];
    let center = [
        rng.random_range(0.4..0.6) * (dims[0] - 1.0),
        rng.random_range(0.3..0.7) * (dims[1] - 1.0),
        rng.random_range(0.3..0.7) * (dims[2] - 1.0),
    ];
    let tumor = Ellipsoid { center, radii };
    let enhancement = opts.enhancement * rng.random_range(0.8..1.2);

    let mut grids: Vec<Array3<f32>> = (0..4).map(|_| Array3::zeros(shape)).collect();
    let mut mask = Array3::<u8>::zeros(shape);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let u = [
                    (z as f64 + 0.5) / dims[0] * 2.0 - 1.0,
                    (y as f64 + 0.5) / dims[1] * 2.0 - 1.0,
                    (x as f64 + 0.5) / dims[2] * 2.0 - 1.0,
                ];
                let inside_tumor = tumor.contains(z, y, x);
                if inside_tumor {
                    mask[[z, y, x]] = 1;
                }
                if !inside_tumor && !in_unit_ellipsoid(u, [0.0; 3], brain_r) {
                    continue;
                }
                let a = anatomy.at(u);
                let b = structure.at(u);
                let csf = f64::from(u8::from(
                    !inside_tumor
                        && (in_unit_ellipsoid(u, [0.05, -0.05, vent_shift], vent_r)
                            || in_unit_ellipsoid(u, [0.05, -0.05, -vent_shift], vent_r)),
                ));
                let t = f64::from(u8::from(inside_tumor));
                let tex = 1.0 + opts.enhancement_texture * texture.at(u).clamp(-1.0, 1.0) * 1.6;
                let enh = enhancement * tex.max(0.1);
                let base = [
                    300.0 * (1.0 - 0.15 * a + 0.3 * b) * (1.0 - 0.4 * csf) * (1.0 + opts.flair_contrast * t),
                    500.0 * (1.0 + 0.20 * a) * (1.0 - 0.5 * csf) * (1.0 - opts.t1_contrast * t),
                    350.0 * (1.0 - 0.20 * a + 0.3 * b) * (1.0 + 1.2 * csf) * (1.0 + opts.t2_contrast * t),
                    520.0 * (1.0 + 0.20 * a) * (1.0 - 0.5 * csf) * (1.0 + enh * t),
                ];
                for (g, b) in grids.iter_mut().zip(base) {
                    let n: f64 = StandardNormal.sample(rng);
                    g[[z, y, x]] = (b * (1.0 + opts.noise * n)).max(1.0) as f32;
                }
            }
        }
    }
    let modalities: BTreeMap<Modality, Array3<f32>> =
        Modality::ALL.into_iter().zip(grids).collect();
    let volume = MriVolume::new(subject_id, modalities, mask, [1.0, 1.0, 1.0])?;
    Ok(Phantom { volume, tumor })
}

pub fn phantom_id(i: usize) -> String {
    format!("phantom_{i:03}")
}

pub fn generate_phantoms(
    n_subjects: usize,
    shape: (usize, usize, usize),
    rng_seed: u64,
    opts: &PhantomOptions,
) -> Result<Vec<Phantom>> {
    if n_subjects == 0 {
        return Err(Error::InvalidConfig("phantom count must be at least 1".into()));
    }
    if shape.0 < 16 || shape.1 < 16 || shape.2 < 16 {
        return Err(Error::InvalidConfig(format!(
            "phantom shape {shape:?} must be at least 16 along every axis"
        )));
    }
    (0..n_subjects)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            rng.set_stream(i as u64);
            generate_phantom(&phantom_id(i), shape, &mut rng, opts)
        })
        .collect()
}

pub fn generate_phantom_dataset(
    n_subjects: usize,
    shape: (usize, usize, usize),
    rng_seed: u64,
) -> Result<Vec<MriVolume>> {
    Ok(generate_phantoms(n_subjects, shape, rng_seed, &PhantomOptions::default())?
        .into_iter()
        .map(|p| p.volume)
        .collect())
}
