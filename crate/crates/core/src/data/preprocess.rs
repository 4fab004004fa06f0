use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::volume::{Modality, MriVolume, SlicePair};
use crate::error::{Error, Result};
use crate::stats;

/// Clip parameters and z-score moments computed for one modality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityStats {
    pub p_low: f64,
    pub p_high: f64,
    pub mean: f64,
    pub std: f64,
}

/// Percentile clip + z-score of one grid over its nonzero (brain) voxels.
/// Background zeros stay zero.
pub fn clip_and_normalize_grid(
    grid: &Array3<f32>,
    low_pct: f64,
    high_pct: f64,
) -> Option<(Array3<f32>, IntensityStats)> {
    let brain: Vec<f64> = grid
        .iter()
        .filter(|&&v| v != 0.0)
        .map(|&v| v as f64)
        .collect();
    if brain.is_empty() {
        return None;
    }
    let p = stats::percentiles(brain.iter().copied(), &[low_pct, high_pct]);
    let (p_low, p_high) = (p[0], p[1]);
    let clipped: Vec<f64> = brain.iter().map(|v| v.clamp(p_low, p_high)).collect();
    let (mean, std) = stats::mean_std(&clipped);
    if !(std > 0.0) {
        return None;
    }
    let out = grid.mapv(|v| {
        if v == 0.0 {
            0.0
        } else {
            (((v as f64).clamp(p_low, p_high) - mean) / std) as f32
        }
    });
    Some((
        out,
        IntensityStats {
            p_low,
            p_high,
            mean,
            std,
        },
    ))
}

/// Per-modality percentile clipping followed by z-scoring, both over the
/// nonzero voxels of that modality. The mask is untouched.
pub fn clip_and_normalize(vol: &MriVolume, low_pct: f64, high_pct: f64) -> Result<MriVolume> {
    vol.map_grids(
        |m, grid| {
            clip_and_normalize_grid(grid, low_pct, high_pct)
                .map(|(g, _)| g)
                .ok_or_else(|| Error::DegenerateIntensity(m.to_string()))
        },
        |mask| mask.clone(),
    )
}

/// Drops `discard_bottom` slices from the inferior end and `discard_top`
/// from the superior end.
pub fn crop_axial(vol: &MriVolume, discard_top: usize, discard_bottom: usize) -> Result<MriVolume> {
    let depth = vol.depth();
    let discard = discard_top + discard_bottom;
    if depth <= discard {
        return Err(Error::EmptyCrop { depth, discard });
    }
    let range = s![discard_bottom..depth - discard_top, .., ..];
    let mut out = vol.map_grids(
        |_, g| Ok(g.slice(range).to_owned()),
        |mask| mask.slice(range).to_owned(),
    )?;
    out.axial_offset = vol.axial_offset + discard_bottom;
    Ok(out)
}

/// Bilinear resize with half-pixel centres; same-size input is returned
/// unchanged.
pub fn resize_bilinear(img: ArrayView2<f32>, height: usize, width: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    if (h, w) == (height, width) {
        return img.to_owned();
    }
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    Array2::from_shape_fn((height, width), |(i, j)| {
        let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = img[[y0, x0]] as f64 * (1.0 - fx) + img[[y0, x1]] as f64 * fx;
        let bot = img[[y1, x0]] as f64 * (1.0 - fx) + img[[y1, x1]] as f64 * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    })
}

/// Nearest-neighbour resize (keeps label values intact).
pub fn resize_nearest<T: Copy>(img: ArrayView2<T>, height: usize, width: usize) -> Array2<T> {
    let (h, w) = img.dim();
    if (h, w) == (height, width) {
        return img.to_owned();
    }
    Array2::from_shape_fn((height, width), |(i, j)| {
        let y = (((i as f64 + 0.5) * h as f64 / height as f64) as usize).min(h - 1);
        let x = (((j as f64 + 0.5) * w as f64 / width as f64) as usize).min(w - 1);
        img[[y, x]]
    })
}

fn resize_stack<T: Copy>(
    grid: &Array3<T>,
    height: usize,
    width: usize,
    f: impl Fn(ArrayView2<T>, usize, usize) -> Array2<T>,
) -> Array3<T>
where
    T: Default,
{
    let depth = grid.len_of(Axis(0));
    let mut out = Array3::default((depth, height, width));
    for (src, mut dst) in grid.outer_iter().zip(out.outer_iter_mut()) {
        dst.assign(&f(src, height, width));
    }
    out
}

/// Resizes every axial slice: bilinear for images, nearest for the mask.
pub fn resize_slices(vol: &MriVolume, height: usize, width: usize) -> Result<MriVolume> {
    if height == 0 || width == 0 {
        return Err(Error::Precondition("resize target must be at least 1x1".into()));
    }
    let mut out = vol.map_grids(
        |_, g| Ok(resize_stack(g, height, width, resize_bilinear)),
        |mask| resize_stack(mask, height, width, resize_nearest),
    )?;
    // In-plane spacing scales with the resampling factor.
    let (_, h, w) = vol.dim();
    out.voxel_spacing[1] *= h as f64 / height as f64;
    out.voxel_spacing[2] *= w as f64 / width as f64;
    Ok(out)
}

/// Extracts axial slice `k` (local index) as a [`SlicePair`].
pub fn slice_pair(vol: &MriVolume, k: usize) -> SlicePair {
    let (_, h, w) = vol.dim();
    let mut conditioning = Array3::zeros((3, h, w));
    for (c, m) in Modality::CONDITIONING.into_iter().enumerate() {
        conditioning
            .index_axis_mut(Axis(0), c)
            .assign(&vol.modality(m).index_axis(Axis(0), k));
    }
    SlicePair {
        conditioning,
        target: vol.modality(Modality::T1ce).index_axis(Axis(0), k).to_owned(),
        mask: vol.mask().index_axis(Axis(0), k).to_owned(),
        subject_id: vol.subject_id.clone(),
        slice_index: vol.axial_offset + k,
    }
}

/// Every axial slice, in order.
pub fn all_slices(vol: &MriVolume) -> Vec<SlicePair> {
    (0..vol.depth()).map(|k| slice_pair(vol, k)).collect()
}

/// Slices whose mask has at least one tumor pixel, in axial order.
pub fn filter_slices(vol: &MriVolume) -> Vec<SlicePair> {
    (0..vol.depth())
        .filter(|&k| vol.mask().index_axis(Axis(0), k).iter().any(|&v| v == 1))
        .map(|k| slice_pair(vol, k))
        .collect()
}

/// Parameters of the full clip → crop → resize chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessParams {
    pub low_pct: f64,
    pub high_pct: f64,
    pub discard_top: usize,
    pub discard_bottom: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            low_pct: 1.0,
            high_pct: 99.0,
            discard_top: 26,
            discard_bottom: 80,
            height: 120,
            width: 120,
        }
    }
}

pub fn preprocess_volume(vol: &MriVolume, p: &PreprocessParams) -> Result<MriVolume> {
    let v = clip_and_normalize(vol, p.low_pct, p.high_pct)?;
    let v = crop_axial(&v, p.discard_top, p.discard_bottom)?;
    resize_slices(&v, p.height, p.width)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn volume_from(
        f: impl Fn(Modality, usize, usize, usize) -> f32,
        mask: impl Fn(usize, usize, usize) -> u8,
        dim: (usize, usize, usize),
    ) -> MriVolume {
        let mut mods = BTreeMap::new();
        for m in Modality::ALL {
            mods.insert(m, Array3::from_shape_fn(dim, |(z, y, x)| f(m, z, y, x)));
        }
        let mask = Array3::from_shape_fn(dim, |(z, y, x)| mask(z, y, x));
        MriVolume::new("t", mods, mask, [1.0; 3]).unwrap()
    }

    #[test]
    fn outlier_is_clipped_to_p99_before_zscore() {
        // 10x10x10 grid: zero background shell, brain uniform 100 with
        // small structure, one outlier at 10x.
        let vol = volume_from(
            |_, z, y, x| {
                if z == 0 {
                    0.0
                } else if (z, y, x) == (5, 5, 5) {
                    10_000.0
                } else {
                    100.0 + ((y * 10 + x) % 7) as f32
                }
            },
            |_, _, _| 0,
            (10, 10, 10),
        );
        let g = vol.modality(Modality::T1);
        let (out, st) = clip_and_normalize_grid(g, 1.0, 99.0).unwrap();
        assert!(st.p_high < 10_000.0);
        let expected = ((st.p_high - st.mean) / st.std) as f32;
        assert!((out[[5, 5, 5]] - expected).abs() < 1e-6);
        // background stays exactly zero
        assert!(out.index_axis(Axis(0), 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_input_is_a_fixed_point() {
        // Brain values with tied extremes so that p1 / p99 clip nothing,
        // then standardized exactly.
        let n = 1000usize;
        let mut raw: Vec<f64> = (0..n)
            .map(|i| {
                if i < 30 {
                    -1.0
                } else if i >= n - 30 {
                    1.0
                } else {
                    ((i as f64) / n as f64 - 0.5) * 1.5
                }
            })
            .collect();
        let (m, s) = stats::mean_std(&raw);
        raw.iter_mut().for_each(|v| *v = (*v - m) / s);
        let grid = Array3::from_shape_fn((10, 10, 10), |(z, y, x)| raw[z * 100 + y * 10 + x] as f32);
        let (out, _) = clip_and_normalize_grid(&grid, 1.0, 99.0).unwrap();
        for (a, b) in out.iter().zip(grid.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn brain_moments_are_standard_after_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = Array3::from_shape_fn((12, 12, 12), |(z, _, _)| {
            if z < 2 {
                0.0
            } else {
                rng.random_range(50.0f32..500.0)
            }
        });
        let (out, st) = clip_and_normalize_grid(&grid, 1.0, 99.0).unwrap();
        let brain: Vec<f64> = out
            .iter()
            .zip(grid.iter())
            .filter(|(_, &g)| g != 0.0)
            .map(|(&o, _)| o as f64)
            .collect();
        let (m, s) = stats::mean_std(&brain);
        assert!(m.abs() < 1e-6, "mean {m}");
        assert!((s - 1.0).abs() < 1e-6, "std {s}");
        let bound = (st.p_high - st.mean) / st.std + 1e-6;
        assert!(out.iter().all(|&v| (v as f64) <= bound));
    }

    #[test]
    fn constant_modality_is_degenerate() {
        let vol = volume_from(
            |m, _, _, _| if m == Modality::T2 { 5.0 } else { 0.0 },
            |_, _, _| 0,
            (3, 3, 3),
        );
        assert!(matches!(
            clip_and_normalize(&vol, 1.0, 99.0),
            Err(Error::DegenerateIntensity(_))
        ));
    }

    #[test]
    fn crop_counts() {
        let mk = |d| volume_from(|_, z, _, _| z as f32, |_, _, _| 0, (d, 2, 2));
        let v = crop_axial(&mk(184), 26, 80).unwrap();
        assert_eq!(v.depth(), 78);
        let v = crop_axial(&mk(155), 26, 80).unwrap();
        assert_eq!(v.depth(), 49);
        assert_eq!(v.axial_offset, 80);
        assert_eq!(v.modality(Modality::T1)[[0, 0, 0]], 80.0);
        assert!(matches!(
            crop_axial(&mk(100), 26, 80),
            Err(Error::EmptyCrop { depth: 100, discard: 106 })
        ));
        assert!(crop_axial(&mk(106), 26, 80).is_err());
    }

    #[test]
    fn resize_shapes_and_identity() {
        let vol = volume_from(
            |_, z, y, x| (z + y * 3 + x) as f32,
            |_, y, x| u8::from((y + x) % 3 == 0),
            (2, 240, 240),
        );
        let r = resize_slices(&vol, 120, 120).unwrap();
        assert_eq!(r.dim(), (2, 120, 120));
        assert!(r.mask().iter().all(|&v| v <= 1));
        assert_eq!(r.voxel_spacing, [1.0, 2.0, 2.0]);
        let same = resize_slices(&r, 120, 120).unwrap();
        assert_eq!(same, r);
    }

    #[test]
    fn bilinear_halving_averages_pairs() {
        let img = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f32);
        let r = resize_bilinear(img.view(), 2, 2);
        // centre of each 2x2 block
        assert!((r[[0, 0]] - 2.5).abs() < 1e-6);
        assert!((r[[1, 1]] - 12.5).abs() < 1e-6);
    }

    #[test]
    fn filter_keeps_tumor_slices_in_order() {
        let vol = volume_from(
            |_, _, _, _| 1.0,
            |z, y, x| u8::from((30..=45).contains(&z) && y == 1 && x == 1),
            (78, 4, 4),
        );
        let s = filter_slices(&vol);
        assert_eq!(s.len(), 16);
        assert!(s.windows(2).all(|w| w[0].slice_index < w[1].slice_index));
        assert!(s.iter().all(|p| p.tumor_pixels() > 0));

        let empty = volume_from(|_, _, _, _| 1.0, |_, _, _| 0, (5, 4, 4));
        assert!(filter_slices(&empty).is_empty());
    }
}
