//! Random flips, rotations, scale/shift affines and brightness/contrast
//! jitter. Each family fires independently with probability `apply_prob`.
//! Geometric maps are shared by every channel and the mask; photometric
//! jitter only touches image channels.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::volume::SlicePair;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    pub apply_prob: f64,
    pub max_rotation_deg: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub max_shift_frac: f64,
    pub max_brightness: f64,
    pub max_contrast: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            apply_prob: 0.4,
            max_rotation_deg: 15.0,
            min_scale: 0.9,
            max_scale: 1.1,
            max_shift_frac: 0.05,
            max_brightness: 0.2,
            max_contrast: 0.2,
        }
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentDraw {
    pub flip: bool,
    pub rotation_rad: Option<f64>,
    /// (scale, shift_y, shift_x) with shifts in pixels.
    pub affine: Option<(f64, f64, f64)>,
    /// (contrast multiplier, brightness offset)
    pub photometric: Option<(f64, f64)>,
}

impl AugmentDraw {
    pub fn is_geometric(&self) -> bool {
        self.flip || self.rotation_rad.is_some() || self.affine.is_some()
    }

    /// Maps an output pixel centre to the source coordinate it samples.
    fn source_coord(&self, y: f64, x: f64, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (mut dy, mut dx) = (y - cy, x - cx);
        if let Some((scale, sy, sx)) = self.affine {
            dy = (dy - sy) / scale;
            dx = (dx - sx) / scale;
        }
        if let Some(theta) = self.rotation_rad {
            let (s, c) = theta.sin_cos();
            // inverse rotation
            let (ry, rx) = (c * dy - s * dx, s * dy + c * dx);
            dy = ry;
            dx = rx;
        }
        if self.flip {
            dx = -dx;
        }
        (cy + dy, cx + dx)
    }

    pub fn warp_image(&self, img: ArrayView2<f32>) -> Array2<f32> {
        let (h, w) = img.dim();
        if !self.is_geometric() {
            return img.to_owned();
        }
        let at = |yy: i64, xx: i64| -> f64 {
            if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                0.0
            } else {
                img[[yy as usize, xx as usize]] as f64
            }
        };
        Array2::from_shape_fn((h, w), |(i, j)| {
            let (y, x) = self.source_coord(i as f64, j as f64, h, w);
            let (y0, x0) = (y.floor(), x.floor());
            let (fy, fx) = (y - y0, x - x0);
            let (y0, x0) = (y0 as i64, x0 as i64);
            let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + at(y0, x0 + 1) * (1.0 - fy) * fx
                + at(y0 + 1, x0) * fy * (1.0 - fx)
                + at(y0 + 1, x0 + 1) * fy * fx;
            v as f32
        })
    }

    pub fn warp_mask(&self, mask: ArrayView2<u8>) -> Array2<u8> {
        let (h, w) = mask.dim();
        if !self.is_geometric() {
            return mask.to_owned();
        }
        Array2::from_shape_fn((h, w), |(i, j)| {
            let (y, x) = self.source_coord(i as f64, j as f64, h, w);
            let (y, x) = (y.round(), x.round());
            if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
                0
            } else {
                mask[[y as usize, x as usize]]
            }
        })
    }

    pub fn adjust_intensity(&self, img: &mut Array2<f32>) {
        if let Some((contrast, brightness)) = self.photometric {
            img.mapv_inplace(|v| (v as f64 * contrast + brightness) as f32);
        }
    }
}

impl AugmentParams {
    pub fn draw(&self, rng: &mut impl Rng, h: usize, w: usize) -> AugmentDraw {
        let p = self.apply_prob;
        // Parameters are always drawn so the stream layout does not depend
        // on which families fire.
        let fire = |rng: &mut dyn rand::RngCore| rng.random::<f64>() < p;
        let flip = fire(rng);
        let rot_on = fire(rng);
        let rot = rng.random_range(-1.0..=1.0) * self.max_rotation_deg.to_radians();
        let aff_on = fire(rng);
        let scale = rng.random_range(self.min_scale..=self.max_scale);
        let sy = rng.random_range(-1.0..=1.0) * self.max_shift_frac * h as f64;
        let sx = rng.random_range(-1.0..=1.0) * self.max_shift_frac * w as f64;
        let photo_on = fire(rng);
        let contrast = 1.0 + rng.random_range(-1.0..=1.0) * self.max_contrast;
        let brightness = rng.random_range(-1.0..=1.0) * self.max_brightness;
        AugmentDraw {
            flip,
            rotation_rad: rot_on.then_some(rot),
            affine: aff_on.then_some((scale, sy, sx)),
            photometric: photo_on.then_some((contrast, brightness)),
        }
    }
}

/// Applies one draw to a channel stack; only the first
/// `photometric_channels` channels get intensity jitter.
pub fn apply_draw(
    draw: &AugmentDraw,
    images: &Array3<f32>,
    photometric_channels: usize,
    mask: &Array2<u8>,
) -> (Array3<f32>, Array2<u8>) {
    let mut out = images.clone();
    for (c, mut dst) in out.outer_iter_mut().enumerate() {
        let mut ch = draw.warp_image(images.index_axis(Axis(0), c));
        if c < photometric_channels {
            draw.adjust_intensity(&mut ch);
        }
        dst.assign(&ch);
    }
    (out, draw.warp_mask(mask.view()))
}

pub fn augment_channels(
    images: &Array3<f32>,
    photometric_channels: usize,
    mask: &Array2<u8>,
    rng_seed: u64,
    params: &AugmentParams,
) -> (Array3<f32>, Array2<u8>) {
    let (_, h, w) = images.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let draw = params.draw(&mut rng, h, w);
    apply_draw(&draw, images, photometric_channels, mask)
}

/// Augments conditioning, target and mask of one slice together.
pub fn augment(sp: &SlicePair, rng_seed: u64, params: &AugmentParams) -> SlicePair {
    let (_, h, w) = sp.conditioning.dim();
    let mut stack = Array3::zeros((4, h, w));
    stack.slice_mut(ndarray::s![0..3, .., ..]).assign(&sp.conditioning);
    stack.index_axis_mut(Axis(0), 3).assign(&sp.target);
    let (stack, mask) = augment_channels(&stack, 4, &sp.mask, rng_seed, params);
    SlicePair {
        conditioning: stack.slice(ndarray::s![0..3, .., ..]).to_owned(),
        target: stack.index_axis(Axis(0), 3).to_owned(),
        mask,
        subject_id: sp.subject_id.clone(),
        slice_index: sp.slice_index,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> SlicePair {
        SlicePair {
            conditioning: Array3::from_shape_fn((3, h, w), |(c, y, x)| (c * 7 + y * 3 + x) as f32 * 0.1),
            target: Array2::from_shape_fn((h, w), |(y, x)| (y as f32 - x as f32) * 0.05),
            mask: Array2::from_shape_fn((h, w), |(y, x)| u8::from(y > 3 && y < 9 && x > 1 && x < 5)),
            subject_id: "s".into(),
            slice_index: 3,
        }
    }

    #[test]
    fn zero_probability_is_identity() {
        let sp = sample(12, 16);
        let p = AugmentParams { apply_prob: 0.0, ..Default::default() };
        for seed in 0..20 {
            assert_eq!(augment(&sp, seed, &p), sp);
        }
    }

    #[test]
    fn flip_mirrors_every_channel_and_mask() {
        let sp = sample(12, 16);
        let draw = AugmentDraw { flip: true, ..Default::default() };
        let mut stack = Array3::zeros((3, 12, 16));
        stack.assign(&sp.conditioning);
        let (out, mask) = apply_draw(&draw, &stack, 3, &sp.mask);
        for y in 0..12 {
            for x in 0..16 {
                assert_eq!(mask[[y, x]], sp.mask[[y, 15 - x]]);
                assert_eq!(out[[1, y, x]], sp.conditioning[[1, y, 15 - x]]);
            }
        }
        let before: usize = sp.mask.iter().map(|&v| v as usize).sum();
        let after: usize = mask.iter().map(|&v| v as usize).sum();
        assert_eq!(before, after);
    }

    #[test]
    fn same_seed_same_output() {
        let sp = sample(20, 20);
        let p = AugmentParams { apply_prob: 0.5, ..Default::default() };
        for seed in 0..10 {
            assert_eq!(augment(&sp, seed, &p), augment(&sp, seed, &p));
        }
    }

    #[test]
    fn photometric_skips_extra_channels() {
        let draw = AugmentDraw { photometric: Some((1.1, 0.2)), ..Default::default() };
        let imgs = Array3::from_elem((2, 4, 4), 1.0f32);
        let mask = Array2::zeros((4, 4));
        let (out, _) = apply_draw(&draw, &imgs, 1, &mask);
        assert!((out[[0, 0, 0]] - 1.3).abs() < 1e-6);
        assert_eq!(out[[1, 0, 0]], 1.0);
    }
}
