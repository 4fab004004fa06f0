//! PNG figure panels: synthesis, segmentation and threshold comparison.

use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};
use ndarray::{Array2, ArrayView2, Axis};

use crate::config::RunConfig;
use crate::data::cache::Cache;
use crate::diffusion::train::to_domain;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::pipeline::{predict_split, read_synth, subject_residuals, Layout};
use crate::residual::ResidualSource;
use crate::segmentation::binarize;

const TILE: u32 = 128;
const GAP: u32 = 4;

/// Grayscale tile; values mapped linearly from `[lo, hi]`.
pub fn gray_tile(img: ArrayView2<f32>, lo: f32, hi: f32) -> RgbImage {
    let (h, w) = img.dim();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let small = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = ((img[[y as usize, x as usize]] - lo) / span).clamp(0.0, 1.0);
        let g = (v * 255.0).round() as u8;
        Rgb([g, g, g])
    });
    upscale(&small)
}

fn auto_tile(img: ArrayView2<f32>) -> RgbImage {
    let lo = img.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    gray_tile(img, lo, hi)
}

fn mask_tile(mask: ArrayView2<u8>) -> RgbImage {
    gray_tile(mask.mapv(f32::from).view(), 0.0, 1.0)
}

/// Base image with prediction in red and ground truth in green.
fn overlay_tile(base: ArrayView2<f32>, pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> RgbImage {
    let lo = base.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = base.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = base.dim();
    let small = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        let g = (((base[[y, x]] - lo) / span).clamp(0.0, 1.0) * 200.0) as u8;
        let mut px = [g, g, g];
        if pred[[y, x]] == 1 {
            px[0] = 255;
        }
        if gt[[y, x]] == 1 {
            px[1] = 255;
        }
        Rgb(px)
    });
    upscale(&small)
}

fn upscale(img: &RgbImage) -> RgbImage {
    let s = (TILE / img.height().max(img.width()).max(1)).max(1);
    imageops::resize(img, img.width() * s, img.height() * s, imageops::FilterType::Nearest)
}

/// Tiles laid out left to right on a black canvas.
pub fn compose(tiles: &[RgbImage]) -> RgbImage {
    let h = tiles.iter().map(|t| t.height()).max().unwrap_or(1);
    let w: u32 = tiles.iter().map(|t| t.width()).sum::<u32>() + GAP * tiles.len().saturating_sub(1) as u32;
    let mut canvas = RgbImage::new(w.max(1), h);
    let mut x = 0i64;
    for t in tiles {
        imageops::replace(&mut canvas, t, x, 0);
        x += (t.width() + GAP) as i64;
    }
    canvas
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)?;
    Ok(())
}

/// Writes the three figure panels for one subject slice. Defaults: the
/// report's first subject and its slice with the most tumor pixels.
pub fn cmd_plot(
    cfg: &RunConfig,
    out: &Path,
    subject: Option<&str>,
    slice: Option<usize>,
) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(out);
    let source = cfg.residual.source;
    let report = MetricsReport::read_json(&layout.metrics_json(source, cfg.residual.no_real_t1ce))?;
    let synth = read_synth(&Cache::open(&layout.synth())?)?;
    let outputs = predict_split(cfg, out, cfg.evaluation.split)?;
    let subject = match subject {
        Some(s) => s.to_string(),
        None => report
            .per_subject
            .first()
            .map(|r| r.subject_id.clone())
            .ok_or_else(|| Error::AlignmentError("report lists no subjects".into()))?,
    };
    let o = outputs
        .iter()
        .find(|o| o.subject_id == subject)
        .ok_or_else(|| Error::AlignmentError(format!("subject {subject} has no predictions")))?;
    let k = match slice {
        Some(idx) => o
            .slices
            .iter()
            .position(|s| s.slice_index == idx)
            .ok_or_else(|| Error::AlignmentError(format!("subject {subject} has no slice {idx}")))?,
        None => (0..o.slices.len()).max_by_key(|&i| (o.slices[i].tumor_pixels(), usize::MAX - i)).unwrap_or(0),
    };
    let sp = &o.slices[k];
    let scale = cfg.diffusion.train.intensity_scale;
    let synth_img = synth
        .get(&subject)
        .and_then(|m| m.get(&sp.slice_index))
        .ok_or_else(|| Error::MissingArtifact(layout.synth().join(format!("{subject}.bin"))))?;
    let residuals = subject_residuals(cfg, ResidualSource::Dynamic, &o.slices, synth.get(&subject))?;
    let residual = &residuals[k].values;

    let cond = sp.conditioning.mapv(|v| to_domain(v, scale));
    let real = sp.target.mapv(|v| to_domain(v, scale));
    let dom = |a: ArrayView2<f32>| gray_tile(a, -1.0, 1.0);
    let mut a: Vec<RgbImage> = cond.axis_iter(Axis(0)).map(dom).collect();
    a.push(dom(real.view()));
    a.push(dom(synth_img.view()));
    a.push(gray_tile(residual.view(), 0.0, 1.0));

    let probs = &o.probs[k];
    let chosen: Array2<u8> = binarize(probs.view(), report.chosen_tau)?;
    let flair = cond.index_axis(Axis(0), 0);
    let b = vec![
        auto_tile(flair),
        mask_tile(sp.mask.view()),
        mask_tile(chosen.view()),
        overlay_tile(flair, chosen.view(), sp.mask.view()),
    ];

    let mut c = vec![mask_tile(sp.mask.view())];
    for &tau in &cfg.evaluation.taus {
        let m = binarize(probs.view(), tau)?;
        c.push(overlay_tile(flair, m.view(), sp.mask.view()));
    }

    let dir = layout.figures();
    let stem = format!("{subject}_slice{:03}", sp.slice_index);
    let paths = vec![
        dir.join(format!("synthesis_{stem}.png")),
        dir.join(format!("segmentation_{stem}_{source}.png")),
        dir.join(format!("thresholds_{stem}_{source}.png")),
    ];
    for (tiles, p) in [a, b, c].iter().zip(&paths) {
        save(&compose(tiles), p)?;
    }
    cfg.write_resolved(&dir)?;
    Ok(paths)
}
