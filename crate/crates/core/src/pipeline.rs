//! Pipeline commands behind the CLI verbs. Every command reads its inputs
//! from and writes its outputs under one run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::{Array2, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{CalibrationScope, RunConfig};
use crate::data::cache::{file_hash, read_plane_subject, write_plane_cache, Cache, SliceCache, SliceCacheWriter, MANIFEST};
use crate::data::io::list_subjects;
use crate::data::phantom::generate_phantoms;
use crate::data::{load_volume, preprocess_volume, save_volume, split_dataset, DatasetSplit, SlicePair, SplitName};
use crate::diffusion::train::{to_domain, DiffusionCheckpoint};
use crate::diffusion::{train_diffusion, DiffusionSetup, Synthesizer};
use crate::error::{Error, Result};
use crate::metrics::{threshold_sweep, AggregateRow, MetricsReport, SubjectPrediction};
use crate::residual::{
    assemble_seg_input, calibrate_residual, calibrate_stack, compute_residual, static_residual, zero_residual,
    ResidualMap, ResidualSource, SegInput,
};
use crate::seeding::slice_seed;
use crate::segmentation::{predict_many, train_segmentation, SegCheckpoint, SegSample, SegSetup};

/// Artifact locations inside a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Layout { out: out.into() }
    }

    pub fn cache(&self) -> PathBuf {
        self.out.join("cache")
    }

    pub fn split(&self) -> PathBuf {
        self.cache().join("split.json")
    }

    pub fn diffusion_dir(&self) -> PathBuf {
        self.out.join("diffusion")
    }

    pub fn diffusion_checkpoint(&self) -> PathBuf {
        self.diffusion_dir().join("checkpoint.rcsg")
    }

    pub fn synth(&self) -> PathBuf {
        self.out.join("synth")
    }

    pub fn seg_dir(&self, source: ResidualSource) -> PathBuf {
        self.out.join("segmentation").join(source.as_str())
    }

    pub fn seg_checkpoint(&self, source: ResidualSource) -> PathBuf {
        self.seg_dir(source).join("checkpoint.rcsg")
    }

    /// Report directory for a source; `-no-t1ce` suffix when the real T1ce
    /// is withheld.
    pub fn report_dir(&self, source: ResidualSource, no_real_t1ce: bool) -> PathBuf {
        let name = if no_real_t1ce { format!("{source}-no-t1ce") } else { source.to_string() };
        self.out.join("reports").join(name)
    }

    pub fn metrics_json(&self, source: ResidualSource, no_real_t1ce: bool) -> PathBuf {
        self.report_dir(source, no_real_t1ce).join("metrics.json")
    }

    pub fn metrics_csv(&self, source: ResidualSource, no_real_t1ce: bool) -> PathBuf {
        self.report_dir(source, no_real_t1ce).join("metrics.csv")
    }

    pub fn calibration(&self, source: ResidualSource) -> PathBuf {
        self.report_dir(source, false).join("calibration.json")
    }

    pub fn figures(&self) -> PathBuf {
        self.out.join("figures")
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub force: bool,
    /// Stop a training command after this many epochs in this invocation.
    pub max_epochs_this_run: Option<usize>,
}

fn write_log<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

/// Writes the phantom dataset in the subject-directory layout.
pub fn cmd_phantom(cfg: &RunConfig, out: &Path, opts: RunOptions) -> Result<Vec<PathBuf>> {
    let ph = &cfg.data.phantom;
    if ph.subjects == 0 {
        return Err(Error::InvalidConfig("phantom count must be at least 1".into()));
    }
    let raw = cfg.raw_dir(out);
    if raw.exists() {
        if !opts.force {
            return Err(Error::RefusingOverwrite(raw));
        }
        fs::remove_dir_all(&raw)?;
    }
    let shape = (ph.shape[0], ph.shape[1], ph.shape[2]);
    let phantoms = generate_phantoms(ph.subjects, shape, cfg.seed, &ph.options)?;
    let mut dirs = Vec::with_capacity(phantoms.len());
    for p in &phantoms {
        let dir = raw.join(&p.volume.subject_id);
        save_volume(&p.volume, &dir)?;
        dirs.push(dir);
    }
    cfg.write_resolved(&raw)?;
    info!("wrote {} phantom subjects to {}", dirs.len(), raw.display());
    Ok(dirs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub manifest_hash: String,
    pub subjects: usize,
    pub tumor_slices: usize,
}

/// Builds the slice cache and the subject split. A failing subject is
/// skipped; the first failure is returned after the others are cached.
pub fn cmd_preprocess(cfg: &RunConfig, out: &Path) -> Result<PreprocessSummary> {
    let layout = Layout::new(out);
    let raw = cfg.raw_dir(out);
    let dirs = list_subjects(&raw)?;
    if dirs.is_empty() {
        return Err(Error::InsufficientSubjects(format!("no subject directories in {}", raw.display())));
    }
    let cache_dir = layout.cache();
    if cache_dir.exists() {
        fs::remove_dir_all(&cache_dir)?;
    }
    let p = &cfg.preprocess;
    let key = hex::encode(Sha256::digest(toml::to_string(p)?.as_bytes()));
    let mut writer = SliceCacheWriter::create(&cache_dir, p.height, p.width, &key)?;
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for dir in &dirs {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let res = load_volume(dir)
            .and_then(|v| preprocess_volume(&v, p))
            .and_then(|v| writer.add_volume(&v));
        match res {
            Ok(()) => ok.push(name),
            Err(e) => {
                let e = e.for_subject(name);
                warn!("{e}");
                failures.push(e);
            }
        }
    }
    let manifest_hash = writer.finish()?;
    let cache = SliceCache::open(&cache_dir)?;
    let tumor_slices = cache.manifest().slices.len();
    if !ok.is_empty() {
        let r = cfg.split.ratios;
        let split = split_dataset(&ok, (r[0], r[1], r[2]), cfg.split_seed())?;
        write_log(&layout.split(), &split)?;
    }
    cfg.write_resolved(&cache_dir)?;
    info!("cached {} subjects, {} tumor-bearing slices", ok.len(), tumor_slices);
    if let Some(e) = failures.into_iter().next() {
        return Err(e);
    }
    Ok(PreprocessSummary { manifest_hash, subjects: ok.len(), tumor_slices })
}

pub fn load_split(out: &Path) -> Result<DatasetSplit> {
    let path = Layout::new(out).split();
    if !path.is_file() {
        return Err(Error::MissingArtifact(path));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn tumor_slices_of(cache: &SliceCache, ids: &[String]) -> Result<Vec<SlicePair>> {
    let mut out = Vec::new();
    for id in ids {
        out.extend(cache.tumor_slices(id)?);
    }
    Ok(out)
}

fn all_slices_of(cache: &SliceCache, ids: &[String]) -> Result<Vec<SlicePair>> {
    let mut out = Vec::new();
    for id in ids {
        out.extend(cache.all_slices(id)?);
    }
    Ok(out)
}

/// Trains the denoiser, resuming an unfinished checkpoint. A finished,
/// config-compatible checkpoint is returned as is unless `force` is set.
pub fn cmd_train_diffusion(cfg: &RunConfig, out: &Path, opts: RunOptions) -> Result<DiffusionCheckpoint> {
    let layout = Layout::new(out);
    let cache = SliceCache::open(&layout.cache())?;
    let split = load_split(out)?;
    let d = &cfg.diffusion;
    let ckpt_path = layout.diffusion_checkpoint();
    let mut resume = None;
    if ckpt_path.exists() && !opts.force {
        let ck = DiffusionCheckpoint::load(&ckpt_path)?;
        if ck.meta.denoiser != d.model || ck.meta.schedule != d.schedule || ck.meta.train != d.train {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{} was trained with a different diffusion config (pass --force to retrain)",
                ckpt_path.display()
            )));
        }
        if ck.meta.finished {
            info!("diffusion checkpoint already complete at epoch {}", ck.meta.epochs_completed);
            return Ok(ck);
        }
        info!("resuming diffusion training after epoch {}", ck.meta.epochs_completed);
        resume = Some(ck);
    }
    let (train, val) = if d.train.tumor_slices_only {
        (tumor_slices_of(&cache, &split.train)?, tumor_slices_of(&cache, &split.val)?)
    } else {
        (all_slices_of(&cache, &split.train)?, all_slices_of(&cache, &split.val)?)
    };
    info!("diffusion training on {} slices, validating on {}", train.len(), val.len());
    let setup = DiffusionSetup {
        denoiser: d.model.clone(),
        schedule: d.schedule,
        train: d.train.clone(),
        seed: cfg.seed,
    };
    cfg.write_resolved(&layout.diffusion_dir())?;
    let log_path = layout.diffusion_dir().join("train_log.json");
    let mut run = 0usize;
    let ck = train_diffusion(&train, &val, &setup, resume, |ck| {
        ck.save(&ckpt_path)?;
        write_log(&log_path, &ck.meta.history)?;
        run += 1;
        Ok(opts.max_epochs_this_run.is_none_or(|n| run < n))
    })?;
    ck.save(&ckpt_path)?;
    write_log(&log_path, &ck.meta.history)?;
    Ok(ck)
}

/// Synthesized T1ce planes per subject, keyed by axial slice index.
pub type SynthStore = BTreeMap<String, BTreeMap<usize, Array2<f32>>>;

fn synth_key(cfg: &RunConfig, layout: &Layout) -> Result<String> {
    let mut h = Sha256::new();
    h.update(file_hash(&layout.diffusion_checkpoint())?);
    h.update(file_hash(&layout.cache().join(MANIFEST))?);
    h.update(cfg.diffusion.sampling.steps.to_le_bytes());
    h.update(cfg.seed.to_le_bytes());
    Ok(hex::encode(h.finalize()))
}

pub fn read_synth(cache: &Cache) -> Result<SynthStore> {
    let mut store = SynthStore::new();
    for id in cache.subject_ids() {
        store.insert(id.clone(), read_plane_subject(cache, &id)?.into_iter().collect());
    }
    Ok(store)
}

/// Loads the synthesis cache if it matches the current checkpoint, data and
/// sampling settings; otherwise synthesizes every cached slice.
pub fn ensure_synthesis(cfg: &RunConfig, out: &Path, force: bool) -> Result<SynthStore> {
    let layout = Layout::new(out);
    let ckpt_path = layout.diffusion_checkpoint();
    if !ckpt_path.exists() {
        return Err(Error::MissingArtifact(ckpt_path));
    }
    let slices = SliceCache::open(&layout.cache())?;
    let key = synth_key(cfg, &layout)?;
    if !force {
        if let Ok(c) = Cache::open(&layout.synth()) {
            if c.manifest.config_hash == key && c.manifest.kind == "synth" {
                return read_synth(&c);
            }
        }
    }
    let ck = DiffusionCheckpoint::load(&ckpt_path)?;
    let syn = Synthesizer::new(&ck)?;
    let s = &cfg.diffusion.sampling;
    let mut planes = Vec::new();
    for id in slices.subject_ids() {
        let sps = slices.all_slices(&id)?;
        let conds: Vec<&Array3<f32>> = sps.iter().map(|sp| &sp.conditioning).collect();
        let seeds: Vec<u64> = sps.iter().map(|sp| slice_seed(cfg.seed, "synthesis", &id, sp.slice_index)).collect();
        let outs = syn
            .synthesize_many(&conds, s.steps, &seeds, s.batch_size)
            .map_err(|e| e.for_subject(&id))?;
        info!("synthesized {} slices for {id}", outs.len());
        planes.push((id, sps.iter().map(|sp| sp.slice_index).zip(outs).collect::<Vec<_>>()));
    }
    let dir = layout.synth();
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    write_plane_cache(&dir, "synth", &key, &planes)?;
    cfg.write_resolved(&dir)?;
    Ok(planes.into_iter().map(|(id, v)| (id, v.into_iter().collect())).collect())
}

pub fn cmd_synthesize(cfg: &RunConfig, out: &Path, opts: RunOptions) -> Result<usize> {
    Ok(ensure_synthesis(cfg, out, opts.force)?.values().map(|m| m.len()).sum())
}

fn domain(img: &Array2<f32>, scale: f64) -> Array2<f32> {
    img.mapv(|v| to_domain(v, scale))
}

/// Calibrated residuals for one subject's slices, in slice order.
pub fn subject_residuals(
    cfg: &RunConfig,
    source: ResidualSource,
    slices: &[SlicePair],
    synth: Option<&BTreeMap<usize, Array2<f32>>>,
) -> Result<Vec<ResidualMap>> {
    let scale = cfg.diffusion.train.intensity_scale;
    let (h, w) = (cfg.preprocess.height, cfg.preprocess.width);
    if source == ResidualSource::Zero {
        return Ok(vec![zero_residual(h, w); slices.len()]);
    }
    let mut raws = Vec::with_capacity(slices.len());
    for sp in slices {
        let real = domain(&sp.target, scale);
        let raw = match source {
            ResidualSource::Zero => unreachable!("handled above"),
            ResidualSource::Dynamic => {
                let s = synth.and_then(|m| m.get(&sp.slice_index)).ok_or_else(|| {
                    Error::Precondition(format!(
                        "no synthesized T1ce for {} slice {}",
                        sp.subject_id, sp.slice_index
                    ))
                })?;
                compute_residual(real.view(), s.view())?
            }
            ResidualSource::Static => {
                let c = sp.conditioning.mapv(|v| to_domain(v, scale));
                static_residual(
                    c.index_axis(Axis(0), 0),
                    c.index_axis(Axis(0), 1),
                    c.index_axis(Axis(0), 2),
                    real.view(),
                )?
            }
        };
        raws.push(raw.mapv(|v| v / 2.0));
    }
    let (lo, hi) = (cfg.residual.low_pct, cfg.residual.high_pct);
    match cfg.residual.scope {
        CalibrationScope::Subject => calibrate_stack(&raws, lo, hi, source),
        CalibrationScope::Slice => raws.iter().map(|r| calibrate_residual(r.view(), lo, hi, source)).collect(),
    }
}

/// Four-channel inputs (diffusion-domain FLAIR, T1, T2 plus residual).
pub fn subject_inputs(
    cfg: &RunConfig,
    source: ResidualSource,
    slices: &[SlicePair],
    synth: Option<&BTreeMap<usize, Array2<f32>>>,
    no_real_t1ce: bool,
) -> Result<Vec<SegInput>> {
    let (h, w) = (cfg.preprocess.height, cfg.preprocess.width);
    let residuals = if no_real_t1ce {
        vec![zero_residual(h, w); slices.len()]
    } else {
        subject_residuals(cfg, source, slices, synth)?
    };
    let scale = cfg.diffusion.train.intensity_scale;
    slices
        .iter()
        .zip(&residuals)
        .map(|(sp, r)| {
            let c = sp.conditioning.mapv(|v| to_domain(v, scale));
            assemble_seg_input(
                c.index_axis(Axis(0), 0),
                c.index_axis(Axis(0), 1),
                c.index_axis(Axis(0), 2),
                r,
                &sp.subject_id,
                sp.slice_index,
            )
        })
        .collect()
}

fn synth_for(cfg: &RunConfig, out: &Path, source: ResidualSource, no_real_t1ce: bool) -> Result<Option<SynthStore>> {
    if source == ResidualSource::Dynamic && !no_real_t1ce {
        Ok(Some(ensure_synthesis(cfg, out, false)?))
    } else {
        Ok(None)
    }
}

fn samples_for(
    cfg: &RunConfig,
    cache: &SliceCache,
    ids: &[String],
    synth: Option<&SynthStore>,
    tumor_only: bool,
) -> Result<Vec<(SlicePair, SegInput)>> {
    let source = cfg.residual.source;
    let mut out = Vec::new();
    for id in ids {
        let slices = cache.all_slices(id)?;
        let s = synth.and_then(|m| m.get(id));
        let inputs = subject_inputs(cfg, source, &slices, s, false).map_err(|e| e.for_subject(id))?;
        out.extend(
            slices
                .into_iter()
                .zip(inputs)
                .filter(|(sp, _)| !tumor_only || sp.tumor_pixels() > 0),
        );
    }
    Ok(out)
}

/// Trains the segmentation network for the configured residual source.
pub fn cmd_train_seg(cfg: &RunConfig, out: &Path, opts: RunOptions) -> Result<SegCheckpoint> {
    let layout = Layout::new(out);
    let source = cfg.residual.source;
    let cache = SliceCache::open(&layout.cache())?;
    let split = load_split(out)?;
    let s = &cfg.segmentation;
    let ckpt_path = layout.seg_checkpoint(source);
    let mut resume = None;
    if ckpt_path.exists() && !opts.force {
        let ck = SegCheckpoint::load(&ckpt_path)?;
        if ck.meta.model != s.model || ck.meta.train != s.train || ck.meta.residual_source != source {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{} was trained with a different segmentation config (pass --force to retrain)",
                ckpt_path.display()
            )));
        }
        if ck.meta.finished {
            info!("segmentation checkpoint already complete at epoch {}", ck.meta.epochs_completed);
            return Ok(ck);
        }
        info!("resuming segmentation training after epoch {}", ck.meta.epochs_completed);
        resume = Some(ck);
    }
    let synth = synth_for(cfg, out, source, false)?;
    let to_samples = |v: Vec<(SlicePair, SegInput)>| -> Vec<SegSample> {
        v.into_iter().map(|(sp, input)| SegSample { input, mask: sp.mask }).collect()
    };
    let train = to_samples(samples_for(cfg, &cache, &split.train, synth.as_ref(), true)?);
    let val = to_samples(samples_for(cfg, &cache, &split.val, synth.as_ref(), true)?);
    info!("segmentation ({source}) training on {} slices, validating on {}", train.len(), val.len());
    let setup = SegSetup {
        model: s.model.clone(),
        train: s.train.clone(),
        residual_source: source,
        seed: cfg.seed,
    };
    let dir = layout.seg_dir(source);
    cfg.write_resolved(&dir)?;
    let log_path = dir.join("train_log.json");
    let mut run = 0usize;
    let ck = train_segmentation(&train, &val, &setup, resume, |ck| {
        ck.save(&ckpt_path)?;
        write_log(&log_path, &ck.meta.history)?;
        run += 1;
        Ok(opts.max_epochs_this_run.is_none_or(|n| run < n))
    })?;
    ck.save(&ckpt_path)?;
    write_log(&log_path, &ck.meta.history)?;
    Ok(ck)
}

/// Per-slice inputs, probabilities and ground truth for one subject.
pub struct SubjectOutputs {
    pub subject_id: String,
    pub slices: Vec<SlicePair>,
    pub inputs: Vec<SegInput>,
    pub probs: Vec<Array2<f32>>,
}

/// Runs the trained segmentation model over a split.
pub fn predict_split(cfg: &RunConfig, out: &Path, which: SplitName) -> Result<Vec<SubjectOutputs>> {
    let layout = Layout::new(out);
    let source = cfg.residual.source;
    let no_real = cfg.residual.no_real_t1ce;
    let ck = SegCheckpoint::load(&layout.seg_checkpoint(source))?;
    if ck.meta.residual_source != source {
        return Err(Error::IncompatibleCheckpoint(format!(
            "segmentation checkpoint was trained with {} residuals, config asks for {source}",
            ck.meta.residual_source
        )));
    }
    let model = ck.model()?;
    let cache = SliceCache::open(&layout.cache())?;
    let split = load_split(out)?;
    let synth = synth_for(cfg, out, source, no_real)?;
    let mut res = Vec::new();
    for id in split.get(which) {
        let mut slices = cache.all_slices(id)?;
        let s = synth.as_ref().and_then(|m| m.get(id));
        let mut inputs = subject_inputs(cfg, source, &slices, s, no_real).map_err(|e| e.for_subject(id))?;
        if cfg.evaluation.filter_slices {
            let keep: Vec<bool> = slices.iter().map(|sp| sp.tumor_pixels() > 0).collect();
            let mut k = keep.iter();
            slices.retain(|_| *k.next().unwrap());
            let mut k = keep.iter();
            inputs.retain(|_| *k.next().unwrap());
        }
        if slices.is_empty() {
            continue;
        }
        let refs: Vec<&Array3<f32>> = inputs.iter().map(|i| &i.channels).collect();
        let probs = predict_many(&model, &refs, cfg.evaluation.batch_size)?;
        res.push(SubjectOutputs { subject_id: id.clone(), slices, inputs, probs });
    }
    if res.is_empty() {
        return Err(Error::AlignmentError(format!("no {which:?} subjects to evaluate")));
    }
    Ok(res)
}

fn sweep(cfg: &RunConfig, outputs: &[SubjectOutputs]) -> Result<MetricsReport> {
    let mut preds = Vec::with_capacity(outputs.len());
    for o in outputs {
        let pv: Vec<_> = o.probs.iter().map(|p| p.view()).collect();
        let gv: Vec<_> = o.slices.iter().map(|s| s.mask.view()).collect();
        preds.push(SubjectPrediction {
            subject_id: o.subject_id.clone(),
            probs: ndarray::stack(Axis(0), &pv).map_err(|e| Error::shape(e.to_string()))?.into_dyn(),
            gt: ndarray::stack(Axis(0), &gv).map_err(|e| Error::shape(e.to_string()))?.into_dyn(),
        });
    }
    let mut report = threshold_sweep(&preds, &cfg.evaluation.taus)?;
    report.config_hash = cfg.hash()?;
    Ok(report)
}

fn split_label(s: SplitName) -> &'static str {
    match s {
        SplitName::Train => "train",
        SplitName::Val => "val",
        SplitName::Test => "test",
    }
}

/// Threshold sweep on the evaluation split; writes JSON + CSV and returns the
/// report with its console table.
pub fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<(MetricsReport, String)> {
    let layout = Layout::new(out);
    let source = cfg.residual.source;
    let no_real = cfg.residual.no_real_t1ce;
    let outputs = predict_split(cfg, out, cfg.evaluation.split)?;
    let report = sweep(cfg, &outputs)?;
    report.write(&layout.metrics_json(source, no_real), &layout.metrics_csv(source, no_real))?;
    cfg.write_resolved(&layout.report_dir(source, no_real))?;
    let title = format!(
        "{} residual{}, {} split, {} subjects",
        source,
        if no_real { " (no real T1ce)" } else { "" },
        split_label(cfg.evaluation.split),
        outputs.len()
    );
    let table = report.console_table(&title);
    Ok((report, table))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub source: ResidualSource,
    pub split: SplitName,
    pub chosen_tau: f64,
    pub aggregate: Vec<AggregateRow>,
    pub config_hash: String,
}

impl CalibrationResult {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Chooses τ on the validation split.
pub fn cmd_calibrate(cfg: &RunConfig, out: &Path) -> Result<(CalibrationResult, String)> {
    let layout = Layout::new(out);
    let source = cfg.residual.source;
    let mut val_cfg = cfg.clone();
    val_cfg.residual.no_real_t1ce = false;
    let outputs = predict_split(&val_cfg, out, SplitName::Val)?;
    let report = sweep(&val_cfg, &outputs)?;
    let res = CalibrationResult {
        source,
        split: SplitName::Val,
        chosen_tau: report.chosen_tau,
        aggregate: report.aggregate.clone(),
        config_hash: report.config_hash.clone(),
    };
    write_log(&layout.calibration(source), &res)?;
    cfg.write_resolved(&layout.report_dir(source, false))?;
    let table = report.console_table(&format!("{source} residual, val split threshold calibration"));
    Ok((res, table))
}

/// Mean calibrated residual inside and outside the tumor over a split's
/// brain pixels (pixels where the real T1ce is nonzero or inside the mask).
pub fn residual_contrast(cfg: &RunConfig, out: &Path, which: SplitName, source: ResidualSource) -> Result<(f64, f64)> {
    let layout = Layout::new(out);
    let cache = SliceCache::open(&layout.cache())?;
    let split = load_split(out)?;
    let synth = synth_for(cfg, out, source, false)?;
    let (mut si, mut ni, mut so, mut no) = (0.0, 0u64, 0.0, 0u64);
    for id in split.get(which) {
        let slices = cache.all_slices(id)?;
        let maps = subject_residuals(cfg, source, &slices, synth.as_ref().and_then(|m| m.get(id)))?;
        for (sp, m) in slices.iter().zip(&maps) {
            Zip::from(&m.values).and(&sp.mask).and(&sp.target).for_each(|&r, &g, &t| {
                if g == 1 {
                    si += r as f64;
                    ni += 1;
                } else if t != 0.0 {
                    so += r as f64;
                    no += 1;
                }
            });
        }
    }
    if ni == 0 || no == 0 {
        return Err(Error::Precondition("split has no tumor or no background pixels".into()));
    }
    Ok((si / ni as f64, so / no as f64))
}
