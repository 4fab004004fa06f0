//! NIfTI ingestion and export in the BraTS directory layout: one directory
//! per subject holding `<subject>_<modality>.nii.gz` and `<subject>_seg.nii.gz`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::volume::{Modality, MriVolume};
use crate::error::{Error, Result};

const MASK_TAG: &str = "seg";

fn find_file(dir: &Path, tag: &str) -> Result<Option<PathBuf>> {
    let suffixes = [format!("_{tag}.nii.gz"), format!("_{tag}.nii")];
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries.into_iter().find(|p| {
        p.file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| suffixes.iter().any(|s| n.to_ascii_lowercase().ends_with(s)))
    }))
}

/// Reads a NIfTI file as `[depth, height, width]` plus (d, h, w) spacing.
fn read_grid(path: &Path) -> Result<(Array3<f32>, [f64; 3])> {
    let obj = ReaderOptions::new().read_file(path)?;
    let pixdim = obj.header().pixdim;
    let mut data = obj.into_volume().into_ndarray::<f32>()?;
    if data.ndim() < 3 {
        return Err(Error::shape(format!(
            "{} is {}-dimensional, expected 3",
            path.display(),
            data.ndim()
        )));
    }
    // Drop trailing singleton dims (some writers emit x,y,z,1).
    while data.ndim() > 3 && data.shape()[data.ndim() - 1] == 1 {
        let last = ndarray::Axis(data.ndim() - 1);
        data = data.index_axis_move(last, 0);
    }
    let xyz = data
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::shape(format!("{} is not a 3D volume", path.display())))?;
    let dhw = xyz.reversed_axes().as_standard_layout().into_owned();
    let spacing = [pixdim[3] as f64, pixdim[2] as f64, pixdim[1] as f64];
    Ok((dhw, spacing))
}

/// Loads one subject directory.
pub fn load_volume(dir: &Path) -> Result<MriVolume> {
    let subject_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Precondition(format!("bad subject path {}", dir.display())))?
        .to_string();

    let mut modalities = BTreeMap::new();
    let mut spacing = None;
    for m in Modality::ALL {
        let path =
            find_file(dir, m.file_tag())?.ok_or_else(|| Error::MissingModality(m.to_string()))?;
        let (grid, sp) = read_grid(&path)?;
        spacing.get_or_insert(sp);
        modalities.insert(m, grid);
    }
    let mask_path = find_file(dir, MASK_TAG)?
        .ok_or_else(|| Error::MissingModality("mask".to_string()))?;
    // BraTS labels (1, 2, 4) collapse to whole tumor.
    let mask = read_grid(&mask_path)?.0.mapv(|v| u8::from(v > 0.0));

    let spacing = spacing.expect("at least one modality was read");
    let spacing = spacing.map(|s| if s > 0.0 { s } else { 1.0 });
    MriVolume::new(subject_id, modalities, mask, spacing)
}

fn header_for(spacing: [f64; 3]) -> NiftiHeader {
    let mut header = NiftiHeader::default();
    header.pixdim[1] = spacing[2] as f32;
    header.pixdim[2] = spacing[1] as f32;
    header.pixdim[3] = spacing[0] as f32;
    // millimetres
    header.xyzt_units = 2;
    header
}

/// Writes `vol` into `dir` (created if needed) using the subject layout
/// [`load_volume`] reads.
pub fn save_volume(vol: &MriVolume, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = header_for(vol.voxel_spacing);
    for m in Modality::ALL {
        let path = dir.join(format!("{}_{}.nii.gz", vol.subject_id, m.file_tag()));
        let xyz = vol.modality(m).view().reversed_axes();
        WriterOptions::new(&path)
            .reference_header(&header)
            .write_nifti(&xyz)?;
    }
    let path = dir.join(format!("{}_{MASK_TAG}.nii.gz", vol.subject_id));
    WriterOptions::new(&path)
        .reference_header(&header)
        .write_nifti(&vol.mask().view().reversed_axes())?;
    Ok(())
}

/// Subject directories under `root`, sorted by name.
pub fn list_subjects(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::MissingArtifact(root.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_volume(id: &str, d: usize, h: usize, w: usize) -> MriVolume {
        let mut modalities = BTreeMap::new();
        for (k, m) in Modality::ALL.into_iter().enumerate() {
            let grid = Array3::from_shape_fn((d, h, w), |(z, y, x)| {
                (k * 1000 + z * 100 + y * 10 + x) as f32
            });
            modalities.insert(m, grid);
        }
        let mask = Array3::from_shape_fn((d, h, w), |(z, y, _)| u8::from(z == 1 && y > 0));
        MriVolume::new(id, modalities, mask, [2.0, 1.0, 0.5]).unwrap()
    }

    #[test]
    fn save_then_load_preserves_axes_and_spacing() {
        let tmp = tempfile::tempdir().unwrap();
        let vol = small_volume("s01", 3, 4, 5);
        let dir = tmp.path().join("s01");
        save_volume(&vol, &dir).unwrap();
        let back = load_volume(&dir).unwrap();
        assert_eq!(back.dim(), (3, 4, 5));
        assert_eq!(back.voxel_spacing, [2.0, 1.0, 0.5]);
        assert_eq!(back.modality(Modality::T2), vol.modality(Modality::T2));
        assert_eq!(back.mask(), vol.mask());
        assert_eq!(back, vol);
    }

    #[test]
    fn missing_modality_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        let vol = small_volume("s02", 2, 3, 3);
        let dir = tmp.path().join("s02");
        save_volume(&vol, &dir).unwrap();
        fs::remove_file(dir.join("s02_t2.nii.gz")).unwrap();
        match load_volume(&dir) {
            Err(Error::MissingModality(m)) => assert_eq!(m, "T2"),
            other => panic!("expected MissingModality, got {other:?}"),
        }
    }

    #[test]
    fn mask_shape_mismatch_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let vol = small_volume("s03", 3, 3, 3);
        let dir = tmp.path().join("s03");
        save_volume(&vol, &dir).unwrap();
        let short = small_volume("s03", 2, 3, 3);
        WriterOptions::new(dir.join("s03_seg.nii.gz"))
            .reference_header(&header_for(short.voxel_spacing))
            .write_nifti(&short.mask().view().reversed_axes())
            .unwrap();
        assert!(matches!(load_volume(&dir), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn t1_lookup_does_not_match_t1ce() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("x_t1ce.nii.gz"), b"").unwrap();
        assert!(find_file(tmp.path(), "t1").unwrap().is_none());
    }
}
