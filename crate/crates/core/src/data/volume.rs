use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// MRI sequences of a multi-modal brain scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Flair,
    T1,
    T2,
    T1ce,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Flair, Modality::T1, Modality::T2, Modality::T1ce];
    /// The three observed modalities, in conditioning-channel order.
    pub const CONDITIONING: [Modality; 3] = [Modality::Flair, Modality::T1, Modality::T2];

    /// File-name suffix used by the BraTS-style layout.
    pub fn file_tag(self) -> &'static str {
        match self {
            Modality::Flair => "flair",
            Modality::T1 => "t1",
            Modality::T2 => "t2",
            Modality::T1ce => "t1ce",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Flair => "FLAIR",
            Modality::T1 => "T1",
            Modality::T2 => "T2",
            Modality::T1ce => "T1ce",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flair" => Ok(Modality::Flair),
            "t1" => Ok(Modality::T1),
            "t2" => Ok(Modality::T2),
            "t1ce" => Ok(Modality::T1ce),
            other => Err(Error::InvalidConfig(format!("unknown modality {other:?}"))),
        }
    }
}

/// One subject's co-registered scan, indexed `[depth, height, width]`.
///
/// Depth is the axial axis with index 0 at the inferior end.
#[derive(Debug, Clone, PartialEq)]
pub struct MriVolume {
    pub subject_id: String,
    modalities: BTreeMap<Modality, Array3<f32>>,
    mask: Array3<u8>,
    /// Millimetres along (depth, height, width).
    pub voxel_spacing: [f64; 3],
    /// Index of this volume's first axial slice in the original acquisition.
    pub axial_offset: usize,
}

impl MriVolume {
    pub fn new(
        subject_id: impl Into<String>,
        modalities: BTreeMap<Modality, Array3<f32>>,
        mask: Array3<u8>,
        voxel_spacing: [f64; 3],
    ) -> Result<Self> {
        for m in Modality::ALL {
            let grid = modalities
                .get(&m)
                .ok_or_else(|| Error::MissingModality(m.to_string()))?;
            if grid.dim() != mask.dim() {
                return Err(Error::shape(format!(
                    "{m} has shape {:?}, mask has {:?}",
                    grid.dim(),
                    mask.dim()
                )));
            }
        }
        if mask.iter().any(|&v| v > 1) {
            return Err(Error::RangeViolation("mask values must be 0 or 1".into()));
        }
        if voxel_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::RangeViolation(format!(
                "voxel spacing must be positive, got {voxel_spacing:?}"
            )));
        }
        Ok(MriVolume {
            subject_id: subject_id.into(),
            modalities,
            mask,
            voxel_spacing,
            axial_offset: 0,
        })
    }

    pub fn modality(&self, m: Modality) -> &Array3<f32> {
        &self.modalities[&m]
    }

    pub fn mask(&self) -> &Array3<u8> {
        &self.mask
    }

    /// (depth, height, width)
    pub fn dim(&self) -> (usize, usize, usize) {
        self.mask.dim()
    }

    pub fn depth(&self) -> usize {
        self.mask.len_of(Axis(0))
    }

    /// Rebuild with every grid mapped through `f_img` (modalities) and
    /// `f_mask`. Both maps must yield the same shape.
    pub(crate) fn map_grids(
        &self,
        mut f_img: impl FnMut(Modality, &Array3<f32>) -> Result<Array3<f32>>,
        f_mask: impl FnOnce(&Array3<u8>) -> Array3<u8>,
    ) -> Result<MriVolume> {
        let mut modalities = BTreeMap::new();
        for (&m, grid) in &self.modalities {
            modalities.insert(m, f_img(m, grid)?);
        }
        let mut out = MriVolume::new(
            self.subject_id.clone(),
            modalities,
            f_mask(&self.mask),
            self.voxel_spacing,
        )?;
        out.axial_offset = self.axial_offset;
        Ok(out)
    }
}

/// One preprocessed 2D sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    /// FLAIR, T1, T2 stacked as `[3, H, W]`.
    pub conditioning: Array3<f32>,
    /// T1ce, `[H, W]`.
    pub target: Array2<f32>,
    pub mask: Array2<u8>,
    pub subject_id: String,
    /// Axial index in the original (uncropped) volume.
    pub slice_index: usize,
}

impl SlicePair {
    pub fn height(&self) -> usize {
        self.target.nrows()
    }

    pub fn width(&self) -> usize {
        self.target.ncols()
    }

    pub fn tumor_pixels(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1).count()
    }
}
