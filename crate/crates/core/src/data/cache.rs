//! On-disk tensor caches: one little-endian `f32` file per subject holding a
//! run of fixed-size records (`channels × H × W`), plus a JSON manifest.
//!
//! The preprocessed slice cache stores every axial slice of every subject
//! (channels FLAIR, T1, T2, T1ce, mask); its manifest `slices` list names only
//! the tumor-bearing ones, with byte offsets into the subject file.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::volume::{MriVolume, SlicePair};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const SLICE_CHANNELS: [&str; 5] = ["flair", "t1", "t2", "t1ce", "mask"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub subject_id: String,
    pub file: String,
    pub axial_offset: usize,
    /// Axial index of each stored record, in file order.
    pub slice_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub subject_id: String,
    pub slice_index: usize,
    pub file: String,
    /// Byte offset of the record in `file`.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// What the records hold, e.g. `slices` or `residual:dynamic`.
    pub kind: String,
    pub height: usize,
    pub width: usize,
    pub channels: Vec<String>,
    pub config_hash: String,
    pub subjects: Vec<SubjectEntry>,
    pub slices: Vec<SliceEntry>,
}

impl Manifest {
    pub fn record_bytes(&self) -> u64 {
        (self.channels.len() * self.height * self.width * 4) as u64
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectEntry> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }
}

/// SHA-256 (hex) of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Incrementally writes a record cache.
pub struct CacheWriter {
    root: PathBuf,
    manifest: Manifest,
}

impl CacheWriter {
    pub fn create(
        root: &Path,
        kind: &str,
        channels: &[&str],
        height: usize,
        width: usize,
        config_hash: &str,
    ) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(CacheWriter {
            root: root.to_path_buf(),
            manifest: Manifest {
                format: "recoseg-cache-v1".into(),
                kind: kind.into(),
                height,
                width,
                channels: channels.iter().map(|c| c.to_string()).collect(),
                config_hash: config_hash.into(),
                subjects: Vec::new(),
                slices: Vec::new(),
            },
        })
    }

    /// Writes one subject's records. `listed[k]` controls whether record `k`
    /// appears in the manifest's `slices` list.
    pub fn add_subject(
        &mut self,
        subject_id: &str,
        axial_offset: usize,
        slice_indices: &[usize],
        records: &[Array3<f32>],
        listed: &[bool],
    ) -> Result<()> {
        let m = &self.manifest;
        let expect = (m.channels.len(), m.height, m.width);
        if records.iter().any(|r| r.dim() != expect) || records.len() != slice_indices.len() {
            return Err(Error::shape(format!(
                "cache records for {subject_id} must be {expect:?} and match the index list"
            )));
        }
        let file = format!("{subject_id}.bin");
        let mut out = BufWriter::new(fs::File::create(self.root.join(&file))?);
        let record_bytes = m.record_bytes();
        for r in records {
            for v in r.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        for (k, (&idx, &list)) in slice_indices.iter().zip(listed).enumerate() {
            if list {
                self.manifest.slices.push(SliceEntry {
                    subject_id: subject_id.into(),
                    slice_index: idx,
                    file: file.clone(),
                    offset: k as u64 * record_bytes,
                });
            }
        }
        self.manifest.subjects.push(SubjectEntry {
            subject_id: subject_id.into(),
            file,
            axial_offset,
            slice_indices: slice_indices.to_vec(),
        });
        Ok(())
    }

    /// Writes the manifest and returns its SHA-256.
    pub fn finish(mut self) -> Result<String> {
        self.manifest.subjects.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        self.manifest
            .slices
            .sort_by(|a, b| (&a.subject_id, a.slice_index).cmp(&(&b.subject_id, b.slice_index)));
        let path = self.root.join(MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&self.manifest)?)?;
        file_hash(&path)
    }
}

/// Read access to a record cache.
#[derive(Debug, Clone)]
pub struct Cache {
    root: PathBuf,
    pub manifest: Manifest,
}

impl Cache {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        if !path.is_file() {
            return Err(Error::MissingArtifact(path));
        }
        let manifest: Manifest = serde_json::from_slice(&fs::read(&path)?)?;
        Ok(Cache {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.manifest.subjects.iter().map(|s| s.subject_id.clone()).collect()
    }

    /// Every record of a subject as `(slice_index, channels × H × W)`.
    pub fn read_subject(&self, subject_id: &str) -> Result<Vec<(usize, Array3<f32>)>> {
        let entry = self
            .manifest
            .subject(subject_id)
            .ok_or_else(|| Error::AlignmentError(format!("{subject_id} not in cache")))?;
        let bytes = fs::read(self.root.join(&entry.file))?;
        let m = &self.manifest;
        let per = m.record_bytes() as usize;
        if bytes.len() != per * entry.slice_indices.len() {
            return Err(Error::Format(format!(
                "{} holds {} bytes, expected {}",
                entry.file,
                bytes.len(),
                per * entry.slice_indices.len()
            )));
        }
        let shape = (m.channels.len(), m.height, m.width);
        Ok(entry
            .slice_indices
            .iter()
            .zip(bytes.chunks_exact(per))
            .map(|(&idx, chunk)| {
                let vals: Vec<f32> = chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                (idx, Array3::from_shape_vec(shape, vals).expect("record size checked"))
            })
            .collect())
    }
}

fn slice_record(sp: &SlicePair) -> Array3<f32> {
    let (h, w) = (sp.height(), sp.width());
    let mut r = Array3::zeros((5, h, w));
    r.slice_mut(s![0..3, .., ..]).assign(&sp.conditioning);
    r.index_axis_mut(Axis(0), 3).assign(&sp.target);
    r.index_axis_mut(Axis(0), 4).assign(&sp.mask.mapv(f32::from));
    r
}

fn record_slice(subject_id: &str, slice_index: usize, r: &Array3<f32>) -> SlicePair {
    SlicePair {
        conditioning: r.slice(s![0..3, .., ..]).to_owned(),
        target: r.index_axis(Axis(0), 3).to_owned(),
        mask: r.index_axis(Axis(0), 4).mapv(|v| u8::from(v > 0.5)),
        subject_id: subject_id.into(),
        slice_index,
    }
}

/// Preprocessed slice cache.
pub struct SliceCacheWriter(CacheWriter);

impl SliceCacheWriter {
    pub fn create(root: &Path, height: usize, width: usize, config_hash: &str) -> Result<Self> {
        Ok(SliceCacheWriter(CacheWriter::create(
            root,
            "slices",
            &SLICE_CHANNELS,
            height,
            width,
            config_hash,
        )?))
    }

    /// Stores every axial slice of a preprocessed volume; tumor-bearing
    /// slices are listed in the manifest.
    pub fn add_volume(&mut self, vol: &MriVolume) -> Result<()> {
        let slices = super::preprocess::all_slices(vol);
        let records: Vec<Array3<f32>> = slices.iter().map(slice_record).collect();
        let indices: Vec<usize> = slices.iter().map(|s| s.slice_index).collect();
        let listed: Vec<bool> = slices.iter().map(|s| s.tumor_pixels() > 0).collect();
        self.0
            .add_subject(&vol.subject_id, vol.axial_offset, &indices, &records, &listed)
    }

    pub fn finish(self) -> Result<String> {
        self.0.finish()
    }
}

#[derive(Debug, Clone)]
pub struct SliceCache(pub Cache);

impl SliceCache {
    pub fn open(root: &Path) -> Result<Self> {
        let c = Cache::open(root)?;
        if c.manifest.kind != "slices" || c.manifest.channels != SLICE_CHANNELS {
            return Err(Error::Format(format!("{} is not a slice cache", root.display())));
        }
        Ok(SliceCache(c))
    }

    pub fn manifest(&self) -> &Manifest {
        &self.0.manifest
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.0.subject_ids()
    }

    pub fn all_slices(&self, subject_id: &str) -> Result<Vec<SlicePair>> {
        Ok(self
            .0
            .read_subject(subject_id)?
            .iter()
            .map(|(idx, r)| record_slice(subject_id, *idx, r))
            .collect())
    }

    /// The slices the manifest lists (tumor-bearing) for one subject.
    pub fn tumor_slices(&self, subject_id: &str) -> Result<Vec<SlicePair>> {
        let listed: Vec<usize> = self
            .manifest()
            .slices
            .iter()
            .filter(|e| e.subject_id == subject_id)
            .map(|e| e.slice_index)
            .collect();
        Ok(self
            .all_slices(subject_id)?
            .into_iter()
            .filter(|s| listed.contains(&s.slice_index))
            .collect())
    }
}

/// Single-plane maps (synthesis output, residuals) keyed like the slice cache.
pub fn write_plane_cache(
    root: &Path,
    kind: &str,
    config_hash: &str,
    planes: &[(String, Vec<(usize, Array2<f32>)>)],
) -> Result<String> {
    let (h, w) = planes
        .iter()
        .flat_map(|(_, v)| v.first())
        .map(|(_, p)| p.dim())
        .next()
        .unwrap_or((0, 0));
    let mut writer = CacheWriter::create(root, kind, &["value"], h, w, config_hash)?;
    for (subject, maps) in planes {
        let indices: Vec<usize> = maps.iter().map(|(i, _)| *i).collect();
        let records: Vec<Array3<f32>> = maps.iter().map(|(_, p)| p.clone().insert_axis(Axis(0))).collect();
        writer.add_subject(subject, 0, &indices, &records, &vec![true; indices.len()])?;
    }
    writer.finish()
}

pub fn read_plane_subject(cache: &Cache, subject_id: &str) -> Result<Vec<(usize, Array2<f32>)>> {
    Ok(cache
        .read_subject(subject_id)?
        .into_iter()
        .map(|(i, r)| (i, r.index_axis_move(Axis(0), 0)))
        .collect())
}

/// Stacks the given modality's slices (in order) back into a volume grid.
pub fn stack_target(slices: &[SlicePair]) -> Array3<f32> {
    let views: Vec<_> = slices.iter().map(|s| s.target.view()).collect();
    ndarray::stack(Axis(0), &views).expect("slices share a shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::generate_phantom_dataset;
    use crate::data::preprocess::{preprocess_volume, PreprocessParams};

    #[test]
    fn slice_cache_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let vols = generate_phantom_dataset(2, (20, 24, 24), 5).unwrap();
        let p = PreprocessParams {
            discard_top: 2,
            discard_bottom: 2,
            height: 16,
            width: 16,
            ..Default::default()
        };
        let mut w = SliceCacheWriter::create(tmp.path(), 16, 16, "abc").unwrap();
        let pre: Vec<MriVolume> = vols.iter().map(|v| preprocess_volume(v, &p).unwrap()).collect();
        for v in &pre {
            w.add_volume(v).unwrap();
        }
        let h1 = w.finish().unwrap();
        let cache = SliceCache::open(tmp.path()).unwrap();
        let id = &pre[0].subject_id;
        let all = cache.all_slices(id).unwrap();
        assert_eq!(all, super::super::preprocess::all_slices(&pre[0]));
        let tumor = cache.tumor_slices(id).unwrap();
        assert_eq!(tumor, super::super::preprocess::filter_slices(&pre[0]));
        assert!(cache.manifest().slices.iter().all(|e| e.offset % cache.manifest().record_bytes() == 0));

        // rewriting identical content yields an identical manifest
        let mut w = SliceCacheWriter::create(tmp.path(), 16, 16, "abc").unwrap();
        for v in &pre {
            w.add_volume(v).unwrap();
        }
        assert_eq!(h1, w.finish().unwrap());
    }
}
