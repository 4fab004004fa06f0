//! Overlap metrics, threshold sweeps and report serialization.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{ArrayView, Dimension, IxDyn, ArrayD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::binarize;
use crate::stats::mean_std;

fn counts<D: Dimension>(pred: ArrayView<u8, D>, gt: ArrayView<u8, D>) -> Result<(u64, u64, u64)> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let (mut p, mut g, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        if a > 1 || b > 1 {
            return Err(Error::RangeViolation(format!("mask value {} is not binary", a.max(b))));
        }
        p += a as u64;
        g += b as u64;
        both += (a & b) as u64;
    }
    Ok((p, g, both))
}

/// `2|P∩G| / (|P|+|G|)`; 1 when both masks are empty.
pub fn dice<D: Dimension>(pred: ArrayView<u8, D>, gt: ArrayView<u8, D>) -> Result<f64> {
    let (p, g, both) = counts(pred, gt)?;
    Ok(if p + g == 0 { 1.0 } else { 2.0 * both as f64 / (p + g) as f64 })
}

/// `|P∩G| / |P∪G|`; 1 when both masks are empty.
pub fn iou<D: Dimension>(pred: ArrayView<u8, D>, gt: ArrayView<u8, D>) -> Result<f64> {
    let (p, g, both) = counts(pred, gt)?;
    let union = p + g - both;
    Ok(if union == 0 { 1.0 } else { both as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRow {
    pub subject_id: String,
    pub tau: f64,
    pub dice: f64,
    pub iou: f64,
    pub positive_pixels: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub tau: f64,
    pub subjects: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub iou_mean: f64,
    pub iou_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_subject: Vec<SubjectRow>,
    pub aggregate: Vec<AggregateRow>,
    pub chosen_tau: f64,
    pub config_hash: String,
}

/// Per-subject prediction and ground truth (any dimensionality).
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPrediction {
    pub subject_id: String,
    pub probs: ArrayD<f32>,
    pub gt: ArrayD<u8>,
}

/// Dice/IoU per subject and τ; `chosen_tau` maximizes the mean of mean Dice
/// and mean IoU, ties going to the smaller τ.
pub fn threshold_sweep(subjects: &[SubjectPrediction], taus: &[f64]) -> Result<MetricsReport> {
    if subjects.is_empty() {
        return Err(Error::AlignmentError("no subjects to evaluate".into()));
    }
    if taus.is_empty() {
        return Err(Error::InvalidConfig("threshold sweep needs at least one tau".into()));
    }
    for s in subjects {
        if s.probs.shape() != s.gt.shape() {
            return Err(Error::AlignmentError(format!(
                "subject {}: prediction {:?} vs ground truth {:?}",
                s.subject_id,
                s.probs.shape(),
                s.gt.shape()
            )));
        }
    }
    let mut per_subject = Vec::with_capacity(subjects.len() * taus.len());
    let mut aggregate = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut ds = Vec::with_capacity(subjects.len());
        let mut is = Vec::with_capacity(subjects.len());
        for s in subjects {
            let pred = binarize(s.probs.view(), tau)?;
            let d = dice(pred.view(), s.gt.view())?;
            let j = iou(pred.view(), s.gt.view())?;
            per_subject.push(SubjectRow {
                subject_id: s.subject_id.clone(),
                tau,
                dice: d,
                iou: j,
                positive_pixels: pred.iter().map(|&v| v as u64).sum(),
            });
            ds.push(d);
            is.push(j);
        }
        let (dm, dsd) = mean_std(&ds);
        let (im, isd) = mean_std(&is);
        aggregate.push(AggregateRow {
            tau,
            subjects: subjects.len(),
            dice_mean: dm,
            dice_std: dsd,
            iou_mean: im,
            iou_std: isd,
        });
    }
    let mut order: Vec<&AggregateRow> = aggregate.iter().collect();
    order.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    let mut best = order[0];
    for a in &order[1..] {
        if (a.dice_mean + a.iou_mean) / 2.0 > (best.dice_mean + best.iou_mean) / 2.0 {
            best = a;
        }
    }
    Ok(MetricsReport {
        chosen_tau: best.tau,
        per_subject,
        aggregate,
        config_hash: String::new(),
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

impl MetricsReport {
    pub fn aggregate_at(&self, tau: f64) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|a| a.tau == tau)
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["subject_id", "tau", "dice", "iou", "dice_pct", "iou_pct", "positive_pixels"])?;
        for r in &self.per_subject {
            w.write_record([
                r.subject_id.clone(),
                r.tau.to_string(),
                r.dice.to_string(),
                r.iou.to_string(),
                pct(r.dice),
                pct(r.iou),
                r.positive_pixels.to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        for p in [json_path, csv_path] {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(json_path, serde_json::to_vec_pretty(self)?)?;
        std::fs::write(csv_path, self.to_csv_bytes()?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Dice/IoU table in percent with two decimals.
    pub fn console_table(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        let _ = writeln!(s, "{:>6} | {:>16} | {:>16}", "tau", "Dice (%)", "IoU (%)");
        for a in &self.aggregate {
            let mark = if a.tau == self.chosen_tau { " *" } else { "" };
            let _ = writeln!(
                s,
                "{:>6} | {:>7} ± {:>6} | {:>7} ± {:>6}{mark}",
                a.tau,
                pct(a.dice_mean),
                pct(a.dice_std),
                pct(a.iou_mean),
                pct(a.iou_std)
            );
        }
        s
    }
}

/// Converts a fixed-dimension array into the dynamic form used by sweeps.
pub fn to_dyn<A: Clone, D: Dimension>(a: ArrayView<A, D>) -> ndarray::Array<A, IxDyn> {
    a.to_owned().into_dyn()
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn dice_iou_examples() {
        let a = array![[1u8, 1, 0, 0]];
        let b = array![[0u8, 1, 1, 0]];
        let c = array![[0u8, 0, 1, 1]];
        assert_eq!(dice(a.view(), a.view()).unwrap(), 1.0);
        assert_eq!(dice(a.view(), c.view()).unwrap(), 0.0);
        assert_eq!(dice(a.view(), b.view()).unwrap(), 0.5);
        assert_eq!(iou(a.view(), a.view()).unwrap(), 1.0);
        assert!((iou(a.view(), b.view()).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let z = array![[0u8, 0]];
        assert_eq!(dice(z.view(), z.view()).unwrap(), 1.0);
        assert_eq!(iou(z.view(), z.view()).unwrap(), 1.0);
        let bad = array![[2u8, 0]];
        assert!(matches!(dice(bad.view(), z.view()), Err(Error::RangeViolation(_))));
    }

    fn subject(id: &str, probs: ndarray::Array2<f32>, gt: ndarray::Array2<u8>) -> SubjectPrediction {
        SubjectPrediction { subject_id: id.into(), probs: probs.into_dyn(), gt: gt.into_dyn() }
    }

    #[test]
    fn perfect_predictions_choose_smallest_tau() {
        let gt = array![[1u8, 0], [0, 1]];
        let p = gt.mapv(|v| v as f32);
        let r = threshold_sweep(&[subject("a", p, gt)], &[0.5, 0.3, 0.4]).unwrap();
        assert!(r.per_subject.iter().all(|row| row.dice == 1.0 && row.iou == 1.0));
        assert_eq!(r.chosen_tau, 0.3);
    }

    #[test]
    fn uniform_probability_step() {
        let gt = ndarray::Array2::from_elem((3, 3), 1u8);
        let p = ndarray::Array2::from_elem((3, 3), 0.35f32);
        let r = threshold_sweep(&[subject("a", p, gt)], &[0.3, 0.4, 0.5]).unwrap();
        assert_eq!(r.per_subject[0].dice, 1.0);
        assert_eq!(r.per_subject[1].dice, 0.0);
        assert_eq!(r.chosen_tau, 0.3);
    }

    #[test]
    fn empty_or_misaligned_inputs() {
        assert!(matches!(threshold_sweep(&[], &[0.3]), Err(Error::AlignmentError(_))));
        let s = SubjectPrediction {
            subject_id: "x".into(),
            probs: ndarray::Array2::<f32>::zeros((2, 2)).into_dyn(),
            gt: ndarray::Array2::<u8>::zeros((2, 3)).into_dyn(),
        };
        assert!(matches!(threshold_sweep(&[s], &[0.3]), Err(Error::AlignmentError(_))));
    }

    #[test]
    fn csv_and_table_use_percentages() {
        let gt = array![[1u8, 1, 0, 0]];
        let p = array![[0.9f32, 0.35, 0.6, 0.1]];
        let r = threshold_sweep(&[subject("s1", p, gt)], &[0.3, 0.5]).unwrap();
        let csv = String::from_utf8(r.to_csv_bytes().unwrap()).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("s1,0.3,0.8,"));
        assert!(lines[1].contains(",80.00,66.67,"));
        assert!(r.console_table("t").contains("80.00"));
    }
}
