//! Saliency evaluation: MAE, max F-measure over a threshold sweep, weighted
//! F-measure and the structure measure, plus dataset-level aggregation.

mod registry;
mod structure;
mod weighted;

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::model::SaliencyMap;
use crate::supervision::BinaryMask;

pub use registry::{registry_compare, BenchmarkRegistry, MetricDelta, Phase, RegistryRow, SHIPPED_REGISTRY_CSV};
pub use structure::{s_measure, S_ALPHA};
pub use weighted::{nearest_foreground, weighted_f_beta, WFB_DECAY, WFB_SIGMA, WFB_WINDOW};

/// β² of the thresholded F-measure.
pub const BETA_SQ: f64 = 0.3;

/// Number of thresholds in the F-measure sweep.
pub const NUM_THRESHOLDS: usize = 255;

fn check_shapes(pred: &SaliencyMap, gt: &BinaryMask) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

pub fn mae(pred: &SaliencyMap, gt: &BinaryMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let total: f64 = pred
        .iter()
        .zip(gt.iter())
        .map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(total / pred.len() as f64)
}

/// 8-bit quantisation used by the threshold sweep.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `(1 + β²)·P·R / (β²·P + R)`, zero when both vanish.
pub fn f_score(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let denom = beta_sq * precision + recall;
    if denom <= 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / denom
    }
}

/// Maximum F-measure over the thresholds 1..=255 applied to the 8-bit
/// quantised prediction (`q >= t` is foreground). `None` when the ground
/// truth has no foreground, where recall is undefined.
pub fn f_beta(pred: &SaliencyMap, gt: &BinaryMask) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let mut fg_hist = [0usize; 256];
    let mut bg_hist = [0usize; 256];
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let q = quantize(p) as usize;
        if g {
            fg_hist[q] += 1;
        } else {
            bg_hist[q] += 1;
        }
    }
    let positives: usize = fg_hist.iter().sum();
    if positives == 0 {
        return Ok(None);
    }
    // Suffix sums give the counts with q >= t.
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut best = 0.0f64;
    for t in (1..=NUM_THRESHOLDS).rev() {
        tp += fg_hist[t];
        fp += bg_hist[t];
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = tp as f64 / positives as f64;
        best = best.max(f_score(precision, recall, BETA_SQ));
    }
    Ok(Some(best))
}

/// All four measures for one image. F-measures are `None` for an empty
/// ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub mae: f64,
    pub f_beta: Option<f64>,
    pub weighted_f_beta: Option<f64>,
    pub s_measure: f64,
}

pub fn image_metrics(pred: &SaliencyMap, gt: &BinaryMask) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        mae: mae(pred, gt)?,
        f_beta: f_beta(pred, gt)?,
        weighted_f_beta: weighted_f_beta(pred, gt)?,
        s_measure: s_measure(pred, gt)?,
    })
}

/// Dataset means of the four measures.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub f_beta: f64,
    pub weighted_f_beta: f64,
    pub s_measure: f64,
    pub n_images: usize,
    /// Images left out of the F-measure means because their ground truth is empty.
    pub skipped: usize,
}

impl MetricReport {
    pub fn from_images(per_image: &[ImageMetrics]) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::data("no images to evaluate"));
        }
        let n = per_image.len() as f64;
        let mean_opt = |f: fn(&ImageMetrics) -> Option<f64>| {
            let vals: Vec<f64> = per_image.iter().filter_map(f).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        Ok(MetricReport {
            mae: per_image.iter().map(|m| m.mae).sum::<f64>() / n,
            f_beta: mean_opt(|m| m.f_beta),
            weighted_f_beta: mean_opt(|m| m.weighted_f_beta),
            s_measure: per_image.iter().map(|m| m.s_measure).sum::<f64>() / n,
            n_images: per_image.len(),
            skipped: per_image.iter().filter(|m| m.f_beta.is_none()).count(),
        })
    }

    pub const CSV_HEADER: &'static str = "n_images,skipped,mae,f_w_beta,f_beta,s_m";

    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{},{},{:.6},{:.6},{:.6},{:.6}\n",
            Self::CSV_HEADER,
            self.n_images,
            self.skipped,
            self.mae,
            self.weighted_f_beta,
            self.f_beta,
            self.s_measure
        )
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::data("empty report"))?;
        if header.trim() != Self::CSV_HEADER {
            return Err(Error::data(format!("unexpected report header {header:?}")));
        }
        let row = lines.next().ok_or_else(|| Error::data("report has no data row"))?;
        let f: Vec<&str> = row.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(Error::data(format!("report row has {} fields", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::data(format!("{s:?}: {e}")));
        let int = |s: &str| s.parse::<usize>().map_err(|e| Error::data(format!("{s:?}: {e}")));
        Ok(MetricReport {
            n_images: int(f[0])?,
            skipped: int(f[1])?,
            mae: num(f[2])?,
            weighted_f_beta: num(f[3])?,
            f_beta: num(f[4])?,
            s_measure: num(f[5])?,
        })
    }

    pub fn summary(&self) -> String {
        format!(
            "images {}  skipped {}  MAE {:.4}  F^w_beta {:.4}  F_beta {:.4}  S_m {:.4}",
            self.n_images, self.skipped, self.mae, self.weighted_f_beta, self.f_beta, self.s_measure
        )
    }
}

pub fn evaluate_pairs(pairs: &[(SaliencyMap, BinaryMask)]) -> Result<MetricReport> {
    let per_image = pairs
        .iter()
        .map(|(p, g)| image_metrics(p, g))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_images(&per_image)
}

/// Evaluates every PNG in `pred_dir` against the same-named PNG in `gt_dir`,
/// in filename order. Predictions of a different size are resized to the
/// ground truth bilinearly.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    let preds: BTreeSet<String> = io::list_png_names(pred_dir)?.into_iter().collect();
    let gts: BTreeSet<String> = io::list_png_names(gt_dir)?.into_iter().collect();
    let mut offenders: Vec<String> = preds
        .symmetric_difference(&gts)
        .map(|n| {
            if preds.contains(n) {
                format!("{} (no ground truth)", n)
            } else {
                format!("{} (no prediction)", n)
            }
        })
        .collect();
    if !offenders.is_empty() {
        offenders.sort();
        return Err(Error::MissingFiles(offenders));
    }
    if preds.is_empty() {
        return Err(Error::data(format!("{} holds no PNG files", pred_dir.display())));
    }
    let mut pairs = Vec::with_capacity(preds.len());
    for name in &preds {
        let gt = io::read_mask(&gt_dir.join(name))?;
        let mut pred = io::read_gray(&pred_dir.join(name))?;
        if pred.dim() != gt.dim() {
            pred = io::resize_map(&pred, gt.dim().0, gt.dim().1);
        }
        pairs.push((pred, gt));
    }
    evaluate_pairs(&pairs)
}
