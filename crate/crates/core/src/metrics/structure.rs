//! Structure measure (Fan et al.): a blend of an object-aware term comparing
//! foreground/background distributions and a region-aware term of SSIM over
//! four quadrants split at the ground-truth centroid.

use ndarray::{s, ArrayView2};

use super::check_shapes;
use crate::error::Result;
use crate::model::SaliencyMap;
use crate::supervision::BinaryMask;

/// Weight of the object-aware term.
pub const S_ALPHA: f64 = 0.5;

const EPS: f64 = f64::EPSILON;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn object_score(values: &[f64]) -> f64 {
    let x = mean(values);
    2.0 * x / (x * x + 1.0 + sample_std(values) + EPS)
}

fn s_object(pred: &SaliencyMap, gt: &BinaryMask, fg_fraction: f64) -> f64 {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if g {
            fg.push(p);
        } else {
            bg.push(1.0 - p);
        }
    }
    fg_fraction * object_score(&fg) + (1.0 - fg_fraction) * object_score(&bg)
}

fn ssim(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> f64 {
    let n = pred.len() as f64;
    if pred.is_empty() {
        return 0.0;
    }
    let g = gt.mapv(|b| if b { 1.0 } else { 0.0 });
    let x = pred.sum() / n;
    let y = g.sum() / n;
    let denom = n - 1.0 + EPS;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&p, &t) in pred.iter().zip(g.iter()) {
        sxx += (p - x) * (p - x);
        syy += (t - y) * (t - y);
        sxy += (p - x) * (t - y);
    }
    let (sxx, syy, sxy) = (sxx / denom, syy / denom, sxy / denom);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Ground-truth centroid as 1-based (column, row) counts, rounded half away
/// from zero; the image centre for an empty mask.
fn centroid(gt: &BinaryMask) -> (usize, usize) {
    let (h, w) = gt.dim();
    let total = gt.iter().filter(|&&v| v).count();
    if total == 0 {
        return (((w as f64) / 2.0).round() as usize, ((h as f64) / 2.0).round() as usize);
    }
    let mut sx = 0.0;
    let mut sy = 0.0;
    for ((i, j), &v) in gt.indexed_iter() {
        if v {
            sx += (j + 1) as f64;
            sy += (i + 1) as f64;
        }
    }
    ((sx / total as f64).round() as usize, (sy / total as f64).round() as usize)
}

fn s_region(pred: &SaliencyMap, gt: &BinaryMask) -> f64 {
    let (h, w) = gt.dim();
    let (x, y) = centroid(gt);
    let area = (h * w) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = ((w - x) * y) as f64 / area;
    let w3 = (x * (h - y)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let quadrants = [
        (s![..y, ..x], w1),
        (s![..y, x..], w2),
        (s![y.., ..x], w3),
        (s![y.., x..], w4),
    ];
    quadrants
        .into_iter()
        .map(|(sl, wt)| {
            let p = pred.slice(sl);
            if p.is_empty() {
                0.0
            } else {
                wt * ssim(p, gt.slice(sl))
            }
        })
        .sum()
}

/// S-measure with α = 0.5. Predictions are used as given (no rescaling).
pub fn s_measure(pred: &SaliencyMap, gt: &BinaryMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let fg = gt.iter().filter(|&&v| v).count() as f64 / gt.len() as f64;
    let pred_mean = pred.mean().unwrap_or(0.0);
    let q = if fg == 0.0 {
        1.0 - pred_mean
    } else if fg == 1.0 {
        pred_mean
    } else {
        S_ALPHA * s_object(pred, gt, fg) + (1.0 - S_ALPHA) * s_region(pred, gt)
    };
    Ok(q.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = BinaryMask::from_shape_fn((6, 9), |(i, j)| i >= 2 && j >= 3 && j < 7);
        let exact = crate::supervision::mask_to_f64(&gt);
        assert!((s_measure(&exact, &gt).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_ground_truths_use_the_mean() {
        let p = SaliencyMap::from_elem((4, 4), 0.25);
        assert_eq!(s_measure(&p, &BinaryMask::from_elem((4, 4), false)).unwrap(), 0.75);
        assert_eq!(s_measure(&p, &BinaryMask::from_elem((4, 4), true)).unwrap(), 0.25);
    }

    #[test]
    fn centroid_rounds_half_away_from_zero() {
        // Columns 1 and 2 (1-based) average to 1.5, which rounds to 2.
        let gt = BinaryMask::from_shape_fn((3, 4), |(i, j)| i == 0 && j < 2);
        assert_eq!(centroid(&gt), (2, 1));
    }

    #[test]
    fn inverted_prediction_scores_low() {
        let gt = BinaryMask::from_shape_fn((8, 8), |(i, j)| i < 4 && j < 4);
        let inv = crate::supervision::mask_to_f64(&gt).mapv(|v| 1.0 - v);
        assert!(s_measure(&inv, &gt).unwrap() < 0.1);
    }
}
