//! Weighted F-measure (Margolin, Zelnik-Manor and Tal).
//!
//! Errors of background pixels are replaced by the error of their nearest
//! foreground pixel, smoothed with a Gaussian to credit spatially coherent
//! mistakes, and background errors are amplified with their distance to the
//! object.

use ndarray::Array2;

use super::check_shapes;
use crate::error::Result;
use crate::model::SaliencyMap;
use crate::supervision::BinaryMask;

/// Side of the square Gaussian window.
pub const WFB_WINDOW: usize = 7;
/// Standard deviation of the Gaussian window, in pixels.
pub const WFB_SIGMA: f64 = 5.0;
/// Distance at which the background importance reaches 1.5.
pub const WFB_DECAY: f64 = 5.0;

/// For every pixel, the squared distance to and the position of the nearest
/// foreground pixel. Ties go to the smaller row, then the smaller column.
/// `None` when the mask is empty.
pub fn nearest_foreground(mask: &BinaryMask) -> Option<Array2<(usize, usize, usize)>> {
    let (h, w) = mask.dim();
    if !mask.iter().any(|&v| v) {
        return None;
    }
    // Per column, the nearest foreground row (None if the column is empty).
    let mut col_nearest: Array2<Option<usize>> = Array2::from_elem((h, w), None);
    for j in 0..w {
        let mut above = vec![None; h];
        let mut last = None;
        for i in 0..h {
            if mask[[i, j]] {
                last = Some(i);
            }
            above[i] = last;
        }
        let mut below: Option<usize> = None;
        for i in (0..h).rev() {
            if mask[[i, j]] {
                below = Some(i);
            }
            col_nearest[[i, j]] = match (above[i], below) {
                (Some(a), Some(b)) => Some(if i - a <= b - i { a } else { b }),
                (a, b) => a.or(b),
            };
        }
    }
    let mut out = Array2::from_elem((h, w), (0usize, 0usize, 0usize));
    for i in 0..h {
        for j in 0..w {
            let mut best: Option<(usize, usize, usize)> = None;
            for dc in 0..w {
                if let Some((d2, _, _)) = best {
                    if dc * dc > d2 {
                        break;
                    }
                }
                let cols = [j.checked_sub(dc), if dc > 0 { Some(j + dc).filter(|&c| c < w) } else { None }];
                for c in cols.into_iter().flatten() {
                    if let Some(r) = col_nearest[[i, c]] {
                        let cand = (r.abs_diff(i).pow(2) + dc * dc, r, c);
                        if best.is_none_or(|b| cand < b) {
                            best = Some(cand);
                        }
                    }
                }
            }
            out[[i, j]] = best.expect("mask has foreground");
        }
    }
    Some(out)
}

fn gaussian_window() -> Array2<f64> {
    let half = (WFB_WINDOW / 2) as f64;
    let mut k = Array2::from_shape_fn((WFB_WINDOW, WFB_WINDOW), |(i, j)| {
        let (y, x) = (i as f64 - half, j as f64 - half);
        (-(x * x + y * y) / (2.0 * WFB_SIGMA * WFB_SIGMA)).exp()
    });
    let s = k.sum();
    k /= s;
    k
}

/// Weighted F-measure with β = 1. `None` for an empty ground truth.
pub fn weighted_f_beta(pred: &SaliencyMap, gt: &BinaryMask) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let Some(nearest) = nearest_foreground(gt) else {
        return Ok(None);
    };
    let (h, w) = gt.dim();
    let eps = f64::EPSILON;
    let err = Array2::from_shape_fn((h, w), |(i, j)| (pred[[i, j]] - if gt[[i, j]] { 1.0 } else { 0.0 }).abs());
    let spread = nearest.mapv(|(_, r, c)| err[[r, c]]);

    // Replicated borders keep the smoothing a convex combination, so an
    // all-zero prediction scores exactly zero recall wherever the object is.
    let kernel = gaussian_window();
    let half = (WFB_WINDOW / 2) as isize;
    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
    let smoothed = Array2::from_shape_fn((h, w), |(i, j)| {
        let mut acc = 0.0;
        for ((ki, kj), &kv) in kernel.indexed_iter() {
            let y = clamp(i as isize + ki as isize - half, h);
            let x = clamp(j as isize + kj as isize - half, w);
            acc += kv * spread[[y, x]];
        }
        acc
    });

    let decay = (0.5f64).ln() / WFB_DECAY;
    let (mut fg_err, mut bg_err, mut n_fg) = (0.0, 0.0, 0usize);
    for i in 0..h {
        for j in 0..w {
            let e = err[[i, j]];
            if gt[[i, j]] {
                fg_err += e.min(smoothed[[i, j]]);
                n_fg += 1;
            } else {
                let d = (nearest[[i, j]].0 as f64).sqrt();
                bg_err += e * (2.0 - (decay * d).exp());
            }
        }
    }
    let tp = n_fg as f64 - fg_err;
    let recall = 1.0 - fg_err / n_fg as f64;
    let precision = tp / (eps + tp + bg_err);
    Ok(Some(2.0 * recall * precision / (eps + recall + precision)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_matches_brute_force() {
        let mask = BinaryMask::from_shape_fn((7, 9), |(i, j)| (i * 7 + j * 3) % 11 == 0);
        let near = nearest_foreground(&mask).unwrap();
        for ((i, j), &got) in near.indexed_iter() {
            let mut best = None;
            for ((r, c), &m) in mask.indexed_iter() {
                if m {
                    let cand = (r.abs_diff(i).pow(2) + c.abs_diff(j).pow(2), r, c);
                    if best.is_none_or(|b| cand < b) {
                        best = Some(cand);
                    }
                }
            }
            assert_eq!(got, best.unwrap(), "at {i},{j}");
        }
    }

    #[test]
    fn window_is_normalised_and_symmetric() {
        let k = gaussian_window();
        assert!((k.sum() - 1.0).abs() < 1e-15);
        assert_eq!(k[[0, 0]], k[[6, 6]]);
        assert!(k[[3, 3]] > k[[3, 0]]);
    }

    #[test]
    fn perfect_and_zero_predictions() {
        let gt = BinaryMask::from_shape_fn((8, 8), |(i, j)| (2..6).contains(&i) && (1..4).contains(&j));
        let exact = crate::supervision::mask_to_f64(&gt);
        assert!((weighted_f_beta(&exact, &gt).unwrap().unwrap() - 1.0).abs() < 1e-12);
        assert!(weighted_f_beta(&SaliencyMap::zeros((8, 8)), &gt).unwrap().unwrap() < 1e-12);
        assert_eq!(weighted_f_beta(&exact, &BinaryMask::from_elem((8, 8), false)).unwrap(), None);
    }
}
