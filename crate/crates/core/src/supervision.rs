//! Ground-truth triples and the staged training objective.
//!
//! The objective sums, over the five decoding stages, the pixel-mean binary
//! cross-entropy of the prediction map against the object mask and, when the
//! boundary-aware decoder is enabled, of the boundary and interior maps
//! against the boundary band and interior masks.

use ndarray::{Array2, Axis, Zip};

use crate::autograd::{Graph, Var};
use crate::decoder::{BundleVars, ConfidenceMap, PredictionBundle};
use crate::encoder::NUM_STAGES;
use crate::error::{Error, Result};
use crate::ops::{self, Tensor};

pub type BinaryMask = Array2<bool>;

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthTriple {
    pub g0: BinaryMask,
    pub g_b: BinaryMask,
    pub g_i: BinaryMask,
}

impl GroundTruthTriple {
    pub fn from_mask(g0: &BinaryMask) -> Self {
        let (h, w) = g0.dim();
        let (g_b, g_i) = derive_boundary_interior(g0, boundary_width(h, w));
        GroundTruthTriple {
            g0: g0.clone(),
            g_b,
            g_i,
        }
    }
}

/// Boundary band half-width: 2 px at 512 px width, scaled with width, at least 1.
pub fn boundary_width(_height: usize, width: usize) -> usize {
    ((2.0 * width as f64 / 512.0).round() as usize).max(1)
}

fn sweep(mask: &BinaryMask, radius: usize, axis: Axis, want: bool) -> BinaryMask {
    // Square structuring elements are separable; pixels outside the image are background.
    let mut out = mask.clone();
    let len = mask.len_of(axis);
    for (src, mut dst) in mask.lanes(axis).into_iter().zip(out.lanes_mut(axis)) {
        for i in 0..len {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(len - 1);
            let window = (lo..=hi).map(|j| src[j]);
            dst[i] = if want {
                window.into_iter().any(|v| v)
            } else {
                let clipped = i < radius || i + radius >= len;
                !clipped && window.into_iter().all(|v| v)
            };
        }
    }
    out
}

pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let rows = sweep(mask, radius, Axis(1), true);
    sweep(&rows, radius, Axis(0), true)
}

pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let rows = sweep(mask, radius, Axis(1), false);
    sweep(&rows, radius, Axis(0), false)
}

/// Boundary band `dilate(g0) - erode(g0)` and interior `erode(g0)` with a
/// (2·width+1)² square structuring element.
pub fn derive_boundary_interior(g0: &BinaryMask, width: usize) -> (BinaryMask, BinaryMask) {
    let width = width.max(1);
    let grown = dilate(g0, width);
    let interior = erode(g0, width);
    let band = Zip::from(&grown).and(&interior).map_collect(|&d, &e| d && !e);
    (band, interior)
}

pub fn mask_to_f64(mask: &BinaryMask) -> Array2<f64> {
    mask.mapv(|b| if b { 1.0 } else { 0.0 })
}

pub fn bce_loss(pred: &ConfidenceMap, gt: &BinaryMask) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!(
            "bce: prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let p = pred.view().insert_axis(Axis(0));
    let t = mask_to_f64(gt);
    Ok(ops::bce_mean(p, t.view().insert_axis(Axis(0))))
}

/// Stacks per-image masks into an (N, 1, H, W) target tensor.
pub fn stack_masks<'a>(masks: impl IntoIterator<Item = &'a BinaryMask>) -> Result<Tensor> {
    let planes: Vec<Array2<f64>> = masks.into_iter().map(mask_to_f64).collect();
    let first = planes
        .first()
        .ok_or_else(|| Error::shape("no masks to stack"))?
        .dim();
    if planes.iter().any(|p| p.dim() != first) {
        return Err(Error::shape("masks in a batch differ in size"));
    }
    let mut t = Tensor::zeros((planes.len(), 1, first.0, first.1));
    for (n, p) in planes.iter().enumerate() {
        t.index_axis_mut(Axis(0), n).index_axis_mut(Axis(0), 0).assign(p);
    }
    Ok(t)
}

/// Batched targets for the objective, each (N, 1, H, W).
#[derive(Clone, Debug)]
pub struct Targets {
    pub g0: Tensor,
    pub g_b: Tensor,
    pub g_i: Tensor,
}

impl Targets {
    pub fn from_triples(triples: &[GroundTruthTriple]) -> Result<Self> {
        Ok(Targets {
            g0: stack_masks(triples.iter().map(|t| &t.g0))?,
            g_b: stack_masks(triples.iter().map(|t| &t.g_b))?,
            g_i: stack_masks(triples.iter().map(|t| &t.g_i))?,
        })
    }

    pub fn from_masks(masks: &[BinaryMask]) -> Result<Self> {
        let triples: Vec<_> = masks.iter().map(GroundTruthTriple::from_mask).collect();
        Self::from_triples(&triples)
    }
}

/// Per-term values of one objective evaluation; index 0 is stage 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub m0: Vec<f64>,
    pub m_b: Vec<f64>,
    pub m_i: Vec<f64>,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.m0.iter().chain(&self.m_b).chain(&self.m_i).sum()
    }
}

fn check_stages(n: usize, what: &str) -> Result<()> {
    if n != NUM_STAGES {
        return Err(Error::shape(format!("{what}: expected {NUM_STAGES} stages, got {n}")));
    }
    Ok(())
}

/// Builds the objective on the graph and returns the root with its terms.
pub fn total_loss_graph(g: &mut Graph, bundle: &BundleVars, targets: &Targets) -> Result<(Var, LossTerms)> {
    check_stages(bundle.m0.len(), "object maps")?;
    let mut roots = Vec::with_capacity(3 * NUM_STAGES);
    let mut terms = LossTerms::default();
    for &m in &bundle.m0 {
        let l = g.bce_mean(m, &targets.g0)?;
        terms.m0.push(g.scalar(l));
        roots.push(l);
    }
    if let Some(mb) = &bundle.m_b {
        check_stages(mb.len(), "boundary maps")?;
        for &m in mb {
            let l = g.bce_mean(m, &targets.g_b)?;
            terms.m_b.push(g.scalar(l));
            roots.push(l);
        }
    }
    if let Some(mi) = &bundle.m_i {
        check_stages(mi.len(), "interior maps")?;
        for &m in mi {
            let l = g.bce_mean(m, &targets.g_i)?;
            terms.m_i.push(g.scalar(l));
            roots.push(l);
        }
    }
    let root = g.sum(&roots)?;
    Ok((root, terms))
}

fn batch_bce(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!(
            "bce: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (n, c, h, w) = pred.dim();
    let p = pred.to_shape((n * c, h, w)).expect("reshape");
    let t = target.to_shape((n * c, h, w)).expect("reshape");
    Ok(ops::bce_mean(p.view(), t.view()))
}

/// The objective for a computed bundle against per-image object masks.
/// Boundary and interior masks are derived once per image.
pub fn total_loss(bundle: &PredictionBundle, g0: &[BinaryMask]) -> Result<LossTerms> {
    total_loss_with(bundle, &Targets::from_masks(g0)?)
}

pub fn total_loss_with(bundle: &PredictionBundle, targets: &Targets) -> Result<LossTerms> {
    check_stages(bundle.m0.len(), "object maps")?;
    let mut terms = LossTerms::default();
    for m in &bundle.m0 {
        terms.m0.push(batch_bce(m, &targets.g0)?);
    }
    if let Some(mb) = &bundle.m_b {
        check_stages(mb.len(), "boundary maps")?;
        for m in mb {
            terms.m_b.push(batch_bce(m, &targets.g_b)?);
        }
    }
    if let Some(mi) = &bundle.m_i {
        check_stages(mi.len(), "interior maps")?;
        for m in mi {
            terms.m_i.push(batch_bce(m, &targets.g_i)?);
        }
    }
    Ok(terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solid_square_ring_and_core() {
        let g0 = BinaryMask::from_elem((5, 5), true);
        let (gb, gi) = derive_boundary_interior(&g0, 1);
        assert_eq!(gi.iter().filter(|&&v| v).count(), 9);
        for i in 0..5 {
            for j in 0..5 {
                let ring = i == 0 || j == 0 || i == 4 || j == 4;
                assert_eq!(gb[[i, j]], ring);
                assert_eq!(gi[[i, j]], !ring);
            }
        }
        assert_eq!(gb.iter().filter(|&&v| v).count(), 16);
    }

    #[test]
    fn empty_mask_gives_empty_triple() {
        let g0 = BinaryMask::from_elem((6, 7), false);
        let (gb, gi) = derive_boundary_interior(&g0, 2);
        assert!(gb.iter().all(|&v| !v));
        assert!(gi.iter().all(|&v| !v));
    }

    #[test]
    fn band_straddles_the_contour() {
        let mut g0 = BinaryMask::from_elem((9, 9), false);
        g0.slice_mut(ndarray::s![2..7, 3..6]).fill(true);
        let (gb, gi) = derive_boundary_interior(&g0, 1);
        assert!(gb[[1, 4]] && gb[[2, 4]] && !gb[[4, 4]]);
        assert!(gi[[4, 4]] && !gi[[2, 4]]);
        assert_eq!(gi.iter().filter(|&&v| v).count(), 3);
    }

    #[test]
    fn width_scales_with_resolution() {
        assert_eq!(boundary_width(256, 512), 2);
        assert_eq!(boundary_width(32, 64), 1);
        assert_eq!(boundary_width(1024, 2048), 8);
    }

    #[test]
    fn bce_values() {
        let p = ConfidenceMap::from_elem((2, 3), 0.5);
        let gt = BinaryMask::from_shape_fn((2, 3), |(i, j)| (i + j) % 2 == 0);
        assert!((bce_loss(&p, &gt).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let exact = mask_to_f64(&gt);
        let l = bce_loss(&exact, &gt).unwrap();
        assert!((l - (-(1.0 - ops::BCE_EPS).ln())).abs() < 1e-15);
        assert!(l > 0.0 && l < 1.1e-7);
        assert!(bce_loss(&p, &BinaryMask::from_elem((3, 2), true)).is_err());
    }
}
