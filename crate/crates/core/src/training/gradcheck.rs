//! Finite-difference verification of the staged objective's gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::encoder::EncoderScale;
use crate::error::{Error, Result};
use crate::model::{Model, ParamGroup, Trainable};
use crate::supervision::{total_loss_graph, Targets};

use super::Sample;

/// Smallest denominator of the relative error, so that parameters whose
/// gradients are both numerically zero compare as equal.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Tolerance the check is meant to be read against; it sets how far the
/// denominator is raised above the rounding noise of the difference quotient.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-3;

/// Ulps of loss rounding assumed to reach each central difference.
const LOSS_ROUNDING_ULPS: f64 = 8.0;

/// Denominator floor for a loss of magnitude `loss` probed with step `epsilon`.
///
/// A central difference cannot resolve gradients below roughly
/// `ulps * eps_mach * |L| / (2 epsilon)`; dividing that by the tolerance means
/// a disagreement at the noise level alone never reads as a failure.
pub fn relative_error_floor(loss: f64, epsilon: f64) -> f64 {
    let noise = LOSS_ROUNDING_ULPS * f64::EPSILON * loss.abs() / (2.0 * epsilon);
    (noise / GRAD_CHECK_TOLERANCE).max(GRAD_CHECK_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub per_group: usize,
    pub seed: u64,
    pub groups: Vec<ParamGroup>,
    /// Restricts sampling to parameters whose name starts with this prefix.
    pub name_prefix: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            per_group: 200,
            seed: 0,
            groups: ParamGroup::ALL.to_vec(),
            name_prefix: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter, flat index, analytic and numeric gradient of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub floor: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

fn objective(model: &Model, images: &crate::encoder::ImageBatch, targets: &Targets, grads: bool) -> Result<(f64, Option<crate::autograd::Gradients>)> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let flags = Trainable {
        general: grads,
        task: grads,
    };
    let bundle = model.task_forward_graph(&mut g, x, flags, None)?;
    let (root, _) = total_loss_graph(&mut g, &bundle, targets)?;
    let loss = g.scalar(root);
    Ok((loss, grads.then(|| g.backward(root))))
}

/// Compares analytic gradients of the task objective (with every parameter,
/// general ones included, treated as trainable) against central differences
/// on a random subsample of each requested group.
pub fn grad_check(model: &Model, batch: &[Sample], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if model.config.encoder_scale != EncoderScale::Tiny {
        return Err(Error::config("gradient checks run on the tiny encoder only"));
    }
    if batch.is_empty() || batch.len() > 2 {
        return Err(Error::config("gradient checks take one or two images"));
    }
    let (h, w) = (model.config.input_height, model.config.input_width);
    if h * w > 32 * 16 || h > 32 || w > 32 {
        return Err(Error::config(format!("gradient checks need inputs of at most 32x16 pixels, model is {h}x{w}")));
    }
    if !(opts.epsilon > 0.0) {
        return Err(Error::config("epsilon must be positive"));
    }
    let mut images = crate::encoder::ImageBatch::zeros((batch.len(), 3, h, w));
    let mut masks = Vec::new();
    for (n, s) in batch.iter().enumerate() {
        let (img, mask) = super::augment(&s.image, &s.mask, (h, w), false)?;
        images.index_axis_mut(ndarray::Axis(0), n).assign(&img);
        masks.push(mask);
    }
    let targets = Targets::from_masks(&masks)?;
    let (loss, grads) = objective(model, &images, &targets, true)?;
    let grads = grads.expect("gradients requested");
    let floor = relative_error_floor(loss, opts.epsilon);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = model.clone();
    let mut report = Vec::new();
    for &group in &opts.groups {
        let entries: Vec<(String, usize)> = model
            .params
            .group(group)
            .iter()
            .filter(|(name, _)| opts.name_prefix.as_deref().map_or(true, |p| name.starts_with(p)))
            .flat_map(|(name, t)| (0..t.len()).map(move |k| (name.clone(), k)))
            .collect();
        let picks = sample(&mut rng, entries.len(), opts.per_group.min(entries.len()));
        let mut check = GroupCheck {
            group,
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
        };
        for pick in picks.iter() {
            let (name, k) = &entries[pick];
            let analytic = grads.get(name).map_or(0.0, |g| g.as_slice_memory_order().expect("contiguous")[*k]);
            let original = model.params.get(name).expect("listed").as_slice_memory_order().expect("contiguous")[*k];
            let mut eval_at = |v: f64| -> Result<f64> {
                probe.params.get_mut(name).expect("listed").as_slice_memory_order_mut().expect("contiguous")[*k] = v;
                Ok(objective(&probe, &images, &targets, false)?.0)
            };
            let plus = eval_at(original + opts.epsilon)?;
            let minus = eval_at(original - opts.epsilon)?;
            eval_at(original)?;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor);
            check.checked += 1;
            if rel > check.max_rel_error || check.worst.is_none() {
                check.max_rel_error = check.max_rel_error.max(rel);
                check.worst = Some((name.clone(), *k, analytic, numeric));
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        loss,
        floor,
        groups: report,
    })
}
