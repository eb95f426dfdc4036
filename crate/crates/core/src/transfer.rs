//! Attention-based knowledge transfer from the general to the task-specific
//! subnetwork.
//!
//! The attention map is the product of a spatial softmax (one distribution per
//! channel) and a channel softmax of the globally average-pooled features:
//!
//! ```text
//! A[h, w, c] = softmax_hw(F)[h, w, c] * softmax_c(mean_hw F)[c]
//! ```
//!
//! so every map sums to one over all positions and channels. The gated
//! features `A * F` feed a small residual block whose output is added to the
//! task features.

use ndarray::{Array1, Array3, Axis};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ParamView};
use crate::ops::{self, Tensor};
use crate::params::{Init, ParamSet};

/// One image's features laid out as (channels, height, width).
pub type FeatureMap = Array3<f64>;

fn batch_of_one(f: &FeatureMap) -> Tensor {
    f.clone().insert_axis(Axis(0))
}

fn first_of_batch(t: Tensor) -> FeatureMap {
    t.index_axis_move(Axis(0), 0)
}

pub fn spatial_softmax(f: &FeatureMap) -> FeatureMap {
    first_of_batch(ops::spatial_softmax(&batch_of_one(f)))
}

/// Softmax over channels of the per-channel spatial mean.
pub fn channel_softmax_gap(f: &FeatureMap) -> Array1<f64> {
    let w = ops::channel_softmax_gap(&batch_of_one(f));
    w.into_shape_with_order(f.dim().0).expect("C x 1 x 1 reshape")
}

/// Nonnegative weights over (channel, height, width) summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub values: Array3<f64>,
}

impl AttentionMap {
    pub fn total(&self) -> f64 {
        self.values.sum()
    }
}

pub fn attention_map(f: &FeatureMap) -> AttentionMap {
    let spatial = spatial_softmax(f);
    let channel = channel_softmax_gap(f);
    let mut values = spatial;
    for (c, mut plane) in values.axis_iter_mut(Axis(0)).enumerate() {
        plane *= channel[c];
    }
    AttentionMap { values }
}

/// Graph form of the attention map for a batch.
pub fn attention_map_graph(g: &mut Graph, features: Var) -> Result<Var> {
    let spatial = g.spatial_softmax(features);
    let channel = g.channel_softmax_gap(features);
    g.mul(spatial, channel)
}

/// One transfer unit: `F_S + R(A(F_G) * F_G)` with `R` a channel-preserving
/// 1x1 -> ReLU -> 3x3 residual block whose last convolution starts at zero.
#[derive(Clone, Debug)]
pub struct AktUnit {
    pub name: String,
    pub channels: usize,
    reduce: Conv,
    expand: Conv,
}

impl AktUnit {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        AktUnit {
            reduce: Conv::new(format!("{name}.residual.conv1"), channels, channels, 1),
            expand: Conv::new(format!("{name}.residual.conv2"), channels, channels, 3).init(Init::Zeros),
            name,
            channels,
        }
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count() + self.expand.param_count()
    }

    pub fn create_params(&self, set: &mut ParamSet, seed: u64) {
        self.reduce.create(set, seed);
        self.expand.create(set, seed);
    }

    /// The learned shift `R(A(F_G) * F_G)`; it depends on the general features only.
    pub fn shift(&self, g: &mut Graph, p: ParamView, general: Var) -> Result<Var> {
        let attention = attention_map_graph(g, general)?;
        let purified = g.mul(general, attention)?;
        let h = self.reduce.forward(g, p, purified)?;
        let h = g.relu(h);
        self.expand.forward(g, p, h)
    }

    pub fn forward(&self, g: &mut Graph, p: ParamView, general: Var, task: Var) -> Result<Var> {
        if g.shape(general) != g.shape(task) {
            return Err(Error::shape(format!(
                "{}: general features {:?} vs task features {:?}",
                self.name,
                g.shape(general),
                g.shape(task)
            )));
        }
        let shift = self.shift(g, p, general)?;
        g.add(task, shift)
    }
}

/// Applies one transfer unit to a single image's features.
pub fn akt_transfer(
    general: &FeatureMap,
    task: &FeatureMap,
    unit: &AktUnit,
    params: &ParamSet,
) -> Result<FeatureMap> {
    if general.dim() != task.dim() {
        return Err(Error::shape(format!(
            "general features {:?} vs task features {:?}",
            general.dim(),
            task.dim()
        )));
    }
    if general.dim().0 != unit.channels {
        return Err(Error::shape(format!(
            "unit expects {} channels, features have {}",
            unit.channels,
            general.dim().0
        )));
    }
    let mut g = Graph::new();
    let fg = g.constant(batch_of_one(general));
    let fs = g.constant(batch_of_one(task));
    let out = unit.forward(&mut g, ParamView::new(params, false), fg, fs)?;
    Ok(first_of_batch(g.value(out).clone()))
}
