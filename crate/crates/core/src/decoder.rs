//! Boundary-aware feature decoding and the progressive pyramid decoder.
//!
//! Each decoding stage fuses the encoder features of its level with the
//! decoded features of the next coarser level, then either runs a plain
//! prediction head or a boundary-aware unit with three branches:
//!
//! * boundary: two 3x3 convolutions and a stride-2 transposed convolution,
//!   producing boundary logits at twice the stage resolution;
//! * transition: an integrated successive dilation (ISD) block;
//! * interior: an ISD block, a 3x3 convolution and a logit head.
//!
//! The branches are fused as `F_trans + M_B * F_bnd + M_I * F_int`, where the
//! single-channel confidences broadcast over channels.

use ndarray::{Array2, Axis};

use crate::autograd::{Graph, Var};
use crate::encoder::NUM_STAGES;
use crate::error::{Error, Result};
use crate::nn::{group_count, Conv, ConvTranspose, Norm, NormKind, ParamView};
use crate::ops::Tensor;
use crate::params::{Init, ParamSet};
use crate::transfer::FeatureMap;

/// Sigmoid outputs of one image, (height, width), values in (0, 1).
pub type ConfidenceMap = Array2<f64>;

/// Integrated successive dilation: `F + sum_k y_k` with `y_1 = conv_1(F)` and
/// `y_k = conv_k(relu(y_{k-1}))`, conv `k` dilated by `rates[k]`.
#[derive(Clone, Debug)]
pub struct Isd {
    pub rates: Vec<usize>,
    convs: Vec<Conv>,
}

impl Isd {
    pub fn new(name: &str, channels: usize, rates: &[usize]) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::config(format!("{name}: ISD needs at least one dilation rate")));
        }
        if let Some(r) = rates.iter().find(|&&r| r == 0) {
            return Err(Error::config(format!("{name}: invalid dilation rate {r}")));
        }
        let convs = rates
            .iter()
            .enumerate()
            .map(|(k, &r)| Conv::new(format!("{name}.conv{k}"), channels, channels, 3).dilation(r))
            .collect();
        Ok(Isd {
            rates: rates.to_vec(),
            convs,
        })
    }

    pub fn convs(&self) -> &[Conv] {
        &self.convs
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv::param_count).sum()
    }

    pub fn create_params(&self, set: &mut ParamSet, seed: u64) {
        for c in &self.convs {
            c.create(set, seed);
        }
    }

    pub fn forward(&self, g: &mut Graph, p: ParamView, x: Var) -> Result<Var> {
        let mut acc = x;
        let mut h = x;
        for (k, conv) in self.convs.iter().enumerate() {
            if k > 0 {
                h = g.relu(h);
            }
            h = conv.forward(g, p, h)?;
            acc = g.add(acc, h)?;
        }
        Ok(acc)
    }
}

#[derive(Clone, Debug)]
pub struct BoundaryBranch {
    conv1: Conv,
    conv2: Conv,
    up: ConvTranspose,
    logit: Conv,
}

impl BoundaryBranch {
    pub fn new(name: &str, channels: usize) -> Self {
        BoundaryBranch {
            conv1: Conv::new(format!("{name}.conv1"), channels, channels, 3),
            conv2: Conv::new(format!("{name}.conv2"), channels, channels, 3),
            up: ConvTranspose {
                name: format!("{name}.up"),
                in_ch: channels,
                out_ch: channels,
                stride: 2,
            },
            logit: prediction_conv(format!("{name}.logit"), channels, 1),
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count() + self.up.param_count() + self.logit.param_count()
    }

    pub fn create_params(&self, set: &mut ParamSet, seed: u64) {
        self.conv1.create(set, seed);
        self.conv2.create(set, seed);
        self.up.create(set, seed);
        self.logit.create(set, seed);
    }

    /// Returns (features, logits), both at twice the input resolution.
    pub fn forward(&self, g: &mut Graph, p: ParamView, x: Var) -> Result<(Var, Var)> {
        let h = self.conv1.forward(g, p, x)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, p, h)?;
        let h = g.relu(h);
        let features = self.up.forward(g, p, h)?;
        let logits = self.logit.forward(g, p, features)?;
        Ok((features, logits))
    }
}

/// Graph nodes produced by one boundary-aware unit.
#[derive(Clone, Copy, Debug)]
pub struct BfdVars {
    pub fused: Var,
    /// Prediction logits at the stage resolution.
    pub m0_logits: Var,
    /// Boundary logits at twice the stage resolution.
    pub boundary_logits: Var,
    /// Interior logits at the stage resolution.
    pub interior_logits: Var,
    pub boundary_gate: Var,
    pub interior_gate: Var,
    pub transition: Var,
    pub boundary_features: Var,
    pub interior_features: Var,
}

#[derive(Clone, Debug)]
pub struct BfdUnit {
    pub boundary: BoundaryBranch,
    pub transition: Isd,
    pub interior: Isd,
    interior_conv: Conv,
    interior_logit: Conv,
    fuse_norm: Norm,
    head: Conv,
}

impl BfdUnit {
    /// `prefix` names the decoding stage; the prediction head is shared with
    /// the plain-head layout so both variants expose the same `head` parameters.
    pub fn new(prefix: &str, channels: usize, rates: &[usize]) -> Result<Self> {
        Ok(BfdUnit {
            boundary: BoundaryBranch::new(&format!("{prefix}.boundary"), channels),
            transition: Isd::new(&format!("{prefix}.transition.isd"), channels, rates)?,
            interior: Isd::new(&format!("{prefix}.interior.isd"), channels, rates)?,
            interior_conv: Conv::new(format!("{prefix}.interior.conv"), channels, channels, 3),
            interior_logit: prediction_conv(format!("{prefix}.interior.logit"), channels, 1),
            fuse_norm: decoder_norm(format!("{prefix}.fuse.norm"), channels),
            head: plain_head(prefix, channels),
        })
    }

    pub fn param_count(&self) -> usize {
        self.boundary.param_count()
            + self.transition.param_count()
            + self.interior.param_count()
            + self.interior_conv.param_count()
            + self.interior_logit.param_count()
            + self.fuse_norm.param_count()
            + self.head.param_count()
    }

    pub fn create_params(&self, set: &mut ParamSet, seed: u64) {
        self.boundary.create_params(set, seed);
        self.transition.create_params(set, seed);
        self.interior.create_params(set, seed);
        self.interior_conv.create(set, seed);
        self.interior_logit.create(set, seed);
        self.fuse_norm.create(set, seed);
        self.head.create(set, seed);
    }

    pub fn forward(&self, g: &mut Graph, p: ParamView, features: Var) -> Result<BfdVars> {
        let (_, _, h, w) = g.shape(features);
        let (bnd_up, boundary_logits) = self.boundary.forward(g, p, features)?;
        let boundary_features = g.resize_bilinear(bnd_up, h, w);
        let gate_logits = g.resize_bilinear(boundary_logits, h, w);
        let boundary_gate = g.sigmoid(gate_logits);

        let transition = self.transition.forward(g, p, features)?;

        let int = self.interior.forward(g, p, features)?;
        let interior_features = self.interior_conv.forward(g, p, int)?;
        let interior_logits = self.interior_logit.forward(g, p, interior_features)?;
        let interior_gate = g.sigmoid(interior_logits);

        let fused = fuse_graph(
            g,
            transition,
            boundary_features,
            interior_features,
            boundary_gate,
            interior_gate,
        )?;
        // The three branches add up without any normalisation of their own;
        // renormalising here keeps the magnitude passed to the next stage
        // independent of depth.
        let fused = self.fuse_norm.forward(g, p, fused)?;
        let m0_logits = self.head.forward(g, p, fused)?;
        Ok(BfdVars {
            fused,
            m0_logits,
            boundary_logits,
            interior_logits,
            boundary_gate,
            interior_gate,
            transition,
            boundary_features,
            interior_features,
        })
    }
}

fn decoder_norm(name: String, channels: usize) -> Norm {
    Norm {
        name,
        channels,
        kind: NormKind::Group {
            groups: group_count(channels, 8),
        },
    }
}

/// Convolutions that emit logits start small so every confidence map begins
/// near one half instead of saturated.
fn prediction_conv(name: String, channels: usize, kernel: usize) -> Conv {
    Conv::new(name, channels, 1, kernel).init(Init::He { gain: 0.1 })
}

fn plain_head(prefix: &str, channels: usize) -> Conv {
    prediction_conv(format!("{prefix}.head"), channels, 3)
}

/// Confidence-gated fusion on the graph.
pub fn fuse_graph(
    g: &mut Graph,
    transition: Var,
    boundary: Var,
    interior: Var,
    boundary_gate: Var,
    interior_gate: Var,
) -> Result<Var> {
    let b = g.mul(boundary, boundary_gate)?;
    let i = g.mul(interior, interior_gate)?;
    let acc = g.add(transition, b)?;
    g.add(acc, i)
}

/// `transition + m_b * boundary + m_i * interior` for one image.
pub fn fuse(
    transition: &FeatureMap,
    boundary: &FeatureMap,
    interior: &FeatureMap,
    m_b: &ConfidenceMap,
    m_i: &ConfidenceMap,
) -> Result<FeatureMap> {
    let (_, h, w) = transition.dim();
    if boundary.dim() != transition.dim()
        || interior.dim() != transition.dim()
        || m_b.dim() != (h, w)
        || m_i.dim() != (h, w)
    {
        return Err(Error::shape("fusion inputs disagree in shape"));
    }
    let mut out = transition.clone();
    for c in 0..out.dim().0 {
        let mut plane = out.index_axis_mut(Axis(0), c);
        plane += &(&boundary.index_axis(Axis(0), c) * m_b);
        plane += &(&interior.index_axis(Axis(0), c) * m_i);
    }
    Ok(out)
}

/// Dilation rates of the ISD blocks at 1-based decoding stage `index`.
pub fn isd_rates(index: usize) -> &'static [usize] {
    if index >= 4 {
        &[1, 2, 4, 8]
    } else {
        &[1, 2, 4]
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    lateral: Conv,
    norm: Norm,
    head: Conv,
    bfd: Option<BfdUnit>,
}

/// Coarse-to-fine decoder over the task pyramid.
#[derive(Clone, Debug)]
pub struct DecoderLayout {
    pub prefix: String,
    pub width: usize,
    pub use_bfd: bool,
    stages: Vec<DecoderStage>,
}

/// Graph nodes of all per-stage predictions, each at the input resolution.
#[derive(Clone, Debug)]
pub struct BundleVars {
    pub m0: Vec<Var>,
    pub m_b: Option<Vec<Var>>,
    pub m_i: Option<Vec<Var>>,
}

impl DecoderLayout {
    /// `encoder_channels` lists the channel counts of encoder stages 1..5.
    pub fn new(prefix: &str, encoder_channels: &[usize], width: usize, use_bfd: bool) -> Result<Self> {
        if encoder_channels.len() != NUM_STAGES {
            return Err(Error::config("decoder needs five encoder widths"));
        }
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for (i, &enc_ch) in encoder_channels.iter().enumerate() {
            let index = i + 1;
            let name = format!("{prefix}.stage{index}");
            let in_ch = if index == NUM_STAGES { enc_ch } else { enc_ch + width };
            let bfd = if use_bfd {
                Some(BfdUnit::new(&name, width, isd_rates(index))?)
            } else {
                None
            };
            stages.push(DecoderStage {
                lateral: Conv::new(format!("{name}.lateral"), in_ch, width, 3),
                norm: decoder_norm(format!("{name}.lateral.norm"), width),
                head: plain_head(&name, width),
                bfd,
            });
        }
        Ok(DecoderLayout {
            prefix: prefix.to_string(),
            width,
            use_bfd,
            stages,
        })
    }

    pub fn param_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| {
                s.lateral.param_count()
                    + s.norm.param_count()
                    + match &s.bfd {
                        Some(b) => b.param_count(),
                        None => s.head.param_count(),
                    }
            })
            .sum()
    }

    pub fn create_params(&self, set: &mut ParamSet, seed: u64) {
        for s in &self.stages {
            s.lateral.create(set, seed);
            s.norm.create(set, seed);
            match &s.bfd {
                Some(b) => b.create_params(set, seed),
                None => s.head.create(set, seed),
            }
        }
    }

    pub fn bfd_unit(&self, index: usize) -> Option<&BfdUnit> {
        self.stages[index - 1].bfd.as_ref()
    }

    /// Decodes stages 5 -> 1 and upsamples every prediction to `out_h`×`out_w`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: ParamView,
        pyramid: &[Var],
        out_h: usize,
        out_w: usize,
    ) -> Result<BundleVars> {
        if pyramid.len() != NUM_STAGES {
            return Err(Error::shape(format!("expected {NUM_STAGES} pyramid levels, got {}", pyramid.len())));
        }
        let mut m0 = vec![None; NUM_STAGES];
        let mut m_b = vec![None; NUM_STAGES];
        let mut m_i = vec![None; NUM_STAGES];
        let mut coarser: Option<Var> = None;
        for index in (1..=NUM_STAGES).rev() {
            let stage = &self.stages[index - 1];
            let enc = pyramid[index - 1];
            let (_, _, h, w) = g.shape(enc);
            let input = match coarser {
                Some(prev) => {
                    let up = g.resize_bilinear(prev, h, w);
                    g.concat_channels(&[enc, up])?
                }
                None => enc,
            };
            let fd = stage.lateral.forward(g, p, input)?;
            let fd = stage.norm.forward(g, p, fd)?;
            let fd = g.relu(fd);
            let (decoded, m0_logits) = match &stage.bfd {
                Some(unit) => {
                    let out = unit.forward(g, p, fd)?;
                    let b = g.resize_bilinear(out.boundary_logits, out_h, out_w);
                    m_b[index - 1] = Some(g.sigmoid(b));
                    let i = g.resize_bilinear(out.interior_logits, out_h, out_w);
                    m_i[index - 1] = Some(g.sigmoid(i));
                    (out.fused, out.m0_logits)
                }
                None => (fd, stage.head.forward(g, p, fd)?),
            };
            let up = g.resize_bilinear(m0_logits, out_h, out_w);
            m0[index - 1] = Some(g.sigmoid(up));
            coarser = Some(decoded);
        }
        let collect = |v: Vec<Option<Var>>| v.into_iter().collect::<Option<Vec<Var>>>();
        Ok(BundleVars {
            m0: collect(m0).expect("all stages decoded"),
            m_b: collect(m_b),
            m_i: collect(m_i),
        })
    }
}

/// Per-stage predictions for a batch, each (N, 1, H, W) at input resolution.
/// Index 0 is stage 1, the finest.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    pub m0: Vec<Tensor>,
    pub m_b: Option<Vec<Tensor>>,
    pub m_i: Option<Vec<Tensor>>,
}

impl PredictionBundle {
    pub fn from_vars(g: &Graph, vars: &BundleVars) -> Self {
        let take = |v: &[Var]| v.iter().map(|&x| g.value(x).clone()).collect::<Vec<_>>();
        PredictionBundle {
            m0: take(&vars.m0),
            m_b: vars.m_b.as_deref().map(take),
            m_i: vars.m_i.as_deref().map(take),
        }
    }

    pub fn map_count(&self) -> usize {
        self.m0.len()
            + self.m_b.as_ref().map_or(0, Vec::len)
            + self.m_i.as_ref().map_or(0, Vec::len)
    }

    pub fn maps(&self) -> impl Iterator<Item = &Tensor> {
        self.m0
            .iter()
            .chain(self.m_b.iter().flatten())
            .chain(self.m_i.iter().flatten())
    }
}

/// Output of [`bfd_forward`] for one image; all maps at the input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct BfdOutput {
    pub fused_features: FeatureMap,
    pub m0: ConfidenceMap,
    pub m_b: ConfidenceMap,
    pub m_i: ConfidenceMap,
}

fn single(t: &Tensor) -> FeatureMap {
    t.index_axis(Axis(0), 0).to_owned()
}

fn single_map(t: &Tensor) -> ConfidenceMap {
    t.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned()
}

pub fn bfd_forward(features: &FeatureMap, unit: &BfdUnit, params: &ParamSet) -> Result<BfdOutput> {
    let mut g = Graph::new();
    let x = g.constant(features.clone().insert_axis(Axis(0)));
    let out = unit.forward(&mut g, ParamView::new(params, false), x)?;
    let m0 = g.sigmoid(out.m0_logits);
    Ok(BfdOutput {
        fused_features: single(g.value(out.fused)),
        m0: single_map(g.value(m0)),
        m_b: single_map(g.value(out.boundary_gate)),
        m_i: single_map(g.value(out.interior_gate)),
    })
}

/// Boundary branch features and logits for one image, at twice its resolution.
pub fn boundary_branch(
    features: &FeatureMap,
    branch: &BoundaryBranch,
    params: &ParamSet,
) -> Result<(FeatureMap, ConfidenceMap)> {
    let mut g = Graph::new();
    let x = g.constant(features.clone().insert_axis(Axis(0)));
    let (f, l) = branch.forward(&mut g, ParamView::new(params, false), x)?;
    Ok((single(g.value(f)), single_map(g.value(l))))
}

pub fn isd(features: &FeatureMap, block: &Isd, params: &ParamSet) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let x = g.constant(features.clone().insert_axis(Axis(0)));
    let y = block.forward(&mut g, ParamView::new(params, false), x)?;
    Ok(single(g.value(y)))
}

/// Decodes a batched task pyramid to a bundle at `out_h`×`out_w`.
pub fn decode_pyramid(
    pyramid: &crate::encoder::FeaturePyramid,
    layout: &DecoderLayout,
    params: &ParamSet,
    out_h: usize,
    out_w: usize,
) -> Result<PredictionBundle> {
    let mut g = Graph::new();
    let levels: Vec<Var> = pyramid.levels.iter().map(|t| g.constant(t.clone())).collect();
    let vars = layout.forward(&mut g, ParamView::new(params, false), &levels, out_h, out_w)?;
    Ok(PredictionBundle::from_vars(&g, &vars))
}
