//! Five-stage residual feature extractors shared by the general and the
//! task-specific subnetworks.

use ndarray::Array4;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{group_count, Conv, Norm, NormKind, ParamView};
use crate::ops::Tensor;
use crate::params::ParamSet;

pub const NUM_STAGES: usize = 5;

/// A batch of images, (N, 3, H, W) with values in [0, 1].
pub type ImageBatch = Array4<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderStageSpec {
    /// 1-based stage index.
    pub index: usize,
    pub stride: usize,
    pub dilation: usize,
    pub out_channels: usize,
    pub num_blocks: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderScale {
    /// Basic residual blocks, 2 per stage, channels 16-32-64-64-64.
    Tiny,
    /// ResNet-50 shaped bottleneck stages.
    Paper,
}

impl EncoderScale {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderScale::Tiny => "tiny",
            EncoderScale::Paper => "paper",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(EncoderScale::Tiny),
            "paper" => Ok(EncoderScale::Paper),
            other => Err(Error::config(format!("unknown encoder scale {other:?}"))),
        }
    }

    pub fn stage_specs(self) -> Vec<EncoderStageSpec> {
        let (channels, blocks): ([usize; 5], [usize; 5]) = match self {
            EncoderScale::Tiny => ([16, 32, 64, 64, 64], [2, 2, 2, 2, 2]),
            EncoderScale::Paper => ([64, 256, 512, 1024, 2048], [1, 3, 4, 6, 3]),
        };
        stage_specs_with(channels, blocks)
    }

    pub fn block_kind(self) -> BlockKind {
        match self {
            EncoderScale::Tiny => BlockKind::Basic,
            EncoderScale::Paper => BlockKind::Bottleneck,
        }
    }

    pub fn norm_kind(self, channels: usize) -> NormKind {
        match self {
            EncoderScale::Tiny => NormKind::Group {
                groups: group_count(channels, 8),
            },
            EncoderScale::Paper => NormKind::FrozenBatch,
        }
    }
}

/// Stride 2 for stages 1-3; stages 4 and 5 keep resolution and dilate by 2 and 4.
pub fn stage_specs_with(channels: [usize; 5], blocks: [usize; 5]) -> Vec<EncoderStageSpec> {
    const STRIDES: [usize; 5] = [2, 2, 2, 1, 1];
    const DILATIONS: [usize; 5] = [1, 1, 1, 2, 4];
    (0..NUM_STAGES)
        .map(|i| EncoderStageSpec {
            index: i + 1,
            stride: STRIDES[i],
            dilation: DILATIONS[i],
            out_channels: channels[i],
            num_blocks: blocks[i],
        })
        .collect()
}

pub fn validate_specs(specs: &[EncoderStageSpec]) -> Result<()> {
    if specs.len() != NUM_STAGES {
        return Err(Error::config(format!(
            "encoder needs {NUM_STAGES} stage specs, got {}",
            specs.len()
        )));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.index != i + 1 {
            return Err(Error::config(format!("stage spec {} has index {}", i + 1, s.index)));
        }
        if s.stride == 0 || s.dilation == 0 || s.out_channels == 0 || s.num_blocks == 0 {
            return Err(Error::config(format!("stage {} has a nonpositive dimension", s.index)));
        }
    }
    if specs[4].stride != 1 {
        return Err(Error::config("stage 5 must have stride 1"));
    }
    if specs[3].dilation != 2 {
        return Err(Error::config("stage 4 must have dilation 2"));
    }
    if specs.windows(2).any(|w| w[1].out_channels < w[0].out_channels) {
        return Err(Error::config("stage channel widths must be nondecreasing"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    body: Vec<(Conv, Norm)>,
    shortcut: Option<(Conv, Norm)>,
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: &str,
        kind: BlockKind,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        dilation: usize,
        scale: EncoderScale,
    ) -> Self {
        let norm = |suffix: &str, ch: usize| Norm {
            name: format!("{name}.{suffix}"),
            channels: ch,
            kind: scale.norm_kind(ch),
        };
        let body = match kind {
            BlockKind::Basic => vec![
                (
                    Conv::new(format!("{name}.conv1"), in_ch, out_ch, 3)
                        .stride(stride)
                        .dilation(dilation)
                        .no_bias(),
                    norm("norm1", out_ch),
                ),
                (
                    Conv::new(format!("{name}.conv2"), out_ch, out_ch, 3)
                        .dilation(dilation)
                        .no_bias(),
                    norm("norm2", out_ch),
                ),
            ],
            BlockKind::Bottleneck => {
                let mid = (out_ch / 4).max(1);
                vec![
                    (Conv::new(format!("{name}.conv1"), in_ch, mid, 1).no_bias(), norm("norm1", mid)),
                    (
                        Conv::new(format!("{name}.conv2"), mid, mid, 3)
                            .stride(stride)
                            .dilation(dilation)
                            .no_bias(),
                        norm("norm2", mid),
                    ),
                    (Conv::new(format!("{name}.conv3"), mid, out_ch, 1).no_bias(), norm("norm3", out_ch)),
                ]
            }
        };
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv::new(format!("{name}.shortcut.conv"), in_ch, out_ch, 1)
                    .stride(stride)
                    .no_bias(),
                norm("shortcut.norm", out_ch),
            )
        });
        ResidualBlock { body, shortcut }
    }

    fn layers(&self) -> impl Iterator<Item = &(Conv, Norm)> {
        self.body.iter().chain(self.shortcut.iter())
    }

    fn forward(&self, g: &mut Graph, p: ParamView, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.body.len() - 1;
        for (i, (conv, norm)) in self.body.iter().enumerate() {
            h = conv.forward(g, p, h)?;
            h = norm.forward(g, p, h)?;
            if i != last {
                h = g.relu(h);
            }
        }
        let skip = match &self.shortcut {
            Some((conv, norm)) => {
                let s = conv.forward(g, p, x)?;
                norm.forward(g, p, s)?
            }
            None => x,
        };
        let sum = g.add(h, skip)?;
        Ok(g.relu(sum))
    }
}

#[derive(Clone, Debug)]
struct Stage {
    stem: Option<(Conv, Norm)>,
    blocks: Vec<ResidualBlock>,
}

/// Parameter-free description of an encoder; parameters live in a [`ParamSet`]
/// under `prefix`.
#[derive(Clone, Debug)]
pub struct EncoderLayout {
    pub prefix: String,
    pub specs: Vec<EncoderStageSpec>,
    pub scale: EncoderScale,
    stages: Vec<Stage>,
}

impl EncoderLayout {
    pub fn new(prefix: &str, specs: &[EncoderStageSpec], scale: EncoderScale) -> Result<Self> {
        validate_specs(specs)?;
        let kind = scale.block_kind();
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut in_ch = 3;
        for spec in specs {
            let base = format!("{prefix}.stage{}", spec.index);
            let out = spec.out_channels;
            let (stem, mut block_stride) = if spec.index == 1 {
                let k = if scale == EncoderScale::Paper { 7 } else { 3 };
                let conv = Conv::new(format!("{base}.stem.conv"), in_ch, out, k)
                    .stride(spec.stride)
                    .no_bias();
                let norm = Norm {
                    name: format!("{base}.stem.norm"),
                    channels: out,
                    kind: scale.norm_kind(out),
                };
                in_ch = out;
                (Some((conv, norm)), 1)
            } else {
                (None, spec.stride)
            };
            let mut blocks = Vec::with_capacity(spec.num_blocks);
            for b in 0..spec.num_blocks {
                blocks.push(ResidualBlock::new(
                    &format!("{base}.block{b}"),
                    kind,
                    in_ch,
                    out,
                    block_stride,
                    spec.dilation,
                    scale,
                ));
                in_ch = out;
                block_stride = 1;
            }
            stages.push(Stage { stem, blocks });
        }
        Ok(EncoderLayout {
            prefix: prefix.to_string(),
            specs: specs.to_vec(),
            scale,
            stages,
        })
    }

    /// Product of all stage strides.
    pub fn total_stride(&self) -> usize {
        self.specs.iter().map(|s| s.stride).product()
    }

    /// Spatial size of every stage output for an `h`×`w` input.
    pub fn stage_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut sizes = Vec::with_capacity(NUM_STAGES);
        let (mut h, mut w) = (h, w);
        for s in &self.specs {
            h = h.div_ceil(s.stride);
            w = w.div_ceil(s.stride);
            sizes.push((h, w));
        }
        sizes
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let t = self.total_stride();
        if h == 0 || w == 0 || h % t != 0 || w % t != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} is not divisible by the cumulative encoder stride {t}"
            )));
        }
        Ok(())
    }

    fn layers(&self) -> impl Iterator<Item = &(Conv, Norm)> {
        self.stages
            .iter()
            .flat_map(|s| s.stem.iter().chain(s.blocks.iter().flat_map(|b| b.layers())))
    }

    pub fn create_params(&self, set: &mut ParamSet, seed: u64) {
        for (conv, norm) in self.layers() {
            conv.create(set, seed);
            norm.create(set, seed);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|(c, n)| c.param_count() + n.param_count()).sum()
    }

    /// Runs stage `index` (1-based) on its input.
    pub fn forward_stage(&self, g: &mut Graph, p: ParamView, index: usize, x: Var) -> Result<Var> {
        let stage = &self.stages[index - 1];
        let mut h = x;
        if let Some((conv, norm)) = &stage.stem {
            h = conv.forward(g, p, h)?;
            h = norm.forward(g, p, h)?;
            h = g.relu(h);
        }
        for block in &stage.blocks {
            h = block.forward(g, p, h)?;
        }
        Ok(h)
    }

    /// Runs all five stages, returning the stage outputs finest first.
    pub fn forward(&self, g: &mut Graph, p: ParamView, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(NUM_STAGES);
        let mut h = x;
        for i in 1..=NUM_STAGES {
            h = self.forward_stage(g, p, i, h)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Outputs of the five encoder stages, finest (stage 1) first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn all_finite(&self) -> bool {
        self.levels.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// An encoder layout together with its parameters.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layout: EncoderLayout,
    pub params: ParamSet,
}

pub fn build_encoder(specs: &[EncoderStageSpec], init_seed: u64) -> Result<Encoder> {
    build_encoder_scaled(specs, EncoderScale::Tiny, init_seed)
}

pub fn build_encoder_scaled(specs: &[EncoderStageSpec], scale: EncoderScale, init_seed: u64) -> Result<Encoder> {
    let layout = EncoderLayout::new("encoder", specs, scale)?;
    let mut params = ParamSet::new();
    layout.create_params(&mut params, init_seed);
    Ok(Encoder { layout, params })
}

pub fn encode(encoder: &Encoder, images: &ImageBatch) -> Result<FeaturePyramid> {
    let (_, c, h, w) = images.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3-channel images, got {c}")));
    }
    encoder.layout.check_input(h, w)?;
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let view = ParamView::new(&encoder.params, false);
    let levels = encoder.layout.forward(&mut g, view, x)?;
    Ok(FeaturePyramid {
        levels: levels.into_iter().map(|v| g.value(v).clone()).collect(),
    })
}
