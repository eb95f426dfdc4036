//! The full network: general subnetwork, transfer units, task-specific
//! subnetwork and the progressive decoder, with ablation switches.

use ndarray::{s, Array2, Array3, Axis};

use crate::autograd::{Graph, Var};
use crate::decoder::{BundleVars, DecoderLayout, PredictionBundle};
use crate::encoder::{EncoderLayout, EncoderScale, ImageBatch, NUM_STAGES};
use crate::error::{Error, Result};
use crate::nn::ParamView;
use crate::ops::{self, Tensor};
use crate::params::ParamSet;
use crate::transfer::AktUnit;

pub const PARAMS_VERSION: u32 = 1;

/// Saliency map of one image, (height, width), values in [0, 1].
pub type SaliencyMap = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub use_akt: bool,
    pub use_bfd: bool,
    pub use_pretrained_general: bool,
    pub encoder_scale: EncoderScale,
    pub input_height: usize,
    pub input_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::full(EncoderScale::Tiny, 32, 64)
    }
}

impl ModelConfig {
    pub fn full(scale: EncoderScale, input_height: usize, input_width: usize) -> Self {
        ModelConfig {
            use_akt: true,
            use_bfd: true,
            use_pretrained_general: false,
            encoder_scale: scale,
            input_height,
            input_width,
        }
    }

    pub fn baseline(scale: EncoderScale, input_height: usize, input_width: usize) -> Self {
        ModelConfig {
            use_akt: false,
            use_bfd: false,
            ..Self::full(scale, input_height, input_width)
        }
    }

    pub fn with_akt(mut self, on: bool) -> Self {
        self.use_akt = on;
        self
    }

    pub fn with_bfd(mut self, on: bool) -> Self {
        self.use_bfd = on;
        self
    }

    pub fn with_pretrained_general(mut self, on: bool) -> Self {
        self.use_pretrained_general = on;
        self
    }

    /// Name of the matching ablation row.
    pub fn variant_name(&self) -> &'static str {
        match (self.use_akt, self.use_bfd, self.use_pretrained_general) {
            (true, true, _) => "Ours",
            (true, false, _) => "Baseline + AKT",
            (false, true, _) => "Baseline + BFD",
            (false, false, true) => "Baseline + PT",
            (false, false, false) => "Baseline",
        }
    }

    pub fn decoder_width(&self) -> usize {
        match self.encoder_scale {
            EncoderScale::Tiny => 16,
            EncoderScale::Paper => 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stride = self
            .encoder_scale
            .stage_specs()
            .iter()
            .map(|s| s.stride)
            .product::<usize>();
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % stride != 0
            || self.input_width % stride != 0
        {
            return Err(Error::config(format!(
                "input {}x{} must be a positive multiple of {stride}",
                self.input_height, self.input_width
            )));
        }
        Ok(())
    }

    /// Stable `key=value` rendering used in checkpoints and manifests.
    pub fn echo(&self) -> String {
        format!(
            "use_akt={}\nuse_bfd={}\nuse_pretrained_general={}\nencoder_scale={}\ninput_height={}\ninput_width={}\n",
            self.use_akt,
            self.use_bfd,
            self.use_pretrained_general,
            self.encoder_scale.as_str(),
            self.input_height,
            self.input_width
        )
    }
}

/// Named parameter collections of the model.
///
/// `general` holds the general encoder and its stage-one prediction head;
/// `decoder` holds the lateral convolutions, prediction heads and the
/// boundary / transition / interior branches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub general: ParamSet,
    pub akt: ParamSet,
    pub task: ParamSet,
    pub decoder: ParamSet,
    pub version: u32,
}

/// Which collection a parameter belongs to, derived from its name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    General,
    Akt,
    Task,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::General, ParamGroup::Akt, ParamGroup::Task, ParamGroup::Decoder];

    pub fn of(name: &str) -> Option<ParamGroup> {
        match name.split('.').next()? {
            "general" | "general_head" => Some(ParamGroup::General),
            "akt" => Some(ParamGroup::Akt),
            "task" => Some(ParamGroup::Task),
            "decoder" => Some(ParamGroup::Decoder),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::General => "general",
            ParamGroup::Akt => "akt",
            ParamGroup::Task => "task",
            ParamGroup::Decoder => "decoder",
        }
    }
}

/// True for feature-extractor parameters, which train at the base rate.
pub fn is_backbone(name: &str) -> bool {
    name.starts_with("general.") || name.starts_with("task.")
}

impl ModelParams {
    pub fn group(&self, g: ParamGroup) -> &ParamSet {
        match g {
            ParamGroup::General => &self.general,
            ParamGroup::Akt => &self.akt,
            ParamGroup::Task => &self.task,
            ParamGroup::Decoder => &self.decoder,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut ParamSet {
        match g {
            ParamGroup::General => &mut self.general,
            ParamGroup::Akt => &mut self.akt,
            ParamGroup::Task => &mut self.task,
            ParamGroup::Decoder => &mut self.decoder,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.group(ParamGroup::of(name)?).get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.group_mut(ParamGroup::of(name)?).get_mut(name)
    }

    pub fn all_finite(&self) -> bool {
        ParamGroup::ALL.iter().all(|&g| self.group(g).all_finite())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.general
            .iter()
            .chain(self.akt.iter())
            .chain(self.task.iter())
            .chain(self.decoder.iter())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub general_encoder: EncoderLayout,
    pub general_head: DecoderLayout,
    pub task_encoder: EncoderLayout,
    pub akt_units: Vec<AktUnit>,
    pub decoder: DecoderLayout,
    pub params: ModelParams,
}

pub fn build_model(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let specs = config.encoder_scale.stage_specs();
    let channels: Vec<usize> = specs.iter().map(|s| s.out_channels).collect();
    let width = config.decoder_width();

    let general_encoder = EncoderLayout::new("general", &specs, config.encoder_scale)?;
    let general_head = DecoderLayout::new("general_head", &channels, width, false)?;
    let task_encoder = EncoderLayout::new("task", &specs, config.encoder_scale)?;
    let decoder = DecoderLayout::new("decoder", &channels, width, config.use_bfd)?;
    let akt_units: Vec<AktUnit> = if config.use_akt {
        channels[..NUM_STAGES - 1]
            .iter()
            .enumerate()
            .map(|(i, &c)| AktUnit::new(format!("akt.{}", i + 1), c))
            .collect()
    } else {
        Vec::new()
    };

    let mut params = ModelParams {
        general: ParamSet::new(),
        akt: ParamSet::new(),
        task: ParamSet::new(),
        decoder: ParamSet::new(),
        version: PARAMS_VERSION,
    };
    general_encoder.create_params(&mut params.general, seed);
    general_head.create_params(&mut params.general, seed);
    task_encoder.create_params(&mut params.task, seed);
    decoder.create_params(&mut params.decoder, seed);
    for unit in &akt_units {
        unit.create_params(&mut params.akt, seed);
    }

    Ok(Model {
        config,
        seed,
        general_encoder,
        general_head,
        task_encoder,
        akt_units,
        decoder,
        params,
    })
}

/// Which parameter collections receive gradients in a task-network pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct Trainable {
    pub general: bool,
    pub task: bool,
}

impl Model {
    /// Number of scalar parameters optimised by the task objective
    /// (transfer units, task encoder and decoder).
    pub fn parameter_count(&self) -> usize {
        self.task_encoder.param_count()
            + self.decoder.param_count()
            + self.akt_units.iter().map(AktUnit::param_count).sum::<usize>()
    }

    /// Names of the parameters counted by [`Model::parameter_count`].
    pub fn task_param_names(&self) -> Vec<String> {
        [ParamGroup::Akt, ParamGroup::Task, ParamGroup::Decoder]
            .iter()
            .flat_map(|&g| self.params.group(g).names().cloned())
            .collect()
    }

    pub fn general_param_count(&self) -> usize {
        self.general_encoder.param_count() + self.general_head.param_count()
    }

    pub fn check_images(&self, images: &ImageBatch) -> Result<()> {
        let (_, c, h, w) = images.dim();
        if c != 3 {
            return Err(Error::shape(format!("expected 3-channel images, got {c}")));
        }
        if (h, w) != (self.config.input_height, self.config.input_width) {
            return Err(Error::shape(format!(
                "images are {h}x{w}, model expects {}x{}",
                self.config.input_height, self.config.input_width
            )));
        }
        Ok(())
    }

    /// Stage outputs of the general encoder as graph constants.
    pub fn general_features(&self, images: &ImageBatch) -> Result<Vec<Tensor>> {
        self.check_images(images)?;
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let levels = self
            .general_encoder
            .forward(&mut g, ParamView::new(&self.params.general, false), x)?;
        Ok(levels.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// General subnetwork with its plain prediction head.
    pub fn general_forward_graph(&self, g: &mut Graph, images: Var, trainable: bool) -> Result<BundleVars> {
        let view = ParamView::new(&self.params.general, trainable);
        let levels = self.general_encoder.forward(g, view, images)?;
        let (_, _, h, w) = g.shape(images);
        self.general_head.forward(g, view, &levels, h, w)
    }

    /// Task network. `general_features`, when given, replaces running the
    /// frozen general encoder (its stage outputs for the same images).
    pub fn task_forward_graph(
        &self,
        g: &mut Graph,
        images: Var,
        trainable: Trainable,
        general_features: Option<&[Tensor]>,
    ) -> Result<BundleVars> {
        let task_view = ParamView::new(&self.params.task, trainable.task);
        let akt_view = ParamView::new(&self.params.akt, trainable.task);
        let general_levels: Vec<Var> = if self.config.use_akt {
            match general_features {
                Some(levels) if levels.len() == NUM_STAGES && !trainable.general => {
                    levels.iter().map(|t| g.constant(t.clone())).collect()
                }
                Some(_) => return Err(Error::shape("cached general features must have five levels")),
                None => self.general_encoder.forward(
                    g,
                    ParamView::new(&self.params.general, trainable.general),
                    images,
                )?,
            }
        } else {
            Vec::new()
        };

        let mut pyramid = Vec::with_capacity(NUM_STAGES);
        let mut h = images;
        for index in 1..=NUM_STAGES {
            h = self.task_encoder.forward_stage(g, task_view, index, h)?;
            if let Some(unit) = self.akt_units.get(index - 1) {
                h = unit.forward(g, akt_view, general_levels[index - 1], h)?;
            }
            pyramid.push(h);
        }
        let (_, _, ih, iw) = g.shape(images);
        self.decoder.forward(
            g,
            ParamView::new(&self.params.decoder, trainable.task),
            &pyramid,
            ih,
            iw,
        )
    }

    /// Copies the general encoder's parameters into the task encoder.
    pub fn init_task_from_general(&mut self) -> usize {
        let general = self.params.general.clone();
        self.params.task.copy_prefixed(&general, "general.", "task.")
    }
}

pub fn forward(model: &Model, images: &ImageBatch) -> Result<PredictionBundle> {
    model.check_images(images)?;
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let vars = model.task_forward_graph(&mut g, x, Trainable::default(), None)?;
    Ok(PredictionBundle::from_vars(&g, &vars))
}

/// Resizes a (C, H, W) image bilinearly.
pub fn resize_image(image: &Array3<f64>, height: usize, width: usize) -> Array3<f64> {
    let t = image.clone().insert_axis(Axis(0));
    ops::resize_bilinear(&t, height, width).index_axis_move(Axis(0), 0)
}

/// Saliency map of one image at its original size: the finest-stage
/// prediction of the task network. Accepts 1- or 3-channel images of any size.
pub fn infer(model: &Model, image: &Array3<f64>) -> Result<SaliencyMap> {
    let (c, h, w) = image.dim();
    let rgb = match c {
        3 => image.clone(),
        1 => ndarray::concatenate(Axis(0), &[image.view(), image.view(), image.view()])
            .expect("same shapes"),
        _ => return Err(Error::shape(format!("expected 1 or 3 channels, got {c}"))),
    };
    let (mh, mw) = (model.config.input_height, model.config.input_width);
    let input = resize_image(&rgb, mh, mw).insert_axis(Axis(0));
    let bundle = forward(model, &input)?;
    let m0 = bundle.m0[0].slice(s![0..1, .., .., ..]).to_owned();
    let out = ops::resize_bilinear(&m0, h, w);
    Ok(out
        .index_axis_move(Axis(0), 0)
        .index_axis_move(Axis(0), 0)
        .mapv(|v| v.clamp(0.0, 1.0)))
}
