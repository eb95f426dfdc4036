//! The two-stage optimisation protocol.
//!
//! Stage one trains the general subnetwork with a plain prediction head on
//! conventional saliency data. Stage two freezes it and trains the transfer
//! units, the task-specific encoder and the decoder under the staged
//! objective. The frozen general features of each (image, mirroring) pair are
//! computed once and reused.

mod config;
mod data;
mod gradcheck;
mod sgd;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, error, info};
use ndarray::{concatenate, Array3, Axis};

use crate::autograd::{Gradients, Graph};
use crate::checkpoint::Checkpoint;
use crate::encoder::ImageBatch;
use crate::error::{Error, Result};
use crate::model::{forward, Model, ParamGroup, Trainable};
use crate::ops::Tensor;
use crate::params::ParamSet;
use crate::supervision::{total_loss_graph, GroundTruthTriple, LossTerms, Targets};

pub use config::{Profile, Stage, TrainConfig, KEYS as CONFIG_KEYS};
pub use data::{augment, flip_image, flip_mask, load_samples, resize_mask_nearest, BatchSampler, Sample};
pub use gradcheck::{
    grad_check, relative_error_floor, GradCheckOptions, GradCheckReport, GroupCheck, GRAD_CHECK_FLOOR,
    GRAD_CHECK_TOLERANCE,
};
pub use sgd::Sgd;

/// Where a run writes its log and checkpoints; `None` writes nothing.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
}

impl TrainOutputs {
    pub fn to(dir: impl Into<PathBuf>) -> Self {
        TrainOutputs { dir: Some(dir.into()) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub iterations_run: usize,
    pub losses: Vec<f64>,
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
    /// Training-set MAE after the last update.
    pub final_train_mae: f64,
    /// Digest of the general subnetwork before and after the run.
    pub general_digest_before: String,
    pub general_digest_after: String,
    pub checkpoints: Vec<PathBuf>,
    pub stopped_early: bool,
}

/// Training pairs at model resolution in both orientations, with their
/// ground-truth triples.
struct Prepared {
    images: [Vec<Array3<f64>>; 2],
    triples: [Vec<GroundTruthTriple>; 2],
}

impl Prepared {
    fn new(data: &[Sample], shape: (usize, usize)) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::data("training set is empty"));
        }
        let mut images: [Vec<Array3<f64>>; 2] = [Vec::new(), Vec::new()];
        let mut triples: [Vec<GroundTruthTriple>; 2] = [Vec::new(), Vec::new()];
        for s in data {
            if s.image.dim().0 != 3 {
                return Err(Error::shape(format!("expected RGB images, got {} channels", s.image.dim().0)));
            }
            let (img, mask) = augment(&s.image, &s.mask, shape, false)?;
            triples[0].push(GroundTruthTriple::from_mask(&mask));
            triples[1].push(GroundTruthTriple::from_mask(&flip_mask(&mask)));
            images[1].push(flip_image(&img));
            images[0].push(img);
        }
        Ok(Prepared { images, triples })
    }

    fn len(&self) -> usize {
        self.images[0].len()
    }

    fn batch(&self, draws: &[(usize, bool)]) -> Result<(ImageBatch, Targets)> {
        let views: Vec<_> = draws
            .iter()
            .map(|&(i, f)| self.images[f as usize][i].view().insert_axis(Axis(0)))
            .collect();
        let images = concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
        let triples: Vec<GroundTruthTriple> = draws
            .iter()
            .map(|&(i, f)| self.triples[f as usize][i].clone())
            .collect();
        Ok((images, Targets::from_triples(&triples)?))
    }

    fn probe(&self, batch_size: usize) -> Vec<(usize, bool)> {
        (0..batch_size.min(self.len())).map(|i| (i, false)).collect()
    }
}

struct RunLog {
    file: Option<File>,
}

impl RunLog {
    const HEADER: &'static str = "iteration,loss,loss_m0,loss_mb,loss_mi";

    fn open(dir: Option<&Path>, name: &str) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(RunLog { file: None });
        };
        crate::io::ensure_dir(dir)?;
        let path = dir.join(name);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let empty = file.metadata().map(|m| m.len() == 0).unwrap_or(true);
        if empty {
            writeln!(file, "{}", Self::HEADER).map_err(|e| Error::io(&path, e))?;
        }
        Ok(RunLog { file: Some(file) })
    }

    fn record(&mut self, iteration: usize, terms: &LossTerms) {
        if let Some(f) = &mut self.file {
            // Terms a variant does not have are left empty.
            let s = |v: &[f64]| {
                if v.is_empty() {
                    String::new()
                } else {
                    format!("{:.9}", v.iter().sum::<f64>())
                }
            };
            // A failed log write must not abort training; it is reported once per line.
            if let Err(e) = writeln!(
                f,
                "{iteration},{:.9},{},{},{}",
                terms.total(),
                s(&terms.m0),
                s(&terms.m_b),
                s(&terms.m_i)
            ) {
                error!("training log write failed: {e}");
            }
        }
    }
}

fn check_stage(config: &TrainConfig, want: Stage) -> Result<()> {
    config.validate()?;
    if config.stage != want {
        return Err(Error::config(format!(
            "config is for the {} stage, expected {}",
            config.stage, want
        )));
    }
    Ok(())
}

fn check_resolution(config: &TrainConfig, model: &Model) -> Result<()> {
    let c = &model.config;
    if (c.input_height, c.input_width, c.encoder_scale) != (config.height, config.width, config.encoder_scale) {
        return Err(Error::config(format!(
            "model is {}x{} ({}), config asks for {}x{} ({})",
            c.input_height,
            c.input_width,
            c.encoder_scale.as_str(),
            config.height,
            config.width,
            config.encoder_scale.as_str()
        )));
    }
    Ok(())
}

fn diverged(iteration: usize, loss: f64, terms: &LossTerms) -> Error {
    debug!(
        "non-finite loss at iteration {iteration}: m0 {:?} boundary {:?} interior {:?}",
        terms.m0, terms.m_b, terms.m_i
    );
    Error::Divergence { iteration, loss }
}

/// Mean absolute error of the finest prediction over the prepared
/// (unmirrored) training images.
fn training_mae(model: &Model, data: &Prepared, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut pixels = 0usize;
    let n = data.len();
    for start in (0..n).step_by(batch_size.max(1)) {
        let draws: Vec<(usize, bool)> = (start..(start + batch_size).min(n)).map(|i| (i, false)).collect();
        let (images, targets) = data.batch(&draws)?;
        let bundle = forward(model, &images)?;
        let pred = bundle.m0[0].mapv(|v| v.clamp(0.0, 1.0));
        total += (&pred - &targets.g0).mapv(f64::abs).sum();
        pixels += pred.len();
    }
    Ok(total / pixels as f64)
}

/// Training-set MAE of `model` on `data` (resized to model resolution).
pub fn train_set_mae(model: &Model, data: &[Sample]) -> Result<f64> {
    let prepared = Prepared::new(data, (model.config.input_height, model.config.input_width))?;
    training_mae(model, &prepared, 4)
}

struct Checkpointer<'a> {
    dir: Option<&'a Path>,
    interval: usize,
    groups: &'a [ParamGroup],
    written: Vec<PathBuf>,
}

impl Checkpointer<'_> {
    fn maybe(&mut self, model: &Model, done: usize, last: bool) -> Result<()> {
        let Some(dir) = self.dir else { return Ok(()) };
        if done % self.interval == 0 || last {
            let name = if last {
                "final.ckpt".to_string()
            } else {
                format!("iter{done:07}.ckpt")
            };
            let path = dir.join(name);
            Checkpoint::from_model(model, self.groups, done as u64).save(&path)?;
            self.written.push(path);
        }
        Ok(())
    }
}

fn general_objective(
    model: &Model,
    images: &ImageBatch,
    targets: &Targets,
    trainable: bool,
) -> Result<(f64, LossTerms, Option<Gradients>)> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let bundle = model.general_forward_graph(&mut g, x, trainable)?;
    let (root, terms) = total_loss_graph(&mut g, &bundle, targets)?;
    let loss = g.scalar(root);
    let grads = trainable.then(|| g.backward(root));
    Ok((loss, terms, grads))
}

/// Stage one: trains the general encoder and its plain head.
pub fn train_general(config: &TrainConfig, data: &[Sample], model: &mut Model, out: &TrainOutputs) -> Result<TrainReport> {
    check_stage(config, Stage::General)?;
    check_resolution(config, model)?;
    let prepared = Prepared::new(data, (config.height, config.width))?;
    let mut sampler = BatchSampler::new(prepared.len(), config.batch_size, config.flip, config.seed)?;
    let mut sgd = Sgd::new(config);
    let mut log = RunLog::open(out.dir.as_deref(), "train_general.csv")?;
    let mut ckpt = Checkpointer {
        dir: out.dir.as_deref(),
        interval: config.checkpoint_interval(),
        groups: &[ParamGroup::General],
        written: Vec::new(),
    };
    let (probe_images, probe_targets) = prepared.batch(&prepared.probe(config.batch_size))?;
    let initial_probe_loss = general_objective(model, &probe_images, &probe_targets, false)?.0;
    let digest_before = model.params.general.digest();
    let mut losses = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        let (images, targets) = prepared.batch(&sampler.next_batch())?;
        let (loss, terms, grads) = general_objective(model, &images, &targets, true)?;
        if !loss.is_finite() {
            return Err(diverged(it, loss, &terms));
        }
        sgd.step(&mut model.params, &grads.expect("trainable pass"))?;
        if !model.params.general.all_finite() {
            return Err(diverged(it, f64::NAN, &terms));
        }
        log.record(it + 1, &terms);
        losses.push(loss);
        if (it + 1) % 50 == 0 {
            debug!("general iteration {} loss {loss:.5}", it + 1);
        }
        ckpt.maybe(model, it + 1, it + 1 == config.iterations)?;
    }
    let final_probe_loss = general_objective(model, &probe_images, &probe_targets, false)?.0;
    info!("general stage: probe loss {initial_probe_loss:.5} -> {final_probe_loss:.5}");
    Ok(TrainReport {
        iterations_run: config.iterations,
        losses,
        initial_probe_loss,
        final_probe_loss,
        final_train_mae: f64::NAN,
        general_digest_after: model.params.general.digest(),
        general_digest_before: digest_before,
        checkpoints: ckpt.written,
        stopped_early: false,
    })
}

/// Installs trained general parameters; every general tensor of the model
/// must be supplied with a matching shape.
pub fn install_general(model: &mut Model, general: &ParamSet) -> Result<()> {
    let mut missing = Vec::new();
    for (name, slot) in model.params.general.iter_mut() {
        match general.get(name) {
            Some(t) if t.dim() == slot.dim() => slot.assign(t),
            Some(_) => return Err(Error::config(format!("general parameter {name} has the wrong shape"))),
            None => missing.push(name.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::config(format!(
            "missing general parameters ({} absent, e.g. {})",
            missing.len(),
            missing[0]
        )));
    }
    Ok(())
}

struct FeatureCache {
    levels: HashMap<(usize, bool), Vec<Tensor>>,
}

impl FeatureCache {
    fn batch(&mut self, model: &Model, data: &Prepared, draws: &[(usize, bool)]) -> Result<Vec<Tensor>> {
        for &(i, f) in draws {
            if !self.levels.contains_key(&(i, f)) {
                let img = data.images[f as usize][i].clone().insert_axis(Axis(0));
                self.levels.insert((i, f), model.general_features(&img)?);
            }
        }
        let n_levels = self.levels[&draws[0]].len();
        (0..n_levels)
            .map(|l| {
                let parts: Vec<_> = draws.iter().map(|d| self.levels[d][l].view()).collect();
                concatenate(Axis(0), &parts).map_err(|e| Error::shape(e.to_string()))
            })
            .collect()
    }
}

fn task_objective(
    model: &Model,
    images: &ImageBatch,
    targets: &Targets,
    cached: Option<&[Tensor]>,
    trainable: bool,
) -> Result<(f64, LossTerms, Option<Gradients>)> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let flags = Trainable {
        general: false,
        task: trainable,
    };
    let bundle = model.task_forward_graph(&mut g, x, flags, cached)?;
    let (root, terms) = total_loss_graph(&mut g, &bundle, targets)?;
    let loss = g.scalar(root);
    Ok((loss, terms, trainable.then(|| g.backward(root))))
}

/// Stage two: freezes the general subnetwork and trains everything else.
///
/// `frozen_general` is required when the variant uses transfer units or
/// pretrained initialisation of the task encoder.
pub fn train_task(
    config: &TrainConfig,
    data: &[Sample],
    model: &mut Model,
    frozen_general: Option<&ParamSet>,
    out: &TrainOutputs,
) -> Result<TrainReport> {
    check_stage(config, Stage::Task)?;
    if model.config != config.model_config() {
        return Err(Error::config(format!(
            "model variant differs from the config:\n{}vs\n{}",
            model.config.echo(),
            config.model_config().echo()
        )));
    }
    let needs_general = config.use_akt || config.use_pretrained_general;
    match frozen_general {
        Some(general) => install_general(model, general)?,
        None if needs_general => {
            return Err(Error::config(format!(
                "missing general parameters: the {} variant needs a trained general subnetwork",
                config.model_config().variant_name()
            )))
        }
        None => {}
    }
    if config.use_pretrained_general {
        model.init_task_from_general();
    }

    let prepared = Prepared::new(data, (config.height, config.width))?;
    let mut sampler = BatchSampler::new(prepared.len(), config.batch_size, config.flip, config.seed)?;
    let mut sgd = Sgd::new(config);
    let mut log = RunLog::open(out.dir.as_deref(), "train_task.csv")?;
    let mut ckpt = Checkpointer {
        dir: out.dir.as_deref(),
        interval: config.checkpoint_interval(),
        groups: &ParamGroup::ALL,
        written: Vec::new(),
    };
    let mut cache = FeatureCache { levels: HashMap::new() };
    let use_cache = config.use_akt;

    let probe = prepared.probe(config.batch_size);
    let (probe_images, probe_targets) = prepared.batch(&probe)?;
    let probe_features = if use_cache {
        Some(cache.batch(model, &prepared, &probe)?)
    } else {
        None
    };
    let initial_probe_loss = task_objective(model, &probe_images, &probe_targets, probe_features.as_deref(), false)?.0;
    let digest_before = model.params.general.digest();

    let mut losses = Vec::with_capacity(config.iterations);
    let mut stopped_early = false;
    let mut done = 0;
    while done < config.iterations {
        let draws = sampler.next_batch();
        let (images, targets) = prepared.batch(&draws)?;
        let features = if use_cache {
            Some(cache.batch(model, &prepared, &draws)?)
        } else {
            None
        };
        let (loss, terms, grads) = task_objective(model, &images, &targets, features.as_deref(), true)?;
        if !loss.is_finite() {
            return Err(diverged(done, loss, &terms));
        }
        sgd.step(&mut model.params, &grads.expect("trainable pass"))?;
        done += 1;
        if !model.params.all_finite() {
            return Err(diverged(done, f64::NAN, &terms));
        }
        log.record(done, &terms);
        losses.push(loss);

        let check_now = config.target_mae > 0.0 && config.eval_every > 0 && done % config.eval_every == 0;
        if check_now {
            let mae = training_mae(model, &prepared, config.batch_size)?;
            debug!("task iteration {done} loss {loss:.5} train MAE {mae:.4}");
            if mae < config.target_mae {
                stopped_early = done < config.iterations;
                ckpt.maybe(model, done, true)?;
                break;
            }
        }
        ckpt.maybe(model, done, done == config.iterations)?;
    }
    let digest_after = model.params.general.digest();
    if digest_after != digest_before {
        return Err(Error::config("general subnetwork changed during task training"));
    }
    let final_probe_loss = task_objective(model, &probe_images, &probe_targets, probe_features.as_deref(), false)?.0;
    let final_train_mae = training_mae(model, &prepared, config.batch_size)?;
    info!("task stage: {done} iterations, probe loss {initial_probe_loss:.5} -> {final_probe_loss:.5}, train MAE {final_train_mae:.4}");
    Ok(TrainReport {
        iterations_run: done,
        losses,
        initial_probe_loss,
        final_probe_loss,
        final_train_mae,
        general_digest_before: digest_before,
        general_digest_after: digest_after,
        checkpoints: ckpt.written,
        stopped_early,
    })
}
