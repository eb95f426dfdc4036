//! Training configuration as a human-readable `key=value` file.
//!
//! One key per line; `#` starts a comment; blank lines are ignored. A
//! `profile=` line (anywhere in the file) selects the defaults that the other
//! keys then override. Unknown keys are rejected.
//!
//! | key | meaning |
//! |---|---|
//! | `profile` | `desk` (tiny encoder, 32x64) or `paper` (full-size backbone, 256x512) |
//! | `stage` | `general` or `task` |
//! | `learning_rate` | base rate of the backbone parameters |
//! | `head_lr_multiplier` | rate multiplier of every non-backbone parameter |
//! | `weight_decay`, `momentum` | SGD hyper-parameters |
//! | `batch_size`, `iterations` | mini-batch size and number of updates |
//! | `height`, `width` | training resolution |
//! | `flip` | random horizontal flips (`true`/`false`) |
//! | `seed` | initialisation and data-order seed |
//! | `encoder_scale` | `tiny` or `paper` |
//! | `use_akt`, `use_bfd`, `use_pretrained_general` | ablation switches |
//! | `checkpoint_every` | iterations between checkpoints; 0 means every 10 % |
//! | `target_mae` | stop early once the training-set MAE falls below it; 0 disables |
//! | `eval_every` | iterations between training-set MAE checks |

use std::fmt;
use std::str::FromStr;

use crate::encoder::EncoderScale;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    General,
    Task,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::General => "general",
            Stage::Task => "task",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(Stage::General),
            "task" => Ok(Stage::Task),
            other => Err(Error::config(format!("stage must be general or task, got {other:?}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::config(format!("profile must be desk or paper, got {other:?}"))),
        }
    }
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    pub stage: Stage,
    pub learning_rate: f64,
    pub head_lr_multiplier: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub height: usize,
    pub width: usize,
    pub flip: bool,
    pub seed: u64,
    pub encoder_scale: EncoderScale,
    pub use_akt: bool,
    pub use_bfd: bool,
    pub use_pretrained_general: bool,
    pub checkpoint_every: usize,
    pub target_mae: f64,
    pub eval_every: usize,
}

pub const KEYS: &[&str] = &[
    "profile",
    "stage",
    "learning_rate",
    "head_lr_multiplier",
    "weight_decay",
    "momentum",
    "batch_size",
    "iterations",
    "height",
    "width",
    "flip",
    "seed",
    "encoder_scale",
    "use_akt",
    "use_bfd",
    "use_pretrained_general",
    "checkpoint_every",
    "target_mae",
    "eval_every",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("{key}={value}: {e}")))
}

impl TrainConfig {
    /// Settings of the published protocol: base rate 1e-3 with a tenfold
    /// rate for non-backbone layers, weight decay 5e-4, momentum 0.9,
    /// batches of 4 at 256x512, 50k general and 200k task iterations.
    pub fn paper(stage: Stage) -> Self {
        TrainConfig {
            profile: Profile::Paper,
            stage,
            learning_rate: 1e-3,
            head_lr_multiplier: 10.0,
            weight_decay: 5e-4,
            momentum: 0.9,
            batch_size: 4,
            iterations: match stage {
                Stage::General => 50_000,
                Stage::Task => 200_000,
            },
            height: 256,
            width: 512,
            flip: true,
            seed: 0,
            encoder_scale: EncoderScale::Paper,
            use_akt: true,
            use_bfd: true,
            use_pretrained_general: false,
            checkpoint_every: 0,
            target_mae: 0.0,
            eval_every: 1000,
        }
    }

    /// Tiny encoder at 32x64 with a short budget. The base rate is raised to
    /// 1e-2 so the short runs make visible progress; everything else matches
    /// the published protocol.
    pub fn desk(stage: Stage) -> Self {
        TrainConfig {
            profile: Profile::Desk,
            learning_rate: 1e-2,
            iterations: match stage {
                Stage::General => 300,
                Stage::Task => 2000,
            },
            height: 32,
            width: 64,
            encoder_scale: EncoderScale::Tiny,
            eval_every: 50,
            ..Self::paper(stage)
        }
    }

    pub fn for_profile(profile: Profile, stage: Stage) -> Self {
        match profile {
            Profile::Desk => Self::desk(stage),
            Profile::Paper => Self::paper(stage),
        }
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "profile" => {
                let profile: Profile = value.parse()?;
                if profile != self.profile {
                    *self = Self::for_profile(profile, self.stage);
                }
            }
            "stage" => self.stage = value.parse()?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "head_lr_multiplier" => self.head_lr_multiplier = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "iterations" => self.iterations = parse_value(key, value)?,
            "height" => self.height = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "flip" => self.flip = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "encoder_scale" => self.encoder_scale = EncoderScale::parse(value)?,
            "use_akt" => self.use_akt = parse_value(key, value)?,
            "use_bfd" => self.use_bfd = parse_value(key, value)?,
            "use_pretrained_general" => self.use_pretrained_general = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "target_mae" => self.target_mae = parse_value(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` line; comments and blank lines are no-ops.
    pub fn apply_line(&mut self, line: &str) -> Result<()> {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            return Ok(());
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key=value, got {line:?}")))?;
        self.set(key, value)
    }

    /// Parses a config file on top of `base`; a `profile=` line is applied
    /// before all other keys.
    pub fn parse_onto(mut base: TrainConfig, text: &str) -> Result<Self> {
        let is_profile = |l: &str| {
            let body = l.split('#').next().unwrap_or("");
            body.split_once('=').is_some_and(|(k, _)| k.trim() == "profile")
        };
        for line in text.lines().filter(|l| is_profile(l)) {
            base.apply_line(line)?;
        }
        for line in text.lines().filter(|l| !is_profile(l)) {
            base.apply_line(line)?;
        }
        base.validate()?;
        Ok(base)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::config(what.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and nonnegative");
        }
        if !(self.head_lr_multiplier.is_finite() && self.head_lr_multiplier >= 0.0) {
            return bad("head_lr_multiplier must be finite and nonnegative");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.target_mae.is_finite() && self.target_mae >= 0.0) {
            return bad("target_mae must be finite and nonnegative");
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            use_akt: self.use_akt,
            use_bfd: self.use_bfd,
            use_pretrained_general: self.use_pretrained_general,
            encoder_scale: self.encoder_scale,
            input_height: self.height,
            input_width: self.width,
        }
    }

    /// Iterations between checkpoints.
    pub fn checkpoint_interval(&self) -> usize {
        if self.checkpoint_every > 0 {
            self.checkpoint_every
        } else {
            (self.iterations / 10).max(1)
        }
    }

    /// Every key with its resolved value, in [`KEYS`] order.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = match *key {
                "profile" => self.profile.as_str().to_string(),
                "stage" => self.stage.to_string(),
                "learning_rate" => self.learning_rate.to_string(),
                "head_lr_multiplier" => self.head_lr_multiplier.to_string(),
                "weight_decay" => self.weight_decay.to_string(),
                "momentum" => self.momentum.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "iterations" => self.iterations.to_string(),
                "height" => self.height.to_string(),
                "width" => self.width.to_string(),
                "flip" => self.flip.to_string(),
                "seed" => self.seed.to_string(),
                "encoder_scale" => self.encoder_scale.as_str().to_string(),
                "use_akt" => self.use_akt.to_string(),
                "use_bfd" => self.use_bfd.to_string(),
                "use_pretrained_general" => self.use_pretrained_general.to_string(),
                "checkpoint_every" => self.checkpoint_every.to_string(),
                "target_mae" => self.target_mae.to_string(),
                "eval_every" => self.eval_every.to_string(),
                _ => unreachable!("every key is rendered"),
            };
            out.push_str(&format!("{key}={value}\n"));
        }
        out
    }
}
