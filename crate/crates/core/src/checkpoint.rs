//! Binary parameter snapshots.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "TSODCKPT"
//! version  u32
//! config   u32 length + UTF-8 model config echo (key=value lines)
//! seed     u64
//! iter     u64      iterations completed
//! count    u32      number of tensors
//! tensor   u32 name length + UTF-8 name, 4 x u32 dims, f64 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::encoder::EncoderScale;
use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig, ModelParams, ParamGroup};
use crate::ops::Tensor;
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"TSODCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub iteration: u64,
    pub params: ParamSet,
}

impl ModelConfig {
    /// Inverse of [`ModelConfig::echo`].
    pub fn from_echo(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = 0;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad config line {line:?}")))?;
            let flag = |v: &str| {
                v.parse::<bool>()
                    .map_err(|_| Error::Checkpoint(format!("{k}: expected true/false, got {v:?}")))
            };
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("{k}: expected an integer, got {v:?}")))
            };
            match k {
                "use_akt" => cfg.use_akt = flag(v)?,
                "use_bfd" => cfg.use_bfd = flag(v)?,
                "use_pretrained_general" => cfg.use_pretrained_general = flag(v)?,
                "encoder_scale" => cfg.encoder_scale = EncoderScale::parse(v)?,
                "input_height" => cfg.input_height = num(v)?,
                "input_width" => cfg.input_width = num(v)?,
                other => return Err(Error::Checkpoint(format!("unknown config key {other:?}"))),
            }
            seen += 1;
        }
        if seen != 6 {
            return Err(Error::Checkpoint(format!("config echo has {seen} of 6 keys")));
        }
        Ok(cfg)
    }
}

fn write_str(out: &mut impl Write, s: &str) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(s.len() as u32)?;
    out.write_all(s.as_bytes())
}

fn read_str(input: &mut impl Read) -> Result<String> {
    let len = input.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf).map_err(trunc)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
}

fn trunc(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated or unreadable: {e}"))
}

impl Checkpoint {
    pub fn from_model(model: &Model, groups: &[ParamGroup], iteration: u64) -> Self {
        let params = groups
            .iter()
            .flat_map(|&g| model.params.group(g).iter())
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        Checkpoint {
            config: model.config,
            seed: model.seed,
            iteration,
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        write_str(out, &self.config.echo())?;
        out.write_u64::<LittleEndian>(self.seed)?;
        out.write_u64::<LittleEndian>(self.iteration)?;
        out.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, t) in self.params.iter() {
            write_str(out, name)?;
            for &d in t.shape() {
                out.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.iter() {
                out.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut input = bytes;
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(trunc)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = input.read_u32::<LittleEndian>().map_err(trunc)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let config = ModelConfig::from_echo(&read_str(&mut input)?)?;
        let seed = input.read_u64::<LittleEndian>().map_err(trunc)?;
        let iteration = input.read_u64::<LittleEndian>().map_err(trunc)?;
        let count = input.read_u32::<LittleEndian>().map_err(trunc)?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name = read_str(&mut input)?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = input.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            }
            let n: usize = dims.iter().product();
            if n * 8 > input.len() {
                return Err(Error::Checkpoint(format!("{name}: tensor data truncated")));
            }
            let mut data = vec![0.0; n];
            input.read_f64_into::<LittleEndian>(&mut data).map_err(trunc)?;
            let t = Tensor::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            params.insert(name, t);
        }
        if !input.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", input.len())));
        }
        Ok(Checkpoint {
            config,
            seed,
            iteration,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            crate::io::ensure_dir(parent)?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the stored config equals `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.config != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written for a different model:\n{}expected:\n{}",
                self.config.echo(),
                expected.echo()
            )));
        }
        Ok(())
    }

    /// Copies the stored tensors into `params`; every stored name must exist
    /// with the same shape.
    pub fn apply(&self, params: &mut ModelParams) -> Result<usize> {
        for (name, t) in self.params.iter() {
            let slot = params
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if slot.dim() != t.dim() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.assign(t);
        }
        Ok(self.params.len())
    }

    /// Rebuilds the model the checkpoint was written for and loads it.
    pub fn into_model(self) -> Result<Model> {
        let mut model = build_model(self.config, self.seed)?;
        self.apply(&mut model.params)?;
        Ok(model)
    }
}
