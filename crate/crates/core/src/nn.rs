//! Layer descriptors. Each descriptor knows the names and shapes of its
//! parameters, can create them in a [`ParamSet`], and can apply itself on a
//! [`Graph`] by binding those parameters.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::ConvGeom;
use crate::params::{init_tensor, Init, ParamSet};

/// Read access to a parameter collection plus whether it receives gradients.
#[derive(Clone, Copy)]
pub struct ParamView<'a> {
    pub set: &'a ParamSet,
    pub trainable: bool,
}

impl<'a> ParamView<'a> {
    pub fn new(set: &'a ParamSet, trainable: bool) -> Self {
        ParamView { set, trainable }
    }

    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let t = self
            .set
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))?;
        Ok(g.param(name, t, self.trainable))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub geom: ConvGeom,
    pub bias: bool,
    pub init: Init,
}

impl Conv {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Conv {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            geom: ConvGeom::same(kernel, 1, 1),
            bias: true,
            init: Init::He { gain: 1.0 },
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.geom = ConvGeom::same(self.kernel, stride, self.geom.dilation);
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.geom = ConvGeom::same(self.kernel, self.geom.stride, dilation);
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + if self.bias { self.out_ch } else { 0 }
    }

    pub fn create(&self, set: &mut ParamSet, seed: u64) {
        let w = self.weight_name();
        set.insert(
            w.clone(),
            init_tensor(&w, (self.out_ch, self.in_ch, self.kernel, self.kernel), self.init, seed),
        );
        if self.bias {
            set.insert(self.bias_name(), init_tensor("", (1, self.out_ch, 1, 1), Init::Zeros, seed));
        }
    }

    pub fn forward(&self, g: &mut Graph, p: ParamView, x: Var) -> Result<Var> {
        let w = p.bind(g, &self.weight_name())?;
        let b = if self.bias {
            Some(p.bind(g, &self.bias_name())?)
        } else {
            None
        };
        g.conv2d(x, w, b, self.geom)
    }
}

/// Transposed convolution with kernel size equal to its stride.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
}

impl ConvTranspose {
    pub fn param_count(&self) -> usize {
        self.in_ch * self.out_ch * self.stride * self.stride + self.out_ch
    }

    pub fn create(&self, set: &mut ParamSet, seed: u64) {
        let w = format!("{}.weight", self.name);
        // Fan-in of a stride-s, kernel-s transposed conv is in_ch per output tap.
        let t = init_tensor(&w, (self.in_ch, self.out_ch, self.stride, self.stride), Init::He { gain: 1.0 }, seed)
            * ((self.out_ch * self.stride * self.stride) as f64 / self.in_ch as f64).sqrt();
        set.insert(w, t);
        set.insert(format!("{}.bias", self.name), init_tensor("", (1, self.out_ch, 1, 1), Init::Zeros, seed));
    }

    pub fn forward(&self, g: &mut Graph, p: ParamView, x: Var) -> Result<Var> {
        let w = p.bind(g, &format!("{}.weight", self.name))?;
        let b = p.bind(g, &format!("{}.bias", self.name))?;
        g.conv_transpose2d(x, w, Some(b), self.stride)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Group normalisation over groups of channels of each sample.
    Group { groups: usize },
    /// Per-channel affine map, the inference form of batch normalisation with
    /// statistics folded into scale and shift.
    FrozenBatch,
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub name: String,
    pub channels: usize,
    pub kind: NormKind,
}

impl Norm {
    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn create(&self, set: &mut ParamSet, seed: u64) {
        set.insert(format!("{}.gamma", self.name), init_tensor("", (1, self.channels, 1, 1), Init::Ones, seed));
        set.insert(format!("{}.beta", self.name), init_tensor("", (1, self.channels, 1, 1), Init::Zeros, seed));
    }

    pub fn forward(&self, g: &mut Graph, p: ParamView, x: Var) -> Result<Var> {
        let gamma = p.bind(g, &format!("{}.gamma", self.name))?;
        let beta = p.bind(g, &format!("{}.beta", self.name))?;
        match self.kind {
            NormKind::Group { groups } => g.group_norm(x, gamma, beta, groups),
            NormKind::FrozenBatch => g.affine(x, gamma, beta),
        }
    }
}

/// Largest group count not above `preferred` that divides `channels`.
pub fn group_count(channels: usize, preferred: usize) -> usize {
    (1..=preferred.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}
