use std::collections::HashMap;

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::model::{is_backbone, ModelParams};
use crate::ops::Tensor;

use super::TrainConfig;

/// Momentum SGD with coupled weight decay (`v = m·v + g + λ·p`,
/// `p -= lr·v`). Backbone parameters use the base rate; all others use the
/// base rate times the head multiplier.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub head_lr_multiplier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn new(config: &TrainConfig) -> Self {
        Sgd {
            learning_rate: config.learning_rate,
            head_lr_multiplier: config.head_lr_multiplier,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        if is_backbone(name) {
            self.learning_rate
        } else {
            self.learning_rate * self.head_lr_multiplier
        }
    }

    /// Updates every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        let mut names: Vec<&String> = grads.keys().collect();
        names.sort();
        for name in names {
            let grad = &grads[name];
            let lr = self.lr_for(name);
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::shape(format!("gradient for unknown parameter {name}")))?;
            if p.dim() != grad.dim() {
                return Err(Error::shape(format!("{name}: gradient shape differs from parameter")));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.dim()));
            let (m, wd) = (self.momentum, self.weight_decay);
            ndarray::Zip::from(&mut *v)
                .and(&*p)
                .and(grad)
                .for_each(|v, &p, &g| *v = m * *v + g + wd * p);
            ndarray::Zip::from(p).and(&*v).for_each(|p, &v| *p -= lr * v);
        }
        Ok(())
    }
}
