//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes that do not
//! depend on a trainable leaf are marked constant and skipped by
//! [`Graph::backward`], so frozen subnetworks cost nothing on the way back.

use std::collections::HashMap;

use ndarray::{Array3, Axis};

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Backward = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    requires_grad: bool,
    backward: Option<Backward>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`], keyed by parameter name.
pub type Gradients = HashMap<String, Tensor>;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize, usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), false, None)
    }

    /// Binds a named parameter as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, name: &str, value: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Vec::new(), trainable, None);
        self.params.insert(name.to_string(), v);
        v
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        requires_grad: bool,
        backward: Option<Backward>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    fn op(&mut self, value: Tensor, parents: Vec<Var>, backward: Backward) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward = requires_grad.then_some(backward);
        self.push(value, parents, requires_grad, backward)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.op(
            y,
            parents,
            Box::new(move |dy, p, _| {
                let (dx, dw, db) = ops::conv2d_backward(p[0], p[1], dy, geom);
                let mut out = vec![Some(dx), Some(dw)];
                if p.len() == 3 {
                    out.push(Some(db));
                }
                out
            }),
        ))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let y = ops::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.op(
            y,
            parents,
            Box::new(move |dy, p, _| {
                let (dx, dw, db) = ops::conv_transpose2d_backward(p[0], p[1], dy, stride);
                let mut out = vec![Some(dx), Some(dw)];
                if p.len() == 3 {
                    out.push(Some(db));
                }
                out
            }),
        ))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let y = ops::group_norm(self.value(x), self.value(gamma), self.value(beta), groups)?;
        Ok(self.op(
            y,
            vec![x, gamma, beta],
            Box::new(move |dy, p, _| {
                let (dx, dg, db) = ops::group_norm_backward(p[0], p[1], groups, dy);
                vec![Some(dx), Some(dg), Some(db)]
            }),
        ))
    }

    /// Per-channel affine map `x * scale + shift`, both of shape (1, C, 1, 1).
    pub fn affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let y = self.mul(x, scale)?;
        self.add(y, shift)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.max(0.0));
        self.op(
            y,
            vec![x],
            Box::new(|dy, p, _| {
                let mut dx = dy.clone();
                dx.zip_mut_with(p[0], |d, &xv| {
                    if xv <= 0.0 {
                        *d = 0.0
                    }
                });
                vec![Some(dx)]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(ops::sigmoid);
        self.op(
            y,
            vec![x],
            Box::new(|dy, _, out| {
                let mut dx = dy.clone();
                dx.zip_mut_with(out, |d, &s| *d *= s * (1.0 - s));
                vec![Some(dx)]
            }),
        )
    }

    /// `a + b`, where `b` may broadcast along any axis of length 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !ops::broadcast_compatible(va, vb) {
            return Err(Error::shape(format!(
                "add: {:?} does not broadcast onto {:?}",
                vb.shape(),
                va.shape()
            )));
        }
        let y = va + vb;
        Ok(self.op(
            y,
            vec![a, b],
            Box::new(|dy, p, _| vec![Some(dy.clone()), Some(ops::reduce_to(dy, p[1].raw_dim()))]),
        ))
    }

    /// `a * b` elementwise, where `b` may broadcast along any axis of length 1.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !ops::broadcast_compatible(va, vb) {
            return Err(Error::shape(format!(
                "mul: {:?} does not broadcast onto {:?}",
                vb.shape(),
                va.shape()
            )));
        }
        let y = va * vb;
        Ok(self.op(
            y,
            vec![a, b],
            Box::new(|dy, p, _| {
                let da = dy * p[1];
                let db = ops::reduce_to(&(dy * p[0]), p[1].raw_dim());
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let widths: Vec<usize> = values.iter().map(|t| t.dim().1).collect();
        let y = ops::concat_channels(&values)?;
        Ok(self.op(
            y,
            parts.to_vec(),
            Box::new(move |dy, _, _| {
                let mut start = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let g = dy.slice_axis(Axis(1), (start..start + w).into()).to_owned();
                        start += w;
                        Some(g)
                    })
                    .collect()
            }),
        ))
    }

    pub fn resize_bilinear(&mut self, x: Var, height: usize, width: usize) -> Var {
        let (_, _, h, w) = self.shape(x);
        if (h, w) == (height, width) {
            return x;
        }
        let y = ops::resize_bilinear(self.value(x), height, width);
        self.op(
            y,
            vec![x],
            Box::new(move |dy, _, _| vec![Some(ops::resize_bilinear_backward(dy, h, w))]),
        )
    }

    pub fn spatial_softmax(&mut self, x: Var) -> Var {
        let y = ops::spatial_softmax(self.value(x));
        self.op(
            y,
            vec![x],
            Box::new(|dy, _, out| vec![Some(ops::spatial_softmax_backward(out, dy))]),
        )
    }

    pub fn channel_softmax_gap(&mut self, x: Var) -> Var {
        let (_, _, h, w) = self.shape(x);
        let y = ops::channel_softmax_gap(self.value(x));
        self.op(
            y,
            vec![x],
            Box::new(move |dy, _, out| vec![Some(ops::channel_softmax_gap_backward(out, dy, h, w))]),
        )
    }

    /// Pixel-mean BCE between a (N, 1, H, W) probability map and a constant target.
    pub fn bce_mean(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.dim() != target.dim() {
            return Err(Error::shape(format!(
                "bce: prediction {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let (n, c, h, w) = p.dim();
        let flat_p = p.to_shape((n * c, h, w)).expect("reshape").to_owned();
        let flat_t: Array3<f64> = target.to_shape((n * c, h, w)).expect("reshape").to_owned();
        let loss = ops::bce_mean(flat_p.view(), flat_t.view());
        let target = target.clone();
        Ok(self.op(
            Tensor::from_elem((1, 1, 1, 1), loss),
            vec![pred],
            Box::new(move |dy, p, _| {
                let scale = dy[[0, 0, 0, 0]] / p[0].len() as f64;
                let mut dx = p[0].clone();
                dx.zip_mut_with(&target, |d, &t| {
                    let pv = *d;
                    *d = if pv < ops::BCE_EPS || pv > 1.0 - ops::BCE_EPS {
                        0.0
                    } else {
                        scale * (-t / pv + (1.0 - t) / (1.0 - pv))
                    };
                });
                vec![Some(dx)]
            }),
        ))
    }

    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let first = *iter
            .next()
            .ok_or_else(|| Error::shape("sum of zero terms"))?;
        let mut acc = first;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0, 0, 0]]
    }

    /// Reverse sweep from a scalar node. Returns gradients of every trainable
    /// parameter bound through [`Graph::param`].
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.nodes[root.0].value.raw_dim()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let parents: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let pgrads = backward(&g, &parents, &node.value);
            for (p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
            // Leaves keep their gradient; interior nodes were consumed above.
        }
        self.params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(name, v)| {
                let g = grads[v.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.raw_dim()));
                (name.clone(), g)
            })
            .collect()
    }
}
