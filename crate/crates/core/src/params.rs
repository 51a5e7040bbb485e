//! Named parameter storage shared by a model and its optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group of a trainable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Newly trained generation-side components.
    Generation,
    /// Pretrained understanding-side components (including shared experts).
    Understanding,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, mut tensor: Tensor<T>) -> ParamId {
        tensor.requires_grad = true;
        self.params.push(Param {
            name: name.into(),
            group,
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Overwrites a parameter's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {}: expected {:?}, got {:?}",
                p.name,
                p.tensor.shape(),
                value.shape()
            )));
        }
        p.tensor = value.with_grad();
        Ok(())
    }

    /// Adds the leaf gradients of every parameter bound on `g`.
    pub fn accumulate(&mut self, g: &Graph<T>) {
        for &(id, var) in g.bound_params() {
            if let Some(grad) = g.grad(var) {
                self.params[id.0].tensor.accumulate_grad(grad);
            }
        }
    }

    /// As [`accumulate`](Self::accumulate), each gradient multiplied by
    /// `scale(id)`; a zero scale adds nothing.
    pub fn accumulate_scaled(&mut self, g: &Graph<T>, scale: impl Fn(ParamId) -> f64) {
        for &(id, var) in g.bound_params() {
            let f = scale(id);
            let Some(grad) = g.grad(var).filter(|_| f != 0.0) else { continue };
            if f == 1.0 {
                self.params[id.0].tensor.accumulate_grad(grad);
            } else {
                let f = T::lit(f);
                let scaled: Vec<T> = grad.iter().map(|&x| x * f).collect();
                self.params[id.0].tensor.accumulate_grad(&scaled);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Euclidean norm over all accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0;
        for p in &self.params {
            if let Some(g) = p.tensor.grad() {
                for &v in g {
                    let v = v.as_f64();
                    acc += v * v;
                }
            }
        }
        acc.sqrt()
    }
}
