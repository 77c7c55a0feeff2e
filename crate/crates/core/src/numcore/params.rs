use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Index of a parameter inside a [`Params`] set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Named trainable arrays with co-shaped gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(value.shape());
        self.entries.push(Param {
            name: name.to_string(),
            value,
            grad,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor, scale: f64) -> Result<()> {
        let p = &mut self.entries[id.0];
        if p.grad.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient {:?} for parameter `{}` of shape {:?}",
                g.shape(),
                p.name,
                p.grad.shape()
            )));
        }
        for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Euclidean norm over all trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.grad.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }
}

/// Plain SGD with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &Params, lr: f64, momentum: f64) -> Self {
        let velocity = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            lr,
            momentum,
            velocity,
        }
    }

    /// One update `v = m v + g; w -= lr v` on every trainable parameter.
    /// Weights are kept `f32`-representable so checkpoints are lossless.
    pub fn step(&mut self, params: &mut Params) {
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if !p.trainable {
                continue;
            }
            for ((w, vel), g) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(v.data_mut())
                .zip(p.grad.data())
            {
                *vel = self.momentum * *vel + g;
                *w = (*w - self.lr * *vel) as f32 as f64;
            }
        }
    }
}
