use super::params::{Gradients, ParamStore};
use super::Tensor;
use crate::error::{shape_err, Result};

/// SGD with heavy-ball momentum: `v <- mu * v + g; p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: store.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != store.len() || self.velocity.len() != store.len() {
            return Err(shape_err("sgd_step", "parameter count differs"));
        }
        for ((id, g), vel) in store.ids().zip(grads.iter()).zip(&mut self.velocity) {
            if g.shape() != vel.shape() || store.get(id).shape() != g.shape() {
                return Err(shape_err("sgd_step", format!("{} has gradient {:?}", store.name(id), g.shape())));
            }
            for (v, gv) in vel.data_mut().iter_mut().zip(g.data()) {
                *v = self.momentum * *v + gv;
            }
            for (p, v) in store.get_mut(id).data_mut().iter_mut().zip(vel.data()) {
                *p -= self.lr * v;
            }
        }
        Ok(())
    }
}
