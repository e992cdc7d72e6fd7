use super::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::Element;

/// `lr(i) = base · (1 − i / total)^power`, no warm-up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolySchedule {
    pub base_lr: f64,
    pub power: f64,
    pub total: u64,
}

impl PolySchedule {
    pub fn lr(&self, iteration: u64) -> f64 {
        if self.total == 0 {
            return self.base_lr;
        }
        let frac = (iteration.min(self.total) as f64) / self.total as f64;
        self.base_lr * (1.0 - frac).powf(self.power)
    }
}

/// SGD with heavy-ball momentum and decoupled-free L2 weight decay:
/// `v = μ v + (g + λ θ)`, `θ -= lr · v`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Element = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<ModelParams<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn reset(&mut self) {
        self.velocity = None;
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, lr: f64) -> Result<()> {
        if !params.same_schema(grads) {
            return Err(Error::invalid("gradient schema does not match parameters"));
        }
        let velocity = self.velocity.get_or_insert_with(|| params.zeros_like());
        let (mu, wd, lr) = (T::from_f64(self.momentum), T::from_f64(self.weight_decay), T::from_f64(lr));
        for ((p, g), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(velocity.tensors_mut())
        {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv + wd * *pv;
                *pv = *pv - lr * *vv;
            }
        }
        params.ensure_finite()
    }
}
