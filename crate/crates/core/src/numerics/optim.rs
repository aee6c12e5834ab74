use super::array::DenseArray;
use super::tape::Parameter;
use crate::error::{Error, Result};

/// SGD with L2 weight decay folded into the gradient:
/// `p ← p − lr·(grad + weight_decay·p)`, with optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    velocity: Vec<Option<DenseArray>>,
}

impl Sgd {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            momentum: 0.0,
            velocity: Vec::new(),
        }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    /// Updates every parameter from its gradient and clears the gradients.
    /// Parameters are matched to momentum buffers by position.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        if params.iter().any(|p| p.grad.is_none()) {
            return Err(Error::Grad(
                "sgd_step called with a missing gradient".into(),
            ));
        }
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        for (slot, p) in params.iter_mut().enumerate() {
            let grad = p.grad.take().expect("checked above");
            let mut update: Vec<f64> = grad
                .data()
                .iter()
                .zip(p.value.data())
                .map(|(g, w)| g + self.weight_decay * w)
                .collect();
            if self.momentum != 0.0 {
                let v = self.velocity[slot]
                    .get_or_insert_with(|| DenseArray::zeros(p.value.shape().to_vec()));
                for (vi, u) in v.data_mut().iter_mut().zip(update.iter_mut()) {
                    *vi = self.momentum * *vi + *u;
                    *u = *vi;
                }
            }
            for (w, u) in p.value.data_mut().iter_mut().zip(&update) {
                *w -= self.lr * u;
            }
        }
        Ok(())
    }
}

/// One SGD step without momentum state.
pub fn sgd_step(params: &mut [&mut Parameter], lr: f64, weight_decay: f64) -> Result<()> {
    Sgd::new(lr, weight_decay).step(params)
}
