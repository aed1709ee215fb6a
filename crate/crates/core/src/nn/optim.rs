//! SGD with heavy-ball momentum and L2 weight decay folded into the gradient.

use super::model::{Gradients, Part, SplitModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    FeatureOnly,
    HeaderOnly,
    All,
}

impl Scope {
    pub fn includes(self, part: Part) -> bool {
        match self {
            Scope::All => true,
            Scope::FeatureOnly => part == Part::Feature,
            Scope::HeaderOnly => part == Part::Header,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Gradients,
}

impl OptimizerState {
    pub fn new(model: &SplitModel, learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Precondition(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Precondition(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Precondition(format!("weight decay must be nonnegative, got {weight_decay}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            buffers: Gradients::zeros_like(model),
        })
    }

    pub fn buffers(&self) -> &Gradients {
        &self.buffers
    }

    /// Zeroes the momentum buffers of one part.
    pub fn reset(&mut self, part: Part) {
        for g in self.buffers.part_mut(part) {
            g.weights.fill(0.0);
            g.bias.fill(0.0);
        }
    }
}

/// One update of every in-scope parameter `p` with gradient `g`:
///
/// ```text
/// buf <- momentum * buf + (g + weight_decay * p)
/// p   <- p - lr * buf
/// ```
///
/// Out-of-scope parameters and their buffers are not touched.
pub fn sgd_step(model: &mut SplitModel, grads: &Gradients, opt: &mut OptimizerState, scope: Scope) -> Result<()> {
    if !grads.matches(model) {
        return Err(Error::shape("sgd_step gradients", "model-shaped", "mismatched"));
    }
    if !opt.buffers.matches(model) {
        return Err(Error::shape("sgd_step momentum buffers", "model-shaped", "mismatched"));
    }
    let (lr, mu, wd) = (opt.learning_rate, opt.momentum, opt.weight_decay);
    for part in [Part::Feature, Part::Header] {
        if !scope.includes(part) {
            continue;
        }
        let layers = model.layers_mut(part);
        let bufs = opt.buffers.part_mut(part);
        for ((layer, buf), g) in layers.iter_mut().zip(bufs).zip(grads.part(part)) {
            let params = layer.weights.as_mut_slice().iter_mut().chain(layer.bias.iter_mut());
            let velocity = buf.weights.as_mut_slice().iter_mut().chain(buf.bias.iter_mut());
            let grad = g.weights.as_slice().iter().chain(&g.bias);
            for ((p, v), &g) in params.zip(velocity).zip(grad) {
                *v = mu * *v + (g + wd * *p);
                *p -= lr * *v;
            }
        }
    }
    Ok(())
}
