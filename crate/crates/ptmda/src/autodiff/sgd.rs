//! Stochastic gradient descent with momentum and coupled weight decay.

use std::collections::BTreeMap;

use crate::autodiff::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Mutable view of one named parameter for an optimizer step. Velocity
/// buffers are keyed by `path`, so paths must be unique and stable across a
/// run. Normalization affine parameters set `decay = false`; applying weight
/// decay to them would move them even on steps where their gradient is
/// exactly zero, which the matching-normalization contract forbids.
pub struct ParamRef<'a, T> {
    pub path: String,
    pub tensor: &'a mut Tensor<T>,
    pub decay: bool,
}

/// SGD with momentum. Update per parameter p with gradient g:
/// `v <- momentum * v + (g + weight_decay * p)`, `p <- p - lr * v`.
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Self {
        Sgd { lr, momentum, weight_decay, velocity: BTreeMap::new() }
    }

    /// Applies one update to every parameter. A missing gradient counts as
    /// zero. If any gradient entry is non-finite the step aborts before
    /// touching any parameter and reports the offending path.
    pub fn step(&mut self, params: &mut [ParamRef<'_, T>]) -> Result<()> {
        for p in params.iter() {
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for parameter '{}'",
                        p.path
                    )));
                }
            }
        }
        for p in params.iter_mut() {
            let n = p.tensor.len();
            let v = self
                .velocity
                .entry(p.path.to_string())
                .or_insert_with(|| vec![T::zero(); n]);
            if v.len() != n {
                return Err(Error::Shape(format!(
                    "velocity length {} does not match parameter '{}' length {n}",
                    v.len(),
                    p.path
                )));
            }
            let grad = p.tensor.grad().map(<[T]>::to_vec);
            let values = p.tensor.values_mut();
            for i in 0..n {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                let g = if p.decay { g + self.weight_decay * values[i] } else { g };
                v[i] = self.momentum * v[i] + g;
                values[i] = values[i] - self.lr * v[i];
            }
        }
        Ok(())
    }
}
