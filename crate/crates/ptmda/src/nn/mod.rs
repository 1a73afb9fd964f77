//! Network building blocks: linear layers, normalization, gradient
//! reversal, and the model bundle that groups the shared feature extractor
//! with per-source classifiers and discriminators.

mod bundle;
mod norm;

pub use bundle::{
    load_checkpoint, peek_checkpoint_precision, predict_average, save_checkpoint, ArchConfig,
    BoundBlock, BoundBundle, BoundDisc, BoundExtractor, Discriminator, FeatureExtractor, GBlock,
    ModelBundle,
};
pub use norm::{BnLayer, BoundNorm, MnLayer, Norm, NormKind};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Xavier (Glorot) uniform initialization for a 2-D weight:
/// entries drawn from `U[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Real, R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Shape("xavier init requires positive dimensions".into()));
    }
    let a = T::of_f64((6.0 / (fan_in + fan_out) as f64).sqrt());
    let values = (0..fan_in * fan_out)
        .map(|_| T::sample_uniform(rng, -a, a))
        .collect();
    Ok(Tensor::new(vec![fan_in, fan_out], values)?.with_grad())
}

/// Fully connected layer. `weight` is `[input_dim, output_dim]` so the
/// forward pass is `x . weight + bias`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Tape handles for one bound linear layer.
#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Real> Linear<T> {
    /// Xavier weights, zero bias.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, output_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Linear {
            weight: xavier_uniform(input_dim, output_dim, rng)?,
            bias: Tensor::zeros(vec![output_dim])?.with_grad(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundLinear {
        BoundLinear { weight: tape.leaf(&self.weight), bias: tape.leaf(&self.bias) }
    }
}

impl BoundLinear {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.weight)?;
        tape.add(xw, self.bias)
    }
}

/// Gradient reversal layer: identity forward, gradient multiplied by
/// `-coeff` on the way back. `coeff` must be non-negative; the adversarial
/// schedule controls the overall sign and magnitude.
pub fn grl<T: Real>(tape: &mut Tape<T>, x: Var, coeff: T) -> Result<Var> {
    if coeff < T::zero() {
        return Err(Error::Config(format!("grl coefficient must be >= 0, got {coeff}")));
    }
    Ok(tape.scale_grad(x, -coeff))
}
