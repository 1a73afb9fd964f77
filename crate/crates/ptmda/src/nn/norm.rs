//! Normalization layers.
//!
//! `MnLayer` is matching normalization: during training the source and
//! target branches are each standardized with their own batch statistics,
//! then both are mapped through one shared affine pair (gamma, beta). The
//! affine parameters receive gradients only from the target branch; the
//! source branch sees detached copies, while gradients through the source
//! statistics still flow into the source activations. Running statistics
//! track the target branch and drive inference.
//!
//! `BnLayer` is ordinary batch normalization over whatever batch it is
//! handed; the trainer feeds it the concatenated source and target rows.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which normalization the feature extractor uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Mn,
    Bn,
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mn" => Ok(NormKind::Mn),
            "bn" => Ok(NormKind::Bn),
            other => Err(Error::Config(format!("unknown norm kind '{other}' (expected mn|bn)"))),
        }
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormKind::Mn => "mn",
            NormKind::Bn => "bn",
        })
    }
}

/// Tape handles for a bound normalization layer's affine parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundNorm {
    pub gamma: Var,
    pub beta: Var,
}

/// Shared state for both layer kinds: per-channel affine parameters plus
/// running statistics updated with `new = (1 - momentum) * old + momentum *
/// batch` where the batch variance is the biased estimator.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct NormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: T,
    pub momentum: T,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> NormState<T> {
    fn new(channels: usize, eps: T, momentum: T) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape("normalization over zero channels".into()));
        }
        Ok(NormState {
            gamma: Tensor::new(vec![channels], vec![T::one(); channels])?.with_grad(),
            beta: Tensor::zeros(vec![channels])?.with_grad(),
            eps,
            momentum,
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        })
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn bind(&self, tape: &mut Tape<T>) -> BoundNorm {
        BoundNorm { gamma: tape.leaf(&self.gamma), beta: tape.leaf(&self.beta) }
    }

    /// Standardizes `h` with its own batch statistics, in-graph so gradients
    /// flow through the statistics. Returns the normalized activations plus
    /// the batch mean/variance values for running-stat updates.
    fn standardize(&self, tape: &mut Tape<T>, h: Var, what: &str) -> Result<(Var, Vec<T>, Vec<T>)> {
        let shape = tape.shape(h).to_vec();
        let [rows, cols] = shape.as_slice() else {
            return Err(Error::Shape(format!("{what} batch must be 2-D, got {shape:?}")));
        };
        if *cols != self.channels() {
            return Err(Error::Shape(format!(
                "{what} has {cols} channels, layer expects {}",
                self.channels()
            )));
        }
        if *rows < 2 {
            return Err(Error::Shape(format!(
                "{what} batch must have at least 2 rows for batch statistics, got {rows}"
            )));
        }
        let mean = tape.mean_axis(h, 0)?;
        let centered = tape.sub(h, mean)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.mean_axis(sq, 0)?;
        let var_eps = tape.add_scalar(var, self.eps);
        let denom = tape.sqrt(var_eps)?;
        let xhat = tape.div(centered, denom)?;
        Ok((xhat, tape.values(mean).to_vec(), tape.values(var).to_vec()))
    }

    fn update_running(&mut self, mean: &[T], var: &[T]) {
        let m = self.momentum;
        for j in 0..self.channels() {
            self.running_mean[j] = (T::one() - m) * self.running_mean[j] + m * mean[j];
            self.running_var[j] = (T::one() - m) * self.running_var[j] + m * var[j];
        }
    }

    fn affine(&self, tape: &mut Tape<T>, xhat: Var, gamma: Var, beta: Var) -> Result<Var> {
        let scaled = tape.mul(xhat, gamma)?;
        tape.add(scaled, beta)
    }

    /// Inference path: standardize with running statistics, then affine.
    fn forward_infer(&self, tape: &mut Tape<T>, bound: &BoundNorm, h: Var) -> Result<Var> {
        let c = self.channels();
        let mean = tape.constant(vec![c], self.running_mean.clone())?;
        let var = tape.constant(vec![c], self.running_var.clone())?;
        let centered = tape.sub(h, mean)?;
        let var_eps = tape.add_scalar(var, self.eps);
        let denom = tape.sqrt(var_eps)?;
        let xhat = tape.div(centered, denom)?;
        self.affine(tape, xhat, bound.gamma, bound.beta)
    }
}

/// Matching normalization.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MnLayer<T> {
    pub state: NormState<T>,
}

impl<T: Real> MnLayer<T> {
    pub fn new(channels: usize, eps: T, momentum: T) -> Result<Self> {
        Ok(MnLayer { state: NormState::new(channels, eps, momentum)? })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundNorm {
        self.state.bind(tape)
    }

    /// Training forward over one or two branches. With both branches the
    /// target branch owns the affine gradient and the running statistics.
    /// With a single branch (adversarial alignment disabled) that branch
    /// takes the target role: live affine, running-stat updates.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<T>,
        bound: &BoundNorm,
        h_source: Option<Var>,
        h_target: Option<Var>,
    ) -> Result<(Option<Var>, Option<Var>)> {
        match (h_source, h_target) {
            (Some(hs), Some(ht)) => {
                let (xhat_s, _, _) = self.state.standardize(tape, hs, "mn source")?;
                let (xhat_t, mean_t, var_t) = self.state.standardize(tape, ht, "mn target")?;
                // The source branch shares the affine values but must not
                // drive their gradient.
                let gamma_s = tape.detach(bound.gamma);
                let beta_s = tape.detach(bound.beta);
                let z_s = self.state.affine(tape, xhat_s, gamma_s, beta_s)?;
                let z_t = self.state.affine(tape, xhat_t, bound.gamma, bound.beta)?;
                self.state.update_running(&mean_t, &var_t);
                Ok((Some(z_s), Some(z_t)))
            }
            (Some(h), None) => {
                let (xhat, mean, var) = self.state.standardize(tape, h, "mn batch")?;
                let z = self.state.affine(tape, xhat, bound.gamma, bound.beta)?;
                self.state.update_running(&mean, &var);
                Ok((Some(z), None))
            }
            (None, Some(h)) => {
                let (xhat, mean, var) = self.state.standardize(tape, h, "mn batch")?;
                let z = self.state.affine(tape, xhat, bound.gamma, bound.beta)?;
                self.state.update_running(&mean, &var);
                Ok((None, Some(z)))
            }
            (None, None) => Err(Error::Shape("mn forward called with no batches".into())),
        }
    }

    pub fn forward_infer(&self, tape: &mut Tape<T>, bound: &BoundNorm, h: Var) -> Result<Var> {
        self.state.forward_infer(tape, bound, h)
    }
}

/// Plain batch normalization.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct BnLayer<T> {
    pub state: NormState<T>,
}

impl<T: Real> BnLayer<T> {
    pub fn new(channels: usize, eps: T, momentum: T) -> Result<Self> {
        Ok(BnLayer { state: NormState::new(channels, eps, momentum)? })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundNorm {
        self.state.bind(tape)
    }

    /// Training forward over one combined batch.
    pub fn forward_train(&mut self, tape: &mut Tape<T>, bound: &BoundNorm, h: Var) -> Result<Var> {
        let (xhat, mean, var) = self.state.standardize(tape, h, "bn batch")?;
        let z = self.state.affine(tape, xhat, bound.gamma, bound.beta)?;
        self.state.update_running(&mean, &var);
        Ok(z)
    }

    pub fn forward_infer(&self, tape: &mut Tape<T>, bound: &BoundNorm, h: Var) -> Result<Var> {
        self.state.forward_infer(tape, bound, h)
    }
}

/// A block's normalization, if any.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub enum Norm<T> {
    Mn(MnLayer<T>),
    Bn(BnLayer<T>),
}

impl<T: Real> Norm<T> {
    pub fn new(kind: NormKind, channels: usize, eps: T, momentum: T) -> Result<Self> {
        Ok(match kind {
            NormKind::Mn => Norm::Mn(MnLayer::new(channels, eps, momentum)?),
            NormKind::Bn => Norm::Bn(BnLayer::new(channels, eps, momentum)?),
        })
    }

    pub fn state(&self) -> &NormState<T> {
        match self {
            Norm::Mn(l) => &l.state,
            Norm::Bn(l) => &l.state,
        }
    }

    pub fn state_mut(&mut self) -> &mut NormState<T> {
        match self {
            Norm::Mn(l) => &mut l.state,
            Norm::Bn(l) => &mut l.state,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundNorm {
        self.state().bind(tape)
    }

    pub fn forward_infer(&self, tape: &mut Tape<T>, bound: &BoundNorm, h: Var) -> Result<Var> {
        self.state().forward_infer(tape, bound, h)
    }
}
