//! Toy networks: the denoiser ε_θ, the dual-encoder reward model
//! (E_M, E_T, τ), and the optimizer that updates them. Parameters live in a
//! host-side [`ParamStore`] and are mounted onto a tape as persistent leaves
//! for the duration of a run.

mod denoiser;
mod optim;
mod reward;

pub use denoiser::{init_denoiser, Denoiser, DenoiserBinding, DenoiserConfig};
pub use optim::{AdamConfig, LrSchedule, Optimizer, StepOutcome};
pub use reward::{
    init_reward, reward, scaled_cosine, OneStepCtx, RewardBinding, RewardConfig, RewardMode,
    RewardModel,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, ValueId};
use crate::{Error, Result};

/// One named parameter tensor (host copy).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered, named collection of parameter tensors. The mount order is the
/// store order, which optimizers and gradient maps rely on.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    pub tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.tensors.push(ParamTensor {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn lens(&self) -> Vec<usize> {
        self.tensors.iter().map(|t| t.data.len()).collect()
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Concatenation of all tensors in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.clone()).collect()
    }

    pub fn mount(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<ValueId>> {
        self.tensors
            .iter()
            .map(|t| {
                let id = if trainable {
                    tape.param(t.data.clone(), t.shape.clone())?
                } else {
                    tape.frozen_param(t.data.clone(), t.shape.clone())?
                };
                Ok(id)
            })
            .collect()
    }

    pub fn read_back(&mut self, tape: &Tape, ids: &[ValueId]) -> Result<()> {
        if ids.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(
                "read_back: id count does not match store".into(),
            ));
        }
        for (tensor, id) in self.tensors.iter_mut().zip(ids) {
            let data = tape.data(*id)?;
            if data.len() != tensor.data.len() {
                return Err(Error::InvalidArgument(format!(
                    "read_back: size mismatch for {}",
                    tensor.name
                )));
            }
            tensor.data.copy_from_slice(data);
        }
        Ok(())
    }
}

/// Uniform init scaled by 1/√fan_in.
pub(crate) fn scaled_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Sinusoidal embedding of a timestep: interleaved (sin, cos) pairs over
/// geometrically spaced frequencies. `dim` must be even.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    debug_assert!(dim >= 2 && dim % 2 == 0);
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(i as f64) * (10_000f64).ln() / half as f64).exp();
        let angle = t as f64 * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// Feed-forward pass: tanh on every layer but the last.
pub(crate) fn mlp_forward(
    tape: &mut Tape,
    layers: &[(ValueId, ValueId)],
    input: ValueId,
) -> Result<ValueId> {
    let mut cur = input;
    for (i, (w, b)) in layers.iter().enumerate() {
        let lin = tape.matvec(*w, cur)?;
        cur = tape.add(lin, *b)?;
        if i + 1 < layers.len() {
            cur = tape.tanh(cur)?;
        }
    }
    Ok(cur)
}

/// Mean squared error between two same-shape values, as a `[1]` node.
pub fn mse(tape: &mut Tape, a: ValueId, b: ValueId) -> Result<ValueId> {
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq)?)
}
