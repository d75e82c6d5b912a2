//! A small pre-norm Vision Transformer whose forward pass records every
//! attention matrix and three latent taps per block.

mod checkpoint;
mod config;
mod model;
mod patch;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use config::ViTConfig;
pub use model::{ForwardVars, InferenceTrace, ViTWeights, TAP_KINDS};
pub use patch::{patch_gather_index, patchify, unpatchify, PatchGrid};
pub use train::{evaluate_accuracy, train_toy, EpochLog, TrainConfig, TrainError, TrainOutcome};

use crate::tensor::{Tape, Tensor, TensorError, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} does not match expected {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("non-finite activation in block {block} ({stage})")]
    NonFinite { block: usize, stage: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A classifier whose logits can be recorded on a gradient tape.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    /// Expected image shape, e.g. `[C, S, S]`.
    fn input_shape(&self) -> Vec<usize>;

    /// Records the forward pass for `image` and returns the logits `[K]`.
    fn logits_on_tape(&self, tape: &mut Tape, image: Var) -> Result<Var, ModelError>;

    fn logits(&self, image: &Tensor) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let z = self.logits_on_tape(&mut tape, x)?;
        Ok(tape.value(z).data().to_vec())
    }
}

/// Index of the largest entry; the first one wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}
