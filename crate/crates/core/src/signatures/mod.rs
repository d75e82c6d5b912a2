//! Per-sample and per-batch quantities that react to adversarial inputs:
//! DCT frequency ratio, posterior entropy, attention distances and CKA
//! similarity between tapped layers.

mod attention;
mod cka;
mod dct;
mod entropy;

pub use attention::{attention_distance, attention_profile_summary, AttentionProfile};
pub use cka::{
    center_gram, cka_difference_summary, cka_matrix, gram, hsic, mean_cka, CkaDifference, CkaMatrix,
};
pub use dct::{dct2, dct_matrix, frequency_ratio, idct2, FrequencySpec};
pub use entropy::posterior_entropy;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SignatureError {
    #[error("expected a square channel, got shape {0:?}")]
    NonSquare(Vec<usize>),
    #[error("frequency threshold {phi} outside 1..={max}")]
    BadThreshold { phi: usize, max: usize },
    #[error("low-frequency energy is zero")]
    DegenerateEnergy,
    #[error("not a probability vector: {0}")]
    NotSimplex(String),
    #[error("attention matrix is {got:?}, expected {expected}x{expected}")]
    AttentionShape { got: Vec<usize>, expected: usize },
    #[error("attention over patches sums to zero")]
    ZeroAttention,
    #[error("profile layout {got:?} does not match reference {expected:?}")]
    ProfileMismatch { got: Vec<usize>, expected: Vec<usize> },
    #[error("CKA input: {0}")]
    CkaInput(String),
}
