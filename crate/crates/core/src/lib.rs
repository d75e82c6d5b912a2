//! Toolkit for attacking a small Vision Transformer and measuring
//! inference-time signatures of the attacks.

pub mod attacks;
pub mod dataset;
pub mod pipeline;
pub mod signatures;
pub mod stats;
pub mod tensor;
pub mod vit;
