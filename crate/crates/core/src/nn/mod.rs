//! Small feed-forward approximators with explicit reverse-mode gradients,
//! an Adam optimizer, and a sinusoidal noise-level embedding.

mod adam;
mod embedding;
mod mlp;

pub use adam::{AdamConfig, OptimizerState};
pub use embedding::noise_embedding;
pub use mlp::{forward_calls, Activation, ApproximatorSpec, ApproximatorWeights, Tape};
