//! Transformer encoders with structured dropout applied directly to
//! attention-weight matrices (DropAttention), plus the diagnostics used to
//! study its effect on attention distributions.
//!
//! - [`tensor`] — dense f32 tensors and a reverse-mode autodiff tape
//! - [`attention`] — scaled dot-product / multi-head attention, pre-LN
//!   encoder layers, sinusoidal positional embeddings
//! - [`dropattn`] — windowed mask sampling over attention weights (column
//!   and element variants), normalized vs inverse rescaling, standard dropout
//! - [`heads`] — classification, sequence-labeling and entailment heads
//! - [`data`] — tokenisation, vocab, TSV/CoNLL loaders, synthetic data
//! - [`train`] — Adam, the training loop, span F1, checkpointing
//! - [`analysis`] — entropy / Div / Disagreement, max-weight histogram
//! - [`config`] and [`cli`] — the experiment driver behind the binary

pub mod analysis;
pub mod attention;
pub mod cli;
pub mod config;
pub mod data;
pub mod dropattn;
pub mod error;
pub mod heads;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Gradients, ParamTrace, Tape, Tensor, TensorId};
