//! Data noising and variational smoothing for LSTM language models.
//!
//! The crate is organized bottom-up:
//!
//! - [`corpus`]: vocabulary, token streams and the unigram / bigram-type
//!   statistics every noising scheme is built from.
//! - [`noising`]: the four word-replacement schemes (blank, linear
//!   interpolation, absolute discounting, Kneser-Ney) as samplers and as
//!   analytic mixture weights, plus the pseudocount oracles.
//! - [`numeric`]: dense tensors, a tape-based reverse-mode autodiff engine,
//!   RMSprop and the checkpoint container.
//! - [`lm`]: a two-layer LSTM language model with optional tied embeddings.
//! - [`variational`]: mixture-of-Gaussians embedding distributions, the
//!   data-dependent L2 coefficients, mean embeddings and the combined
//!   smoothing + dropout sampler.
//! - [`trainer`]: batching, training, evaluation and the gamma sweep.
//!
//! Monte Carlo loops, sample-averaged evaluation and sweeps fan out with
//! rayon when the `parallel` feature is on (the default); results do not
//! depend on the thread count either way.

// Scalar casts are no-ops with f64 but needed under `f32`; negated
// comparisons reject NaN on purpose.
#![allow(clippy::unnecessary_cast, clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod lm;
pub mod noising;
pub mod numeric;
pub mod par;
pub mod rng;
pub mod trainer;
pub mod variational;

pub use numeric::Scalar;
