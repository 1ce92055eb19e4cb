//! Sparse coding with a finite beta-Bernoulli process prior over binary latent
//! codes and a neural decoder.
//!
//! Codes are inferred per datum by greedy pursuit; the decoder is trained by
//! ADAM inside a stochastic MAP-EM loop that also maintains closed-form
//! posteriors over the per-dimension activation probabilities and, for the
//! Gaussian and Poisson observation models, over a per-datum scale variable.
//!
//! Observation models implement [`likelihood::Likelihood`] and are created by
//! name through [`likelihood::LikelihoodRegistry`].

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod beta_bernoulli;
pub mod checkpoint;
pub mod code;
pub mod config;
pub mod datasets;
pub mod error;
pub mod likelihood;
pub mod metrics;
pub mod nn;
pub mod pursuit;
pub mod trainer;

pub use code::SparseCode;
pub use error::{Error, Result};
