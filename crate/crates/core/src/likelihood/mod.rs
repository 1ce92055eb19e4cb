//! Observation models.
//!
//! Each model is a [`Likelihood`] strategy: it knows how to build the
//! per-datum scale posterior, the z-dependent log-likelihood term used during
//! pursuit, and the θ objective with its gradient with respect to the decoder
//! output. Models are constructed by name through [`LikelihoodRegistry`].

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::nn::Activation;

pub mod bernoulli;
pub mod gaussian;
pub mod poisson;

pub use bernoulli::BernoulliLikelihood;
pub use gaussian::{GaussianLikelihood, GaussianLikelihoodConfig, GaussianScalePosterior};
pub use poisson::{GammaPrior, GammaScalePosterior, PoissonLikelihood, TopicMatrix};

/// Closed-form posterior over a datum's scale variable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScalePosterior {
    Gaussian(GaussianScalePosterior),
    Gamma(GammaScalePosterior),
    /// The model has no scale variable.
    Unit,
}

impl ScalePosterior {
    /// `E[λ]`, or 1 for models without a scale.
    pub fn mean(&self) -> f64 {
        match self {
            ScalePosterior::Gaussian(p) => p.mean,
            ScalePosterior::Gamma(p) => p.mean(),
            ScalePosterior::Unit => 1.0,
        }
    }
}

/// θ objective for one datum together with its partial derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaTerm {
    pub value: f64,
    /// Derivative with respect to the decoder output `f_θ(z)`.
    pub d_output: Vec<f64>,
    /// Derivative with respect to the model's own parameters
    /// ([`Likelihood::aux_params`]); empty when it has none.
    pub d_aux: Vec<f64>,
}

pub trait Likelihood: Send + Sync + fmt::Debug {
    /// Registry name.
    fn name(&self) -> &'static str;

    fn final_activation(&self) -> Activation;

    /// Width the decoder must emit for data of width `data_dim`.
    fn decoder_width(&self, data_dim: usize) -> usize;

    fn validate_datum(&self, x: &[f64]) -> Result<()>;

    fn scale_posterior(&self, x: &[f64], f: &[f64]) -> Result<ScalePosterior>;

    /// True when the scale posterior does not depend on the decoder, so it
    /// can be computed once per datum.
    fn scale_is_fixed(&self) -> bool;

    /// Code-dependent log-likelihood term of the pursuit bound.
    fn pursuit_loglik(&self, x: &[f64], f: &[f64], scale: &ScalePosterior) -> f64;

    fn theta_term(&self, x: &[f64], f: &[f64], scale: &ScalePosterior) -> Result<ThetaTerm>;

    /// Per-datum held-out loss: squared error or negative log-likelihood.
    fn reconstruction_loss(&self, x: &[f64], f: &[f64], scale: &ScalePosterior) -> f64;

    /// `"mse"` or `"nll"`.
    fn metric_name(&self) -> &'static str;

    fn hyperparameters(&self) -> Vec<(&'static str, f64)>;

    fn aux_params(&self) -> &[f64] {
        &[]
    }

    fn aux_params_mut(&mut self) -> &mut [f64] {
        &mut []
    }

    /// Called after `aux_params_mut` was written through.
    fn aux_params_updated(&mut self) {}

    fn topic_matrix(&self) -> Option<&TopicMatrix> {
        None
    }

    fn clone_box(&self) -> Box<dyn Likelihood>;
}

impl Clone for Box<dyn Likelihood> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Hyperparameters shared by all built-in models; each reads what it needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LikelihoodParams {
    pub sigma2: f64,
    pub c: f64,
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub topics: usize,
}

impl Default for LikelihoodParams {
    fn default() -> Self {
        Self {
            sigma2: 0.1,
            c: 1.0,
            gamma_a: 1.0,
            gamma_b: 1.0,
            topics: 15,
        }
    }
}

/// Builds a model for data of the given width; `seed` drives any random
/// parameter initialisation.
pub type LikelihoodFactory =
    fn(params: &LikelihoodParams, data_dim: usize, seed: u64) -> Result<Box<dyn Likelihood>>;

pub struct LikelihoodRegistry {
    factories: BTreeMap<&'static str, LikelihoodFactory>,
}

impl LikelihoodRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut registry = Self::empty();
        registry.register("gaussian", gaussian::factory);
        registry.register("poisson", poisson::factory);
        registry.register("bernoulli", bernoulli::factory);
        registry
    }

    pub fn register(&mut self, name: &'static str, factory: LikelihoodFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn create(
        &self,
        name: &str,
        params: &LikelihoodParams,
        data_dim: usize,
        seed: u64,
    ) -> Result<Box<dyn Likelihood>> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| Error::UnknownLikelihood(name.to_string()))?;
        factory(params, data_dim, seed)
    }
}

impl Default for LikelihoodRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lists_and_creates_builtins() {
        let registry = LikelihoodRegistry::builtin();
        assert_eq!(registry.names(), vec!["bernoulli", "gaussian", "poisson"]);
        let params = LikelihoodParams::default();
        for name in registry.names() {
            let model = registry.create(name, &params, 12, 7).unwrap();
            assert_eq!(model.name(), name);
        }
        assert!(matches!(
            registry.create("laplace", &params, 3, 0),
            Err(Error::UnknownLikelihood(_))
        ));
    }

    #[test]
    fn final_activations_follow_model() {
        let registry = LikelihoodRegistry::builtin();
        let params = LikelihoodParams::default();
        let act = |n: &str| registry.create(n, &params, 4, 0).unwrap().final_activation();
        assert_eq!(act("gaussian"), Activation::Sigmoid);
        assert_eq!(act("bernoulli"), Activation::Sigmoid);
        assert_eq!(act("poisson"), Activation::Softmax);
    }
}
