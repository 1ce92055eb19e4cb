//! Gaussian observations with a Gaussian scale:
//! `λ ~ N(0, c)`, `x | λ, z ~ N(λ f_θ(z), σ² I)`.

use std::f64::consts::PI;

use super::{dot, Likelihood, LikelihoodParams, ScalePosterior, ThetaTerm};
use crate::error::{check_len, Error, Result};
use crate::nn::{Activation, DecoderNetwork, GradientBuffer};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianLikelihoodConfig {
    pub sigma2: f64,
    pub c: f64,
}

impl Default for GaussianLikelihoodConfig {
    fn default() -> Self {
        Self { sigma2: 0.1, c: 1.0 }
    }
}

impl GaussianLikelihoodConfig {
    pub fn new(sigma2: f64, c: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) || !(c > 0.0 && c.is_finite()) {
            return Err(Error::invalid(format!(
                "gaussian sigma2 ({sigma2}) and c ({c}) must be positive"
            )));
        }
        Ok(Self { sigma2, c })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianScalePosterior {
    pub mean: f64,
    pub variance: f64,
}

/// `q(λ) = N(μ, s²)` with `s² = (1/c + fᵀf/σ²)⁻¹` and `μ = s² fᵀx / σ²`.
pub fn gauss_lambda_posterior(
    x: &[f64],
    f: &[f64],
    cfg: &GaussianLikelihoodConfig,
) -> Result<GaussianScalePosterior> {
    check_len("decoder output", x.len(), f.len())?;
    let variance = 1.0 / (1.0 / cfg.c + dot(f, f) / cfg.sigma2);
    let mean = variance * dot(f, x) / cfg.sigma2;
    Ok(GaussianScalePosterior { mean, variance })
}

/// `ln ∫ N(λ; 0, c) N(x; λf, σ²I) dλ`, including the `−(D/2) ln(2πσ²)` term.
pub fn gauss_marginal_loglik(x: &[f64], f: &[f64], cfg: &GaussianLikelihoodConfig) -> Result<f64> {
    check_len("decoder output", x.len(), f.len())?;
    Ok(marginal_unchecked(x, f, cfg))
}

fn marginal_unchecked(x: &[f64], f: &[f64], cfg: &GaussianLikelihoodConfig) -> f64 {
    let s2 = cfg.sigma2;
    let ff = dot(f, f);
    let fx = dot(f, x);
    let xx = dot(x, x);
    let quad = xx / s2 - fx * fx / (s2 * (s2 / cfg.c + ff));
    let kappa = -0.5 * x.len() as f64 * (2.0 * PI * s2).ln();
    -0.5 * ((cfg.c / s2 * ff).ln_1p() + quad) + kappa
}

/// θ objective `−(1/2σ²)[‖x − μf‖² + s² fᵀf]` and its derivative in `f`,
/// holding `q(λ)` fixed.
pub fn gauss_theta_bound(
    x: &[f64],
    f: &[f64],
    cfg: &GaussianLikelihoodConfig,
    post: &GaussianScalePosterior,
) -> Result<(f64, Vec<f64>)> {
    check_len("decoder output", x.len(), f.len())?;
    let GaussianScalePosterior { mean, variance } = *post;
    let mut resid2 = 0.0;
    let mut grad = Vec::with_capacity(f.len());
    for (&xi, &fi) in x.iter().zip(f) {
        let r = xi - mean * fi;
        resid2 += r * r;
        grad.push((mean * r - variance * fi) / cfg.sigma2);
    }
    let value = -(resid2 + variance * dot(f, f)) / (2.0 * cfg.sigma2);
    Ok((value, grad))
}

/// Terms of `E_q[ln p(x, λ | θ, z)]` dropped from [`gauss_theta_bound`]:
/// the normalisers and the expected log prior of `λ`.
pub fn gauss_dropped_constant(dim: usize, cfg: &GaussianLikelihoodConfig, post: &GaussianScalePosterior) -> f64 {
    -0.5 * dim as f64 * (2.0 * PI * cfg.sigma2).ln() - 0.5 * (2.0 * PI * cfg.c).ln()
        - (post.mean * post.mean + post.variance) / (2.0 * cfg.c)
}

pub fn gauss_theta_bound_and_grad(
    x: &[f64],
    z: &[f64],
    net: &DecoderNetwork,
    cfg: &GaussianLikelihoodConfig,
    post: &GaussianScalePosterior,
) -> Result<(f64, GradientBuffer)> {
    let f = net.forward(z)?;
    let (value, upstream) = gauss_theta_bound(x, &f, cfg, post)?;
    Ok((value, net.backward(z, &upstream)?))
}

#[derive(Clone, Debug)]
pub struct GaussianLikelihood {
    pub cfg: GaussianLikelihoodConfig,
}

pub(super) fn factory(
    params: &LikelihoodParams,
    _data_dim: usize,
    _seed: u64,
) -> Result<Box<dyn Likelihood>> {
    Ok(Box::new(GaussianLikelihood {
        cfg: GaussianLikelihoodConfig::new(params.sigma2, params.c)?,
    }))
}

impl Likelihood for GaussianLikelihood {
    fn name(&self) -> &'static str {
        "gaussian"
    }

    fn final_activation(&self) -> Activation {
        Activation::Sigmoid
    }

    fn decoder_width(&self, data_dim: usize) -> usize {
        data_dim
    }

    fn validate_datum(&self, x: &[f64]) -> Result<()> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("gaussian datum has non-finite entries"));
        }
        Ok(())
    }

    fn scale_posterior(&self, x: &[f64], f: &[f64]) -> Result<ScalePosterior> {
        gauss_lambda_posterior(x, f, &self.cfg).map(ScalePosterior::Gaussian)
    }

    fn scale_is_fixed(&self) -> bool {
        false
    }

    fn pursuit_loglik(&self, x: &[f64], f: &[f64], _scale: &ScalePosterior) -> f64 {
        marginal_unchecked(x, f, &self.cfg)
    }

    fn theta_term(&self, x: &[f64], f: &[f64], scale: &ScalePosterior) -> Result<ThetaTerm> {
        let ScalePosterior::Gaussian(post) = scale else {
            return Err(Error::invalid("gaussian model needs a gaussian scale posterior"));
        };
        let (value, d_output) = gauss_theta_bound(x, f, &self.cfg, post)?;
        Ok(ThetaTerm {
            value,
            d_output,
            d_aux: Vec::new(),
        })
    }

    fn reconstruction_loss(&self, x: &[f64], f: &[f64], scale: &ScalePosterior) -> f64 {
        let m = scale.mean();
        x.iter().zip(f).map(|(xi, fi)| (xi - m * fi).powi(2)).sum()
    }

    fn metric_name(&self) -> &'static str {
        "mse"
    }

    fn hyperparameters(&self) -> Vec<(&'static str, f64)> {
        vec![("sigma2", self.cfg.sigma2), ("c", self.cfg.c)]
    }

    fn clone_box(&self) -> Box<dyn Likelihood> {
        Box::new(self.clone())
    }
}
