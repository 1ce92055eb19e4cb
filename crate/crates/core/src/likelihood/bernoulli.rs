//! Binary observations `x | z ~ Bern(f_θ(z))`, no scale variable.

use super::{Likelihood, LikelihoodParams, ScalePosterior, ThetaTerm};
use crate::error::{check_len, Error, Result};
use crate::nn::{Activation, DecoderNetwork, GradientBuffer};

/// Probabilities are clamped to `[PROB_FLOOR, 1 − PROB_FLOOR]` so a saturated
/// sigmoid never yields `ln 0`.
pub const PROB_FLOOR: f64 = 1e-12;

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// `Σ_d [x_d ln f_d + (1 − x_d) ln(1 − f_d)]`.
pub fn bern_loglik(x: &[f64], f: &[f64]) -> Result<f64> {
    check_len("decoder output", x.len(), f.len())?;
    Ok(loglik_unchecked(x, f))
}

fn loglik_unchecked(x: &[f64], f: &[f64]) -> f64 {
    x.iter()
        .zip(f)
        .map(|(&xd, &fd)| {
            let p = clamp(fd);
            xd * p.ln() + (1.0 - xd) * (-p).ln_1p()
        })
        .sum()
}

/// `d/df` of [`bern_loglik`]: `x/f − (1 − x)/(1 − f)`.
pub fn bern_upstream(x: &[f64], f: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(f)
        .map(|(&xd, &fd)| {
            let p = clamp(fd);
            xd / p - (1.0 - xd) / (1.0 - p)
        })
        .collect()
}

pub fn bern_theta_grad(x: &[f64], z: &[f64], net: &DecoderNetwork) -> Result<(f64, GradientBuffer)> {
    let f = net.forward(z)?;
    let value = bern_loglik(x, &f)?;
    Ok((value, net.backward(z, &bern_upstream(x, &f))?))
}

#[derive(Clone, Debug, Default)]
pub struct BernoulliLikelihood;

pub(super) fn factory(
    _params: &LikelihoodParams,
    _data_dim: usize,
    _seed: u64,
) -> Result<Box<dyn Likelihood>> {
    Ok(Box::new(BernoulliLikelihood))
}

impl Likelihood for BernoulliLikelihood {
    fn name(&self) -> &'static str {
        "bernoulli"
    }

    fn final_activation(&self) -> Activation {
        Activation::Sigmoid
    }

    fn decoder_width(&self, data_dim: usize) -> usize {
        data_dim
    }

    fn validate_datum(&self, x: &[f64]) -> Result<()> {
        if let Some(v) = x.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!("bernoulli datum entry {v} is not 0 or 1")));
        }
        Ok(())
    }

    fn scale_posterior(&self, _x: &[f64], _f: &[f64]) -> Result<ScalePosterior> {
        Ok(ScalePosterior::Unit)
    }

    fn scale_is_fixed(&self) -> bool {
        true
    }

    fn pursuit_loglik(&self, x: &[f64], f: &[f64], _scale: &ScalePosterior) -> f64 {
        loglik_unchecked(x, f)
    }

    fn theta_term(&self, x: &[f64], f: &[f64], _scale: &ScalePosterior) -> Result<ThetaTerm> {
        Ok(ThetaTerm {
            value: bern_loglik(x, f)?,
            d_output: bern_upstream(x, f),
            d_aux: Vec::new(),
        })
    }

    fn reconstruction_loss(&self, x: &[f64], f: &[f64], _scale: &ScalePosterior) -> f64 {
        -loglik_unchecked(x, f)
    }

    fn metric_name(&self) -> &'static str {
        "nll"
    }

    fn hyperparameters(&self) -> Vec<(&'static str, f64)> {
        Vec::new()
    }

    fn clone_box(&self) -> Box<dyn Likelihood> {
        Box::new(self.clone())
    }
}
