//! Poisson observations over a topic matrix:
//! `λ ~ Gamma(a, b)`, `x | λ, z ~ Poiss(λ β f_θ(z))` with column-stochastic β.
//!
//! β is parameterised by unconstrained logits with a softmax over each column,
//! so gradient steps never leave the simplex.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::ln_gamma;

use super::{Likelihood, LikelihoodParams, ScalePosterior, ThetaTerm};
use crate::beta_bernoulli::digamma_unchecked;
use crate::error::{check_len, Error, Result};
use crate::nn::{Activation, DecoderNetwork, GradientBuffer};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaPrior {
    pub a: f64,
    pub b: f64,
}

impl GammaPrior {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) || !(b > 0.0 && b.is_finite()) {
            return Err(Error::invalid(format!("gamma prior a ({a}) and b ({b}) must be positive")));
        }
        Ok(Self { a, b })
    }
}

impl Default for GammaPrior {
    fn default() -> Self {
        Self { a: 1.0, b: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaScalePosterior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaScalePosterior {
    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    /// `E[ln λ] = ψ(shape) − ln(rate)`.
    pub fn expected_ln(&self) -> f64 {
        digamma_unchecked(self.shape) - self.rate.ln()
    }
}

/// W×T word-by-topic matrix, stored row-major (`[w * T + t]`).
#[derive(Clone, Debug, PartialEq)]
pub struct TopicMatrix {
    words: usize,
    topics: usize,
    logits: Vec<f64>,
    beta: Vec<f64>,
}

impl TopicMatrix {
    pub fn from_logits(words: usize, topics: usize, logits: Vec<f64>) -> Result<Self> {
        if words == 0 || topics == 0 {
            return Err(Error::invalid("topic matrix needs at least one word and one topic"));
        }
        check_len("topic logits", words * topics, logits.len())?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("topic logits".into()));
        }
        let mut m = Self {
            words,
            topics,
            logits,
            beta: vec![0.0; words * topics],
        };
        m.refresh();
        Ok(m)
    }

    /// Small random logits, so every column starts close to uniform.
    pub fn random(words: usize, topics: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = (0..words * topics).map(|_| rng.random_range(-0.1..0.1)).collect();
        Self::from_logits(words, topics, logits)
    }

    pub fn words(&self) -> usize {
        self.words
    }

    pub fn topics(&self) -> usize {
        self.topics
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn get(&self, w: usize, t: usize) -> f64 {
        self.beta[w * self.topics + t]
    }

    pub fn column(&self, t: usize) -> Vec<f64> {
        (0..self.words).map(|w| self.get(w, t)).collect()
    }

    /// Recomputes β from the logits (column-wise softmax).
    pub fn refresh(&mut self) {
        let t_count = self.topics;
        for t in 0..t_count {
            let max = (0..self.words)
                .map(|w| self.logits[w * t_count + t])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for w in 0..self.words {
                let e = (self.logits[w * t_count + t] - max).exp();
                self.beta[w * t_count + t] = e;
                total += e;
            }
            for w in 0..self.words {
                self.beta[w * t_count + t] /= total;
            }
        }
    }

    /// Word rates `φ = β f`.
    pub fn rates(&self, f: &[f64]) -> Vec<f64> {
        (0..self.words)
            .map(|w| {
                let row = &self.beta[w * self.topics..(w + 1) * self.topics];
                row.iter().zip(f).map(|(b, p)| b * p).sum()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoissonLikelihoodConfig {
    pub prior: GammaPrior,
    pub topics: TopicMatrix,
}

fn check_counts(x: &[f64]) -> Result<()> {
    if let Some(v) = x.iter().find(|v| !(**v >= 0.0 && v.fract() == 0.0 && v.is_finite())) {
        return Err(Error::invalid(format!("count {v} is not a nonnegative integer")));
    }
    Ok(())
}

/// `q(λ) = Gamma(Σ_w x_w + a, b + 1)`. Takes only the prior: the posterior
/// never depends on the decoder or β.
pub fn poiss_lambda_posterior(x: &[f64], prior: &GammaPrior) -> Result<GammaScalePosterior> {
    check_counts(x)?;
    Ok(GammaScalePosterior {
        shape: x.iter().sum::<f64>() + prior.a,
        rate: prior.b + 1.0,
    })
}

/// `Σ_w [x_w ln φ_w − E[λ] φ_w]`; `−∞` when a word with a positive count has
/// zero rate.
pub fn poiss_bound(
    x: &[f64],
    f: &[f64],
    topics: &TopicMatrix,
    post: &GammaScalePosterior,
) -> Result<f64> {
    check_len("poisson datum", topics.words(), x.len())?;
    check_len("topic distribution", topics.topics(), f.len())?;
    Ok(bound_unchecked(x, &topics.rates(f), post.mean()))
}

fn bound_unchecked(x: &[f64], phi: &[f64], mean: f64) -> f64 {
    let mut total = 0.0;
    for (&xw, &p) in x.iter().zip(phi) {
        if xw > 0.0 {
            if p <= 0.0 {
                return f64::NEG_INFINITY;
            }
            total += xw * p.ln();
        }
        total -= mean * p;
    }
    total
}

/// Value and derivatives of [`poiss_bound`] with respect to the topic
/// distribution `f` and the β logits.
pub fn poiss_theta_upstream(
    x: &[f64],
    f: &[f64],
    topics: &TopicMatrix,
    post: &GammaScalePosterior,
) -> Result<ThetaTerm> {
    check_len("poisson datum", topics.words(), x.len())?;
    check_len("topic distribution", topics.topics(), f.len())?;
    let phi = topics.rates(f);
    let mean = post.mean();
    let value = bound_unchecked(x, &phi, mean);
    if !value.is_finite() {
        return Err(Error::NonFinite("poisson bound (zero rate on observed word)".into()));
    }
    let d_phi: Vec<f64> = x
        .iter()
        .zip(&phi)
        .map(|(&xw, &p)| if xw > 0.0 { xw / p - mean } else { -mean })
        .collect();
    let t_count = topics.topics();
    let beta = topics.beta();
    let mut d_output = vec![0.0; t_count];
    let mut col_dot = vec![0.0; t_count];
    for (w, &dp) in d_phi.iter().enumerate() {
        for t in 0..t_count {
            let b = beta[w * t_count + t];
            d_output[t] += b * dp;
            col_dot[t] += b * dp;
        }
    }
    let mut d_aux = vec![0.0; beta.len()];
    for (w, &dp) in d_phi.iter().enumerate() {
        for t in 0..t_count {
            let i = w * t_count + t;
            d_aux[i] = beta[i] * f[t] * (dp - col_dot[t]);
        }
    }
    Ok(ThetaTerm {
        value,
        d_output,
        d_aux,
    })
}

/// Bound, decoder gradient and β-logit gradient for one datum.
pub fn poiss_theta_grad(
    x: &[f64],
    z: &[f64],
    net: &DecoderNetwork,
    cfg: &PoissonLikelihoodConfig,
    post: &GammaScalePosterior,
) -> Result<(f64, GradientBuffer, Vec<f64>)> {
    let f = net.forward(z)?;
    let term = poiss_theta_upstream(x, &f, &cfg.topics, post)?;
    let grads = net.backward(z, &term.d_output)?;
    Ok((term.value, grads, term.d_aux))
}

/// Fully normalised `ln Poiss(x | rates)`.
pub fn poiss_log_pmf(x: &[f64], rates: &[f64]) -> f64 {
    x.iter()
        .zip(rates)
        .map(|(&xw, &r)| {
            if xw == 0.0 {
                -r
            } else if r <= 0.0 {
                f64::NEG_INFINITY
            } else {
                xw * r.ln() - r - ln_gamma(xw + 1.0)
            }
        })
        .sum()
}

/// Terms of `E_q[ln p(x, λ | θ, z)]` that [`poiss_bound`] leaves out: the
/// `E[ln λ]` part of the data term, the log-factorials and the expected
/// Gamma log prior.
pub fn poiss_dropped_constant(x: &[f64], prior: &GammaPrior, post: &GammaScalePosterior) -> f64 {
    let eln = post.expected_ln();
    let data: f64 = x.iter().map(|&xw| xw * eln - ln_gamma(xw + 1.0)).sum();
    let log_prior = prior.a * prior.b.ln() - ln_gamma(prior.a) + (prior.a - 1.0) * eln - prior.b * post.mean();
    data + log_prior
}

#[derive(Clone, Debug)]
pub struct PoissonLikelihood {
    pub cfg: PoissonLikelihoodConfig,
}

impl PoissonLikelihood {
    pub fn new(prior: GammaPrior, topics: TopicMatrix) -> Self {
        Self {
            cfg: PoissonLikelihoodConfig { prior, topics },
        }
    }
}

pub(super) fn factory(
    params: &LikelihoodParams,
    data_dim: usize,
    seed: u64,
) -> Result<Box<dyn Likelihood>> {
    let prior = GammaPrior::new(params.gamma_a, params.gamma_b)?;
    let topics = TopicMatrix::random(data_dim, params.topics, seed)?;
    Ok(Box::new(PoissonLikelihood::new(prior, topics)))
}

impl Likelihood for PoissonLikelihood {
    fn name(&self) -> &'static str {
        "poisson"
    }

    fn final_activation(&self) -> Activation {
        Activation::Softmax
    }

    fn decoder_width(&self, _data_dim: usize) -> usize {
        self.cfg.topics.topics()
    }

    fn validate_datum(&self, x: &[f64]) -> Result<()> {
        check_len("poisson datum", self.cfg.topics.words(), x.len())?;
        check_counts(x)
    }

    fn scale_posterior(&self, x: &[f64], _f: &[f64]) -> Result<ScalePosterior> {
        poiss_lambda_posterior(x, &self.cfg.prior).map(ScalePosterior::Gamma)
    }

    fn scale_is_fixed(&self) -> bool {
        true
    }

    fn pursuit_loglik(&self, x: &[f64], f: &[f64], scale: &ScalePosterior) -> f64 {
        bound_unchecked(x, &self.cfg.topics.rates(f), scale.mean())
    }

    fn theta_term(&self, x: &[f64], f: &[f64], scale: &ScalePosterior) -> Result<ThetaTerm> {
        let ScalePosterior::Gamma(post) = scale else {
            return Err(Error::invalid("poisson model needs a gamma scale posterior"));
        };
        poiss_theta_upstream(x, f, &self.cfg.topics, post)
    }

    fn reconstruction_loss(&self, x: &[f64], f: &[f64], scale: &ScalePosterior) -> f64 {
        let mean = scale.mean();
        let rates: Vec<f64> = self.cfg.topics.rates(f).into_iter().map(|r| mean * r).collect();
        -poiss_log_pmf(x, &rates)
    }

    fn metric_name(&self) -> &'static str {
        "nll"
    }

    fn hyperparameters(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("a", self.cfg.prior.a),
            ("b", self.cfg.prior.b),
            ("topics", self.cfg.topics.topics() as f64),
        ]
    }

    fn aux_params(&self) -> &[f64] {
        &self.cfg.topics.logits
    }

    fn aux_params_mut(&mut self) -> &mut [f64] {
        &mut self.cfg.topics.logits
    }

    fn aux_params_updated(&mut self) {
        self.cfg.topics.refresh();
    }

    fn topic_matrix(&self) -> Option<&TopicMatrix> {
        Some(&self.cfg.topics)
    }

    fn clone_box(&self) -> Box<dyn Likelihood> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_are_stochastic() {
        let m = TopicMatrix::random(9, 4, 3).unwrap();
        for t in 0..4 {
            let col = m.column(t);
            assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(col.iter().all(|&b| b > 0.0));
        }
    }

    #[test]
    fn posterior_by_substitution() {
        let prior = GammaPrior::new(1.0, 1.0).unwrap();
        let p = poiss_lambda_posterior(&[2.0, 0.0, 3.0], &prior).unwrap();
        assert_eq!((p.shape, p.rate), (6.0, 2.0));
        let p = poiss_lambda_posterior(&[0.0; 4], &GammaPrior::new(2.5, 0.5).unwrap()).unwrap();
        assert_eq!((p.shape, p.rate), (2.5, 1.5));
    }

    #[test]
    fn negative_or_fractional_counts_rejected() {
        let prior = GammaPrior::default();
        assert!(poiss_lambda_posterior(&[1.0, -1.0], &prior).is_err());
        assert!(poiss_lambda_posterior(&[0.5], &prior).is_err());
    }

    #[test]
    fn single_topic_bound_is_cross_entropy() {
        let m = TopicMatrix::from_logits(3, 1, vec![0.2, -1.0, 0.5]).unwrap();
        let x = [2.0, 0.0, 1.0];
        let post = poiss_lambda_posterior(&x, &GammaPrior::default()).unwrap();
        let b = m.column(0);
        let expect = 2.0 * b[0].ln() + b[2].ln() - post.mean();
        assert!((poiss_bound(&x, &[1.0], &m, &post).unwrap() - expect).abs() < 1e-13);
    }

    #[test]
    fn rate_mass_is_code_independent() {
        let m = TopicMatrix::random(6, 3, 11).unwrap();
        let zero = [0.0; 6];
        let post = GammaScalePosterior { shape: 4.0, rate: 2.0 };
        for f in [[1.0, 0.0, 0.0], [0.2, 0.3, 0.5], [0.0, 0.9, 0.1]] {
            let phi = m.rates(&f);
            assert!((phi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let v = poiss_bound(&zero, &f, &m, &post).unwrap();
            assert!((v + post.mean()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rate_with_count_is_sentinel() {
        let m = TopicMatrix::from_logits(2, 2, vec![0.0, -1e308, 0.0, 0.0]).unwrap();
        let post = GammaScalePosterior { shape: 2.0, rate: 2.0 };
        // f puts all mass on topic 1, whose column gives word 0 zero weight.
        let v = poiss_bound(&[1.0, 0.0], &[0.0, 1.0], &m, &post).unwrap();
        assert_eq!(v, f64::NEG_INFINITY);
        assert!(poiss_theta_upstream(&[1.0, 0.0], &[0.0, 1.0], &m, &post).is_err());
    }

    #[test]
    fn empty_document_has_no_logit_gradient() {
        let m = TopicMatrix::random(5, 3, 2).unwrap();
        let post = GammaScalePosterior { shape: 1.0, rate: 2.0 };
        let term = poiss_theta_upstream(&[0.0; 5], &[0.5, 0.25, 0.25], &m, &post).unwrap();
        assert!(term.d_aux.iter().all(|g| g.abs() < 1e-15));
        assert!(term.d_output.iter().all(|g| (g + post.mean()).abs() < 1e-12));
    }

    #[test]
    fn data_gradient_doubles_with_counts() {
        let m = TopicMatrix::random(4, 2, 5).unwrap();
        let f = [0.35, 0.65];
        let x = [3.0, 0.0, 1.0, 2.0];
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        // Same frozen posterior for both, so only the data term differs.
        let post = poiss_lambda_posterior(&x, &GammaPrior::default()).unwrap();
        let zero = poiss_theta_upstream(&[0.0; 4], &f, &m, &post).unwrap();
        let one = poiss_theta_upstream(&x, &f, &m, &post).unwrap();
        let two = poiss_theta_upstream(&x2, &f, &m, &post).unwrap();
        for t in 0..2 {
            let d1 = one.d_output[t] - zero.d_output[t];
            let d2 = two.d_output[t] - zero.d_output[t];
            assert!((d2 - 2.0 * d1).abs() < 1e-12);
        }
        for i in 0..8 {
            let d1 = one.d_aux[i] - zero.d_aux[i];
            let d2 = two.d_aux[i] - zero.d_aux[i];
            assert!((d2 - 2.0 * d1).abs() < 1e-12);
        }
    }

    #[test]
    fn log_pmf_matches_scalar_formula() {
        let v = poiss_log_pmf(&[3.0, 0.0], &[2.0, 0.5]);
        let expect = 3.0 * 2f64.ln() - 2.0 - 6f64.ln() - 0.5;
        assert!((v - expect).abs() < 1e-12);
    }
}
