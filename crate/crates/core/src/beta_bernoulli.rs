//! Finite beta-Bernoulli prior over code bits: the posterior `q(π)`, its
//! stochastic natural-gradient update and the expected log prior used as a
//! penalty inside every pursuit bound.

use crate::error::{check_len, Error, Result};
use crate::SparseCode;

/// Digamma function `ψ(x)` for `x > 0`.
///
/// Shifts the argument up to at least 6 with `ψ(x) = ψ(x+1) − 1/x` and then
/// evaluates the asymptotic series.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::invalid(format!("digamma argument {x} must be positive and finite")));
    }
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 6.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli-number coefficients B_2k / 2k.
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * 691.0 / 32760.0)))));
    acc + x.ln() - 0.5 * inv - series
}

/// Step-size schedule `η_t = (t0 + t)^(−κ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EtaSchedule {
    pub t0: f64,
    pub kappa: f64,
}

impl Default for EtaSchedule {
    fn default() -> Self {
        Self { t0: 1.0, kappa: 0.7 }
    }
}

impl EtaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.t0 >= 1.0) || !(self.kappa >= 0.0) {
            return Err(Error::invalid("eta schedule needs t0 >= 1 and kappa >= 0"));
        }
        Ok(())
    }
}

pub fn eta_at(step: u64, schedule: &EtaSchedule) -> f64 {
    (schedule.t0 + step as f64).powf(-schedule.kappa)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaProcessConfig {
    pub alpha: f64,
    pub gamma_mass: f64,
    pub k: usize,
    pub schedule: EtaSchedule,
}

impl BetaProcessConfig {
    /// Defaults `α = 1`, `γ = K/5`.
    pub fn with_defaults(k: usize) -> Self {
        Self {
            alpha: 1.0,
            gamma_mass: k as f64 / 5.0,
            k,
            schedule: EtaSchedule::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("latent width K must be positive"));
        }
        if !(self.alpha > 0.0) || !(self.gamma_mass > 0.0) {
            return Err(Error::invalid("alpha and gamma must be positive"));
        }
        if !(self.gamma_mass < self.k as f64) {
            return Err(Error::invalid(format!(
                "gamma ({}) must be smaller than K ({})",
                self.gamma_mass, self.k
            )));
        }
        self.schedule.validate()
    }

    /// Prior Beta parameters `(αγ/K, α(1 − γ/K))`.
    pub fn prior_ab(&self) -> (f64, f64) {
        let ratio = self.gamma_mass / self.k as f64;
        (self.alpha * ratio, self.alpha * (1.0 - ratio))
    }
}

/// `q(π) = ∏_k Beta(π_k | a_k, b_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaPosterior {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub step_count: u64,
}

impl BetaPosterior {
    pub fn from_prior(cfg: &BetaProcessConfig) -> Self {
        let (a0, b0) = cfg.prior_ab();
        Self {
            a: vec![a0; cfg.k],
            b: vec![b0; cfg.k],
            step_count: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.a.len()
    }

    pub fn is_valid(&self) -> bool {
        self.a.len() == self.b.len()
            && self.a.iter().chain(&self.b).all(|&v| v > 0.0 && v.is_finite())
    }

    /// `ψ(a_k) − ψ(a_k + b_k)`, the expected log activation probability.
    pub fn expected_log_pi(&self) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(&a, &b)| digamma_unchecked(a) - digamma_unchecked(a + b))
            .collect()
    }

    /// Posterior mean of each `π_k`.
    pub fn mean(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(a, b)| a / (a + b)).collect()
    }
}

/// Precomputed expected log prior. The value is linear in `z`, so it splits
/// into the score of the empty code plus one increment per active bit.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpectedLogPrior {
    base: f64,
    increments: Vec<f64>,
}

impl ExpectedLogPrior {
    pub fn new(post: &BetaPosterior) -> Self {
        let mut base = 0.0;
        let mut increments = Vec::with_capacity(post.width());
        for (&a, &b) in post.a.iter().zip(&post.b) {
            let ab = digamma_unchecked(a + b);
            let on = digamma_unchecked(a) - ab;
            let off = digamma_unchecked(b) - ab;
            base += off;
            increments.push(on - off);
        }
        Self { base, increments }
    }

    /// Flat prior: every code scores zero.
    pub fn flat(width: usize) -> Self {
        Self {
            base: 0.0,
            increments: vec![0.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.increments.len()
    }

    pub fn empty_score(&self) -> f64 {
        self.base
    }

    /// Change in the score from switching bit `k` on.
    pub fn increment(&self, k: usize) -> f64 {
        self.increments[k]
    }

    pub fn score(&self, z: &SparseCode) -> f64 {
        self.base
            + z.bits()
                .iter()
                .zip(&self.increments)
                .filter(|(&on, _)| on)
                .map(|(_, inc)| inc)
                .sum::<f64>()
    }
}

/// `E_{q(π)}[ln p(z | π)]` evaluated term by term.
pub fn expected_log_prior(z: &SparseCode, post: &BetaPosterior) -> Result<f64> {
    check_len("code width", post.width(), z.width())?;
    Ok(post
        .a
        .iter()
        .zip(&post.b)
        .zip(z.bits())
        .map(|((&a, &b), &on)| {
            let ab = digamma_unchecked(a + b);
            if on {
                digamma_unchecked(a) - ab
            } else {
                digamma_unchecked(b) - ab
            }
        })
        .sum())
}

/// Natural-gradient step toward the batch-estimated conjugate posterior:
/// `a′ = αγ/K + (N/|S|) Σ z`, `b′ = α(1 − γ/K) + (N/|S|) Σ (1 − z)`, then
/// `a ← (1 − η) a + η a′` (same for `b`).
pub fn natural_grad_update(
    post: &BetaPosterior,
    batch_codes: &[SparseCode],
    n_total: usize,
    eta: f64,
    cfg: &BetaProcessConfig,
) -> Result<BetaPosterior> {
    if batch_codes.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("step size {eta} outside [0, 1]")));
    }
    let k = post.width();
    let mut on_counts = vec![0u64; k];
    for code in batch_codes {
        check_len("code width", k, code.width())?;
        for j in code.active() {
            on_counts[j] += 1;
        }
    }
    let batch = batch_codes.len() as u64;
    let scale = n_total as f64 / batch as f64;
    let (a0, b0) = cfg.prior_ab();
    let mut next = post.clone();
    for (j, &on) in on_counts.iter().enumerate() {
        let a_target = a0 + scale * on as f64;
        let b_target = b0 + scale * (batch - on) as f64;
        next.a[j] = (1.0 - eta) * post.a[j] + eta * a_target;
        next.b[j] = (1.0 - eta) * post.b[j] + eta * b_target;
    }
    next.step_count += 1;
    Ok(next)
}

/// Empirical per-dimension activation rate over a set of codes.
pub fn activation_probabilities(codes: &[SparseCode], width: usize) -> Vec<f64> {
    let mut rates = vec![0.0; width];
    if codes.is_empty() {
        return rates;
    }
    for code in codes {
        for j in code.active() {
            rates[j] += 1.0;
        }
    }
    let n = codes.len() as f64;
    for r in &mut rates {
        *r /= n;
    }
    rates
}
