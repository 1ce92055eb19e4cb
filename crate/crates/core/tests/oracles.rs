//! Closed forms checked against quadrature, Monte-Carlo and scalar references.

mod common;

use bbpsc::beta_bernoulli::{expected_log_prior, BetaPosterior};
use bbpsc::likelihood::bernoulli::bern_loglik;
use bbpsc::likelihood::gaussian::{
    gauss_dropped_constant, gauss_lambda_posterior, gauss_marginal_loglik, gauss_theta_bound,
};
use bbpsc::likelihood::poisson::{poiss_bound, poiss_dropped_constant, poiss_lambda_posterior};
use bbpsc::likelihood::{GammaPrior, GaussianLikelihoodConfig, TopicMatrix};
use bbpsc::SparseCode;
use common::*;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use statrs::distribution::{Bernoulli, Discrete};
use statrs::function::gamma::ln_gamma;

fn random_gaussian_instance(rng: &mut impl Rng, max_dim: usize) -> (Vec<f64>, Vec<f64>, GaussianLikelihoodConfig) {
    let d = rng.random_range(1..=max_dim);
    let cfg = GaussianLikelihoodConfig::new(rng.random_range(0.05..2.0), rng.random_range(0.2..3.0)).unwrap();
    let f: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
    (x, f, cfg)
}

fn log_joint_gauss(lambda: f64, x: &[f64], f: &[f64], cfg: &GaussianLikelihoodConfig) -> f64 {
    ln_normal(lambda, 0.0, cfg.c)
        + x.iter()
            .zip(f)
            .map(|(&xi, &fi)| ln_normal(xi, lambda * fi, cfg.sigma2))
            .sum::<f64>()
}

fn ln_poisson(x: f64, rate: f64) -> f64 {
    x * rate.ln() - rate - ln_gamma(x + 1.0)
}

fn ln_gamma_density(l: f64, a: f64, b: f64) -> f64 {
    a * b.ln() - ln_gamma(a) + (a - 1.0) * l.ln() - b * l
}

#[test]
fn gaussian_posterior_hand_example() {
    let cfg = GaussianLikelihoodConfig::new(1.0, 1.0).unwrap();
    let post = gauss_lambda_posterior(&[2.0, 0.0], &[1.0, 0.0], &cfg).unwrap();
    assert_eq!((post.variance, post.mean), (0.5, 1.0));
    let prior = gauss_lambda_posterior(&[2.0, 0.0], &[0.0, 0.0], &cfg).unwrap();
    assert_eq!((prior.variance, prior.mean), (cfg.c, 0.0));
}

#[test]
fn gaussian_posterior_matches_quadrature() {
    let mut r = rng(11);
    for _ in 0..50 {
        let (x, f, cfg) = random_gaussian_instance(&mut r, 6);
        let post = gauss_lambda_posterior(&x, &f, &cfg).unwrap();
        let q = log_quadrature(|l| log_joint_gauss(l, &x, &f, &cfg), -60.0, 60.0);
        assert!((q.mean - post.mean).abs() < 1e-6, "mean {} vs {}", q.mean, post.mean);
        assert!((q.variance - post.variance).abs() < 1e-6, "var {} vs {}", q.variance, post.variance);
    }
}

#[test]
fn gaussian_marginal_matches_quadrature() {
    let mut r = rng(12);
    for _ in 0..50 {
        let (x, f, cfg) = random_gaussian_instance(&mut r, 4);
        let q = log_quadrature(|l| log_joint_gauss(l, &x, &f, &cfg), -60.0, 60.0);
        let closed = gauss_marginal_loglik(&x, &f, &cfg).unwrap();
        assert!((q.log_mass - closed).abs() < 1e-6, "{} vs {closed}", q.log_mass);
    }
}

#[test]
fn gaussian_marginal_zero_decoder() {
    let cfg = GaussianLikelihoodConfig::new(0.3, 2.0).unwrap();
    let x = [0.5, -1.0, 2.0];
    let kappa = -1.5 * (2.0 * std::f64::consts::PI * 0.3).ln();
    let expected = -(0.25 + 1.0 + 4.0) / 0.6 + kappa;
    let got = gauss_marginal_loglik(&x, &[0.0; 3], &cfg).unwrap();
    assert!((got - expected).abs() < 1e-12);
}

#[test]
fn gaussian_theta_bound_matches_expected_log_joint() {
    let mut r = rng(13);
    for _ in 0..30 {
        let (x, f, cfg) = random_gaussian_instance(&mut r, 4);
        // A posterior from a different decoder output: the bound holds for any q.
        let g: Vec<f64> = f.iter().map(|v| v + r.random_range(-0.3..0.3)).collect();
        let post = gauss_lambda_posterior(&x, &g, &cfg).unwrap();
        let (bound, _) = gauss_theta_bound(&x, &f, &cfg, &post).unwrap();
        let target = expectation(
            |l| ln_normal(l, post.mean, post.variance),
            |l| log_joint_gauss(l, &x, &f, &cfg),
            -60.0,
            60.0,
        );
        let offset = gauss_dropped_constant(x.len(), &cfg, &post);
        assert!((bound + offset - target).abs() < 1e-5, "{} vs {target}", bound + offset);
    }
}

#[test]
fn gamma_posterior_hand_examples() {
    let prior = GammaPrior::new(1.0, 1.0).unwrap();
    let post = poiss_lambda_posterior(&[2.0, 0.0, 3.0], &prior).unwrap();
    assert_eq!((post.shape, post.rate), (6.0, 2.0));
    let empty = poiss_lambda_posterior(&[0.0; 4], &prior).unwrap();
    assert_eq!((empty.shape, empty.rate), (1.0, 2.0));
    assert!(poiss_lambda_posterior(&[-1.0], &prior).is_err());
}

#[test]
fn gamma_posterior_matches_quadrature() {
    let mut r = rng(14);
    for i in 0..50 {
        let words = r.random_range(2..7);
        let topics = TopicMatrix::random(words, 3, i).unwrap();
        let f = [0.2, 0.5, 0.3];
        let phi = topics.rates(&f);
        let prior = GammaPrior::new(r.random_range(0.5..3.0), r.random_range(0.5..3.0)).unwrap();
        let x: Vec<f64> = (0..words).map(|_| r.random_range(0..6) as f64).collect();
        let post = poiss_lambda_posterior(&x, &prior).unwrap();
        // Integrate in u = ln λ; the Jacobian adds u.
        let log_post = |u: f64| {
            let l = u.exp();
            ln_gamma_density(l, prior.a, prior.b)
                + x.iter().zip(&phi).map(|(&xw, &p)| ln_poisson(xw, l * p)).sum::<f64>()
                + u
        };
        let mean = expectation(log_post, f64::exp, -40.0, 8.0);
        let var = expectation(log_post, |u| (u.exp() - mean).powi(2), -40.0, 8.0);
        assert!((mean - post.mean()).abs() < 1e-6 * post.mean().max(1.0), "{mean} vs {}", post.mean());
        let closed_var = post.shape / (post.rate * post.rate);
        assert!((var - closed_var).abs() < 1e-6 * closed_var.max(1.0));
    }
}

#[test]
fn poisson_bound_matches_expected_log_joint() {
    let mut r = rng(15);
    let prior = GammaPrior::new(1.5, 0.7).unwrap();
    for i in 0..20 {
        let topics = TopicMatrix::random(3, 2, 100 + i).unwrap();
        let w = r.random_range(0.05..0.95);
        let f = [w, 1.0 - w];
        let x: Vec<f64> = (0..3).map(|_| r.random_range(0..5) as f64).collect();
        let post = poiss_lambda_posterior(&x, &prior).unwrap();
        let phi = topics.rates(&f);
        let q = |u: f64| ln_gamma_density(u.exp(), post.shape, post.rate) + u;
        let target = expectation(
            q,
            |u| {
                let l = u.exp();
                x.iter().zip(&phi).map(|(&xw, &p)| ln_poisson(xw, l * p)).sum::<f64>()
                    + ln_gamma_density(l, prior.a, prior.b)
            },
            -40.0,
            8.0,
        );
        let bound = poiss_bound(&x, &f, &topics, &post).unwrap();
        let got = bound + poiss_dropped_constant(&x, &prior, &post);
        assert!((got - target).abs() < 1e-6, "{got} vs {target}");
    }
}

#[test]
fn poisson_single_topic_is_cross_entropy() {
    let topics = TopicMatrix::random(4, 1, 3).unwrap();
    let prior = GammaPrior::default();
    let x = [1.0, 0.0, 2.0, 5.0];
    let post = poiss_lambda_posterior(&x, &prior).unwrap();
    let beta = topics.column(0);
    let expected: f64 = x.iter().zip(&beta).map(|(&xw, &b)| xw * b.ln()).sum::<f64>() - post.mean();
    let got = poiss_bound(&x, &[1.0], &topics, &post).unwrap();
    assert!((got - expected).abs() < 1e-12);
}

#[test]
fn bernoulli_matches_scalar_reference() {
    let mut r = rng(16);
    for _ in 0..100 {
        let d = r.random_range(1..20);
        let f: Vec<f64> = (0..d).map(|_| r.random_range(0.01..0.99)).collect();
        let x: Vec<f64> = (0..d).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let reference: f64 = x
            .iter()
            .zip(&f)
            .map(|(&xd, &p)| Bernoulli::new(p).unwrap().ln_pmf(xd as u64))
            .sum();
        assert!((bern_loglik(&x, &f).unwrap() - reference).abs() < 1e-12);
    }
    let half = vec![0.5; 7];
    let got = bern_loglik(&[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0], &half).unwrap();
    assert!((got - 7.0 * 0.5f64.ln()).abs() < 1e-12);
}

#[test]
fn expected_log_prior_matches_monte_carlo() {
    let mut r = rng(17);
    let samples = 1_000_000;
    for _ in 0..10 {
        let k = 4;
        let post = BetaPosterior {
            a: (0..k).map(|_| r.random_range(0.2..20.0)).collect(),
            b: (0..k).map(|_| r.random_range(0.2..200.0)).collect(),
            step_count: 0,
        };
        let z = SparseCode::from_bits((0..k).map(|_| r.random_bool(0.5)).collect());
        let betas: Vec<Beta<f64>> = post.a.iter().zip(&post.b).map(|(&a, &b)| Beta::new(a, b).unwrap()).collect();
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..samples {
            let v: f64 = betas
                .iter()
                .zip(z.bits())
                .map(|(beta, &on)| {
                    let p: f64 = beta.sample(&mut r);
                    if on { p.ln() } else { (-p).ln_1p() }
                })
                .sum();
            sum += v;
            sum2 += v * v;
        }
        let n = samples as f64;
        let mean = sum / n;
        let se = ((sum2 / n - mean * mean) / n).sqrt();
        let closed = expected_log_prior(&z, &post).unwrap();
        assert!((mean - closed).abs() < 3.0 * se, "{mean} vs {closed} (se {se})");
    }
}
