//! Analytic gradients against central finite differences.

mod common;

use bbpsc::likelihood::bernoulli::{bern_loglik, bern_theta_grad};
use bbpsc::likelihood::gaussian::{gauss_lambda_posterior, gauss_theta_bound, gauss_theta_bound_and_grad};
use bbpsc::likelihood::poisson::{poiss_bound, poiss_lambda_posterior, poiss_theta_grad, poiss_theta_upstream};
use bbpsc::likelihood::{GammaPrior, GaussianLikelihoodConfig, TopicMatrix};
use bbpsc::nn::{Activation, DecoderNetwork, DenseLayer, GradientBuffer};
use bbpsc::likelihood::poisson::PoissonLikelihoodConfig;
use common::*;
use rand::Rng;

const H: f64 = 1e-5;
const REL: f64 = 1e-4;
const FLOOR: f64 = 1e-8;

fn random_code(r: &mut impl Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect()
}

/// Checks `grads` against finite differences of `objective(net)` over every
/// decoder parameter.
fn check_decoder(net: &DecoderNetwork, grads: &GradientBuffer, objective: impl Fn(&DecoderNetwork) -> f64) -> f64 {
    let mut probe = net.clone();
    let mut flat = flatten(net.tensors());
    let numeric = central_differences(&mut flat, H, |p| {
        unflatten(&mut probe, p);
        objective(&probe)
    });
    max_relative_error(&flatten(grads.tensors()), &numeric, FLOOR)
}

#[test]
fn decoder_backward_matches_finite_differences() {
    let mut r = rng(21);
    for i in 0..20 {
        let act = [Activation::Sigmoid, Activation::Softmax, Activation::Identity][i % 3];
        let (k, h, d) = (r.random_range(2..5), r.random_range(2..5), r.random_range(2..5));
        let net = random_net(k, &[h], d, act, 100 + i as u64);
        assert!(net.parameter_count() <= 64);
        let z = random_code(&mut r, k);
        let upstream: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let grads = net.backward(&z, &upstream).unwrap();
        let err = check_decoder(&net, &grads, |n| {
            n.forward(&z).unwrap().iter().zip(&upstream).map(|(a, b)| a * b).sum()
        });
        assert!(err < REL, "instance {i}: relative error {err}");
    }
}

#[test]
fn gradients_add_over_a_batch() {
    let mut r = rng(22);
    let net = random_net(4, &[5], 3, Activation::Sigmoid, 7);
    let mut total = GradientBuffer::zeros_for(&net);
    let mut summed = GradientBuffer::zeros_for(&net);
    for _ in 0..6 {
        let z = random_code(&mut r, 4);
        let up: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        net.backward_into(&z, &up, &mut total).unwrap();
        summed.add_assign(&net.backward(&z, &up).unwrap()).unwrap();
    }
    assert_eq!(total.count, 6);
    for (a, b) in flatten(total.tensors()).iter().zip(flatten(summed.tensors())) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gaussian_theta_gradient_matches_finite_differences() {
    let mut r = rng(23);
    for i in 0..20 {
        let (k, d) = (r.random_range(2..5), r.random_range(2..5));
        let net = random_net(k, &[4], d, Activation::Sigmoid, 200 + i);
        let cfg = GaussianLikelihoodConfig::new(r.random_range(0.05..1.0), r.random_range(0.5..2.0)).unwrap();
        let z = random_code(&mut r, k);
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
        let post = gauss_lambda_posterior(&x, &net.forward(&z).unwrap(), &cfg).unwrap();
        let (_, grads) = gauss_theta_bound_and_grad(&x, &z, &net, &cfg, &post).unwrap();
        let err = check_decoder(&net, &grads, |n| {
            gauss_theta_bound(&x, &n.forward(&z).unwrap(), &cfg, &post).unwrap().0
        });
        assert!(err < REL, "instance {i}: relative error {err}");
    }
}

#[test]
fn gaussian_point_mass_scale_reduces_to_squared_error() {
    let cfg = GaussianLikelihoodConfig::new(0.5, 1.0).unwrap();
    let post = bbpsc::likelihood::GaussianScalePosterior { mean: 1.0, variance: 0.0 };
    let x = [0.3, -0.2, 1.0];
    let f = [0.1, 0.4, 0.7];
    let (value, grad) = gauss_theta_bound(&x, &f, &cfg, &post).unwrap();
    let sq: f64 = x.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum();
    assert!((value + sq / 1.0).abs() < 1e-12);
    for ((g, a), b) in grad.iter().zip(&x).zip(&f) {
        assert!((g - (a - b) / 0.5).abs() < 1e-12);
    }
}

#[test]
fn poisson_theta_gradient_matches_finite_differences() {
    let mut r = rng(24);
    for i in 0..20 {
        let (k, t, w) = (r.random_range(2..4), r.random_range(2..4), r.random_range(3..6));
        let net = random_net(k, &[3], t, Activation::Softmax, 300 + i);
        let topics = TopicMatrix::random(w, t, 400 + i).unwrap();
        let cfg = PoissonLikelihoodConfig {
            prior: GammaPrior::default(),
            topics: topics.clone(),
        };
        let z = random_code(&mut r, k);
        let x: Vec<f64> = (0..w).map(|_| r.random_range(0..5) as f64).collect();
        let post = poiss_lambda_posterior(&x, &cfg.prior).unwrap();
        let (_, grads, d_logits) = poiss_theta_grad(&x, &z, &net, &cfg, &post).unwrap();

        let err = check_decoder(&net, &grads, |n| poiss_bound(&x, &n.forward(&z).unwrap(), &topics, &post).unwrap());
        assert!(err < REL, "instance {i}: decoder relative error {err}");

        let f = net.forward(&z).unwrap();
        let mut logits = topics.logits().to_vec();
        let numeric = central_differences(&mut logits, H, |l| {
            let tm = TopicMatrix::from_logits(w, t, l.to_vec()).unwrap();
            poiss_bound(&x, &f, &tm, &post).unwrap()
        });
        let err = max_relative_error(&d_logits, &numeric, FLOOR);
        assert!(err < REL, "instance {i}: logit relative error {err}");
    }
}

#[test]
fn poisson_zero_counts_give_zero_logit_gradient() {
    let topics = TopicMatrix::random(5, 3, 9).unwrap();
    let x = [0.0; 5];
    let post = poiss_lambda_posterior(&x, &GammaPrior::default()).unwrap();
    let term = poiss_theta_upstream(&x, &[0.2, 0.3, 0.5], &topics, &post).unwrap();
    assert!(term.d_aux.iter().all(|g| g.abs() < 1e-14));
}

#[test]
fn poisson_data_term_gradient_is_linear_in_counts() {
    let topics = TopicMatrix::random(4, 2, 10).unwrap();
    let f = [0.35, 0.65];
    let x = [1.0, 0.0, 3.0, 2.0];
    let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
    // Frozen posterior with E[λ] = 0 isolates the data term.
    let post = bbpsc::likelihood::GammaScalePosterior { shape: 0.0, rate: 1.0 };
    let one = poiss_theta_upstream(&x, &f, &topics, &post).unwrap();
    let two = poiss_theta_upstream(&x2, &f, &topics, &post).unwrap();
    for (a, b) in one.d_output.iter().zip(&two.d_output) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
    for (a, b) in one.d_aux.iter().zip(&two.d_aux) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn bernoulli_theta_gradient_matches_finite_differences() {
    let mut r = rng(25);
    for i in 0..20 {
        let (k, d) = (r.random_range(2..5), r.random_range(2..6));
        let net = random_net(k, &[4], d, Activation::Sigmoid, 500 + i);
        let z = random_code(&mut r, k);
        let x = random_code(&mut r, d);
        let (_, grads) = bern_theta_grad(&x, &z, &net).unwrap();
        let err = check_decoder(&net, &grads, |n| bern_loglik(&x, &n.forward(&z).unwrap()).unwrap());
        assert!(err < REL, "instance {i}: relative error {err}");
    }
}

#[test]
fn bernoulli_gradient_vanishes_when_output_equals_interior_data() {
    let mut layer = DenseLayer::zeros(2, 3, Activation::Identity);
    layer.bias = vec![0.3, 0.6, 0.8];
    let net = DecoderNetwork::from_layers(vec![layer]).unwrap();
    let (_, grads) = bern_theta_grad(&[0.3, 0.6, 0.8], &[1.0, 0.0], &net).unwrap();
    assert!(flatten(grads.tensors()).iter().all(|g| g.abs() < 1e-12));
}
