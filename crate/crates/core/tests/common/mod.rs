//! Independent numerical oracles shared by the integration tests.
#![allow(dead_code)]

use bbpsc::nn::{Activation, DecoderNetwork};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Composite Simpson rule with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (hi - lo) / n as f64;
    let mut total = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        total += w * f(lo + i as f64 * h);
    }
    total * h / 3.0
}

/// Support of `exp(g)` where `g` is within `drop` nats of its maximum,
/// located by a grid scan over `[lo, hi]` and then widened step by step.
fn bracket(g: &impl Fn(f64) -> f64, lo: f64, hi: f64, drop: f64) -> (f64, f64, f64) {
    let n = 20_000;
    let step = (hi - lo) / n as f64;
    let (mut arg, mut best) = (lo, f64::NEG_INFINITY);
    for i in 0..=n {
        let t = lo + i as f64 * step;
        let v = g(t);
        if v > best {
            best = v;
            arg = t;
        }
    }
    let fine = step / 50.0;
    let mut left = arg;
    while left > lo && g(left) > best - drop {
        left -= fine;
    }
    let mut right = arg;
    while right < hi && g(right) > best - drop {
        right += fine;
    }
    (left.max(lo), right.min(hi), best)
}

/// `ln ∫ exp(g(t)) dt` together with the mean and variance of the normalised
/// density, by Simpson quadrature over the numerically located mass.
pub struct LogQuadrature {
    pub log_mass: f64,
    pub mean: f64,
    pub variance: f64,
}

pub fn log_quadrature(g: impl Fn(f64) -> f64, lo: f64, hi: f64) -> LogQuadrature {
    let (a, b, peak) = bracket(&g, lo, hi, 60.0);
    let n = 40_000;
    let w = |t: f64| (g(t) - peak).exp();
    let mass = simpson(w, a, b, n);
    let mean = simpson(|t| t * w(t), a, b, n) / mass;
    let variance = simpson(|t| (t - mean).powi(2) * w(t), a, b, n) / mass;
    LogQuadrature {
        log_mass: mass.ln() + peak,
        mean,
        variance,
    }
}

/// `E[h(t)]` under the density proportional to `exp(g(t))`.
pub fn expectation(g: impl Fn(f64) -> f64, h: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let (a, b, peak) = bracket(&g, lo, hi, 60.0);
    let n = 40_000;
    let w = |t: f64| (g(t) - peak).exp();
    simpson(|t| h(t) * w(t), a, b, n) / simpson(w, a, b, n)
}

pub fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - mean).powi(2) / (2.0 * var)
}

/// Central differences of `f` with respect to every entry of `params`.
pub fn central_differences(params: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..params.len())
        .map(|i| {
            let orig = params[i];
            params[i] = orig + h;
            let up = f(params);
            params[i] = orig - h;
            let down = f(params);
            params[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error over entries, treating differences below `floor`
/// as exact.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if diff <= floor {
                0.0
            } else {
                diff / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}

pub fn flatten(tensors: Vec<&[f64]>) -> Vec<f64> {
    tensors.into_iter().flatten().copied().collect()
}

/// Writes a flat parameter vector back into the network.
pub fn unflatten(net: &mut DecoderNetwork, flat: &[f64]) {
    let mut offset = 0;
    for t in net.tensors_mut() {
        let n = t.len();
        t.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
}

/// Glorot decoder with biases drawn away from zero, so no ReLU sits on its
/// kink for the empty code.
pub fn random_net(k: usize, hidden: &[usize], out: usize, act: Activation, seed: u64) -> DecoderNetwork {
    let mut r = rng(seed);
    let mut net = DecoderNetwork::new(k, hidden, out, act, &mut r).unwrap();
    for layer in net.layers_mut() {
        for b in &mut layer.bias {
            *b = r.random_range(0.05..0.5) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
        }
    }
    net
}

/// Pixel sets of the nine strokes used by [`stroke_images`] on a 14×14 grid:
/// three rows, three columns, both diagonals and a square ring.
pub fn strokes() -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for r in [3, 7, 10] {
        out.push((2..12).map(|c| r * 14 + c).collect());
    }
    for c in [3, 7, 10] {
        out.push((2..12).map(|r| r * 14 + c).collect());
    }
    out.push((2..12).map(|i| i * 14 + i).collect());
    out.push((2..12).map(|i| i * 14 + (13 - i)).collect());
    let mut ring = Vec::new();
    for i in 4..10 {
        ring.extend([4 * 14 + i, 9 * 14 + i, i * 14 + 4, i * 14 + 9]);
    }
    out.push(ring);
    out
}

/// Binary 14×14 images, each the union of strokes switched on with
/// probability 0.2 (at least one per image), with 2% of pixels flipped.
pub fn stroke_images(n: usize, seed: u64) -> bbpsc::datasets::DenseDataset {
    let mut r = rng(seed);
    let strokes = strokes();
    let mut values = vec![0.0; n * 196];
    for img in values.chunks_mut(196) {
        let mut any = false;
        for s in &strokes {
            if r.random_bool(0.2) {
                any = true;
                s.iter().for_each(|&p| img[p] = 1.0);
            }
        }
        if !any {
            strokes[r.random_range(0..strokes.len())].iter().for_each(|&p| img[p] = 1.0);
        }
        for p in img.iter_mut() {
            if r.random_bool(0.02) {
                *p = 1.0 - *p;
            }
        }
    }
    let provenance = bbpsc::datasets::Provenance::new(format!("strokes(n={n},seed={seed})"));
    bbpsc::datasets::DenseDataset::new(n, 196, values, provenance).unwrap()
}

/// Gaussian data drawn from the model itself.
pub fn gaussian_synthetic(n: usize, seed: u64) -> bbpsc::datasets::SyntheticData {
    use bbpsc::datasets::{generate_synthetic, SyntheticLikelihood, SyntheticSpec};
    generate_synthetic(&SyntheticSpec {
        likelihood: SyntheticLikelihood::Gaussian { sigma2: 0.1, c: 1.0 },
        k: 8,
        data_dim: 16,
        hidden: vec![16],
        weight_scale: 6.0,
        alpha: 1.0,
        gamma_mass: 2.0,
        n,
        seed,
    })
    .unwrap()
}
