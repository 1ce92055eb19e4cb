//! Greedy pursuit encoder.
//!
//! Starting from the empty code, each round tries every inactive bit, keeps
//! the one with the highest bound and accepts it only if the bound strictly
//! increases. Because the decoder is nonlinear, the best addition can lower
//! the bound, in which case the search stops.

use std::thread;

use crate::beta_bernoulli::ExpectedLogPrior;
use crate::error::{check_len, Error, Result};
use crate::likelihood::{Likelihood, ScalePosterior};
use crate::nn::DecoderNetwork;
use crate::SparseCode;

/// Largest width accepted by [`exhaustive_encode`].
pub const EXHAUSTIVE_LIMIT: usize = 16;

/// Objective maximised by the encoder for one datum.
pub trait BoundEvaluator {
    fn width(&self) -> usize;

    fn score(&self, code: &SparseCode) -> f64;

    /// Scores of `base ∪ {j}` for each candidate `j`, in order.
    fn score_additions(&self, base: &SparseCode, candidates: &[usize]) -> Vec<f64> {
        candidates.iter().map(|&j| self.score(&base.with(j))).collect()
    }
}

impl<E: BoundEvaluator + ?Sized> BoundEvaluator for &E {
    fn width(&self) -> usize {
        (**self).width()
    }

    fn score(&self, code: &SparseCode) -> f64 {
        (**self).score(code)
    }

    fn score_additions(&self, base: &SparseCode, candidates: &[usize]) -> Vec<f64> {
        (**self).score_additions(base, candidates)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PursuitResult {
    pub code: SparseCode,
    /// Bits in the order they were added.
    pub active_set: Vec<usize>,
    /// Score of the empty code.
    pub initial_score: f64,
    /// Score after each accepted addition.
    pub trace: Vec<f64>,
    /// Candidate codes scored (the empty-code baseline is not counted).
    pub evaluations: usize,
}

impl PursuitResult {
    pub fn score(&self) -> f64 {
        self.trace.last().copied().unwrap_or(self.initial_score)
    }
}

/// Greedy encoding with at most `max_active` bits.
pub fn encode<E: BoundEvaluator + ?Sized>(eval: &E, max_active: usize) -> PursuitResult {
    let k = eval.width();
    let mut code = SparseCode::zeros(k);
    let initial_score = eval.score(&code);
    let mut current = initial_score;
    let mut active_set = Vec::new();
    let mut trace = Vec::new();
    let mut evaluations = 0;
    let mut candidates: Vec<usize> = (0..k).collect();

    while active_set.len() < max_active.min(k) {
        let scores = eval.score_additions(&code, &candidates);
        evaluations += candidates.len();
        let mut best: Option<(usize, f64)> = None;
        for (pos, &s) in scores.iter().enumerate() {
            if best.is_none_or(|(_, b)| s > b) && !s.is_nan() {
                best = Some((pos, s));
            }
        }
        match best {
            Some((pos, s)) if s > current => {
                let j = candidates.remove(pos);
                code.set(j, true);
                active_set.push(j);
                trace.push(s);
                current = s;
            }
            _ => break,
        }
    }

    PursuitResult {
        code,
        active_set,
        initial_score,
        trace,
        evaluations,
    }
}

/// Exact argmax over all `2^K` codes. Ties go to fewer active bits, then to
/// the lexicographically smaller list of active indices.
pub fn exhaustive_encode<E: BoundEvaluator + ?Sized>(eval: &E) -> Result<(SparseCode, f64)> {
    let k = eval.width();
    if k > EXHAUSTIVE_LIMIT {
        return Err(Error::TooManyBits(k, EXHAUSTIVE_LIMIT));
    }
    let mut best_code = SparseCode::zeros(k);
    let mut best_score = eval.score(&best_code);
    let mut best_key = (0usize, Vec::new());
    for mask in 1u64..(1u64 << k) {
        let code = SparseCode::from_mask(k, mask);
        let s = eval.score(&code);
        if s.is_nan() {
            continue;
        }
        let better = if best_score.is_nan() || s > best_score {
            true
        } else if s == best_score {
            let key = (code.count(), code.active());
            key < best_key
        } else {
            false
        };
        if better {
            best_key = (code.count(), code.active());
            best_code = code;
            best_score = s;
        }
    }
    Ok((best_code, best_score))
}

/// Encodes every item, preserving order. Work is split into contiguous chunks
/// across `workers` threads; results do not depend on the worker count.
pub fn batch_encode<T, E, F>(items: &[T], factory: F, max_active: usize, workers: usize) -> Result<Vec<PursuitResult>>
where
    T: Sync,
    E: BoundEvaluator,
    F: Fn(&T) -> Result<E> + Sync,
{
    let run = |chunk: &[T]| -> Result<Vec<PursuitResult>> {
        chunk
            .iter()
            .map(|item| factory(item).map(|eval| encode(&eval, max_active)))
            .collect()
    };
    let workers = workers.max(1);
    if workers == 1 || items.len() < 2 {
        return run(items);
    }
    let chunk_len = items.len().div_ceil(workers);
    thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk_len)
            .map(|chunk| scope.spawn(move || run(chunk)))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("pursuit worker panicked")?);
        }
        Ok(out)
    })
}

/// Pursuit bound of a trained model for one datum: the model's code-dependent
/// log-likelihood term plus the expected log prior.
pub struct ModelEvaluator<'a> {
    x: &'a [f64],
    model: &'a dyn Likelihood,
    net: &'a DecoderNetwork,
    prior: &'a ExpectedLogPrior,
    scale: ScalePosterior,
}

impl<'a> ModelEvaluator<'a> {
    pub fn new(
        x: &'a [f64],
        model: &'a dyn Likelihood,
        net: &'a DecoderNetwork,
        prior: &'a ExpectedLogPrior,
        scale: ScalePosterior,
    ) -> Result<Self> {
        check_len("prior width", net.input_dim(), prior.width())?;
        check_len("decoder output", model.decoder_width(x.len()), net.output_dim())?;
        Ok(Self {
            x,
            model,
            net,
            prior,
            scale,
        })
    }

    fn loglik(&self, f: &[f64]) -> f64 {
        self.model.pursuit_loglik(self.x, f, &self.scale)
    }
}

impl BoundEvaluator for ModelEvaluator<'_> {
    fn width(&self) -> usize {
        self.net.input_dim()
    }

    fn score(&self, code: &SparseCode) -> f64 {
        let f = self
            .net
            .forward_code(code)
            .expect("code width checked at construction");
        self.loglik(&f) + self.prior.score(code)
    }

    fn score_additions(&self, base: &SparseCode, candidates: &[usize]) -> Vec<f64> {
        let outputs = self
            .net
            .forward_additions(base, candidates)
            .expect("code width checked at construction");
        let base_prior = self.prior.score(base);
        outputs
            .iter()
            .zip(candidates)
            .map(|(f, &j)| self.loglik(f) + base_prior + self.prior.increment(j))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Modular(Vec<f64>);

    impl BoundEvaluator for Modular {
        fn width(&self) -> usize {
            self.0.len()
        }
        fn score(&self, code: &SparseCode) -> f64 {
            code.active().iter().map(|&j| self.0[j]).sum()
        }
    }

    struct Fn1<F>(usize, F);

    impl<F: Fn(&SparseCode) -> f64> BoundEvaluator for Fn1<F> {
        fn width(&self) -> usize {
            self.0
        }
        fn score(&self, code: &SparseCode) -> f64 {
            (self.1)(code)
        }
    }

    #[test]
    fn every_bit_hurts() {
        let eval = Fn1(6, |z: &SparseCode| -(z.count() as f64));
        let r = encode(&eval, 6);
        assert!(r.code.is_empty());
        assert!(r.active_set.is_empty());
        assert_eq!(r.evaluations, 6);
    }

    #[test]
    fn modular_hand_simulation() {
        let eval = Modular(vec![3.0, -1.0, 2.0, -5.0]);
        let r = encode(&eval, 4);
        assert_eq!(r.active_set, vec![0, 2]);
        assert_eq!(r.code, SparseCode::from_active(4, &[0, 2]));
        assert_eq!(r.trace, vec![3.0, 5.0]);
        assert_eq!(r.evaluations, 4 + 3 + 2);
        let (code, score) = exhaustive_encode(&eval).unwrap();
        assert_eq!(code, r.code);
        assert_eq!(score, 5.0);
    }

    #[test]
    fn only_empty_code_is_finite() {
        let eval = Fn1(5, |z: &SparseCode| if z.is_empty() { -3.0 } else { f64::NEG_INFINITY });
        assert!(exhaustive_encode(&eval).unwrap().0.is_empty());
        assert!(encode(&eval, 5).code.is_empty());
    }

    #[test]
    fn ties_are_not_accepted() {
        let eval = Fn1(3, |_: &SparseCode| 1.0);
        let r = encode(&eval, 3);
        assert!(r.code.is_empty());
        let (code, _) = exhaustive_encode(&eval).unwrap();
        assert!(code.is_empty());
    }

    #[test]
    fn exhaustive_tie_break_prefers_lower_indices() {
        let eval = Fn1(3, |z: &SparseCode| if z.count() == 1 { 1.0 } else { 0.0 });
        assert_eq!(exhaustive_encode(&eval).unwrap().0, SparseCode::from_active(3, &[0]));
    }

    #[test]
    fn cap_limits_active_set() {
        let eval = Modular(vec![1.0; 6]);
        assert_eq!(encode(&eval, 2).active_set, vec![0, 1]);
    }

    #[test]
    fn exhaustive_refuses_wide_codes() {
        let eval = Modular(vec![0.0; 17]);
        assert!(matches!(exhaustive_encode(&eval), Err(Error::TooManyBits(17, 16))));
    }

    #[test]
    fn batch_preserves_order_and_ignores_workers() {
        let weights: Vec<Vec<f64>> = (0..13)
            .map(|i| (0..5).map(|j| ((i * 7 + j * 3) % 5) as f64 - 2.0).collect())
            .collect();
        let single = batch_encode(&weights, |w| Ok(Modular(w.clone())), 5, 1).unwrap();
        for workers in [2, 3, 8, 32] {
            let multi = batch_encode(&weights, |w| Ok(Modular(w.clone())), 5, workers).unwrap();
            assert_eq!(single, multi);
        }
        assert_eq!(single[4], encode(&Modular(weights[4].clone()), 5));
        let mut rev = weights.clone();
        rev.reverse();
        let mut rev_out = batch_encode(&rev, |w| Ok(Modular(w.clone())), 5, 3).unwrap();
        rev_out.reverse();
        assert_eq!(rev_out, single);
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(batch_encode(&empty, |w| Ok(Modular(w.clone())), 5, 4).unwrap().is_empty());
    }
}
