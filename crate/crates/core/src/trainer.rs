//! Stochastic MAP-EM training.
//!
//! Each step visits one minibatch and runs four phases in a fixed order:
//! scale posteriors (λ), the natural-gradient step on q(π), greedy pursuit
//! for the codes (z), and one ADAM step on the decoder (θ).
//!
//! The q(π) step uses the codes produced by the previous step's pursuit. On
//! the very first step there is no previous batch, so it uses the current
//! batch's initial (empty) codes. Epoch shuffles are drawn from a ChaCha
//! stream keyed by `(seed, epoch)`, which makes a resumed run identical to an
//! uninterrupted one.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::beta_bernoulli::{
    activation_probabilities, eta_at, natural_grad_update, BetaPosterior, BetaProcessConfig, ExpectedLogPrior,
};
use crate::checkpoint::{self, ByteReader, ByteWriter, FORMAT_VERSION, STATE_MAGIC};
use crate::config::{fingerprint, RunConfig};
use crate::datasets::DenseDataset;
use crate::error::{check_len, Error, Result};
use crate::likelihood::{
    GammaScalePosterior, GaussianScalePosterior, Likelihood, LikelihoodParams, LikelihoodRegistry, ScalePosterior,
};
use crate::metrics::{sparsity, EvalReport};
use crate::nn::{adam_step, AdamConfig, AdamState, DecoderNetwork, GradientBuffer};
use crate::pursuit::{batch_encode, ModelEvaluator, PursuitResult};
use crate::SparseCode;

pub const METRICS_HEADER: &str = "step,epoch,phase_ms_lambda,phase_ms_pi,phase_ms_z,phase_ms_theta,mean_bound,mean_active_bits,evals_per_datum,heldout_metric,sparsity";

/// Relative improvement of the epoch mean bound below which an epoch counts
/// as stalled.
pub const EARLY_STOP_TOLERANCE: f64 = 1e-5;
/// Consecutive stalled epochs that end training when early stopping is on.
pub const EARLY_STOP_PATIENCE: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Registry name of the observation model.
    pub likelihood: String,
    pub hidden: Vec<usize>,
    /// Largest active set pursuit may build.
    pub max_active: usize,
    pub prior: BetaProcessConfig,
    pub params: LikelihoodParams,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub workers: usize,
    pub early_stop: bool,
    /// When false the `phase_ms_*` columns are written as 0 so that metrics
    /// files are byte-reproducible.
    pub record_timings: bool,
    /// Held-out evaluation every this many epochs; 0 disables it.
    pub eval_every: usize,
    /// Whether held-out pursuit includes the expected log prior.
    pub include_prior: bool,
    /// Epochs at the start of training whose pursuit leaves out the expected
    /// log prior; q(π) is still updated during them.
    pub prior_warmup_epochs: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    /// Extra comment lines for the metrics header, such as data provenance.
    /// Not part of the fingerprint or the checkpoint.
    pub notes: Vec<String>,
}

impl TrainConfig {
    pub fn new(likelihood: &str, k: usize, seed: u64) -> Self {
        Self {
            likelihood: likelihood.to_string(),
            hidden: vec![64],
            max_active: k,
            prior: BetaProcessConfig::with_defaults(k),
            params: LikelihoodParams::default(),
            adam: AdamConfig::default(),
            batch_size: 100,
            epochs: 10,
            seed,
            workers: 1,
            early_stop: false,
            record_timings: true,
            eval_every: 1,
            include_prior: true,
            prior_warmup_epochs: 0,
            checkpoint_path: None,
            metrics_path: None,
            notes: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.prior.k
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.max_active == 0 {
            return Err(Error::invalid("max_active must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        let a = &self.adam;
        if !(a.rho >= 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::invalid("adam needs rho >= 0, beta1 and beta2 in [0, 1), eps > 0"));
        }
        Ok(())
    }

    /// `key=value` lines in the run-configuration schema.
    pub fn to_text(&self) -> String {
        RunConfig::from_train_config(self).explicit_text()
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.to_text())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Lambda,
    Pi,
    Z,
    Theta,
}

impl Phase {
    pub const ORDER: [Phase; 4] = [Phase::Lambda, Phase::Pi, Phase::Z, Phase::Theta];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Lambda => "lambda",
            Phase::Pi => "pi",
            Phase::Z => "z",
            Phase::Theta => "theta",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    /// 1-based global step index.
    pub step: u64,
    /// 0-based epoch the step belongs to.
    pub epoch: u64,
    pub batch_size: usize,
    /// Phases in the order they ran.
    pub phase_order: Vec<Phase>,
    pub phase_ms: [f64; 4],
    /// Mean pursuit bound of the batch's new codes.
    pub mean_bound: f64,
    /// Mean θ objective before the ADAM step.
    pub mean_theta_bound: f64,
    pub mean_active_bits: f64,
    pub evals_per_datum: f64,
    /// Hoyer sparsity of the batch's new codes.
    pub sparsity: f64,
    pub heldout_metric: Option<f64>,
}

impl StepMetrics {
    pub fn csv_row(&self, record_timings: bool) -> String {
        let ms = |p: usize| if record_timings { format!("{:.3}", self.phase_ms[p]) } else { "0".to_string() };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            ms(0),
            ms(1),
            ms(2),
            ms(3),
            self.mean_bound,
            self.mean_active_bits,
            self.evals_per_datum,
            self.heldout_metric.map(|v| v.to_string()).unwrap_or_default(),
            self.sparsity
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    pub steps: usize,
    /// Datum-weighted mean pursuit bound.
    pub mean_bound: f64,
    pub mean_active_bits: f64,
    /// Bound evaluations per datum over the epoch.
    pub evals_per_datum: f64,
    pub wall_ms: f64,
    pub heldout: Option<EvalReport>,
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: DecoderNetwork,
    pub adam: AdamState,
    pub model: Box<dyn Likelihood>,
    /// ADAM state for the model's own parameters (the Poisson topic logits).
    pub aux_adam: Option<AdamState>,
    pub beta: BetaPosterior,
    /// Latest code of every training datum.
    pub codes: Vec<SparseCode>,
    /// Indices of the last step's batch; its codes drive the next q(π) step.
    pub prev_batch: Vec<usize>,
    /// Latest scale posterior of every training datum.
    pub scales: Vec<Option<ScalePosterior>>,
    /// Number of scale posteriors computed so far.
    pub scale_computations: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed steps.
    pub step: u64,
    pub seed: u64,
    pub data_dim: usize,
}

const INIT_STREAM: u64 = 0;

fn model_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, n: usize, data_dim: usize) -> Result<Self> {
        Self::init_with(cfg, n, data_dim, &LikelihoodRegistry::builtin())
    }

    pub fn init_with(cfg: &TrainConfig, n: usize, data_dim: usize, registry: &LikelihoodRegistry) -> Result<Self> {
        cfg.validate()?;
        if n == 0 || data_dim == 0 {
            return Err(Error::invalid("training set is empty"));
        }
        let model = registry.create(&cfg.likelihood, &cfg.params, data_dim, model_seed(cfg.seed))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(INIT_STREAM);
        let net = DecoderNetwork::new(
            cfg.k(),
            &cfg.hidden,
            model.decoder_width(data_dim),
            model.final_activation(),
            &mut rng,
        )?;
        let adam = AdamState::for_network(&net, cfg.adam);
        let aux_len = model.aux_params().len();
        let aux_adam = (aux_len > 0).then(|| AdamState::new(&[aux_len], cfg.adam));
        Ok(Self {
            net,
            adam,
            model,
            aux_adam,
            beta: BetaPosterior::from_prior(&cfg.prior),
            codes: vec![SparseCode::zeros(cfg.k()); n],
            prev_batch: Vec::new(),
            scales: vec![None; n],
            scale_computations: 0,
            epoch: 0,
            step: 0,
            seed: cfg.seed,
            data_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    fn check_data(&self, data: &DenseDataset) -> Result<()> {
        check_len("training set size", self.codes.len(), data.len())?;
        check_len("data width", self.data_dim, data.dim())
    }

    pub fn to_checkpoint_bytes(&self, cfg: &TrainConfig) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(STATE_MAGIC);
        w.u32(FORMAT_VERSION);

        w.section(b"META", cfg.to_text().as_bytes());

        let mut s = ByteWriter::new();
        checkpoint::write_network(&mut s, &self.net, Some(&self.adam));
        w.section(b"NETW", &s.into_bytes());

        let mut s = ByteWriter::new();
        s.f64_array(self.model.aux_params());
        if let Some(a) = &self.aux_adam {
            checkpoint::write_adam(&mut s, a);
        }
        w.section(b"AUXP", &s.into_bytes());

        let mut s = ByteWriter::new();
        s.f64_array(&self.beta.a);
        s.f64_array(&self.beta.b);
        s.u64(self.beta.step_count);
        w.section(b"BETA", &s.into_bytes());

        let mut s = ByteWriter::new();
        for v in [self.epoch, self.step, self.seed, self.data_dim as u64, self.scale_computations] {
            s.u64(v);
        }
        w.section(b"CNTR", &s.into_bytes());

        let mut s = ByteWriter::new();
        s.u64(self.codes.len() as u64);
        s.u64(self.net.input_dim() as u64);
        for code in &self.codes {
            for &bit in code.bits() {
                s.u8(bit as u8);
            }
        }
        w.section(b"CODE", &s.into_bytes());

        let mut s = ByteWriter::new();
        s.u64(self.prev_batch.len() as u64);
        for &i in &self.prev_batch {
            s.u64(i as u64);
        }
        w.section(b"PREV", &s.into_bytes());

        let mut s = ByteWriter::new();
        s.u64(self.scales.len() as u64);
        for scale in &self.scales {
            let (tag, p, q) = match scale {
                None => (0, 0.0, 0.0),
                Some(ScalePosterior::Gaussian(g)) => (1, g.mean, g.variance),
                Some(ScalePosterior::Gamma(g)) => (2, g.shape, g.rate),
                Some(ScalePosterior::Unit) => (3, 0.0, 0.0),
            };
            s.u8(tag);
            s.f64(p);
            s.f64(q);
        }
        w.section(b"LAMB", &s.into_bytes());
        w.into_bytes()
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(TrainConfig, Self)> {
        Self::from_checkpoint_bytes_with(bytes, &LikelihoodRegistry::builtin())
    }

    pub fn from_checkpoint_bytes_with(bytes: &[u8], registry: &LikelihoodRegistry) -> Result<(TrainConfig, Self)> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(STATE_MAGIC)?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let mut section = |want: &[u8; 4]| -> Result<ByteReader> {
            let (tag, payload) = r.section()?;
            if &tag != want {
                return Err(Error::format(format!(
                    "expected section {}, found {}",
                    String::from_utf8_lossy(want),
                    String::from_utf8_lossy(&tag)
                )));
            }
            Ok(ByteReader::new(payload))
        };

        let meta = section(b"META")?;
        let text = std::str::from_utf8(meta_bytes(meta)?).map_err(|_| Error::format("META is not UTF-8"))?;
        let cfg = RunConfig::parse(text)?.train_config()?;

        let mut s = section(b"NETW")?;
        let (net, adam) = checkpoint::read_network(&mut s)?;
        let adam = adam.ok_or_else(|| Error::format("checkpoint network lacks adam state"))?;
        finished(&s, "NETW")?;

        let mut s = section(b"AUXP")?;
        let aux = s.f64_array()?;
        let aux_adam = if aux.is_empty() { None } else { Some(checkpoint::read_adam(&mut s, &[aux.len()])?) };
        finished(&s, "AUXP")?;

        let mut s = section(b"BETA")?;
        let beta = BetaPosterior {
            a: s.f64_array()?,
            b: s.f64_array()?,
            step_count: s.u64()?,
        };
        finished(&s, "BETA")?;

        let mut s = section(b"CNTR")?;
        let epoch = s.u64()?;
        let step = s.u64()?;
        let seed = s.u64()?;
        let data_dim = s.usize()?;
        let scale_computations = s.u64()?;
        finished(&s, "CNTR")?;

        let mut s = section(b"CODE")?;
        let n = s.usize()?;
        let k = s.usize()?;
        let raw = s.take(n.checked_mul(k).ok_or_else(|| Error::format("code table too large"))?)?;
        let codes = raw
            .chunks(k.max(1))
            .take(n)
            .map(|c| match c.iter().find(|&&b| b > 1) {
                Some(b) => Err(Error::format(format!("code bit {b} is not 0 or 1"))),
                None => Ok(SparseCode::from_bits(c.iter().map(|&b| b == 1).collect())),
            })
            .collect::<Result<Vec<_>>>()?;
        finished(&s, "CODE")?;

        let mut s = section(b"PREV")?;
        let m = s.usize()?;
        let prev_batch = (0..m)
            .map(|_| {
                let i = s.usize()?;
                if i >= n {
                    return Err(Error::format(format!("batch index {i} out of range")));
                }
                Ok(i)
            })
            .collect::<Result<Vec<_>>>()?;
        finished(&s, "PREV")?;

        let mut s = section(b"LAMB")?;
        check_len("scale table", n, s.usize()?)?;
        let mut scales = Vec::with_capacity(n);
        for _ in 0..n {
            let tag = s.u8()?;
            let p = s.f64()?;
            let q = s.f64()?;
            scales.push(match tag {
                0 => None,
                1 => Some(ScalePosterior::Gaussian(GaussianScalePosterior { mean: p, variance: q })),
                2 => Some(ScalePosterior::Gamma(GammaScalePosterior { shape: p, rate: q })),
                3 => Some(ScalePosterior::Unit),
                t => return Err(Error::format(format!("unknown scale tag {t}"))),
            });
        }
        finished(&s, "LAMB")?;
        if !r.is_done() {
            return Err(Error::format("trailing bytes after checkpoint sections"));
        }

        let mut model = registry.create(&cfg.likelihood, &cfg.params, data_dim, model_seed(seed))?;
        check_len("model parameters", model.aux_params().len(), aux.len())?;
        model.aux_params_mut().copy_from_slice(&aux);
        model.aux_params_updated();
        check_len("code width", cfg.k(), k)?;
        check_len("decoder input", cfg.k(), net.input_dim())?;
        check_len("decoder output", model.decoder_width(data_dim), net.output_dim())?;
        check_len("beta width", cfg.k(), beta.width())?;
        if !beta.is_valid() {
            return Err(Error::format("checkpoint q(pi) parameters are invalid"));
        }
        if seed != cfg.seed {
            return Err(Error::format("checkpoint seed disagrees with its configuration"));
        }
        let state = Self {
            net,
            adam,
            model,
            aux_adam,
            beta,
            codes,
            prev_batch,
            scales,
            scale_computations,
            epoch,
            step,
            seed,
            data_dim,
        };
        Ok((cfg, state))
    }

    pub fn save(&self, cfg: &TrainConfig, path: &Path) -> Result<()> {
        checkpoint::write_atomic(path, &self.to_checkpoint_bytes(cfg))
    }

    pub fn load(path: &Path) -> Result<(TrainConfig, Self)> {
        let bytes = fs::read(path)?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

fn meta_bytes(r: ByteReader<'_>) -> Result<&[u8]> {
    let mut r = r;
    let n = r.remaining();
    r.take(n)
}

fn finished(r: &ByteReader, name: &str) -> Result<()> {
    if r.is_done() {
        Ok(())
    } else {
        Err(Error::format(format!("{} unexpected bytes in section {name}", r.remaining())))
    }
}

fn phase_error(phase: Phase, detail: impl std::fmt::Display) -> Error {
    Error::NonFinite(format!("phase {}: {detail}", phase.name()))
}

fn contiguous_chunks<T>(items: &[T], workers: usize) -> Vec<&[T]> {
    let len = items.len().div_ceil(workers.max(1)).max(1);
    items.chunks(len).collect()
}

/// Shuffled minibatches for one epoch; the last batch may be short.
pub fn epoch_batches(seed: u64, epoch: u64, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

struct ThetaPartial {
    grads: GradientBuffer,
    aux: Vec<f64>,
    value: f64,
    scales: Vec<(usize, ScalePosterior)>,
}

/// One training step on the given batch of datum indices.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, data: &DenseDataset, batch: &[usize]) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    state.check_data(data)?;
    if let Some(&i) = batch.iter().find(|&&i| i >= data.len()) {
        return Err(Error::invalid(format!("batch index {i} out of range")));
    }
    let mut phase_order = Vec::with_capacity(4);
    let mut phase_ms = [0.0; 4];
    let fixed = state.model.scale_is_fixed();

    // λ
    phase_order.push(Phase::Lambda);
    let clock = Instant::now();
    for &i in batch {
        if fixed && state.scales[i].is_some() {
            continue;
        }
        let f = state.net.forward_code(&state.codes[i])?;
        let post = state.model.scale_posterior(data.row(i), &f)?;
        if !post.mean().is_finite() {
            return Err(phase_error(Phase::Lambda, format_args!("scale posterior of datum {i}")));
        }
        state.scales[i] = Some(post);
        state.scale_computations += 1;
    }
    phase_ms[0] = clock.elapsed().as_secs_f64() * 1e3;

    // π
    phase_order.push(Phase::Pi);
    let clock = Instant::now();
    let source: &[usize] = if state.prev_batch.is_empty() { batch } else { &state.prev_batch };
    let prev: Vec<SparseCode> = source.iter().map(|&i| state.codes[i].clone()).collect();
    let eta = eta_at(state.beta.step_count, &cfg.prior.schedule);
    let next = natural_grad_update(&state.beta, &prev, state.codes.len(), eta, &cfg.prior)?;
    if !next.is_valid() {
        return Err(phase_error(Phase::Pi, "q(pi) parameters left the valid range"));
    }
    state.beta = next;
    let prior = if state.epoch < cfg.prior_warmup_epochs as u64 {
        ExpectedLogPrior::flat(state.beta.width())
    } else {
        ExpectedLogPrior::new(&state.beta)
    };
    phase_ms[1] = clock.elapsed().as_secs_f64() * 1e3;

    // z
    phase_order.push(Phase::Z);
    let clock = Instant::now();
    let results = {
        let st = &*state;
        batch_encode(
            batch,
            |&i| {
                let scale = st.scales[i].expect("scale set in the lambda phase");
                ModelEvaluator::new(data.row(i), &*st.model, &st.net, &prior, scale)
            },
            cfg.max_active,
            cfg.workers,
        )?
    };
    let mut bound_sum = 0.0;
    let mut evals = 0usize;
    let mut bits = 0usize;
    for (&i, r) in batch.iter().zip(&results) {
        let score = r.score();
        if !score.is_finite() {
            return Err(phase_error(Phase::Z, format_args!("non-finite bound {score} for datum {i}")));
        }
        bound_sum += score;
        evals += r.evaluations;
        bits += r.code.count();
        state.codes[i] = r.code.clone();
    }
    let new_codes: Vec<SparseCode> = results.into_iter().map(|r| r.code).collect();
    phase_ms[2] = clock.elapsed().as_secs_f64() * 1e3;

    // θ
    phase_order.push(Phase::Theta);
    let clock = Instant::now();
    let partials = {
        let st = &*state;
        let run = |chunk: &[usize]| -> Result<ThetaPartial> {
            let mut part = ThetaPartial {
                grads: GradientBuffer::zeros_for(&st.net),
                aux: vec![0.0; st.model.aux_params().len()],
                value: 0.0,
                scales: Vec::new(),
            };
            for &i in chunk {
                let x = data.row(i);
                let z = st.codes[i].to_f64();
                let f = st.net.forward(&z)?;
                let scale = if fixed {
                    st.scales[i].expect("scale set in the lambda phase")
                } else {
                    let s = st.model.scale_posterior(x, &f)?;
                    part.scales.push((i, s));
                    s
                };
                let term = st.model.theta_term(x, &f, &scale)?;
                if !term.value.is_finite() {
                    return Err(phase_error(Phase::Theta, format_args!("non-finite objective for datum {i}")));
                }
                part.value += term.value;
                st.net.backward_into(&z, &term.d_output, &mut part.grads)?;
                for (acc, d) in part.aux.iter_mut().zip(&term.d_aux) {
                    *acc += d;
                }
            }
            Ok(part)
        };
        let chunks = contiguous_chunks(batch, cfg.workers);
        if chunks.len() == 1 {
            vec![run(chunks[0])?]
        } else {
            thread::scope(|scope| {
                let handles: Vec<_> = chunks.iter().map(|c| scope.spawn(|| run(c))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("theta worker panicked"))
                    .collect::<Result<Vec<_>>>()
            })?
        }
    };
    let mut partials = partials.into_iter();
    let mut total = partials.next().expect("at least one chunk");
    for part in partials {
        total.grads.add_assign(&part.grads)?;
        for (acc, d) in total.aux.iter_mut().zip(&part.aux) {
            *acc += d;
        }
        total.value += part.value;
        total.scales.extend(part.scales);
    }
    let inv = 1.0 / batch.len() as f64;
    total.grads.scale(inv);
    total.aux.iter_mut().for_each(|v| *v *= inv);
    if !total.grads.is_finite() || total.aux.iter().any(|v| !v.is_finite()) {
        return Err(phase_error(Phase::Theta, "non-finite gradient"));
    }
    adam_step(&mut state.net, &total.grads, &mut state.adam).map_err(|e| phase_error(Phase::Theta, e))?;
    if let Some(aux_adam) = &mut state.aux_adam {
        aux_adam
            .step(&mut [state.model.aux_params_mut()], &[&total.aux])
            .map_err(|e| phase_error(Phase::Theta, e))?;
        state.model.aux_params_updated();
    }
    for (i, s) in total.scales {
        state.scales[i] = Some(s);
        state.scale_computations += 1;
    }
    phase_ms[3] = clock.elapsed().as_secs_f64() * 1e3;

    state.prev_batch = batch.to_vec();
    state.step += 1;
    let b = batch.len() as f64;
    Ok(StepMetrics {
        step: state.step,
        epoch: state.epoch,
        batch_size: batch.len(),
        phase_order,
        phase_ms,
        mean_bound: bound_sum / b,
        mean_theta_bound: total.value * inv,
        mean_active_bits: bits as f64 / b,
        evals_per_datum: evals as f64 / b,
        sparsity: sparsity(&new_codes)?,
        heldout_metric: None,
    })
}

/// Runs one epoch, handing every step's metrics to `sink` as it completes.
pub fn run_epoch(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &DenseDataset,
    heldout: Option<&DenseDataset>,
    sink: &mut dyn FnMut(&StepMetrics) -> Result<()>,
) -> Result<EpochSummary> {
    let clock = Instant::now();
    let epoch = state.epoch;
    let batches = epoch_batches(state.seed, epoch, data.len(), cfg.batch_size);
    let eval_due = cfg.eval_every > 0 && (epoch + 1).is_multiple_of(cfg.eval_every as u64);
    let mut bound = 0.0;
    let mut bits = 0.0;
    let mut evals = 0.0;
    let mut report = None;
    for (b, batch) in batches.iter().enumerate() {
        let mut m = train_step(state, cfg, data, batch)?;
        let w = m.batch_size as f64;
        bound += m.mean_bound * w;
        bits += m.mean_active_bits * w;
        evals += m.evals_per_datum * w;
        if b + 1 == batches.len() && eval_due {
            if let Some(h) = heldout {
                let r = evaluate(state, cfg, h)?;
                m.heldout_metric = Some(r.value);
                report = Some(r);
            }
        }
        sink(&m)?;
    }
    state.epoch += 1;
    let n = data.len() as f64;
    Ok(EpochSummary {
        epoch,
        steps: batches.len(),
        mean_bound: bound / n,
        mean_active_bits: bits / n,
        evals_per_datum: evals / n,
        wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        heldout: report,
    })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub steps: Vec<StepMetrics>,
    pub epochs: Vec<EpochSummary>,
    pub stopped_early: bool,
    /// Held-out report of the final state, when a held-out set was given.
    pub report: Option<EvalReport>,
}

struct MetricsLog {
    out: BufWriter<File>,
    record_timings: bool,
}

impl MetricsLog {
    fn open(path: &Path, cfg: &TrainConfig, fresh: bool) -> Result<Self> {
        let file = if fresh {
            File::create(path)?
        } else {
            OpenOptions::new().append(true).create(true).open(path)?
        };
        let mut out = BufWriter::new(file);
        if fresh {
            for line in cfg.to_text().lines().chain(cfg.notes.iter().map(String::as_str)) {
                writeln!(out, "# {line}")?;
            }
            writeln!(out, "{METRICS_HEADER}")?;
        }
        Ok(Self {
            out,
            record_timings: cfg.record_timings,
        })
    }

    fn row(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.out, "{}", m.csv_row(self.record_timings))?;
        Ok(())
    }
}

fn validate_rows(model: &dyn Likelihood, data: &DenseDataset) -> Result<()> {
    for i in 0..data.len() {
        model
            .validate_datum(data.row(i))
            .map_err(|e| Error::invalid(format!("datum {i}: {e}")))?;
    }
    Ok(())
}

/// Trains from a fresh state.
pub fn train(cfg: &TrainConfig, data: &DenseDataset, heldout: Option<&DenseDataset>) -> Result<TrainOutcome> {
    if cfg.batch_size > data.len() {
        return Err(Error::invalid(format!(
            "batch size {} exceeds the {} training data",
            cfg.batch_size,
            data.len()
        )));
    }
    let state = TrainState::init(cfg, data.len(), data.dim())?;
    train_from(state, cfg, data, heldout)
}

/// Continues training `state` until it has completed `cfg.epochs` epochs.
/// Metrics rows are appended when the state has already taken steps.
pub fn train_from(
    mut state: TrainState,
    cfg: &TrainConfig,
    data: &DenseDataset,
    heldout: Option<&DenseDataset>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    state.check_data(data)?;
    validate_rows(&*state.model, data)?;
    if let Some(h) = heldout {
        check_len("held-out width", data.dim(), h.dim())?;
        validate_rows(&*state.model, h)?;
    }
    let mut log = match &cfg.metrics_path {
        Some(p) => Some(MetricsLog::open(p, cfg, state.step == 0)?),
        None => None,
    };
    if state.step == 0 {
        if let Some(p) = &cfg.checkpoint_path {
            state.save(cfg, p)?;
        }
    }
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut stalled = 0usize;
    let mut stopped_early = false;
    while state.epoch < cfg.epochs as u64 {
        let summary = run_epoch(&mut state, cfg, data, heldout, &mut |m| {
            if let Some(log) = &mut log {
                log.row(m)?;
            }
            steps.push(m.clone());
            Ok(())
        })?;
        if let Some(log) = &mut log {
            log.out.flush()?;
        }
        if let Some(p) = &cfg.checkpoint_path {
            state.save(cfg, p)?;
        }
        if let Some(prev) = epochs.last().map(|e: &EpochSummary| e.mean_bound) {
            let rel = (summary.mean_bound - prev) / prev.abs().max(f64::MIN_POSITIVE);
            stalled = if rel < EARLY_STOP_TOLERANCE { stalled + 1 } else { 0 };
        }
        epochs.push(summary);
        if cfg.early_stop && stalled >= EARLY_STOP_PATIENCE {
            stopped_early = true;
            break;
        }
    }
    if let Some(log) = &mut log {
        log.out.flush()?;
    }
    let report = heldout.map(|h| evaluate(&state, cfg, h)).transpose()?;
    Ok(TrainOutcome {
        state,
        steps,
        epochs,
        stopped_early,
        report,
    })
}

/// Code, pursuit details and reconstruction loss of one encoded datum.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub pursuit: PursuitResult,
    pub scale: ScalePosterior,
    pub loss: f64,
}

/// Encodes every row with frozen parameters.
pub fn encode_dataset(state: &TrainState, cfg: &TrainConfig, data: &DenseDataset) -> Result<Vec<Encoded>> {
    check_len("data width", state.data_dim, data.dim())?;
    validate_rows(&*state.model, data)?;
    let prior = if cfg.include_prior {
        ExpectedLogPrior::new(&state.beta)
    } else {
        ExpectedLogPrior::flat(state.net.input_dim())
    };
    let empty = state.net.forward_code(&SparseCode::zeros(state.net.input_dim()))?;
    let model = &*state.model;
    let indices: Vec<usize> = (0..data.len()).collect();
    let results = batch_encode(
        &indices,
        |&i| {
            let scale = model.scale_posterior(data.row(i), &empty)?;
            ModelEvaluator::new(data.row(i), model, &state.net, &prior, scale)
        },
        cfg.max_active,
        cfg.workers,
    )?;
    results
        .into_iter()
        .enumerate()
        .map(|(i, pursuit)| {
            let x = data.row(i);
            let f = state.net.forward_code(&pursuit.code)?;
            let scale = model.scale_posterior(x, &f)?;
            let loss = model.reconstruction_loss(x, &f, &scale);
            Ok(Encoded { pursuit, scale, loss })
        })
        .collect()
}

/// Held-out reconstruction metric and code statistics; mutates nothing.
pub fn evaluate(state: &TrainState, cfg: &TrainConfig, heldout: &DenseDataset) -> Result<EvalReport> {
    if heldout.is_empty() {
        return Err(Error::invalid("held-out set is empty"));
    }
    let encoded = encode_dataset(state, cfg, heldout)?;
    let n = encoded.len();
    let value = encoded.iter().map(|e| e.loss).sum::<f64>() / n as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("held-out metric".into()));
    }
    let codes: Vec<SparseCode> = encoded.into_iter().map(|e| e.pursuit.code).collect();
    let k = state.net.input_dim();
    Ok(EvalReport {
        metric: state.model.metric_name().to_string(),
        value,
        n,
        sparsity: sparsity(&codes)?,
        mean_active_bits: codes.iter().map(|c| c.count() as f64).sum::<f64>() / n as f64,
        activation: activation_probabilities(&codes, k),
        fingerprint: cfg.fingerprint(),
    })
}
