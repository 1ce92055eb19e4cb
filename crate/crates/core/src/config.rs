//! Flat `key=value` run configuration with a closed schema.
//!
//! Lines are `section.key = value`; `#` starts a comment. Every key must be
//! listed in [`SCHEMA`], and every value is type-checked when set.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::beta_bernoulli::{BetaProcessConfig, EtaSchedule};
use crate::error::{Error, Result};
use crate::likelihood::{LikelihoodParams, LikelihoodRegistry};
use crate::nn::AdamConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Float,
    Count,
    Seed,
    Bool,
    Text,
    /// Comma-separated counts; may be empty.
    Counts,
}

/// Key, value kind and default. `None` means the key has no default and
/// must be given when a command needs it.
pub const SCHEMA: &[(&str, Kind, Option<&str>)] = &[
    ("model.likelihood", Kind::Text, Some("gaussian")),
    ("model.K", Kind::Count, Some("32")),
    ("model.hidden", Kind::Counts, Some("64")),
    ("model.max_active", Kind::Count, Some("0")),
    ("prior.alpha", Kind::Float, Some("1")),
    ("prior.gamma", Kind::Text, Some("auto")),
    ("prior.t0", Kind::Float, Some("1")),
    ("prior.kappa", Kind::Float, Some("0.7")),
    ("gaussian.sigma2", Kind::Float, Some("0.1")),
    ("gaussian.c", Kind::Float, Some("1")),
    ("poisson.a", Kind::Float, Some("1")),
    ("poisson.b", Kind::Float, Some("1")),
    ("poisson.topics", Kind::Count, Some("15")),
    ("adam.rho", Kind::Float, Some("0.001")),
    ("adam.beta1", Kind::Float, Some("0.9")),
    ("adam.beta2", Kind::Float, Some("0.999")),
    ("adam.eps", Kind::Float, Some("1e-8")),
    ("train.batch_size", Kind::Count, Some("100")),
    ("train.epochs", Kind::Count, Some("10")),
    ("train.seed", Kind::Seed, None),
    ("train.workers", Kind::Count, Some("1")),
    ("train.early_stop", Kind::Bool, Some("false")),
    ("train.record_timings", Kind::Bool, Some("true")),
    ("train.eval_every", Kind::Count, Some("1")),
    ("train.prior_warmup_epochs", Kind::Count, Some("0")),
    ("eval.include_prior", Kind::Bool, Some("true")),
    ("data.path", Kind::Text, None),
    ("data.format", Kind::Text, Some("csv")),
    ("data.vocab", Kind::Text, None),
    ("data.labels", Kind::Text, None),
    ("data.binarize", Kind::Bool, Some("false")),
    ("data.threshold", Kind::Float, Some("0.5")),
    ("data.scale_max", Kind::Float, Some("0")),
    ("data.scale_seed", Kind::Seed, Some("0")),
    ("data.limit", Kind::Count, Some("0")),
    ("data.heldout", Kind::Text, None),
    ("data.heldout_fraction", Kind::Float, Some("0")),
    ("output.checkpoint", Kind::Text, None),
    ("output.metrics", Kind::Text, None),
    ("synth.n", Kind::Count, Some("1000")),
    ("synth.dim", Kind::Count, Some("16")),
    ("synth.hidden", Kind::Counts, Some("")),
    ("synth.weight_scale", Kind::Float, Some("1")),
    ("synth.seed", Kind::Seed, None),
];

fn kind_of(key: &str) -> Option<Kind> {
    SCHEMA.iter().find(|(k, _, _)| *k == key).map(|(_, kind, _)| *kind)
}

fn check_value(key: &str, kind: Kind, value: &str) -> Result<()> {
    let bad = |what: &str| Error::Config(format!("{key}: '{value}' is not {what}"));
    match kind {
        Kind::Float => {
            let v: f64 = value.parse().map_err(|_| bad("a number"))?;
            if !v.is_finite() {
                return Err(bad("a finite number"));
            }
        }
        Kind::Count => {
            value.parse::<usize>().map_err(|_| bad("a nonnegative integer"))?;
        }
        Kind::Seed => {
            value.parse::<u64>().map_err(|_| bad("a 64-bit unsigned seed"))?;
        }
        Kind::Bool => {
            parse_bool(value).ok_or_else(|| bad("true or false"))?;
        }
        Kind::Text => {}
        Kind::Counts => {
            parse_counts(value).map_err(|_| bad("a comma-separated list of integers"))?;
        }
    }
    Ok(())
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn parse_counts(v: &str) -> std::result::Result<Vec<usize>, std::num::ParseIntError> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| s.trim().parse()).collect()
}

/// Explicitly set values; defaults are applied on read.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let kind = kind_of(key).ok_or_else(|| Error::Config(format!("unknown key '{key}'")))?;
        check_value(key, kind, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// Value or default; `None` when neither exists.
    pub fn get(&self, key: &str) -> Option<&str> {
        if let Some(v) = self.values.get(key) {
            return Some(v);
        }
        SCHEMA.iter().find(|(k, _, _)| *k == key).and_then(|(_, _, d)| *d)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        Ok(self.require(key)?.parse().expect("validated on set"))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        Ok(self.require(key)?.parse().expect("validated on set"))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        Ok(self.require(key)?.parse().expect("validated on set"))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        Ok(parse_bool(self.require(key)?).expect("validated on set"))
    }

    pub fn counts(&self, key: &str) -> Result<Vec<usize>> {
        Ok(parse_counts(self.require(key)?).expect("validated on set"))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).filter(|v| !v.is_empty()).map(PathBuf::from)
    }

    /// Every schema key that has a value, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _, _) in SCHEMA {
            if let Some(v) = self.get(key) {
                let _ = writeln!(out, "{key}={v}");
            }
        }
        out
    }

    /// Like [`RunConfig::to_text`] but without defaulted keys.
    pub fn explicit_text(&self) -> String {
        let mut out = String::new();
        for (key, _, _) in SCHEMA {
            if let Some(v) = self.values.get(*key) {
                let _ = writeln!(out, "{key}={v}");
            }
        }
        out
    }

    pub fn beta_process(&self) -> Result<BetaProcessConfig> {
        let k = self.usize("model.K")?;
        let gamma_mass = match self.require("prior.gamma")? {
            "auto" => k as f64 / 5.0,
            v => v
                .parse()
                .map_err(|_| Error::Config(format!("prior.gamma: '{v}' is not a number or 'auto'")))?,
        };
        let cfg = BetaProcessConfig {
            alpha: self.f64("prior.alpha")?,
            gamma_mass,
            k,
            schedule: EtaSchedule {
                t0: self.f64("prior.t0")?,
                kappa: self.f64("prior.kappa")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn likelihood_params(&self) -> Result<LikelihoodParams> {
        Ok(LikelihoodParams {
            sigma2: self.f64("gaussian.sigma2")?,
            c: self.f64("gaussian.c")?,
            gamma_a: self.f64("poisson.a")?,
            gamma_b: self.f64("poisson.b")?,
            topics: self.usize("poisson.topics")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let likelihood = self.require("model.likelihood")?.to_string();
        if !LikelihoodRegistry::builtin().contains(&likelihood) {
            return Err(Error::UnknownLikelihood(likelihood));
        }
        let prior = self.beta_process()?;
        let max_active = match self.usize("model.max_active")? {
            0 => prior.k,
            m => m,
        };
        let cfg = TrainConfig {
            likelihood,
            hidden: self.counts("model.hidden")?,
            max_active,
            prior,
            params: self.likelihood_params()?,
            adam: AdamConfig {
                rho: self.f64("adam.rho")?,
                beta1: self.f64("adam.beta1")?,
                beta2: self.f64("adam.beta2")?,
                eps: self.f64("adam.eps")?,
            },
            batch_size: self.usize("train.batch_size")?,
            epochs: self.usize("train.epochs")?,
            seed: self.u64("train.seed")?,
            workers: self.usize("train.workers")?.max(1),
            early_stop: self.bool("train.early_stop")?,
            record_timings: self.bool("train.record_timings")?,
            eval_every: self.usize("train.eval_every")?,
            include_prior: self.bool("eval.include_prior")?,
            prior_warmup_epochs: self.usize("train.prior_warmup_epochs")?,
            checkpoint_path: self.path("output.checkpoint"),
            metrics_path: self.path("output.metrics"),
            notes: Vec::new(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Inverse of [`RunConfig::train_config`] for the keys it reads, output
    /// paths excepted: where a run writes does not change what it computes.
    pub fn from_train_config(cfg: &TrainConfig) -> Self {
        let mut out = Self::new();
        let hidden: Vec<String> = cfg.hidden.iter().map(|h| h.to_string()).collect();
        let mut put = |k: &str, v: String| {
            out.set(k, &v).expect("train config values fit the schema");
        };
        put("model.likelihood", cfg.likelihood.clone());
        put("model.K", cfg.prior.k.to_string());
        put("model.hidden", hidden.join(","));
        put("model.max_active", cfg.max_active.to_string());
        put("prior.alpha", fmt_f64(cfg.prior.alpha));
        put("prior.gamma", fmt_f64(cfg.prior.gamma_mass));
        put("prior.t0", fmt_f64(cfg.prior.schedule.t0));
        put("prior.kappa", fmt_f64(cfg.prior.schedule.kappa));
        put("gaussian.sigma2", fmt_f64(cfg.params.sigma2));
        put("gaussian.c", fmt_f64(cfg.params.c));
        put("poisson.a", fmt_f64(cfg.params.gamma_a));
        put("poisson.b", fmt_f64(cfg.params.gamma_b));
        put("poisson.topics", cfg.params.topics.to_string());
        put("adam.rho", fmt_f64(cfg.adam.rho));
        put("adam.beta1", fmt_f64(cfg.adam.beta1));
        put("adam.beta2", fmt_f64(cfg.adam.beta2));
        put("adam.eps", fmt_f64(cfg.adam.eps));
        put("train.batch_size", cfg.batch_size.to_string());
        put("train.epochs", cfg.epochs.to_string());
        put("train.seed", cfg.seed.to_string());
        put("train.workers", cfg.workers.to_string());
        put("train.early_stop", cfg.early_stop.to_string());
        put("train.record_timings", cfg.record_timings.to_string());
        put("train.eval_every", cfg.eval_every.to_string());
        put("train.prior_warmup_epochs", cfg.prior_warmup_epochs.to_string());
        put("eval.include_prior", cfg.include_prior.to_string());
        out
    }
}

/// Shortest decimal form that parses back to the same bits.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// 64-bit FNV-1a, hex encoded; identifies a configuration text.
pub fn fingerprint(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}
