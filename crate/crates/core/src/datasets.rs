//! Dataset ingestion, transforms and forward sampling from the model.
//!
//! Every dataset carries a [`Provenance`] record; each transform appends one
//! step to it and exports write it as `#` comment lines.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal, Poisson};

use crate::beta_bernoulli::BetaProcessConfig;
use crate::error::{Error, Result};
use crate::likelihood::TopicMatrix;
use crate::nn::{Activation, DecoderNetwork};
use crate::SparseCode;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Provenance {
    pub steps: Vec<String>,
}

impl Provenance {
    pub fn new(source: impl Into<String>) -> Self {
        Self {
            steps: vec![source.into()],
        }
    }

    pub fn then(&self, step: impl Into<String>) -> Self {
        let mut next = self.clone();
        next.steps.push(step.into());
        next
    }

    pub fn header(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            let _ = writeln!(out, "# provenance: {step}");
        }
        out
    }
}

/// N×D real matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseDataset {
    n: usize,
    dim: usize,
    values: Vec<f64>,
    labels: Option<Vec<u8>>,
    provenance: Provenance,
}

impl DenseDataset {
    pub fn new(n: usize, dim: usize, values: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if values.len() != n * dim {
            return Err(Error::format(format!(
                "dataset of {n}x{dim} needs {} values, got {}",
                n * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("dataset contains non-finite values"));
        }
        Ok(Self {
            n,
            dim,
            values,
            labels: None,
            provenance,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], provenance: Provenance) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::format("rows have inconsistent widths"));
        }
        Self::new(rows.len(), dim, rows.concat(), provenance)
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(Error::format(format!(
                "{} labels for {} rows",
                labels.len(),
                self.n
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n).map(move |i| self.row(i))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    fn derive(&self, values: Vec<f64>, step: String) -> Self {
        Self {
            n: self.n,
            dim: self.dim,
            values,
            labels: self.labels.clone(),
            provenance: self.provenance.then(step),
        }
    }

    /// Rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.n {
            return Err(Error::invalid(format!("row range {start}..{end} out of 0..{}", self.n)));
        }
        Ok(Self {
            n: end - start,
            dim: self.dim,
            values: self.values[start * self.dim..end * self.dim].to_vec(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
            provenance: self.provenance.then(format!("rows({start}..{end})")),
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&self.provenance.header());
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Comma-separated rows; blank lines and `#` lines are skipped.
pub fn read_dense_csv(path: &Path) -> Result<DenseDataset> {
    let file = fs::File::open(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        rows.push(row);
    }
    DenseDataset::from_rows(&rows, Provenance::new(format!("csv:{}", path.display())))
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(format!("truncated idx header ({what})")))
}

/// Parses an IDX image file (magic `0x00000803`); pixels are scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8], source: &str) -> Result<DenseDataset> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!("bad idx image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "count")? as usize;
    let rows = be_u32(bytes, 8, "rows")? as usize;
    let cols = be_u32(bytes, 12, "cols")? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    if body.len() != n * dim {
        return Err(Error::format(format!(
            "idx image payload has {} bytes, header promises {n}x{rows}x{cols}",
            body.len()
        )));
    }
    let values = body.iter().map(|&b| b as f64 / 255.0).collect();
    DenseDataset::new(n, dim, values, Provenance::new(format!("idx:{source}")))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!("bad idx label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "count")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(format!(
            "idx label payload has {} bytes, header promises {n}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

pub fn read_idx(path: &Path) -> Result<DenseDataset> {
    parse_idx_images(&fs::read(path)?, &path.display().to_string())
}

pub fn read_idx_with_labels(images: &Path, labels: &Path) -> Result<DenseDataset> {
    let ds = read_idx(images)?;
    let labels = parse_idx_labels(&fs::read(labels)?)?;
    ds.with_labels(labels)
}

/// Entries `>= threshold` become 1, the rest 0.
pub fn binarize(ds: &DenseDataset, threshold: f64) -> DenseDataset {
    let values = ds
        .values
        .iter()
        .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
        .collect();
    ds.derive(values, format!("binarize(threshold={threshold})"))
}

/// Per-row multipliers `1 + u`, `u ~ U(−s_max, s_max)`.
pub fn scale_factors(n: usize, scale_max: f64, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&scale_max) {
        return Err(Error::invalid(format!("scale_max {scale_max} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            if scale_max == 0.0 {
                1.0
            } else {
                1.0 + rng.random_range(-scale_max..scale_max)
            }
        })
        .collect())
}

pub fn scale_corrupt(ds: &DenseDataset, scale_max: f64, seed: u64) -> Result<DenseDataset> {
    let factors = scale_factors(ds.n, scale_max, seed)?;
    let mut values = ds.values.clone();
    for (row, m) in values.chunks_mut(ds.dim.max(1)).zip(&factors) {
        for v in row {
            *v *= m;
        }
    }
    Ok(ds.derive(values, format!("scale_corrupt(scale_max={scale_max},seed={seed})")))
}

/// N×W word counts.
#[derive(Clone, Debug, PartialEq)]
pub struct CountDataset {
    n: usize,
    words: usize,
    counts: Vec<u32>,
    doc_ids: Vec<u64>,
    vocabulary: Vec<String>,
    provenance: Provenance,
}

impl CountDataset {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn words(&self) -> usize {
        self.words
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.counts[i * self.words..(i + 1) * self.words]
    }

    pub fn doc_ids(&self) -> &[u64] {
        &self.doc_ids
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn to_dense(&self) -> DenseDataset {
        DenseDataset {
            n: self.n,
            dim: self.words,
            values: self.counts.iter().map(|&c| c as f64).collect(),
            labels: None,
            provenance: self.provenance.then("as_dense"),
        }
    }

    /// Writes `doc_id token_id count` lines for nonzero counts and the
    /// vocabulary sidecar (one token per line).
    pub fn write(&self, path: &Path, vocab_path: &Path) -> Result<()> {
        let mut out = self.provenance.header();
        for i in 0..self.n {
            for (w, &c) in self.row(i).iter().enumerate() {
                if c > 0 {
                    let _ = writeln!(out, "{} {w} {c}", self.doc_ids[i]);
                }
            }
        }
        fs::write(path, out)?;
        let mut vf = fs::File::create(vocab_path)?;
        for token in &self.vocabulary {
            writeln!(vf, "{token}")?;
        }
        Ok(())
    }
}

pub fn read_vocabulary(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Parses `doc_id token_id count` lines. Rows follow ascending document id;
/// repeated `(doc, token)` pairs are summed.
pub fn parse_bow(text: &str, vocabulary: Vec<String>, source: &str) -> Result<CountDataset> {
    use std::collections::BTreeMap;
    let words = vocabulary.len();
    let mut docs: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| Error::format(format!("{source}:{}: {msg}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err("expected `doc_id token_id count`"));
        }
        let doc: u64 = fields[0].parse().map_err(|_| err("bad doc id"))?;
        let token: usize = fields[1].parse().map_err(|_| err("bad token id"))?;
        let count: u32 = fields[2].parse().map_err(|_| err("bad count"))?;
        if token >= words {
            return Err(err(&format!("token id {token} outside vocabulary of {words}")));
        }
        if count == 0 {
            return Err(err("zero count"));
        }
        docs.entry(doc).or_insert_with(|| vec![0; words])[token] += count;
    }
    let n = docs.len();
    let mut doc_ids = Vec::with_capacity(n);
    let mut counts = Vec::with_capacity(n * words);
    for (id, row) in docs {
        doc_ids.push(id);
        counts.extend(row);
    }
    Ok(CountDataset {
        n,
        words,
        counts,
        doc_ids,
        vocabulary,
        provenance: Provenance::new(format!("bow:{source}")),
    })
}

pub fn read_bow(path: &Path, vocab_path: &Path) -> Result<CountDataset> {
    let vocabulary = read_vocabulary(vocab_path)?;
    parse_bow(&fs::read_to_string(path)?, vocabulary, &path.display().to_string())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SyntheticLikelihood {
    Gaussian { sigma2: f64, c: f64 },
    Poisson { a: f64, b: f64, topics: usize },
    Bernoulli,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub likelihood: SyntheticLikelihood,
    pub k: usize,
    /// D for dense data, W for counts.
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    /// Multiplies the Glorot-initialised weights of the true decoder.
    pub weight_scale: f64,
    pub alpha: f64,
    pub gamma_mass: f64,
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: DenseDataset,
    pub codes: Vec<SparseCode>,
    pub scales: Vec<f64>,
    pub pi: Vec<f64>,
    pub decoder: DecoderNetwork,
    pub topics: Option<TopicMatrix>,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        BetaProcessConfig {
            alpha: self.alpha,
            gamma_mass: self.gamma_mass,
            k: self.k,
            schedule: Default::default(),
        }
        .validate()?;
        if self.data_dim == 0 || self.n == 0 {
            return Err(Error::invalid("synthetic data needs positive width and count"));
        }
        if !(self.weight_scale > 0.0) {
            return Err(Error::invalid("weight_scale must be positive"));
        }
        match self.likelihood {
            SyntheticLikelihood::Gaussian { sigma2, c } => {
                if !(sigma2 > 0.0) || !(c > 0.0) {
                    return Err(Error::invalid(
                        "gaussian synthetic data needs sigma2 > 0 and c > 0 (c = 0 makes every scale 0)",
                    ));
                }
            }
            SyntheticLikelihood::Poisson { a, b, topics } => {
                if !(a > 0.0) || !(b > 0.0) || topics == 0 {
                    return Err(Error::invalid("poisson synthetic data needs a, b > 0 and topics > 0"));
                }
            }
            SyntheticLikelihood::Bernoulli => {}
        }
        Ok(())
    }

    fn describe(&self) -> String {
        format!(
            "synthetic(likelihood={:?},k={},dim={},hidden={:?},weight_scale={},alpha={},gamma={},n={},seed={})",
            self.likelihood,
            self.k,
            self.data_dim,
            self.hidden,
            self.weight_scale,
            self.alpha,
            self.gamma_mass,
            self.n,
            self.seed
        )
    }
}

/// Samples `π`, codes, scales and data forward through the model.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (out_dim, activation) = match spec.likelihood {
        SyntheticLikelihood::Poisson { topics, .. } => (topics, Activation::Softmax),
        _ => (spec.data_dim, Activation::Sigmoid),
    };
    let mut decoder = DecoderNetwork::new(spec.k, &spec.hidden, out_dim, activation, &mut rng)?;
    for layer in decoder.layers_mut() {
        for w in &mut layer.weight {
            *w *= spec.weight_scale;
        }
    }
    let topics = match spec.likelihood {
        SyntheticLikelihood::Poisson { topics, .. } => {
            let logits = (0..spec.data_dim * topics)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            Some(TopicMatrix::from_logits(spec.data_dim, topics, logits)?)
        }
        _ => None,
    };

    let ratio = spec.gamma_mass / spec.k as f64;
    let beta = Beta::new(spec.alpha * ratio, spec.alpha * (1.0 - ratio))
        .map_err(|e| Error::invalid(format!("beta prior: {e}")))?;
    let pi: Vec<f64> = (0..spec.k).map(|_| beta.sample(&mut rng)).collect();

    let mut codes = Vec::with_capacity(spec.n);
    let mut scales = Vec::with_capacity(spec.n);
    let mut values = Vec::with_capacity(spec.n * spec.data_dim);
    for _ in 0..spec.n {
        let code = SparseCode::from_bits(pi.iter().map(|&p| rng.random_bool(p)).collect());
        let f = decoder.forward_code(&code)?;
        match spec.likelihood {
            SyntheticLikelihood::Gaussian { sigma2, c } => {
                let lambda = Normal::new(0.0, c.sqrt()).unwrap().sample(&mut rng);
                let noise = Normal::new(0.0, sigma2.sqrt()).unwrap();
                values.extend(f.iter().map(|&fd| lambda * fd + noise.sample(&mut rng)));
                scales.push(lambda);
            }
            SyntheticLikelihood::Poisson { a, b, .. } => {
                let lambda = Gamma::new(a, 1.0 / b).unwrap().sample(&mut rng);
                let phi = topics.as_ref().expect("poisson topics").rates(&f);
                for p in phi {
                    let rate = lambda * p;
                    values.push(if rate > 0.0 {
                        Poisson::new(rate).unwrap().sample(&mut rng)
                    } else {
                        0.0
                    });
                }
                scales.push(lambda);
            }
            SyntheticLikelihood::Bernoulli => {
                values.extend(f.iter().map(|&p| if rng.random_bool(p) { 1.0 } else { 0.0 }));
                scales.push(1.0);
            }
        }
        codes.push(code);
    }
    let dataset = DenseDataset::new(spec.n, spec.data_dim, values, Provenance::new(spec.describe()))?;
    Ok(SyntheticData {
        dataset,
        codes,
        scales,
        pi,
        decoder,
        topics,
    })
}

impl SyntheticData {
    /// Count view for Poisson data, with placeholder tokens `w0, w1, ...`.
    pub fn to_counts(&self) -> CountDataset {
        let ds = &self.dataset;
        CountDataset {
            n: ds.n,
            words: ds.dim,
            counts: ds.values.iter().map(|&v| v as u32).collect(),
            doc_ids: (0..ds.n as u64).collect(),
            vocabulary: (0..ds.dim).map(|w| format!("w{w}")).collect(),
            provenance: ds.provenance.clone(),
        }
    }
}
