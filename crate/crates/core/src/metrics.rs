//! Evaluation quantities for learned codes and reconstructions.

use std::fmt::Write as _;

use crate::error::{check_len, Error, Result};
use crate::likelihood::bernoulli::bern_loglik;
use crate::likelihood::poisson::poiss_log_pmf;
use crate::likelihood::TopicMatrix;
use crate::nn::DecoderNetwork;
use crate::SparseCode;

/// Hoyer sparsity `(√K − ‖z‖₁/‖z‖₂) / (√K − 1)`; the empty code scores 1.
pub fn hoyer(z: &SparseCode) -> Result<f64> {
    let k = z.width();
    if k < 2 {
        return Err(Error::invalid("hoyer sparsity needs K >= 2"));
    }
    let m = z.count();
    if m == 0 {
        return Ok(1.0);
    }
    let l1 = m as f64;
    let l2 = l1.sqrt();
    let root_k = (k as f64).sqrt();
    Ok(((root_k - l1 / l2) / (root_k - 1.0)).clamp(0.0, 1.0))
}

/// Mean Hoyer sparsity; 1 for an empty set.
pub fn sparsity(codes: &[SparseCode]) -> Result<f64> {
    if codes.is_empty() {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for z in codes {
        total += hoyer(z)?;
    }
    Ok(total / codes.len() as f64)
}

fn check_pairs(data_len: usize, codes: &[SparseCode]) -> Result<()> {
    if data_len == 0 {
        return Err(Error::invalid("metric over an empty set"));
    }
    check_len("codes per datum", data_len, codes.len())
}

/// `(1/N) Σ_n ‖x_n − E[λ_n] f_θ(z_n)‖²`.
pub fn mse(data: &[&[f64]], codes: &[SparseCode], net: &DecoderNetwork, scale_means: &[f64]) -> Result<f64> {
    check_pairs(data.len(), codes)?;
    check_len("scale means", data.len(), scale_means.len())?;
    let mut total = 0.0;
    for ((x, z), &m) in data.iter().zip(codes).zip(scale_means) {
        let f = net.forward_code(z)?;
        check_len("decoder output", x.len(), f.len())?;
        total += x.iter().zip(&f).map(|(xi, fi)| (xi - m * fi).powi(2)).sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

/// Bernoulli `−(1/N) Σ_n ln p(x_n | z_n)`.
pub fn nll(data: &[&[f64]], codes: &[SparseCode], net: &DecoderNetwork) -> Result<f64> {
    check_pairs(data.len(), codes)?;
    let mut total = 0.0;
    for (x, z) in data.iter().zip(codes) {
        total -= bern_loglik(x, &net.forward_code(z)?)?;
    }
    Ok(total / data.len() as f64)
}

/// Poisson `−(1/N) Σ_n ln Poiss(x_n | E[λ_n] β f_θ(z_n))`, log-factorials
/// included.
pub fn poisson_nll(
    data: &[&[f64]],
    codes: &[SparseCode],
    net: &DecoderNetwork,
    topics: &TopicMatrix,
    scale_means: &[f64],
) -> Result<f64> {
    check_pairs(data.len(), codes)?;
    check_len("scale means", data.len(), scale_means.len())?;
    let mut total = 0.0;
    for ((x, z), &m) in data.iter().zip(codes).zip(scale_means) {
        check_len("poisson datum", topics.words(), x.len())?;
        let rates: Vec<f64> = topics
            .rates(&net.forward_code(z)?)
            .into_iter()
            .map(|r| m * r)
            .collect();
        total -= poiss_log_pmf(x, &rates);
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub sparsity: f64,
    pub mean_active_bits: f64,
    pub activation: Vec<f64>,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn csv_header(&self) -> String {
        let mut h = String::from("metric,value,n,sparsity,mean_active_bits,fingerprint");
        for k in 0..self.activation.len() {
            let _ = write!(h, ",act_{k}");
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{},{},{},{}",
            self.metric, self.value, self.n, self.sparsity, self.mean_active_bits, self.fingerprint
        );
        for p in &self.activation {
            let _ = write!(row, ",{p}");
        }
        row
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", self.csv_header(), self.csv_row())
    }

    /// One `name value` pair per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.metric, self.value);
        let _ = writeln!(out, "sparsity {}", self.sparsity);
        let _ = writeln!(out, "mean_active_bits {}", self.mean_active_bits);
        let _ = writeln!(out, "n {}", self.n);
        let _ = writeln!(out, "fingerprint {}", self.fingerprint);
        out
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{}={:.6} sparsity={:.4} mean_active_bits={:.3} n={}",
            self.metric, self.value, self.sparsity, self.mean_active_bits, self.n
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopicReportOptions {
    /// Words listed per topic.
    pub top_words: usize,
    /// Topics listed per code.
    pub max_topics: usize,
    /// Topics below this probability are left out (the most probable topic
    /// is always kept).
    pub min_probability: f64,
}

impl Default for TopicReportOptions {
    fn default() -> Self {
        Self {
            top_words: 15,
            max_topics: 5,
            min_probability: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopicEntry {
    pub topic: usize,
    pub probability: f64,
    pub words: Vec<(String, f64)>,
}

/// Topics activated together by one distinct code.
#[derive(Clone, Debug, PartialEq)]
pub struct TopicGroup {
    pub code: SparseCode,
    pub members: usize,
    pub topics: Vec<TopicEntry>,
}

fn top_indices(values: &[f64], limit: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(limit);
    idx
}

/// Groups codes, decodes each distinct code to a topic distribution and
/// lists its main topics with their most probable words. Groups are ordered
/// by membership, largest first.
pub fn topic_report(
    codes: &[SparseCode],
    topics: &TopicMatrix,
    net: &DecoderNetwork,
    vocabulary: &[String],
    opts: &TopicReportOptions,
) -> Result<Vec<TopicGroup>> {
    check_len("vocabulary", topics.words(), vocabulary.len())?;
    check_len("decoder output", topics.topics(), net.output_dim())?;
    let mut distinct: Vec<(SparseCode, usize)> = Vec::new();
    let mut sorted = codes.to_vec();
    sorted.sort();
    for code in sorted {
        match distinct.last_mut() {
            Some((c, n)) if *c == code => *n += 1,
            _ => distinct.push((code, 1)),
        }
    }
    distinct.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut groups = Vec::with_capacity(distinct.len());
    for (code, members) in distinct {
        let dist = net.forward_code(&code)?;
        let mut entries = Vec::new();
        for (rank, t) in top_indices(&dist, opts.max_topics).into_iter().enumerate() {
            if rank > 0 && dist[t] < opts.min_probability {
                break;
            }
            let column = topics.column(t);
            let words = top_indices(&column, opts.top_words)
                .into_iter()
                .map(|w| (vocabulary[w].clone(), column[w]))
                .collect();
            entries.push(TopicEntry {
                topic: t,
                probability: dist[t],
                words,
            });
        }
        groups.push(TopicGroup {
            code,
            members,
            topics: entries,
        });
    }
    Ok(groups)
}

pub fn topic_report_text(groups: &[TopicGroup]) -> String {
    let mut out = String::new();
    for (g, group) in groups.iter().enumerate() {
        let _ = writeln!(
            out,
            "group {g} code {} members {}",
            group.code.to_csv_row().replace(',', ""),
            group.members
        );
        for entry in &group.topics {
            let words: Vec<&str> = entry.words.iter().map(|(w, _)| w.as_str()).collect();
            let _ = writeln!(
                out,
                "  topic {} p={:.4}: {}",
                entry.topic,
                entry.probability,
                words.join(" ")
            );
        }
    }
    out
}

/// One row per (group, topic, word).
pub fn topic_report_csv(groups: &[TopicGroup]) -> String {
    let mut out = String::from("group,code,members,topic,topic_probability,word_rank,word,word_probability\n");
    for (g, group) in groups.iter().enumerate() {
        let code = group.code.to_csv_row().replace(',', "");
        for entry in &group.topics {
            for (rank, (word, p)) in entry.words.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{g},{code},{},{},{},{rank},{word},{p}",
                    group.members, entry.topic, entry.probability
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::nn::{Activation, DenseLayer};

    #[test]
    fn hoyer_reference_values() {
        assert_eq!(hoyer(&SparseCode::from_active(16, &[0])).unwrap(), 1.0);
        assert_eq!(hoyer(&SparseCode::from_mask(16, 0xffff)).unwrap(), 0.0);
        let two = hoyer(&SparseCode::from_active(16, &[3, 9])).unwrap();
        assert!((two - (4.0 - 2f64.sqrt()) / 3.0).abs() < 1e-14);
        assert!((two - 0.8619).abs() < 1e-4);
        assert_eq!(hoyer(&SparseCode::zeros(16)).unwrap(), 1.0);
        assert!(hoyer(&SparseCode::zeros(1)).is_err());
    }

    #[test]
    fn sparsity_of_sets() {
        let one_hot: Vec<_> = (0..16).map(|j| SparseCode::from_active(16, &[j])).collect();
        assert_eq!(sparsity(&one_hot).unwrap(), 1.0);
        assert_eq!(sparsity(&[SparseCode::from_mask(16, 0xffff)]).unwrap(), 0.0);
        let mixed = [SparseCode::from_active(16, &[0]), SparseCode::from_mask(16, 0xffff)];
        assert!((sparsity(&mixed).unwrap() - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn hoyer_bounded_and_count_only(bits in prop::collection::vec(any::<bool>(), 2..=64), shift in 0usize..64) {
            let z = SparseCode::from_bits(bits.clone());
            let h = hoyer(&z).unwrap();
            prop_assert!((0.0..=1.0).contains(&h));
            let mut rotated = bits;
            let len = rotated.len();
            rotated.rotate_left(shift % len);
            prop_assert_eq!(hoyer(&SparseCode::from_bits(rotated)).unwrap(), h);
        }
    }

    fn bias_net(bias: Vec<f64>, act: Activation) -> DecoderNetwork {
        let mut layer = DenseLayer::zeros(2, bias.len(), act);
        layer.bias = bias;
        DecoderNetwork::from_layers(vec![layer]).unwrap()
    }

    #[test]
    fn mse_cases() {
        let net = bias_net(vec![0.5, 0.25], Activation::Identity);
        let z = vec![SparseCode::zeros(2); 2];
        let x1 = [1.0, 0.5];
        let x2 = [0.5, 0.25];
        assert_eq!(mse(&[&x1, &x2], &z, &net, &[2.0, 1.0]).unwrap(), 0.0);
        let zero = bias_net(vec![0.0, 0.0], Activation::Identity);
        let v = mse(&[&x1, &x2], &z, &zero, &[1.0, 1.0]).unwrap();
        assert!((v - (1.25 + 0.3125) / 2.0).abs() < 1e-15);
        let base = mse(&[&x1], &z[..1], &net, &[1.0]).unwrap();
        let x1b = [0.5 + 2.0 * 0.5, 0.25 + 2.0 * 0.25];
        let doubled = mse(&[&x1b], &z[..1], &net, &[1.0]).unwrap();
        assert!((doubled - 4.0 * base).abs() < 1e-14);
        assert!(mse(&[], &[], &net, &[]).is_err());
    }

    #[test]
    fn nll_half_probabilities() {
        let net = bias_net(vec![0.0; 784], Activation::Sigmoid);
        let x: Vec<f64> = (0..784).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let v = nll(&[&x], &[SparseCode::zeros(2)], &net).unwrap();
        assert!((v - 784.0 * 2f64.ln()).abs() < 1e-9);
        assert!((v - 543.427).abs() < 1e-3);
    }

    #[test]
    fn topic_report_groups() {
        // Three topics over four words; topic 2 puts almost all mass on word 3.
        let logits = vec![
            0.0, 0.0, -20.0, //
            0.0, 1.0, -20.0, //
            0.0, 0.0, -20.0, //
            0.0, 0.0, 20.0,
        ];
        let topics = TopicMatrix::from_logits(4, 3, logits).unwrap();
        let vocab: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let mut layer = DenseLayer::zeros(2, 3, Activation::Identity);
        layer.bias = vec![0.0, 0.0, 1.0];
        layer.weight = vec![0.0, 0.0, 1.0, 0.0, -1.0, 0.0];
        let net = DecoderNetwork::from_layers(vec![layer]).unwrap();
        let codes = vec![
            SparseCode::zeros(2),
            SparseCode::from_active(2, &[0]),
            SparseCode::zeros(2),
        ];
        let groups = topic_report(&codes, &topics, &net, &vocab, &TopicReportOptions::default()).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].members, 2);
        assert_eq!(groups[0].topics.len(), 1);
        assert_eq!(groups[0].topics[0].topic, 2);
        assert_eq!(groups[0].topics[0].words[0].0, "d");
        // code {0}: f = (0, 1, 0) → topic 1, whose top word is b
        assert_eq!(groups[1].topics.len(), 1);
        assert_eq!(groups[1].topics[0].topic, 1);
        assert_eq!(groups[1].topics[0].words[0].0, "b");
        let csv = topic_report_csv(&groups);
        assert!(csv.lines().count() > 1);
        assert!(topic_report_text(&groups).contains("topic 2"));
    }
}
