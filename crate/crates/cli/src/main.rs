//! `bbpsc` command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bbpsc::config::RunConfig;
use bbpsc::datasets::{
    binarize, generate_synthetic, read_bow, read_dense_csv, read_idx, read_idx_with_labels, scale_corrupt,
    DenseDataset, SyntheticLikelihood, SyntheticSpec,
};
use bbpsc::metrics::{topic_report, topic_report_text, EvalReport, TopicGroup, TopicReportOptions};
use bbpsc::trainer::{encode_dataset, evaluate, train, train_from, TrainConfig, TrainState};
use bbpsc::{Error, SparseCode};
use clap::{Args, Parser, Subcommand};

type CliResult<T> = std::result::Result<T, String>;

#[derive(Parser)]
#[command(name = "bbpsc", version, about = "Beta-Bernoulli process sparse coding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and metrics CSV.
    Train(TrainArgs),
    /// Encode data with a trained model; one 0/1 code row per datum.
    Encode(EncodeArgs),
    /// Report the held-out metric and code statistics of a trained model.
    Eval(EvalArgs),
    /// Sample a dataset from the model, with its true codes alongside.
    Synth(SynthArgs),
    /// List the topics activated by each distinct code of a Poisson model.
    Topics(TopicsArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training seed (train.seed); required here or in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Batch-encoding threads (train.workers).
    #[arg(long)]
    workers: Option<usize>,
    /// Training data (data.path).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to write (output.checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics CSV to write (output.metrics).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from this checkpoint up to train.epochs.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the final report as CSV.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Data to encode (data.path).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Code CSV to write; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Held-out data (data.path).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Print a CSV header and row instead of name/value pairs.
    #[arg(long)]
    csv: bool,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Sampling seed (synth.seed); required here or in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Data CSV to write; true codes go to the `.codes.csv` sibling.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TopicsArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary file, one word per line.
    #[arg(long)]
    vocab: PathBuf,
    /// Encode this data first; otherwise the checkpoint's training codes are used.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    top_words: usize,
    #[arg(long)]
    workers: Option<usize>,
    /// Emit one CSV row per (code, topic).
    #[arg(long)]
    csv: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Topics(a) => cmd_topics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn fail(e: Error) -> String {
    e.to_string()
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(format!("{what} '{}' not found", path.display()))
    }
}

fn run_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut rc = match &args.config {
        Some(p) => {
            require_file(p, "config")?;
            RunConfig::load(p).map_err(fail)?
        }
        None => RunConfig::new(),
    };
    rc.apply_overrides(&args.overrides).map_err(fail)?;
    Ok(rc)
}

fn set_path(rc: &mut RunConfig, key: &str, path: &Option<PathBuf>) -> CliResult<()> {
    if let Some(p) = path {
        rc.set(key, &p.display().to_string()).map_err(fail)?;
    }
    Ok(())
}

fn set_value(rc: &mut RunConfig, key: &str, value: Option<impl ToString>) -> CliResult<()> {
    if let Some(v) = value {
        rc.set(key, &v.to_string()).map_err(fail)?;
    }
    Ok(())
}

fn write_output(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| format!("cannot write '{}': {e}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| format!("cannot write to standard output: {e}"))
        }
    }
}

fn read_one(rc: &RunConfig, path: &Path, with_labels: bool) -> CliResult<DenseDataset> {
    require_file(path, "data file")?;
    match rc.require("data.format").map_err(fail)? {
        "csv" => read_dense_csv(path).map_err(fail),
        "idx" => match rc.path("data.labels").filter(|_| with_labels) {
            Some(labels) => {
                require_file(&labels, "label file")?;
                read_idx_with_labels(path, &labels).map_err(fail)
            }
            None => read_idx(path).map_err(fail),
        },
        "bow" => {
            let vocab = rc.path("data.vocab").ok_or("data.format=bow needs data.vocab")?;
            require_file(&vocab, "vocabulary")?;
            Ok(read_bow(path, &vocab).map_err(fail)?.to_dense())
        }
        other => Err(format!("data.format: unknown format '{other}' (expected csv, idx or bow)")),
    }
}

fn transform(rc: &RunConfig, mut ds: DenseDataset) -> CliResult<DenseDataset> {
    let limit = rc.usize("data.limit").map_err(fail)?;
    if limit > 0 && limit < ds.len() {
        ds = ds.slice(0, limit).map_err(fail)?;
    }
    if rc.bool("data.binarize").map_err(fail)? {
        ds = binarize(&ds, rc.f64("data.threshold").map_err(fail)?);
    }
    let scale_max = rc.f64("data.scale_max").map_err(fail)?;
    if scale_max > 0.0 {
        ds = scale_corrupt(&ds, scale_max, rc.u64("data.scale_seed").map_err(fail)?).map_err(fail)?;
    }
    Ok(ds)
}

/// Primary dataset and optional held-out set, both transformed alike.
fn load_data(rc: &RunConfig) -> CliResult<(DenseDataset, Option<DenseDataset>)> {
    let path = rc.path("data.path").ok_or("no data given (use --data or data.path)")?;
    let data = transform(rc, read_one(rc, &path, true)?)?;
    if let Some(h) = rc.path("data.heldout") {
        let heldout = transform(rc, read_one(rc, &h, false)?)?;
        return Ok((data, Some(heldout)));
    }
    let fraction = rc.f64("data.heldout_fraction").map_err(fail)?;
    if fraction <= 0.0 {
        return Ok((data, None));
    }
    if fraction >= 1.0 {
        return Err("data.heldout_fraction must be below 1".into());
    }
    let cut = data.len() - ((data.len() as f64 * fraction).round() as usize).max(1);
    Ok((
        data.slice(0, cut).map_err(fail)?,
        Some(data.slice(cut, data.len()).map_err(fail)?),
    ))
}

fn provenance_notes(data: &DenseDataset, heldout: Option<&DenseDataset>) -> Vec<String> {
    let mut notes: Vec<String> = data.provenance().steps.iter().map(|s| format!("data: {s}")).collect();
    if let Some(h) = heldout {
        notes.extend(h.provenance().steps.iter().map(|s| format!("heldout: {s}")));
    }
    notes
}

/// Keys a resumed run may change; everything else must match the checkpoint.
const RESUMABLE: &[&str] = &[
    "train.epochs",
    "train.workers",
    "train.early_stop",
    "train.eval_every",
    "train.record_timings",
];

fn resume_config(base: &TrainConfig, args: &ConfigArgs) -> CliResult<RunConfig> {
    let frozen = RunConfig::from_train_config(base);
    let mut rc = frozen.clone();
    if let Some(p) = &args.config {
        require_file(p, "config")?;
        let file = RunConfig::load(p).map_err(fail)?;
        for line in file.explicit_text().lines() {
            let (k, v) = line.split_once('=').expect("explicit_text emits key=value");
            rc.set(k, v).map_err(fail)?;
        }
    }
    rc.apply_overrides(&args.overrides).map_err(fail)?;
    for line in frozen.explicit_text().lines() {
        let (k, v) = line.split_once('=').expect("explicit_text emits key=value");
        if !RESUMABLE.contains(&k) && rc.get(k) != Some(v) {
            return Err(format!(
                "cannot change {k} when resuming (checkpoint has {v}, got {})",
                rc.get(k).unwrap_or("nothing")
            ));
        }
    }
    Ok(rc)
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let resumed = match &args.resume {
        Some(p) => {
            require_file(p, "checkpoint")?;
            Some(TrainState::load(p).map_err(fail)?)
        }
        None => None,
    };
    let mut rc = match &resumed {
        Some((base, _)) => resume_config(base, &args.cfg)?,
        None => run_config(&args.cfg)?,
    };
    if resumed.is_some() && args.seed.is_some_and(|s| Some(s.to_string().as_str()) != rc.get("train.seed")) {
        return Err("cannot change train.seed when resuming".into());
    }
    set_value(&mut rc, "train.seed", args.seed)?;
    set_value(&mut rc, "train.workers", args.workers)?;
    set_path(&mut rc, "data.path", &args.data)?;
    set_path(&mut rc, "output.checkpoint", &args.out)?;
    set_path(&mut rc, "output.metrics", &args.metrics)?;
    if rc.get("train.seed").is_none() {
        return Err("a seed is required (use --seed or train.seed)".into());
    }
    let mut cfg = rc.train_config().map_err(fail)?;
    let (data, heldout) = load_data(&rc)?;
    cfg.notes = provenance_notes(&data, heldout.as_ref());

    let outcome = match resumed {
        Some((_, state)) => train_from(state, &cfg, &data, heldout.as_ref()),
        None => train(&cfg, &data, heldout.as_ref()),
    }
    .map_err(fail)?;
    let report = match outcome.report {
        Some(r) => r,
        None => evaluate(&outcome.state, &cfg, &data).map_err(fail)?,
    };
    let text = if args.csv {
        report.to_csv()
    } else {
        let mut line = report.summary_line();
        let _ = write!(line, " epochs={} stopped_early={}", outcome.state.epoch, outcome.stopped_early);
        if heldout.is_none() {
            line.push_str(" (training data)");
        }
        line + "\n"
    };
    write_output(None, &text)
}

/// Checkpoint plus the data named by flags and data.* keys.
fn load_model(
    checkpoint: &Path,
    cfg_args: &ConfigArgs,
    data: &Option<PathBuf>,
    workers: Option<usize>,
) -> CliResult<(TrainConfig, TrainState, Option<DenseDataset>)> {
    require_file(checkpoint, "checkpoint")?;
    let (mut cfg, state) = TrainState::load(checkpoint).map_err(fail)?;
    let mut rc = run_config(cfg_args)?;
    set_path(&mut rc, "data.path", data)?;
    if let Some(w) = workers.or(rc.is_set("train.workers").then(|| rc.usize("train.workers")).transpose().map_err(fail)?) {
        cfg.workers = w.max(1);
    }
    let ds = match rc.path("data.path") {
        Some(p) => Some(transform(&rc, read_one(&rc, &p, false)?)?),
        None => None,
    };
    Ok((cfg, state, ds))
}

fn cmd_encode(args: EncodeArgs) -> CliResult<()> {
    let (cfg, state, data) = load_model(&args.checkpoint, &args.cfg, &args.data, args.workers)?;
    let data = data.ok_or("no data given (use --data or data.path)")?;
    let encoded = encode_dataset(&state, &cfg, &data).map_err(fail)?;
    let mut text = String::with_capacity(encoded.len() * 2 * state.net.input_dim());
    for e in &encoded {
        text.push_str(&e.pursuit.code.to_csv_row());
        text.push('\n');
    }
    write_output(args.out.as_deref(), &text)
}

fn eval_text(report: &EvalReport, csv: bool) -> String {
    if csv {
        report.to_csv()
    } else {
        report.to_text()
    }
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let (cfg, state, data) = load_model(&args.checkpoint, &args.cfg, &args.data, args.workers)?;
    let data = data.ok_or("no data given (use --data or data.path)")?;
    let report = evaluate(&state, &cfg, &data).map_err(fail)?;
    write_output(args.out.as_deref(), &eval_text(&report, args.csv))
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let mut rc = run_config(&args.cfg)?;
    set_value(&mut rc, "synth.seed", args.seed)?;
    let seed = match rc.get("synth.seed") {
        Some(_) => rc.u64("synth.seed").map_err(fail)?,
        None => return Err("a seed is required (use --seed or synth.seed)".into()),
    };
    let prior = rc.beta_process().map_err(fail)?;
    let params = rc.likelihood_params().map_err(fail)?;
    let likelihood = match rc.require("model.likelihood").map_err(fail)? {
        "gaussian" => SyntheticLikelihood::Gaussian {
            sigma2: params.sigma2,
            c: params.c,
        },
        "poisson" => SyntheticLikelihood::Poisson {
            a: params.gamma_a,
            b: params.gamma_b,
            topics: params.topics,
        },
        "bernoulli" => SyntheticLikelihood::Bernoulli,
        other => return Err(format!("unknown likelihood '{other}'")),
    };
    let spec = SyntheticSpec {
        likelihood,
        k: prior.k,
        data_dim: rc.usize("synth.dim").map_err(fail)?,
        hidden: rc.counts("synth.hidden").map_err(fail)?,
        weight_scale: rc.f64("synth.weight_scale").map_err(fail)?,
        alpha: prior.alpha,
        gamma_mass: prior.gamma_mass,
        n: rc.usize("synth.n").map_err(fail)?,
        seed,
    };
    let syn = generate_synthetic(&spec).map_err(fail)?;
    syn.dataset.write_csv(&args.out).map_err(fail)?;
    let mut codes = syn.dataset.provenance().header();
    for z in &syn.codes {
        codes.push_str(&z.to_csv_row());
        codes.push('\n');
    }
    write_output(Some(&sibling(&args.out, ".codes.csv")), &codes)?;
    if matches!(likelihood, SyntheticLikelihood::Poisson { .. }) {
        syn.to_counts()
            .write(&sibling(&args.out, ".bow"), &sibling(&args.out, ".vocab"))
            .map_err(fail)?;
    }
    Ok(())
}

fn topics_csv(groups: &[TopicGroup]) -> String {
    let mut out = String::from("group,code,members,topic,probability,words\n");
    for (g, group) in groups.iter().enumerate() {
        let code = group.code.to_csv_row().replace(',', "");
        for t in &group.topics {
            let words: Vec<&str> = t.words.iter().map(|(w, _)| w.as_str()).collect();
            let _ = writeln!(out, "{g},{code},{},{},{},{}", group.members, t.topic, t.probability, words.join(" "));
        }
    }
    out
}

fn cmd_topics(args: TopicsArgs) -> CliResult<()> {
    let (cfg, state, data) = load_model(&args.checkpoint, &args.cfg, &args.data, args.workers)?;
    let topics = state
        .model
        .topic_matrix()
        .ok_or_else(|| format!("topics need a poisson model, checkpoint has '{}'", cfg.likelihood))?;
    require_file(&args.vocab, "vocabulary")?;
    let vocabulary = bbpsc::datasets::read_vocabulary(&args.vocab).map_err(fail)?;
    let codes: Vec<SparseCode> = match &data {
        Some(d) => encode_dataset(&state, &cfg, d)
            .map_err(fail)?
            .into_iter()
            .map(|e| e.pursuit.code)
            .collect(),
        None => state.codes.clone(),
    };
    let opts = TopicReportOptions {
        top_words: args.top_words,
        ..Default::default()
    };
    let groups = topic_report(&codes, topics, &state.net, &vocabulary, &opts).map_err(fail)?;
    let text = if args.csv { topics_csv(&groups) } else { topic_report_text(&groups) };
    write_output(args.out.as_deref(), &text)
}
