//! The `ordertrace` command-line surface.
//!
//! One subcommand per audit procedure, plus converters for the file
//! formats they consume. Every command reads only the files named by its
//! flags, takes randomness only from `--seed`, and emits one JSON report
//! on stdout (duplicated to `--out` when given). Reports echo the resolved
//! configuration and the SHA-256 of every input, so a report alone is
//! enough to rerun the audit. `--threads` sizes the worker pool and is
//! guaranteed not to change a single output byte; timing goes to stderr.

pub mod cost;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ordertrace::harness::{
    self, HarnessTestParams, Scenario, ScenarioKind, SweepCell, TestId,
};
use ordertrace::ngram;
use ordertrace::query::{self, LoglikRecord, QueryConfig};
use ordertrace::rng::RandomSource;
use ordertrace::shuffle::{self, ShuffleTestConfig};
use ordertrace::stats::SpearmanResult;
use ordertrace::toylm::{DecayLmTrainer, DecayNgramLm};
use ordertrace::transcript::{
    read_transcript, subsample_transcript, write_transcript, Document, EpochMap, TextBundle,
    Transcript,
};

#[derive(Parser)]
#[command(
    name = "ordertrace",
    version,
    about = "Training-order provenance audits for language models"
)]
pub struct Cli {
    /// Worker threads; affects speed only, never output bytes.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Convert whitespace token-id lines into a transcript file.
    Ingest(IngestArgs),
    /// Keep a uniform random subset of transcript entries.
    Subsample(SubsampleArgs),
    /// Train the built-in n-gram model on a transcript.
    Train(TrainArgs),
    /// Rank correlation between training step and log-likelihood.
    QueryTest(QueryTestArgs),
    /// Same test with log-likelihoods estimated by repeated sampling.
    QueryTestSampled(QueryTestSampledArgs),
    /// Build an n-gram partition index from a transcript.
    NgramIndex(NgramIndexArgs),
    /// Match text against a partition index and test the order trend.
    NgramTest(NgramTestArgs),
    /// Compare text likelihood under the real run against reshuffled runs.
    ShuffleTest(ShuffleTestArgs),
    /// Run a synthetic scenario sweep.
    Simulate(SimulateArgs),
    /// Check a batch of p-values against the uniform distribution.
    Calibrate(CalibrateArgs),
    /// Price a batch of query-test sequences.
    Cost(CostArgs),
}

#[derive(Args)]
pub struct IngestArgs {
    /// Input: one document per line, whitespace-separated token ids.
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long)]
    pub vocab: u32,
    /// Transcript file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SubsampleArgs {
    #[arg(long)]
    pub transcript: PathBuf,
    /// Entries to keep.
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub transcript: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub order: usize,
    #[arg(long, default_value_t = 1.0)]
    pub decay: f64,
    #[arg(long, default_value_t = 0.1)]
    pub smoothing: f64,
    #[arg(long)]
    pub seed: u64,
    /// Model snapshot to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct QueryTestArgs {
    /// Precomputed log-likelihood records (JSONL). Mutually exclusive
    /// with --transcript/--model.
    #[arg(long, conflicts_with_all = ["transcript", "model", "ref_model"])]
    pub loglik: Option<PathBuf>,
    #[arg(long, requires = "model")]
    pub transcript: Option<PathBuf>,
    /// Model snapshot to score with.
    #[arg(long, requires = "transcript")]
    pub model: Option<PathBuf>,
    /// Order-independent reference model for log-likelihood-ratio scores.
    #[arg(long, requires = "model")]
    pub ref_model: Option<PathBuf>,
    /// plain | referenced | regression; default referenced when reference
    /// scores exist, else plain.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long, default_value_t = 12)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub start_pos: usize,
    /// Split the run into this many equal epochs and test each.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Restrict to one epoch (0-based; requires --epochs).
    #[arg(long, requires = "epochs")]
    pub epoch: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct QueryTestSampledArgs {
    #[arg(long)]
    pub transcript: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub ref_model: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub start_pos: usize,
    /// Samples drawn per scored position.
    #[arg(long)]
    pub n_samples: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct NgramIndexArgs {
    #[arg(long)]
    pub transcript: PathBuf,
    /// Number of contiguous training partitions.
    #[arg(long)]
    pub k: usize,
    /// Longest n-gram order stored.
    #[arg(long, default_value_t = 8)]
    pub n_max: usize,
    /// Subsampling rate in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    pub rate: f64,
    #[arg(long)]
    pub seed: u64,
    /// Index file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct NgramTestArgs {
    /// Index built by ngram-index. Mutually exclusive with --likelihood.
    #[arg(long, conflicts_with = "likelihood")]
    pub index: Option<PathBuf>,
    /// Credit single-token matches too.
    #[arg(long, default_value_t = false)]
    pub unigrams: bool,
    /// Use per-partition model likelihoods instead of n-gram matching.
    #[arg(long, default_value_t = false, requires_all = ["transcript", "k"])]
    pub likelihood: bool,
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub lm_order: usize,
    #[arg(long, default_value_t = 0.1)]
    pub smoothing: f64,
    /// Text to audit: one document per line, whitespace token ids.
    #[arg(long)]
    pub text: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ShuffleTestArgs {
    #[arg(long)]
    pub transcript: PathBuf,
    /// Text to audit: one document per line, whitespace token ids.
    #[arg(long)]
    pub text: PathBuf,
    /// Snapshot of the audited model; defaults to retraining on the
    /// transcript as written.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Reshuffled models to train.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Fraction of the run to replay, from the end.
    #[arg(long, default_value_t = 0.25)]
    pub fraction: f64,
    #[arg(long, default_value_t = 3)]
    pub order: usize,
    #[arg(long, default_value_t = 1.0)]
    pub decay: f64,
    #[arg(long, default_value_t = 0.1)]
    pub smoothing: f64,
    /// Fine-tune every model on the text before scoring.
    #[arg(long, default_value_t = 0)]
    pub finetune_passes: usize,
    /// Exact permutation variant instead of the z approximation.
    #[arg(long, default_value_t = false)]
    pub exact: bool,
    /// Permutations for --exact.
    #[arg(long, default_value_t = 99)]
    pub m: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// copy | finetune | independent-reshuffle | independent-corpus
    #[arg(long)]
    pub scenario: String,
    /// Sweep cells as test:size pairs, comma-separated, e.g.
    /// query:120,obs-shuffle:512. Query sizes count examples;
    /// observational sizes count text tokens.
    #[arg(long)]
    pub cells: String,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub corpus_seed: u64,
    #[arg(long, default_value_t = 40)]
    pub extra_docs: usize,
    #[arg(long, default_value_t = 1)]
    pub passes: usize,
    #[arg(long, default_value_t = 120)]
    pub corpus_docs: usize,
    #[arg(long, default_value_t = 24)]
    pub len_min: usize,
    #[arg(long, default_value_t = 40)]
    pub len_max: usize,
    #[arg(long, default_value_t = 64)]
    pub diversity: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab: u32,
    #[arg(long, default_value_t = 3)]
    pub lm_order: usize,
    #[arg(long, default_value_t = 0.999)]
    pub decay: f64,
    #[arg(long, default_value_t = 0.1)]
    pub smoothing: f64,
    #[arg(long, default_value_t = 24)]
    pub text_docs: usize,
    #[arg(long, default_value_t = 16)]
    pub prefix_len: usize,
    #[arg(long, default_value_t = 48)]
    pub continuation_len: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 12)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub start_pos: usize,
    #[arg(long, default_value_t = 16)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 8)]
    pub k_partitions: usize,
    #[arg(long, default_value_t = 8)]
    pub n_max: usize,
    #[arg(long, default_value_t = 1.0)]
    pub rate: f64,
    #[arg(long, default_value_t = 8)]
    pub shuffle_k: usize,
    #[arg(long, default_value_t = 0.25)]
    pub fraction: f64,
    #[arg(long, default_value_t = 19)]
    pub m_exact: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the flat scenario,test,n,trial,p table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct CalibrateArgs {
    /// One p-value per line, or a simulate CSV (p taken from its last
    /// column).
    #[arg(long)]
    pub p_values: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CostArgs {
    /// Currency per 1M input tokens.
    #[arg(long)]
    pub input_rate: f64,
    /// Currency per 1M output tokens.
    #[arg(long)]
    pub output_rate: f64,
    /// Scored sequences, in millions.
    #[arg(long)]
    pub sequences_millions: f64,
    #[arg(long)]
    pub seq_len: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// The one report shape every subcommand emits. Fields without a defined
/// value for a given method are omitted rather than filled with dummies.
#[derive(Debug, Serialize)]
pub struct TestReport {
    pub method: &'static str,
    /// Resolved configuration, sufficient to rerun the command. Output
    /// paths and --threads are excluded: neither affects the result.
    pub config: serde_json::Value,
    /// SHA-256 of every input file, in flag order.
    pub inputs: Vec<InputHash>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Evidence size: examples scored, partitions, documents, or trials.
    pub n: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub statistic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_one_sided: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_two_sided: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log10_p_one_sided: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log10_p_two_sided: Option<f64>,
    pub degenerate: bool,
    pub details: serde_json::Value,
}

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

fn log10_of(p: Option<f64>) -> Option<f64> {
    match p {
        Some(p) if p > 0.0 => Some(p.log10()),
        _ => None,
    }
}

impl TestReport {
    fn new(method: &'static str, config: serde_json::Value, inputs: Vec<InputHash>) -> Self {
        Self {
            method,
            config,
            inputs,
            seed: None,
            n: 0,
            statistic: None,
            p_one_sided: None,
            p_two_sided: None,
            log10_p_one_sided: None,
            log10_p_two_sided: None,
            degenerate: false,
            details: serde_json::Value::Null,
        }
    }

    fn with_p(mut self, one: Option<f64>, two: Option<f64>) -> Self {
        self.log10_p_one_sided = log10_of(one);
        self.log10_p_two_sided = log10_of(two);
        self.p_one_sided = one;
        self.p_two_sided = two;
        self
    }

    fn with_spearman(self, s: &SpearmanResult) -> Self {
        let mut r = self.with_p(Some(s.p_one_sided), Some(s.p_two_sided));
        r.statistic = Some(s.rho);
        r.n = s.n as u64;
        r
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

fn hash_file(path: &Path) -> Result<InputHash> {
    let bytes =
        fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(InputHash {
        path: path.display().to_string(),
        sha256: hex::encode(h.finalize()),
    })
}

fn open_transcript(path: &Path) -> Result<Transcript> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_transcript(f, &path.display().to_string())?)
}

fn open_model(path: &Path) -> Result<DecayNgramLm> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    DecayNgramLm::read_snapshot(f).with_context(|| format!("reading model {}", path.display()))
}

/// One document per non-empty line, whitespace-separated token ids.
fn read_token_lines(path: &Path) -> Result<Vec<Document>> {
    let content =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut docs = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ids = line
            .split_whitespace()
            .map(|w| {
                w.parse::<u32>()
                    .map_err(|e| anyhow!("{}:{}: bad token id {w:?}: {e}", path.display(), lineno + 1))
            })
            .collect::<Result<Vec<u32>>>()?;
        docs.push(Document::new(ids)?);
    }
    if docs.is_empty() {
        bail!("{}: no documents", path.display());
    }
    Ok(docs)
}

fn read_bundle(path: &Path) -> Result<TextBundle> {
    Ok(TextBundle::new(read_token_lines(path)?)?)
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Prints the report to stdout and mirrors it to `out` when given.
fn emit(report: &TestReport, out: Option<&Path>) -> Result<()> {
    let json = report.to_json()?;
    std::io::stdout().write_all(json.as_bytes())?;
    if let Some(path) = out {
        write_output(path, json.as_bytes())?;
    }
    Ok(())
}

fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    let inputs = vec![hash_file(&a.tokens)?];
    let docs = read_token_lines(&a.tokens)?;
    let t = Transcript::from_docs(docs, a.vocab)?;
    let mut buf = Vec::new();
    write_transcript(&t, &mut buf)?;
    write_output(&a.out, &buf)?;
    let mut report = TestReport::new(
        "ingest",
        serde_json::json!({
            "tokens": a.tokens.display().to_string(),
            "vocab": a.vocab,
        }),
        inputs,
    );
    report.n = t.len() as u64;
    report.details = serde_json::json!({
        "documents": t.len(),
        "steps": t.num_steps(),
        "total_tokens": t.entries().iter().map(|e| e.doc.len()).sum::<usize>(),
    });
    emit(&report, None)
}

fn cmd_subsample(a: &SubsampleArgs) -> Result<()> {
    let inputs = vec![hash_file(&a.transcript)?];
    let t = open_transcript(&a.transcript)?;
    let sub = subsample_transcript(&t, a.n, &RandomSource::new(a.seed))?;
    let mut buf = Vec::new();
    write_transcript(&sub, &mut buf)?;
    write_output(&a.out, &buf)?;
    let mut report = TestReport::new(
        "subsample",
        serde_json::json!({
            "transcript": a.transcript.display().to_string(),
            "n": a.n,
        }),
        inputs,
    );
    report.seed = Some(a.seed);
    report.n = sub.len() as u64;
    report.details = serde_json::json!({
        "kept": sub.len(),
        "from": t.len(),
        "steps": sub.num_steps(),
    });
    emit(&report, None)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    use ordertrace::lm::{LanguageModel, Trainer};
    let inputs = vec![hash_file(&a.transcript)?];
    let t = open_transcript(&a.transcript)?;
    let trainer = DecayLmTrainer::new(a.order, a.decay, a.smoothing);
    let model = trainer.train(&t, None, &RandomSource::new(a.seed))?;
    let mut buf = Vec::new();
    model.write_snapshot(&mut buf)?;
    write_output(&a.out, &buf)?;
    let mut report = TestReport::new(
        "train",
        serde_json::json!({
            "transcript": a.transcript.display().to_string(),
            "order": a.order,
            "decay": a.decay,
            "smoothing": a.smoothing,
        }),
        inputs,
    );
    report.seed = Some(a.seed);
    report.n = t.len() as u64;
    report.details = serde_json::json!({
        "snapshot_hash": model.snapshot_hash(),
        "vocab": model.vocab_size(),
        "clock": model.clock(),
    });
    emit(&report, None)
}

fn query_method<'a>(records: &[LoglikRecord], requested: Option<&'a str>) -> Result<&'a str> {
    let has_ref = records.iter().all(|r| r.ll_ref.is_some());
    match requested {
        None => Ok(if has_ref { "referenced" } else { "plain" }),
        Some("plain") => Ok("plain"),
        Some(m @ ("referenced" | "regression")) => {
            if m == "referenced" && !has_ref {
                bail!("--method referenced needs a reference score on every record");
            }
            Ok(m)
        }
        Some(other) => bail!("unknown method {other:?}; use plain, referenced, or regression"),
    }
}

fn cmd_query_test(a: &QueryTestArgs) -> Result<()> {
    let mut inputs = Vec::new();
    let mut config = serde_json::Map::new();

    let (records, scored, skipped): (Vec<LoglikRecord>, usize, usize) = if let Some(loglik) =
        &a.loglik
    {
        inputs.push(hash_file(loglik)?);
        config.insert(
            "loglik".into(),
            loglik.display().to_string().into(),
        );
        let f = fs::File::open(loglik).with_context(|| format!("opening {}", loglik.display()))?;
        let records = query::read_records(f, &loglik.display().to_string())?;
        let n = records.len();
        (records, n, 0)
    } else {
        let (Some(tp), Some(mp)) = (&a.transcript, &a.model) else {
            bail!("provide either --loglik or --transcript with --model");
        };
        inputs.push(hash_file(tp)?);
        inputs.push(hash_file(mp)?);
        config.insert("transcript".into(), tp.display().to_string().into());
        config.insert("model".into(), mp.display().to_string().into());
        config.insert("seq_len".into(), a.seq_len.into());
        config.insert("start_pos".into(), a.start_pos.into());
        let t = open_transcript(tp)?;
        let model = open_model(mp)?;
        let reference = match &a.ref_model {
            Some(rp) => {
                inputs.push(hash_file(rp)?);
                config.insert("ref_model".into(), rp.display().to_string().into());
                Some(open_model(rp)?)
            }
            None => None,
        };
        let cfg = QueryConfig::new(a.seq_len, a.start_pos)?;

        if let Some(k) = a.epochs {
            config.insert("epochs".into(), k.into());
            let epochs = EpochMap::uniform(t.num_steps(), k)?;
            if let Some(e) = a.epoch {
                config.insert("epoch".into(), e.into());
                let rep = query::likelihood_order_test(
                    &t,
                    &model,
                    reference.as_ref(),
                    &cfg.with_epoch(e),
                    Some(&epochs),
                )?;
                let mut report = TestReport::new(
                    "query-test",
                    serde_json::Value::Object(config),
                    inputs,
                )
                .with_spearman(&rep.spearman);
                report.details = serde_json::json!({
                    "spearman": rep.spearman,
                    "scored": rep.scored,
                    "skipped": rep.skipped,
                });
                return emit(&report, a.out.as_deref());
            }
            let scan = query::epoch_scan(&t, &model, reference.as_ref(), &cfg, &epochs)?;
            let best = scan
                .per_epoch
                .iter()
                .min_by(|x, y| {
                    x.spearman
                        .p_one_sided
                        .partial_cmp(&y.spearman.p_one_sided)
                        .expect("finite p")
                })
                .expect("at least one epoch");
            let mut report =
                TestReport::new("query-test", serde_json::Value::Object(config), inputs)
                    .with_p(Some(scan.corrected_p), None);
            report.statistic = Some(best.spearman.rho);
            report.n = scan.per_epoch.iter().map(|r| r.scored as u64).sum();
            report.log10_p_one_sided = log10_of(Some(scan.corrected_p)).or(
                // A zero is a reportable limit, not a missing value.
                Some(f64::NEG_INFINITY).filter(|_| scan.corrected_p == 0.0),
            );
            report.details = serde_json::json!({
                "per_epoch": scan
                    .per_epoch
                    .iter()
                    .map(|r| serde_json::json!({
                        "spearman": r.spearman,
                        "scored": r.scored,
                        "skipped": r.skipped,
                    }))
                    .collect::<Vec<_>>(),
                "corrected_p": scan.corrected_p,
            });
            return emit(&report, a.out.as_deref());
        }

        let (records, skipped) =
            query::score_examples(&t, &model, reference.as_ref(), &cfg, None)?;
        let n = records.len();
        (records, n, skipped)
    };

    let method = query_method(&records, a.method.as_deref())?;
    config.insert("method".into(), method.into());
    let spearman = match method {
        "plain" => query::plain_order_test(&records)?,
        "referenced" => query::referenced_order_test(&records)?,
        "regression" => query::regressed_order_test(&records)?,
        _ => unreachable!(),
    };
    let mut report = TestReport::new("query-test", serde_json::Value::Object(config), inputs)
        .with_spearman(&spearman);
    report.details = serde_json::json!({
        "spearman": spearman,
        "scored": scored,
        "skipped": skipped,
    });
    emit(&report, a.out.as_deref())
}

fn cmd_query_test_sampled(a: &QueryTestSampledArgs) -> Result<()> {
    let mut inputs = vec![hash_file(&a.transcript)?, hash_file(&a.model)?];
    let t = open_transcript(&a.transcript)?;
    let model = open_model(&a.model)?;
    let reference = match &a.ref_model {
        Some(rp) => {
            inputs.push(hash_file(rp)?);
            Some(open_model(rp)?)
        }
        None => None,
    };
    let cfg = QueryConfig::new(a.seq_len, a.start_pos)?;
    let rep = query::sampled_order_test(
        &t,
        &model,
        reference.as_ref(),
        &cfg,
        a.n_samples,
        &RandomSource::new(a.seed),
        None,
    )?;
    let mut config = serde_json::json!({
        "transcript": a.transcript.display().to_string(),
        "model": a.model.display().to_string(),
        "seq_len": a.seq_len,
        "start_pos": a.start_pos,
        "n_samples": a.n_samples,
    });
    if let Some(rp) = &a.ref_model {
        config["ref_model"] = rp.display().to_string().into();
    }
    let mut report =
        TestReport::new("query-test-sampled", config, inputs).with_spearman(&rep.spearman);
    report.seed = Some(a.seed);
    report.details = serde_json::json!({
        "spearman": rep.spearman,
        "scored": rep.scored,
        "skipped": rep.skipped,
    });
    emit(&report, a.out.as_deref())
}

fn cmd_ngram_index(a: &NgramIndexArgs) -> Result<()> {
    let inputs = vec![hash_file(&a.transcript)?];
    let t = open_transcript(&a.transcript)?;
    let idx = ngram::build_index(&t, a.k, a.n_max, a.rate, &RandomSource::new(a.seed))?;
    let mut buf = Vec::new();
    ngram::write_index(&idx, &mut buf)?;
    write_output(&a.out, &buf)?;
    let mut report = TestReport::new(
        "ngram-index",
        serde_json::json!({
            "transcript": a.transcript.display().to_string(),
            "k": a.k,
            "n_max": a.n_max,
            "rate": a.rate,
        }),
        inputs,
    );
    report.seed = Some(a.seed);
    report.n = a.k as u64;
    report.details = serde_json::json!({
        "postings": idx.posting_count(),
        "total_mass": idx.total_mass(),
        "hash_seed": idx.hash_seed(),
    });
    emit(&report, None)
}

fn partition_report(
    method: &'static str,
    config: serde_json::Value,
    inputs: Vec<InputHash>,
    test: &ngram::PartitionTest,
) -> TestReport {
    let mut report = TestReport::new(method, config, inputs);
    report.n = test.chi.len() as u64;
    report.degenerate = test.degenerate;
    report.statistic = test.spearman.as_ref().map(|s| s.rho);
    report = report.with_p(
        Some(test.p_one_sided),
        test.spearman.as_ref().map(|s| s.p_two_sided),
    );
    report.details = serde_json::to_value(test).expect("serializable test");
    report
}

fn cmd_ngram_test(a: &NgramTestArgs) -> Result<()> {
    let text = read_bundle(&a.text)?;
    if a.likelihood {
        let tp = a.transcript.as_ref().expect("required by clap");
        let k = a.k.expect("required by clap");
        let inputs = vec![hash_file(tp)?, hash_file(&a.text)?];
        let t = open_transcript(tp)?;
        let test = ngram::partition_likelihood_test(&t, k, &text, a.lm_order, a.smoothing)?;
        let config = serde_json::json!({
            "transcript": tp.display().to_string(),
            "text": a.text.display().to_string(),
            "k": k,
            "lm_order": a.lm_order,
            "smoothing": a.smoothing,
            "mode": "likelihood",
        });
        let report = partition_report("ngram-test", config, inputs, &test);
        return emit(&report, a.out.as_deref());
    }
    let Some(ip) = &a.index else {
        bail!("provide --index, or --likelihood with --transcript and --k");
    };
    let inputs = vec![hash_file(ip)?, hash_file(&a.text)?];
    let f = fs::File::open(ip).with_context(|| format!("opening {}", ip.display()))?;
    let idx = ngram::read_index(f)?;
    let test = ngram::partition_order_test_with(&idx, &text, a.unigrams)?;
    let config = serde_json::json!({
        "index": ip.display().to_string(),
        "text": a.text.display().to_string(),
        "unigrams": a.unigrams,
        "mode": "match",
    });
    let report = partition_report("ngram-test", config, inputs, &test);
    emit(&report, a.out.as_deref())
}

fn cmd_shuffle_test(a: &ShuffleTestArgs) -> Result<()> {
    let mut inputs = vec![hash_file(&a.transcript)?, hash_file(&a.text)?];
    let t = open_transcript(&a.transcript)?;
    let text = read_bundle(&a.text)?;
    let checkpoint = match &a.checkpoint {
        Some(cp) => {
            inputs.push(hash_file(cp)?);
            Some(open_model(cp)?)
        }
        None => None,
    };
    let trainer = DecayLmTrainer::new(a.order, a.decay, a.smoothing);
    let mut cfg = ShuffleTestConfig::new(a.k, a.fraction)?;
    if a.finetune_passes > 0 {
        cfg = cfg.with_finetune(a.finetune_passes);
    }
    let mut config = serde_json::json!({
        "transcript": a.transcript.display().to_string(),
        "text": a.text.display().to_string(),
        "k": a.k,
        "fraction": a.fraction,
        "order": a.order,
        "decay": a.decay,
        "smoothing": a.smoothing,
        "finetune_passes": a.finetune_passes,
        "exact": a.exact,
    });
    if let Some(cp) = &a.checkpoint {
        config["checkpoint"] = cp.display().to_string().into();
    }
    let r = RandomSource::new(a.seed);
    if a.exact {
        config["m"] = a.m.into();
        let res = shuffle::reshuffle_test_exact(
            &t,
            checkpoint.as_ref(),
            &trainer,
            &text,
            &cfg,
            a.m,
            &r,
        )?;
        let mut report = TestReport::new("shuffle-test", config, inputs)
            .with_p(Some(res.p_hat), None);
        report.seed = Some(a.seed);
        report.statistic = Some(res.observed);
        report.n = a.m as u64;
        report.details = serde_json::to_value(&res)?;
        return emit(&report, a.out.as_deref());
    }
    let res = shuffle::reshuffle_test(&t, checkpoint.as_ref(), &trainer, &text, &cfg, &r)?;
    let mut report =
        TestReport::new("shuffle-test", config, inputs).with_p(Some(res.p_approx), None);
    report.seed = Some(a.seed);
    report.statistic = Some(res.z);
    report.n = a.k as u64;
    report.details = serde_json::to_value(&res)?;
    emit(&report, a.out.as_deref())
}

fn parse_cells(spec: &str) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for part in spec.split(',') {
        let (name, size) = part
            .split_once(':')
            .ok_or_else(|| anyhow!("cell {part:?} is not test:size"))?;
        let test = match name {
            "query" => TestId::Query,
            "query-ref" => TestId::QueryRef,
            "query-regression" => TestId::QueryRegression,
            "query-sampled" => TestId::QuerySampled,
            "obs-partition" => TestId::ObsPartition,
            "obs-partition-likelihood" => TestId::ObsPartitionLikelihood,
            "obs-shuffle" => TestId::ObsShuffle,
            "obs-shuffle-exact" => TestId::ObsShuffleExact,
            other => bail!("unknown test {other:?}"),
        };
        let n: usize = size
            .parse()
            .map_err(|e| anyhow!("cell {part:?}: bad size: {e}"))?;
        cells.push(SweepCell { test, n });
    }
    Ok(cells)
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let kind = match a.scenario.as_str() {
        "copy" => ScenarioKind::Copy,
        "finetune" => ScenarioKind::Finetune {
            extra_docs: a.extra_docs,
            passes: a.passes,
        },
        "independent-reshuffle" => ScenarioKind::IndependentReshuffle,
        "independent-corpus" => ScenarioKind::IndependentCorpus,
        other => bail!("unknown scenario {other:?}"),
    };
    let mut sc = Scenario::new(kind, a.corpus_seed);
    sc.corpus.n_docs = a.corpus_docs;
    sc.corpus.len_min = a.len_min;
    sc.corpus.len_max = a.len_max;
    sc.corpus.template_diversity = a.diversity;
    sc.corpus.vocab = a.vocab;
    sc.alice.order = a.lm_order;
    sc.alice.decay = a.decay;
    sc.alice.smoothing = a.smoothing;
    sc.textgen.max_docs = a.text_docs;
    sc.textgen.prefix_len = a.prefix_len;
    sc.textgen.continuation_len = a.continuation_len;
    sc.textgen.temperature = a.temperature;
    let mut params = HarnessTestParams::defaults();
    params.query = QueryConfig::new(a.seq_len, a.start_pos)?;
    params.n_samples = a.n_samples;
    params.k_partitions = a.k_partitions;
    params.n_max = a.n_max;
    params.subsample_rate = a.rate;
    params.shuffle = ShuffleTestConfig::new(a.shuffle_k, a.fraction)?;
    params.m_exact = a.m_exact;
    let cells = parse_cells(&a.cells)?;
    let sweep = harness::run_scenario(&sc, &cells, a.trials, &params, &RandomSource::new(a.seed))?;
    if let Some(csv_path) = &a.csv {
        write_output(csv_path, sweep.to_csv().as_bytes())?;
    }
    let mut report = TestReport::new(
        "simulate",
        serde_json::json!({
            "scenario": a.scenario,
            "cells": a.cells,
            "trials": a.trials,
            "corpus_seed": a.corpus_seed,
        }),
        Vec::new(),
    );
    report.seed = Some(a.seed);
    report.n = a.trials as u64;
    report.details = serde_json::to_value(&sweep)?;
    emit(&report, a.out.as_deref())
}

fn parse_p_values(path: &Path) -> Result<Vec<f64>> {
    let content =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut ps = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if lineno == 0 && line.starts_with("scenario,") {
            continue;
        }
        // Bare float per line, or the last column of a simulate CSV row.
        let field = line.rsplit(',').next().expect("split yields a piece");
        let p: f64 = field
            .trim()
            .parse()
            .map_err(|e| anyhow!("{}:{}: bad p-value {field:?}: {e}", path.display(), lineno + 1))?;
        ps.push(p);
    }
    if ps.is_empty() {
        bail!("{}: no p-values", path.display());
    }
    Ok(ps)
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<()> {
    let inputs = vec![hash_file(&a.p_values)?];
    let ps = parse_p_values(&a.p_values)?;
    let rep = harness::calibration_report(&ps)?;
    let mut report = TestReport::new(
        "calibrate",
        serde_json::json!({
            "p_values": a.p_values.display().to_string(),
        }),
        inputs,
    );
    report.n = rep.n as u64;
    report.statistic = Some(rep.ks_stat);
    report.details = serde_json::to_value(&rep)?;
    emit(&report, a.out.as_deref())
}

fn cmd_cost(a: &CostArgs) -> Result<()> {
    let model = cost::CostModel {
        input_rate: a.input_rate,
        output_rate: a.output_rate,
        n_sequences: a.sequences_millions,
        seq_len: a.seq_len,
    };
    let total = cost::estimate_query_cost(&model)?;
    let l = a.seq_len as f64;
    let mut report = TestReport::new(
        "cost",
        serde_json::to_value(model)?,
        Vec::new(),
    );
    report.statistic = Some(total);
    report.details = serde_json::json!({
        "cost": total,
        "input_tokens_millions": a.sequences_millions * l * (l - 1.0) / 2.0,
        "output_tokens_millions": a.sequences_millions * (l - 1.0),
    });
    emit(&report, a.out.as_deref())
}

/// Dispatches a parsed command line; returns the process exit code.
pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing the thread pool")?;
    }
    let started = std::time::Instant::now();
    let name = match &cli.command {
        Command::Ingest(a) => {
            cmd_ingest(a)?;
            "ingest"
        }
        Command::Subsample(a) => {
            cmd_subsample(a)?;
            "subsample"
        }
        Command::Train(a) => {
            cmd_train(a)?;
            "train"
        }
        Command::QueryTest(a) => {
            cmd_query_test(a)?;
            "query-test"
        }
        Command::QueryTestSampled(a) => {
            cmd_query_test_sampled(a)?;
            "query-test-sampled"
        }
        Command::NgramIndex(a) => {
            cmd_ngram_index(a)?;
            "ngram-index"
        }
        Command::NgramTest(a) => {
            cmd_ngram_test(a)?;
            "ngram-test"
        }
        Command::ShuffleTest(a) => {
            cmd_shuffle_test(a)?;
            "shuffle-test"
        }
        Command::Simulate(a) => {
            cmd_simulate(a)?;
            "simulate"
        }
        Command::Calibrate(a) => {
            cmd_calibrate(a)?;
            "calibrate"
        }
        Command::Cost(a) => {
            cmd_cost(a)?;
            "cost"
        }
    };
    // Timing never goes into the report: reports must be byte-identical
    // across reruns and thread counts.
    eprintln!("{name} finished in {:.3}s", started.elapsed().as_secs_f64());
    Ok(())
}
