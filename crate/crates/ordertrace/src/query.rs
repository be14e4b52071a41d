//! Query-setting order tests.
//!
//! Alice holds her training transcript and can query the suspect model for
//! log-probabilities (or, failing that, samples). If the model was trained
//! on her data in her order, examples seen later in training sit higher in
//! its likelihood ordering, so the rank correlation between per-example
//! log-likelihood and training step is positive. Each test here assembles
//! that correlation in a different telemetry regime:
//!
//! * [`likelihood_order_test`]: raw log-likelihoods from the model.
//! * [`referenced_order_test`]: log-likelihood ratios against a reference
//!   model, cancelling inherent text difficulty.
//! * [`regressed_order_test`]: residuals after regressing on the reference
//!   score and any extra per-example features.
//! * [`sampled_order_test`]: log-probabilities estimated from next-token
//!   samples alone, for models that expose no logprob endpoint.
//!
//! Scoring windows are fixed-length; documents too short for the window
//! are skipped and the skip count is carried in the report rather than
//! silently dropped.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};

use crate::error::Error;
use crate::lm::LanguageModel;
use crate::rng::RandomSource;
use crate::stats::{self, ScoreSeries, SpearmanResult};
use crate::transcript::{parse_err, EpochMap, TokenId, Transcript};
use crate::Result;

/// Which window of each document is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryConfig {
    /// Window length in tokens; the last `seq_len - 1` of them are
    /// predicted, each conditioned on the window so far.
    pub seq_len: usize,
    /// Token offset of the window within each document.
    pub start_pos: usize,
    /// Restrict scoring to one epoch of the transcript.
    pub epoch: Option<usize>,
}

impl QueryConfig {
    pub fn new(seq_len: usize, start_pos: usize) -> Result<Self> {
        if seq_len < 2 {
            return Err(Error::InvalidParameter(format!(
                "seq_len must be at least 2 (one conditioned prediction), got {seq_len}"
            )));
        }
        Ok(Self {
            seq_len,
            start_pos,
            epoch: None,
        })
    }

    pub fn with_epoch(mut self, epoch: usize) -> Self {
        self.epoch = Some(epoch);
        self
    }
}

/// One scored example: the integration seam between scoring and testing.
/// Records can come from [`score_examples`] or from JSONL produced by any
/// external harness that can run the suspect model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoglikRecord {
    /// Training step of the example.
    pub step: u64,
    /// Mean per-token log-likelihood under the audited model.
    pub ll_subject: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ll_ref: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
}

impl LoglikRecord {
    pub fn new(step: u64, ll_subject: f64) -> Result<Self> {
        let rec = Self {
            step,
            ll_subject,
            ll_ref: None,
            features: None,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn with_ref(mut self, ll_ref: f64) -> Result<Self> {
        self.ll_ref = Some(ll_ref);
        self.validate()?;
        Ok(self)
    }

    pub fn with_features(mut self, features: Vec<f64>) -> Result<Self> {
        self.features = Some(features);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.step == 0 {
            return Err(Error::InvalidParameter("step must be positive".into()));
        }
        let finite = self.ll_subject.is_finite()
            && self.ll_ref.map_or(true, f64::is_finite)
            && self
                .features
                .as_ref()
                .map_or(true, |f| f.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::InvalidParameter(
                "log-likelihood record holds non-finite values".into(),
            ));
        }
        Ok(())
    }
}

/// Mean negative conditional log-probability over the `seq_len - 1`
/// predicted tokens of the window starting at `cfg.start_pos`.
pub fn sequence_nll<M: LanguageModel>(
    m: &M,
    doc: &crate::transcript::Document,
    cfg: &QueryConfig,
) -> Result<f64> {
    let end = cfg.start_pos + cfg.seq_len;
    if end > doc.len() {
        return Err(Error::WindowOutOfRange {
            start: cfg.start_pos,
            end,
            len: doc.len(),
        });
    }
    let window = &doc.ids()[cfg.start_pos..end];
    let mut total = 0.0;
    for i in 1..window.len() {
        total -= m.conditional_log_prob(&window[..i], TokenId(window[i]));
    }
    Ok(total / (window.len() - 1) as f64)
}

/// Outcome of one order test: the correlation plus how many examples fed
/// it and how many were too short to score.
#[derive(Debug, Clone, Serialize)]
pub struct QueryTestReport {
    pub spearman: SpearmanResult,
    pub scored: usize,
    pub skipped: usize,
}

fn apply_epoch(t: &Transcript, cfg: &QueryConfig, epochs: Option<&EpochMap>) -> Result<Option<Transcript>> {
    match cfg.epoch {
        None => Ok(None),
        Some(e) => {
            let map = epochs.ok_or_else(|| {
                Error::InvalidParameter(
                    "config names an epoch but no epoch map was supplied".into(),
                )
            })?;
            crate::transcript::filter_epoch(t, map, e).map(Some)
        }
    }
}

/// Scores every long-enough example of the transcript under the audited
/// model (and under a reference model when given), keeping training steps
/// attached. Returns the records plus the number of skipped examples.
pub fn score_examples<M, R>(
    t: &Transcript,
    model: &M,
    reference: Option<&R>,
    cfg: &QueryConfig,
    epochs: Option<&EpochMap>,
) -> Result<(Vec<LoglikRecord>, usize)>
where
    M: LanguageModel + Sync,
    R: LanguageModel + Sync,
{
    let filtered = apply_epoch(t, cfg, epochs)?;
    let t = filtered.as_ref().unwrap_or(t);
    let scored: Vec<Option<LoglikRecord>> = t
        .entries()
        .par_iter()
        .map(|e| {
            if e.doc.len() < cfg.start_pos + cfg.seq_len {
                return Ok(None);
            }
            let ll = -sequence_nll(model, &e.doc, cfg)?;
            let mut rec = LoglikRecord::new(e.step, ll)?;
            if let Some(r) = reference {
                rec = rec.with_ref(-sequence_nll(r, &e.doc, cfg)?)?;
            }
            Ok(Some(rec))
        })
        .collect::<Result<_>>()?;
    let skipped = scored.iter().filter(|r| r.is_none()).count();
    Ok((scored.into_iter().flatten().collect(), skipped))
}

fn series_from(scores: Vec<f64>, steps: Vec<u64>) -> Result<ScoreSeries> {
    if scores.len() < 3 {
        return Err(Error::TooFewExamples {
            min: 3,
            found: scores.len(),
        });
    }
    ScoreSeries::new(scores, steps)
}

/// Rank correlation of per-example log-likelihood against training step.
pub fn plain_order_test(records: &[LoglikRecord]) -> Result<SpearmanResult> {
    let series = series_from(
        records.iter().map(|r| r.ll_subject).collect(),
        records.iter().map(|r| r.step).collect(),
    )?;
    stats::spearman(&series)
}

/// Rank correlation of the log-likelihood ratio against the reference
/// model. Every record must carry `ll_ref`.
pub fn referenced_order_test(records: &[LoglikRecord]) -> Result<SpearmanResult> {
    let mut scores = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        match r.ll_ref {
            Some(ll_ref) => scores.push(r.ll_subject - ll_ref),
            None => return Err(Error::MissingReference(i)),
        }
    }
    let series = series_from(scores, records.iter().map(|r| r.step).collect())?;
    stats::spearman(&series)
}

/// Rank correlation of the residual of `ll_subject` after least squares on
/// the reference score and any extra features. With no reference and no
/// features this reduces to [`plain_order_test`] exactly: mean-centering
/// does not move ranks.
pub fn regressed_order_test(records: &[LoglikRecord]) -> Result<SpearmanResult> {
    let n = records.len();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    if records.iter().any(|r| r.ll_ref.is_some()) {
        let mut col = Vec::with_capacity(n);
        for (i, r) in records.iter().enumerate() {
            col.push(r.ll_ref.ok_or(Error::MissingReference(i))?);
        }
        columns.push(col);
    }
    let widths: Vec<usize> = records
        .iter()
        .map(|r| r.features.as_ref().map_or(0, Vec::len))
        .collect();
    let width = widths.iter().copied().max().unwrap_or(0);
    if width > 0 {
        if widths.iter().any(|&w| w != width) {
            return Err(Error::InvalidParameter(
                "records carry feature vectors of differing lengths".into(),
            ));
        }
        for j in 0..width {
            columns.push(
                records
                    .iter()
                    .map(|r| r.features.as_ref().expect("width checked")[j])
                    .collect(),
            );
        }
    }
    if n <= columns.len() + 2 {
        return Err(Error::TooFewExamples {
            min: columns.len() + 3,
            found: n,
        });
    }
    let y: Vec<f64> = records.iter().map(|r| r.ll_subject).collect();
    let residuals = stats::residualize(&y, &columns)?;
    let series = series_from(residuals, records.iter().map(|r| r.step).collect())?;
    stats::spearman(&series)
}

/// End-to-end query test: score the transcript under the model, then rank
/// correlate. Pass a reference model to run the ratio form.
pub fn likelihood_order_test<M, R>(
    t: &Transcript,
    model: &M,
    reference: Option<&R>,
    cfg: &QueryConfig,
    epochs: Option<&EpochMap>,
) -> Result<QueryTestReport>
where
    M: LanguageModel + Sync,
    R: LanguageModel + Sync,
{
    let (records, skipped) = score_examples(t, model, reference, cfg, epochs)?;
    let spearman = if reference.is_some() {
        referenced_order_test(&records)?
    } else {
        plain_order_test(&records)?
    };
    Ok(QueryTestReport {
        spearman,
        scored: records.len(),
        skipped,
    })
}

/// Fraction of `n_samples` next-token draws equal to `target`.
pub fn estimate_token_prob<M: LanguageModel>(
    m: &M,
    prefix: &[u32],
    target: TokenId,
    n_samples: usize,
    r: &RandomSource,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::InvalidParameter(
            "n_samples must be at least 1".into(),
        ));
    }
    let mut rng = r.rng();
    let hits = (0..n_samples)
        .filter(|_| m.sample_next(prefix, &mut rng) == target)
        .count();
    Ok(hits as f64 / n_samples as f64)
}

/// An estimate of zero would send the log to negative infinity; half the
/// resolution of the estimator keeps it finite and below every nonzero
/// estimate, which is all ranks need.
fn floored_log(p_hat: f64, n_samples: usize) -> f64 {
    if p_hat == 0.0 {
        (1.0 / (2.0 * n_samples as f64)).ln()
    } else {
        p_hat.ln()
    }
}

/// Scores examples from samples alone: one estimated next-token
/// probability per example, at the last position of the configured
/// window. The reference model, being under Alice's control, is scored
/// exactly at the same position. Example `i` samples from stream `i`, so
/// results do not depend on thread schedule.
pub fn sampled_scores<M, R>(
    t: &Transcript,
    model: &M,
    reference: Option<&R>,
    cfg: &QueryConfig,
    n_samples: usize,
    r: &RandomSource,
    epochs: Option<&EpochMap>,
) -> Result<(Vec<LoglikRecord>, usize)>
where
    M: LanguageModel + Sync,
    R: LanguageModel + Sync,
{
    if n_samples == 0 {
        return Err(Error::InvalidParameter(
            "n_samples must be at least 1".into(),
        ));
    }
    let filtered = apply_epoch(t, cfg, epochs)?;
    let t = filtered.as_ref().unwrap_or(t);
    let scored: Vec<Option<LoglikRecord>> = t
        .entries()
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let end = cfg.start_pos + cfg.seq_len;
            if e.doc.len() < end {
                return Ok(None);
            }
            let prefix = &e.doc.ids()[cfg.start_pos..end - 1];
            let target = TokenId(e.doc.ids()[end - 1]);
            let p_hat = estimate_token_prob(model, prefix, target, n_samples, &r.stream(i as u64))?;
            let mut rec = LoglikRecord::new(e.step, floored_log(p_hat, n_samples))?;
            if let Some(m0) = reference {
                rec = rec.with_ref(m0.conditional_log_prob(prefix, target))?;
            }
            Ok(Some(rec))
        })
        .collect::<Result<_>>()?;
    let skipped = scored.iter().filter(|x| x.is_none()).count();
    Ok((scored.into_iter().flatten().collect(), skipped))
}

/// Query test against a model that only exposes sampling.
pub fn sampled_order_test<M, R>(
    t: &Transcript,
    model: &M,
    reference: Option<&R>,
    cfg: &QueryConfig,
    n_samples: usize,
    r: &RandomSource,
    epochs: Option<&EpochMap>,
) -> Result<QueryTestReport>
where
    M: LanguageModel + Sync,
    R: LanguageModel + Sync,
{
    let (records, skipped) = sampled_scores(t, model, reference, cfg, n_samples, r, epochs)?;
    let spearman = if reference.is_some() {
        referenced_order_test(&records)?
    } else {
        plain_order_test(&records)?
    };
    Ok(QueryTestReport {
        spearman,
        scored: records.len(),
        skipped,
    })
}

/// Per-epoch order tests with a Bonferroni-corrected overall p-value, for
/// transcripts where decay makes only the last epoch's gradient visible.
#[derive(Debug, Clone, Serialize)]
pub struct EpochScan {
    pub per_epoch: Vec<QueryTestReport>,
    /// min(k * min p, 1) over the one-sided per-epoch p-values.
    pub corrected_p: f64,
}

pub fn epoch_scan<M, R>(
    t: &Transcript,
    model: &M,
    reference: Option<&R>,
    cfg: &QueryConfig,
    epochs: &EpochMap,
) -> Result<EpochScan>
where
    M: LanguageModel + Sync,
    R: LanguageModel + Sync,
{
    if cfg.epoch.is_some() {
        return Err(Error::InvalidParameter(
            "epoch_scan drives the epoch choice itself; leave cfg.epoch unset".into(),
        ));
    }
    let mut per_epoch = Vec::with_capacity(epochs.len());
    for e in 0..epochs.len() {
        let cfg_e = cfg.with_epoch(e);
        per_epoch.push(likelihood_order_test(t, model, reference, &cfg_e, Some(epochs))?);
    }
    let ps: Vec<f64> = per_epoch
        .iter()
        .map(|r| r.spearman.p_one_sided)
        .collect();
    // A perfectly monotone epoch reaches the rho = 1 limit, where the
    // t approximation reports exactly zero; the corrected minimum is then
    // zero too, which the general correction refuses as input.
    let corrected_p = if ps.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        stats::bonferroni(&ps)?
    };
    Ok(EpochScan {
        corrected_p,
        per_epoch,
    })
}

/// Writes records as JSONL, one record per line.
pub fn write_records<W: Write>(records: &[LoglikRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)
            .map_err(|e| Error::Format {
                format: "loglik JSONL",
                message: e.to_string(),
            })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads records from JSONL, validating each line.
pub fn read_records<R: Read>(r: R, path: &str) -> Result<Vec<LoglikRecord>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(r).lines().enumerate() {
        let line = line.map_err(|e| parse_err(path, idx + 1, &e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LoglikRecord = serde_json::from_str(&line)
            .map_err(|e| parse_err(path, idx + 1, &e.to_string()))?;
        rec.validate()
            .map_err(|e| parse_err(path, idx + 1, &e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

/// Joins subject scores with reference scores produced out-of-band. The
/// files must list the same examples in the same order; steps are
/// cross-checked and a mismatch is an error, never a silent reorder.
pub fn merge_reference(
    subject: &[LoglikRecord],
    reference: &[LoglikRecord],
) -> Result<Vec<LoglikRecord>> {
    if subject.len() != reference.len() {
        return Err(Error::InvalidParameter(format!(
            "subject has {} records but reference has {}",
            subject.len(),
            reference.len()
        )));
    }
    subject
        .iter()
        .zip(reference)
        .enumerate()
        .map(|(i, (s, r))| {
            if s.step != r.step {
                return Err(Error::InvalidParameter(format!(
                    "record {i}: subject step {} but reference step {}",
                    s.step, r.step
                )));
            }
            s.clone().with_ref(r.ll_subject)
        })
        .collect()
}
