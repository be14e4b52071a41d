//! Synthetic experiment runner.
//!
//! Everything here exists to answer two questions about the test suite
//! under controlled conditions: do the p-values stay uniform when Bob is
//! innocent (calibration), and how fast do they fall when he is not
//! (power)? A scenario pins down who Bob is relative to Alice's training
//! run; a sweep runs the chosen tests over many trials and sample sizes
//! and tabulates the p-values.
//!
//! Randomness discipline: the harness owns all scenario randomness and
//! hands each trial, and each consumer inside a trial, its own stream.
//! Alice's shuffle, Bob's construction, text generation, and test-internal
//! draws never share a stream, which is what makes the null trials honest
//! and every cell reproducible bit for bit from its recorded seeds.

use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;

use crate::error::Error;
use crate::lm::Trainer;
use crate::ngram;
use crate::query::{self, QueryConfig};
use crate::rng::RandomSource;
use crate::shuffle::{self, ShuffleTestConfig};
use crate::stats;
use crate::toylm::{DecayLmTrainer, DecayNgramLm};
use crate::transcript::{shuffle_transcript, Document, Entry, TextBundle, Transcript};
use crate::Result;

/// Generates a corpus from a template mixture: each document interleaves
/// phrases drawn from a fixed bank (shared n-grams across documents) with
/// fresh random runs (document-unique n-grams), half and half. The bank
/// keeps documents related enough to be interesting while the fresh runs
/// keep most 8-grams distinct.
pub fn generate_corpus(
    n_docs: usize,
    doc_len: std::ops::RangeInclusive<usize>,
    template_diversity: usize,
    vocab: u32,
    r: &RandomSource,
) -> Result<Vec<Document>> {
    use rand::Rng;
    if n_docs == 0 {
        return Err(Error::InvalidParameter("n_docs must be at least 1".into()));
    }
    if *doc_len.start() == 0 || doc_len.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "document length range {:?}..={:?} is empty or starts at zero",
            doc_len.start(),
            doc_len.end()
        )));
    }
    if template_diversity == 0 {
        return Err(Error::InvalidParameter(
            "need at least one template".into(),
        ));
    }
    if vocab < 2 {
        return Err(Error::InvalidParameter("vocab must be >= 2".into()));
    }
    let mut bank_rng = r.stream(0).rng();
    let bank: Vec<Vec<u32>> = (0..template_diversity)
        .map(|_| {
            let len = bank_rng.random_range(8..=16usize);
            (0..len).map(|_| bank_rng.random_range(0..vocab)).collect()
        })
        .collect();
    let docs = (0..n_docs)
        .map(|i| {
            let mut rng = r.stream(1 + i as u64).rng();
            let target = rng.random_range(doc_len.clone());
            let mut ids: Vec<u32> = Vec::with_capacity(target);
            while ids.len() < target {
                if rng.random_bool(0.5) {
                    let phrase = &bank[rng.random_range(0..bank.len())];
                    ids.extend_from_slice(phrase);
                } else {
                    let run = rng.random_range(4..=10usize);
                    ids.extend((0..run).map(|_| rng.random_range(0..vocab)));
                }
            }
            ids.truncate(target);
            Document::new(ids)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(docs)
}

/// Fraction of n-gram windows in the corpus whose value occurs exactly
/// once. High values mean documents rarely share n-grams.
pub fn distinct_ngram_rate(docs: &[Document], n: usize) -> f64 {
    let mut seen: std::collections::HashMap<&[u32], u64> = std::collections::HashMap::new();
    for d in docs {
        if d.len() >= n {
            for w in d.ids().windows(n) {
                *seen.entry(w).or_insert(0) += 1;
            }
        }
    }
    let total: u64 = seen.values().sum();
    if total == 0 {
        return 0.0;
    }
    let unique: u64 = seen.values().filter(|&&c| c == 1).count() as u64;
    unique as f64 / total as f64
}

/// Who Bob is relative to Alice's run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    /// Bob's model is Alice's model.
    Copy,
    /// Bob fine-tuned Alice's model on fresh documents.
    Finetune { extra_docs: usize, passes: usize },
    /// Bob trained from scratch on Alice's corpus in an independent order:
    /// the strictest null, same data but no access to her shuffle.
    IndependentReshuffle,
    /// Bob trained on his own corpus from the same generator family.
    IndependentCorpus,
}

impl ScenarioKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::Copy => "copy",
            ScenarioKind::Finetune { .. } => "finetune",
            ScenarioKind::IndependentReshuffle => "independent-reshuffle",
            ScenarioKind::IndependentCorpus => "independent-corpus",
        }
    }

    fn is_null(&self) -> bool {
        matches!(
            self,
            ScenarioKind::IndependentReshuffle | ScenarioKind::IndependentCorpus
        )
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CorpusConfig {
    pub n_docs: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub template_diversity: usize,
    pub vocab: u32,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LmConfig {
    pub order: usize,
    pub decay: f64,
    pub smoothing: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TextGenConfig {
    /// Upper bound on generated documents per trial; sweeps stop earlier
    /// once the requested token budget is covered.
    pub max_docs: usize,
    pub prefix_len: usize,
    pub continuation_len: usize,
    pub temperature: f64,
}

impl TextGenConfig {
    fn doc_len(&self) -> usize {
        self.prefix_len + self.continuation_len
    }
}

/// One fully reproducible experimental condition.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub corpus_seed: u64,
    pub corpus: CorpusConfig,
    pub alice: LmConfig,
    pub textgen: TextGenConfig,
}

impl Scenario {
    /// Desk-scale defaults; fields are public for adjustment.
    pub fn new(kind: ScenarioKind, corpus_seed: u64) -> Self {
        Self {
            kind,
            corpus_seed,
            corpus: CorpusConfig {
                n_docs: 120,
                len_min: 24,
                len_max: 40,
                template_diversity: 64,
                vocab: 256,
            },
            alice: LmConfig {
                order: 3,
                decay: 0.999,
                smoothing: 0.1,
            },
            textgen: TextGenConfig {
                max_docs: 24,
                prefix_len: 16,
                continuation_len: 48,
                temperature: 1.0,
            },
        }
    }
}

/// Which statistic a sweep cell runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestId {
    Query,
    QueryRef,
    QueryRegression,
    QuerySampled,
    ObsPartition,
    ObsPartitionLikelihood,
    ObsShuffle,
    ObsShuffleExact,
}

impl TestId {
    pub fn name(&self) -> &'static str {
        match self {
            TestId::Query => "query",
            TestId::QueryRef => "query-ref",
            TestId::QueryRegression => "query-regression",
            TestId::QuerySampled => "query-sampled",
            TestId::ObsPartition => "obs-partition",
            TestId::ObsPartitionLikelihood => "obs-partition-likelihood",
            TestId::ObsShuffle => "obs-shuffle",
            TestId::ObsShuffleExact => "obs-shuffle-exact",
        }
    }

    pub fn is_query(&self) -> bool {
        matches!(
            self,
            TestId::Query | TestId::QueryRef | TestId::QueryRegression | TestId::QuerySampled
        )
    }

    fn needs_reference(&self) -> bool {
        matches!(self, TestId::QueryRef | TestId::QueryRegression)
    }
}

/// One grid point: a test and its evidence size. For query tests `n` is
/// the number of transcript examples queried; for observational tests it
/// is the token budget of Bob's text bundle.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SweepCell {
    pub test: TestId,
    pub n: usize,
}

/// Shared statistical knobs across the suite.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct HarnessTestParams {
    pub query: QueryConfig,
    /// Samples per position for the text-only estimator.
    pub n_samples: usize,
    pub k_partitions: usize,
    pub n_max: usize,
    pub subsample_rate: f64,
    pub shuffle: ShuffleTestConfig,
    /// Permutations for the exact shuffle variant.
    pub m_exact: usize,
}

impl HarnessTestParams {
    pub fn defaults() -> Self {
        Self {
            query: QueryConfig {
                seq_len: 12,
                start_pos: 0,
                epoch: None,
            },
            n_samples: 16,
            k_partitions: 8,
            n_max: 8,
            subsample_rate: 1.0,
            shuffle: ShuffleTestConfig {
                k: 8,
                retrain_fraction: 0.25,
                finetune_on_text: false,
                finetune_passes: 1,
            },
            m_exact: 19,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCellReport {
    pub test: TestId,
    pub n: usize,
    pub trials: usize,
    /// p-value per trial, in trial order.
    pub p_values: Vec<f64>,
    pub median_p: f64,
    pub iqr: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub scenario: Scenario,
    pub params: HarnessTestParams,
    pub trials: usize,
    pub seed: RandomSource,
    pub cells: Vec<SweepCellReport>,
}

impl SweepReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            format: "sweep JSON",
            message: e.to_string(),
        })
    }

    /// Flat table for external plotting: scenario,test,n,trial,p.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,test,n,trial,p\n");
        for cell in &self.cells {
            for (trial, p) in cell.p_values.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    self.scenario.kind.name(),
                    cell.test.name(),
                    cell.n,
                    trial,
                    p
                )
                .expect("string write");
            }
        }
        out
    }

    pub fn cell(&self, test: TestId, n: usize) -> Option<&SweepCellReport> {
        self.cells.iter().find(|c| c.test == test && c.n == n)
    }
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn summarize(test: TestId, n: usize, p_values: Vec<f64>) -> SweepCellReport {
    let mut sorted = p_values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite p"));
    SweepCellReport {
        test,
        n,
        trials: p_values.len(),
        median_p: quantile(&sorted, 0.5),
        iqr: (quantile(&sorted, 0.25), quantile(&sorted, 0.75)),
        p_values,
    }
}

struct TrialModels {
    alice_t: Transcript,
    bob: DecayNgramLm,
    reference: Option<DecayNgramLm>,
}

fn build_trial<T>(
    sc: &Scenario,
    corpus: &[Document],
    trainer: &T,
    need_reference: bool,
    rt: &RandomSource,
) -> Result<TrialModels>
where
    T: Trainer<Model = DecayNgramLm>,
{
    let base = Transcript::from_docs(corpus.to_vec(), sc.corpus.vocab)?;
    let alice_t = shuffle_transcript(&base, &rt.stream(0));
    let alice = trainer.train(&alice_t, None, &rt.stream(1))?;
    let bob = match sc.kind {
        ScenarioKind::Copy => alice.clone(),
        ScenarioKind::Finetune { extra_docs, passes } => {
            let fresh = generate_corpus(
                extra_docs.max(1),
                sc.corpus.len_min..=sc.corpus.len_max,
                sc.corpus.template_diversity,
                sc.corpus.vocab,
                &rt.stream(2),
            )?;
            trainer.finetune(&alice, &fresh[..extra_docs], passes)?
        }
        ScenarioKind::IndependentReshuffle => {
            trainer.train(&shuffle_transcript(&alice_t, &rt.stream(3)), None, &rt.stream(3))?
        }
        ScenarioKind::IndependentCorpus => {
            let fresh = generate_corpus(
                sc.corpus.n_docs,
                sc.corpus.len_min..=sc.corpus.len_max,
                sc.corpus.template_diversity,
                sc.corpus.vocab,
                &rt.stream(4),
            )?;
            let bob_t = shuffle_transcript(
                &Transcript::from_docs(fresh, sc.corpus.vocab)?,
                &rt.stream(4),
            );
            trainer.train(&bob_t, None, &rt.stream(4))?
        }
    };
    let reference = if need_reference {
        Some(trainer.train(&shuffle_transcript(&alice_t, &rt.stream(5)), None, &rt.stream(5))?)
    } else {
        None
    };
    Ok(TrialModels {
        alice_t,
        bob,
        reference,
    })
}

/// First `n` entries of a trial-fixed random ordering, as a transcript
/// with original step labels. Nested across `n`, so larger budgets extend
/// smaller ones instead of resampling.
fn nested_query_subset(t: &Transcript, order: &[usize], n: usize) -> Result<Transcript> {
    let mut idxs: Vec<usize> = order[..n].to_vec();
    idxs.sort_unstable();
    let entries: Vec<Entry> = idxs.iter().map(|&i| t.entries()[i].clone()).collect();
    Transcript::new(entries, t.num_steps(), t.vocab())
}

fn nested_bundle(pool: &[Document], budget: usize) -> Result<TextBundle> {
    let mut total = 0;
    let mut docs = Vec::new();
    for d in pool {
        docs.push(d.clone());
        total += d.len();
        if total >= budget {
            break;
        }
    }
    TextBundle::new(docs)
}

/// Runs every cell over `trials` independent trials and tabulates the
/// p-values. Trials are parallel; each derives all randomness from stream
/// `trial` of `r`, so the report is reproducible bit for bit.
pub fn run_scenario(
    sc: &Scenario,
    cells: &[SweepCell],
    trials: usize,
    params: &HarnessTestParams,
    r: &RandomSource,
) -> Result<SweepReport> {
    if trials == 0 {
        return Err(Error::InvalidScenario("trials must be at least 1".into()));
    }
    if cells.is_empty() {
        return Err(Error::InvalidScenario("no sweep cells requested".into()));
    }
    for c in cells {
        if c.test.is_query() {
            if c.n < 3 || c.n > sc.corpus.n_docs {
                return Err(Error::InvalidScenario(format!(
                    "query cell n={} outside 3..={} examples",
                    c.n, sc.corpus.n_docs
                )));
            }
            if sc.corpus.len_min < params.query.start_pos + params.query.seq_len {
                return Err(Error::InvalidScenario(format!(
                    "query window needs {} tokens but documents can be as short as {}",
                    params.query.start_pos + params.query.seq_len,
                    sc.corpus.len_min
                )));
            }
        } else if c.n == 0 {
            return Err(Error::InvalidScenario(
                "observational cell has zero token budget".into(),
            ));
        } else {
            let capacity = sc.textgen.max_docs * sc.textgen.doc_len();
            if c.n > capacity {
                return Err(Error::InvalidScenario(format!(
                    "token budget {} exceeds the text pool capacity {capacity}",
                    c.n
                )));
            }
        }
    }
    if let ScenarioKind::Finetune { extra_docs: 0, .. } = sc.kind {
        return Err(Error::InvalidScenario(
            "finetune scenario with zero documents is the copy scenario".into(),
        ));
    }

    let corpus = generate_corpus(
        sc.corpus.n_docs,
        sc.corpus.len_min..=sc.corpus.len_max,
        sc.corpus.template_diversity,
        sc.corpus.vocab,
        &RandomSource::new(sc.corpus_seed),
    )?;
    let trainer = DecayLmTrainer::new(sc.alice.order, sc.alice.decay, sc.alice.smoothing);
    let need_reference = cells.iter().any(|c| c.test.needs_reference());
    let need_text = cells.iter().any(|c| !c.test.is_query());
    let max_budget = cells
        .iter()
        .filter(|c| !c.test.is_query())
        .map(|c| c.n)
        .max()
        .unwrap_or(0);

    let per_trial: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|trial| -> Result<Vec<f64>> {
            let rt = r.stream(trial as u64);
            let models = build_trial(sc, &corpus, &trainer, need_reference, &rt)?;

            let query_order: Vec<usize> = {
                use rand::seq::SliceRandom;
                let mut idxs: Vec<usize> = (0..models.alice_t.len()).collect();
                idxs.shuffle(&mut rt.stream(7).rng());
                idxs
            };
            let pool: Vec<Document> = if need_text {
                let gen = rt.stream(6);
                let mut docs = Vec::new();
                let mut total = 0;
                for i in 0..sc.textgen.max_docs {
                    if total >= max_budget {
                        break;
                    }
                    let d = models.bob.sample(
                        &[],
                        sc.textgen.doc_len(),
                        sc.textgen.temperature,
                        &gen.stream(i as u64),
                    )?;
                    total += d.len();
                    docs.push(d);
                }
                docs
            } else {
                Vec::new()
            };
            let index = if cells.iter().any(|c| c.test == TestId::ObsPartition) {
                Some(ngram::build_index(
                    &models.alice_t,
                    params.k_partitions,
                    params.n_max,
                    params.subsample_rate,
                    &rt.stream(10),
                )?)
            } else {
                None
            };

            cells
                .iter()
                .map(|cell| -> Result<f64> {
                    match cell.test {
                        TestId::Query => {
                            let sub = nested_query_subset(&models.alice_t, &query_order, cell.n)?;
                            let rep = query::likelihood_order_test::<_, DecayNgramLm>(
                                &sub,
                                &models.bob,
                                None,
                                &params.query,
                                None,
                            )?;
                            Ok(rep.spearman.p_one_sided)
                        }
                        TestId::QueryRef => {
                            let sub = nested_query_subset(&models.alice_t, &query_order, cell.n)?;
                            let rep = query::likelihood_order_test(
                                &sub,
                                &models.bob,
                                models.reference.as_ref(),
                                &params.query,
                                None,
                            )?;
                            Ok(rep.spearman.p_one_sided)
                        }
                        TestId::QueryRegression => {
                            let sub = nested_query_subset(&models.alice_t, &query_order, cell.n)?;
                            let (records, _) = query::score_examples(
                                &sub,
                                &models.bob,
                                models.reference.as_ref(),
                                &params.query,
                                None,
                            )?;
                            Ok(query::regressed_order_test(&records)?.p_one_sided)
                        }
                        TestId::QuerySampled => {
                            let sub = nested_query_subset(&models.alice_t, &query_order, cell.n)?;
                            let rep = query::sampled_order_test::<_, DecayNgramLm>(
                                &sub,
                                &models.bob,
                                None,
                                &params.query,
                                params.n_samples,
                                &rt.stream(8),
                                None,
                            )?;
                            Ok(rep.spearman.p_one_sided)
                        }
                        TestId::ObsPartition => {
                            let bundle = nested_bundle(&pool, cell.n)?;
                            let idx = index.as_ref().expect("index built for partition cells");
                            Ok(ngram::partition_order_test(idx, &bundle)?.p_one_sided)
                        }
                        TestId::ObsPartitionLikelihood => {
                            let bundle = nested_bundle(&pool, cell.n)?;
                            Ok(ngram::partition_likelihood_test(
                                &models.alice_t,
                                params.k_partitions,
                                &bundle,
                                sc.alice.order,
                                sc.alice.smoothing,
                            )?
                            .p_one_sided)
                        }
                        TestId::ObsShuffle => {
                            let bundle = nested_bundle(&pool, cell.n)?;
                            let res = shuffle::reshuffle_test(
                                &models.alice_t,
                                None,
                                &trainer,
                                &bundle,
                                &params.shuffle,
                                &rt.stream(9),
                            )?;
                            Ok(res.p_approx)
                        }
                        TestId::ObsShuffleExact => {
                            let bundle = nested_bundle(&pool, cell.n)?;
                            let res = shuffle::reshuffle_test_exact(
                                &models.alice_t,
                                None,
                                &trainer,
                                &bundle,
                                &params.shuffle,
                                params.m_exact,
                                &rt.stream(9),
                            )?;
                            Ok(res.p_hat)
                        }
                    }
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let cells_out: Vec<SweepCellReport> = cells
        .iter()
        .enumerate()
        .map(|(ci, cell)| {
            summarize(
                cell.test,
                cell.n,
                per_trial.iter().map(|t| t[ci]).collect(),
            )
        })
        .collect();
    Ok(SweepReport {
        scenario: *sc,
        params: *params,
        trials,
        seed: *r,
        cells: cells_out,
    })
}

/// How close a batch of p-values sits to Uniform(0, 1).
#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub ks_stat: f64,
    /// Two-sided Kolmogorov critical value at alpha = 0.01.
    pub ks_critical: f64,
    pub uniform_pass: bool,
    /// (p, empirical CDF at p), sorted, for plotting.
    pub ecdf: Vec<(f64, f64)>,
}

pub fn calibration_report(p_values: &[f64]) -> Result<CalibrationReport> {
    if p_values.is_empty() {
        return Err(Error::InvalidParameter("no p-values".into()));
    }
    let n = p_values.len();
    let ks_stat = stats::ks_uniform_statistic(p_values);
    // Large-sample two-sided critical value: sqrt(ln(2/alpha) / (2n)).
    let ks_critical = ((2.0f64 / 0.01).ln() / (2.0 * n as f64)).sqrt();
    let mut sorted = p_values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite p"));
    let ecdf = sorted
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, (i + 1) as f64 / n as f64))
        .collect();
    Ok(CalibrationReport {
        n,
        ks_stat,
        ks_critical,
        uniform_pass: ks_stat <= ks_critical,
        ecdf,
    })
}

/// True when the scenario should produce uniform p-values for every test.
pub fn expect_uniform(sc: &Scenario) -> bool {
    sc.kind.is_null()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny_scenario(kind: ScenarioKind, corpus_seed: u64) -> Scenario {
        let mut sc = Scenario::new(kind, corpus_seed);
        sc.corpus.n_docs = 24;
        sc.corpus.len_min = 14;
        sc.corpus.len_max = 20;
        sc.corpus.template_diversity = 12;
        sc.corpus.vocab = 64;
        sc.alice.decay = 0.8;
        sc.textgen.max_docs = 8;
        sc.textgen.prefix_len = 4;
        sc.textgen.continuation_len = 12;
        sc
    }

    fn tiny_params() -> HarnessTestParams {
        let mut p = HarnessTestParams::defaults();
        p.query = QueryConfig::new(8, 0).unwrap();
        p.k_partitions = 4;
        p.n_max = 4;
        p.shuffle = ShuffleTestConfig::new(3, 0.5).unwrap();
        p.m_exact = 9;
        p.n_samples = 4;
        p
    }

    #[test]
    fn corpus_respects_count_and_length() {
        let docs = generate_corpus(1, 10..=20, 8, 256, &RandomSource::new(0)).unwrap();
        assert_eq!(docs.len(), 1);
        assert!((10..=20).contains(&docs[0].len()));
        assert!(generate_corpus(0, 10..=20, 8, 256, &RandomSource::new(0)).is_err());
        assert!(generate_corpus(1, 0..=5, 8, 256, &RandomSource::new(0)).is_err());
    }

    #[test]
    fn corpus_is_seed_deterministic() {
        let a = generate_corpus(30, 20..=40, 16, 256, &RandomSource::new(9)).unwrap();
        let b = generate_corpus(30, 20..=40, 16, 256, &RandomSource::new(9)).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(30, 20..=40, 16, 256, &RandomSource::new(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_corpus_is_diverse() {
        let sc = Scenario::new(ScenarioKind::Copy, 0);
        let docs = generate_corpus(
            sc.corpus.n_docs,
            sc.corpus.len_min..=sc.corpus.len_max,
            sc.corpus.template_diversity,
            sc.corpus.vocab,
            &RandomSource::new(sc.corpus_seed),
        )
        .unwrap();
        let rate = distinct_ngram_rate(&docs, 8);
        assert!(rate >= 0.5, "distinct 8-gram rate {rate}");
        // Templates do induce some sharing: the rate is not trivially 1.
        assert!(rate < 0.999, "distinct 8-gram rate {rate}");
    }

    #[test]
    fn sweep_is_reproducible_and_tabular() {
        let sc = tiny_scenario(ScenarioKind::Copy, 5);
        let params = tiny_params();
        let cells = [
            SweepCell { test: TestId::Query, n: 12 },
            SweepCell { test: TestId::Query, n: 24 },
            SweepCell { test: TestId::ObsPartition, n: 64 },
        ];
        let r = RandomSource::new(100);
        let a = run_scenario(&sc, &cells, 3, &params, &r).unwrap();
        let b = run_scenario(&sc, &cells, 3, &params, &r).unwrap();
        for (ca, cb) in a.cells.iter().zip(&b.cells) {
            assert_eq!(ca.p_values.len(), 3);
            for (x, y) in ca.p_values.iter().zip(&cb.p_values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let csv = a.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "scenario,test,n,trial,p");
        assert_eq!(csv.lines().count(), 1 + 3 * 3);
        assert!(csv.contains("copy,query,12,0,"));
        assert!(a.to_json().unwrap().contains("\"median_p\""));
        assert!(a.cell(TestId::Query, 24).is_some());
        assert!(a.cell(TestId::Query, 99).is_none());
    }

    #[test]
    fn copy_scenario_beats_null_scenario() {
        let params = tiny_params();
        let cells = [SweepCell { test: TestId::Query, n: 24 }];
        let r = RandomSource::new(7);
        let copy = run_scenario(&tiny_scenario(ScenarioKind::Copy, 5), &cells, 5, &params, &r)
            .unwrap();
        let null = run_scenario(
            &tiny_scenario(ScenarioKind::IndependentCorpus, 5),
            &cells,
            5,
            &params,
            &r,
        )
        .unwrap();
        assert!(
            copy.cells[0].median_p < null.cells[0].median_p,
            "copy median {} vs null median {}",
            copy.cells[0].median_p,
            null.cells[0].median_p
        );
        assert!(copy.cells[0].median_p < 0.05);
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let sc = tiny_scenario(ScenarioKind::Copy, 5);
        let params = tiny_params();
        let r = RandomSource::new(0);
        let q = |n| [SweepCell { test: TestId::Query, n }];
        assert!(matches!(
            run_scenario(&sc, &q(2), 2, &params, &r),
            Err(Error::InvalidScenario(_))
        ));
        assert!(matches!(
            run_scenario(&sc, &q(25), 2, &params, &r),
            Err(Error::InvalidScenario(_))
        ));
        assert!(matches!(
            run_scenario(&sc, &[], 2, &params, &r),
            Err(Error::InvalidScenario(_))
        ));
        assert!(matches!(
            run_scenario(&sc, &q(12), 0, &params, &r),
            Err(Error::InvalidScenario(_))
        ));
        // Window longer than the shortest document.
        let mut long = params;
        long.query = QueryConfig::new(30, 0).unwrap();
        assert!(matches!(
            run_scenario(&sc, &q(12), 2, &long, &r),
            Err(Error::InvalidScenario(_))
        ));
        // Token budget beyond the generation capacity.
        assert!(matches!(
            run_scenario(
                &sc,
                &[SweepCell { test: TestId::ObsPartition, n: 10_000 }],
                2,
                &params,
                &r
            ),
            Err(Error::InvalidScenario(_))
        ));
        let ft = tiny_scenario(
            ScenarioKind::Finetune { extra_docs: 0, passes: 1 },
            5,
        );
        assert!(matches!(
            run_scenario(&ft, &q(12), 2, &params, &r),
            Err(Error::InvalidScenario(_))
        ));
    }

    #[test]
    fn every_test_id_runs_end_to_end() {
        let sc = tiny_scenario(ScenarioKind::Copy, 11);
        let params = tiny_params();
        let cells: Vec<SweepCell> = [
            (TestId::Query, 24),
            (TestId::QueryRef, 24),
            (TestId::QueryRegression, 24),
            (TestId::QuerySampled, 24),
            (TestId::ObsPartition, 80),
            (TestId::ObsPartitionLikelihood, 80),
            (TestId::ObsShuffle, 80),
            (TestId::ObsShuffleExact, 80),
        ]
        .iter()
        .map(|&(test, n)| SweepCell { test, n })
        .collect();
        let report = run_scenario(&sc, &cells, 2, &params, &RandomSource::new(3)).unwrap();
        assert_eq!(report.cells.len(), 8);
        for cell in &report.cells {
            assert_eq!(cell.trials, 2);
            for &p in &cell.p_values {
                assert!((0.0..=1.0).contains(&p), "{:?} p {}", cell.test, p);
            }
        }
        let names: HashSet<&str> = report.cells.iter().map(|c| c.test.name()).collect();
        assert_eq!(names.len(), 8);
    }

    #[test]
    fn quantiles_match_hand_values() {
        let cell = summarize(TestId::Query, 5, vec![0.9, 0.1, 0.5, 0.3, 0.7]);
        assert_eq!(cell.median_p, 0.5);
        assert_eq!(cell.iqr, (0.3, 0.7));
        let even = summarize(TestId::Query, 4, vec![0.4, 0.2, 0.8, 0.6]);
        assert!((even.median_p - 0.5).abs() < 1e-15);
    }

    #[test]
    fn calibration_discretization_bound() {
        // The full permutation support, each value equally often: the KS
        // distance is exactly the support spacing.
        let m = 9;
        let ps: Vec<f64> = (0..900)
            .map(|i| (i % (m + 1) + 1) as f64 / (m as f64 + 1.0))
            .collect();
        let rep = calibration_report(&ps).unwrap();
        assert!(rep.ks_stat <= 1.0 / (m as f64 + 1.0) + 1e-12);
        // A support fine enough to sit under the critical value passes.
        let m = 99;
        let fine: Vec<f64> = (0..2500)
            .map(|i| (i % (m + 1) + 1) as f64 / (m as f64 + 1.0))
            .collect();
        let rep = calibration_report(&fine).unwrap();
        assert!(rep.ks_stat <= 0.01 + 1e-12);
        assert!(rep.uniform_pass, "ks {} crit {}", rep.ks_stat, rep.ks_critical);
    }

    #[test]
    fn calibration_rejects_point_mass() {
        let rep = calibration_report(&vec![0.001; 400]).unwrap();
        assert!(!rep.uniform_pass);
        assert!(rep.ks_stat > 0.9);
        assert!(calibration_report(&[]).is_err());
    }

    #[test]
    fn calibration_accepts_true_uniforms() {
        use rand::Rng;
        let mut passes = 0;
        for meta in 0..50u64 {
            let mut rng = RandomSource::new(meta).rng();
            let ps: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
            if calibration_report(&ps).unwrap().uniform_pass {
                passes += 1;
            }
        }
        assert!(passes >= 45, "only {passes}/50 passed");
    }

    #[test]
    fn null_scenarios_are_flagged() {
        assert!(expect_uniform(&Scenario::new(ScenarioKind::IndependentCorpus, 0)));
        assert!(expect_uniform(&Scenario::new(ScenarioKind::IndependentReshuffle, 0)));
        assert!(!expect_uniform(&Scenario::new(ScenarioKind::Copy, 0)));
        assert!(!expect_uniform(&Scenario::new(
            ScenarioKind::Finetune { extra_docs: 5, passes: 1 },
            0
        )));
    }
}
