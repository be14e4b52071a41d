//! Observational-setting reshuffle test.
//!
//! Alice repeats the tail of her training run k + 1 times from the same
//! checkpoint: once in the true order, k times on independent reshuffles.
//! If Bob's text depends on her training order, the true-order model fits
//! it better than the reshuffled population, and the standardized gap
//!
//! ```text
//! z = (chi_0 - mean(chi_1..chi_k)) / sd(chi_1..chi_k)
//! ```
//!
//! is large. `p_approx = 1 - Phi(z)` treats the null spread as normal,
//! which is cheap and empirically conservative; [`reshuffle_test_exact`]
//! instead wraps the whole retraining procedure in the permutation engine,
//! buying a finite-sample exact p-value at m + 1 retraining rounds.
//!
//! Training is deterministic given seeds: model j draws from stream j, so
//! reruns and thread counts cannot move a single bit of the result.

use rayon::prelude::*;
use serde::Serialize;

use crate::dist;
use crate::error::Error;
use crate::lm::{LanguageModel, Trainer};
use crate::rng::RandomSource;
use crate::stats::{self, PermutationResult};
use crate::transcript::{shuffle_transcript, Entry, TextBundle, Transcript};
use crate::Result;

/// How much tail to replay and how many reshuffled models to pit against
/// the true order.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ShuffleTestConfig {
    /// Number of reshuffled models. Two is the cheapest defensible value;
    /// 16 gives a stable null spread.
    pub k: usize,
    /// Fraction of the training run (by step count) to replay.
    pub retrain_fraction: f64,
    /// Fine-tune every model on the bundle before scoring, which keeps the
    /// gap visible when Bob's model has drifted from the checkpointed one.
    pub finetune_on_text: bool,
    /// Passes over the bundle when fine-tuning.
    pub finetune_passes: usize,
}

impl ShuffleTestConfig {
    pub fn new(k: usize, retrain_fraction: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 reshuffled models, got {k}"
            )));
        }
        if !(retrain_fraction > 0.0 && retrain_fraction <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "retrain_fraction must lie in (0, 1], got {retrain_fraction}"
            )));
        }
        Ok(Self {
            k,
            retrain_fraction,
            finetune_on_text: false,
            finetune_passes: 1,
        })
    }

    pub fn with_finetune(mut self, passes: usize) -> Self {
        self.finetune_on_text = true;
        self.finetune_passes = passes;
        self
    }
}

/// The standardized gap and everything needed to audit it.
#[derive(Debug, Clone, Serialize)]
pub struct ZScoreResult {
    pub z: f64,
    pub k: usize,
    pub chi_observed: f64,
    pub chi_null_mean: f64,
    pub chi_null_sd: f64,
    /// 1 - Phi(z): approximate, empirically conservative under the null.
    pub p_approx: f64,
    /// Hash of the shared starting checkpoint, when the tail resumed one.
    pub checkpoint_hash: Option<String>,
    /// Hashes of the k + 1 trained models, observed first.
    pub model_hashes: Vec<String>,
}

/// Splits a transcript at the retrain boundary: steps after
/// `num_steps - ceil(fraction * num_steps)` form the tail, renumbered from
/// 1 so the tail stands alone as a transcript. The prefix keeps its
/// numbering; it is `None` when the window covers everything.
pub fn split_tail(t: &Transcript, retrain_fraction: f64) -> Result<(Option<Transcript>, Transcript)> {
    if !(retrain_fraction > 0.0 && retrain_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "retrain_fraction must lie in (0, 1], got {retrain_fraction}"
        )));
    }
    let n = t.num_steps();
    let window = ((retrain_fraction * n as f64).ceil() as u64).clamp(1, n);
    let boundary = n - window;
    if boundary == 0 {
        return Ok((None, t.clone()));
    }
    let mut head = Vec::new();
    let mut tail = Vec::new();
    for e in t.entries() {
        if e.step <= boundary {
            head.push(e.clone());
        } else {
            tail.push(Entry {
                doc: e.doc.clone(),
                step: e.step - boundary,
            });
        }
    }
    if tail.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "no examples in the last {window} steps"
        )));
    }
    let prefix = if head.is_empty() {
        None
    } else {
        Some(Transcript::new(head, boundary, t.vocab())?)
    };
    Ok((prefix, Transcript::new(tail, window, t.vocab())?))
}

/// Mean over documents of per-token log-likelihood: every document votes
/// with equal weight regardless of length. Summed in document order.
pub fn bundle_chi<M: LanguageModel + Sync>(m: &M, text: &TextBundle) -> f64 {
    let per_doc: Vec<f64> = text
        .docs()
        .par_iter()
        .map(|d| m.log_prob(d) / d.len() as f64)
        .collect();
    per_doc.iter().sum::<f64>() / per_doc.len() as f64
}

/// Standardizes an observed chi against a null sample (k - 1 denominator).
pub fn z_from_chis(chi_observed: f64, chi_null: &[f64]) -> Result<ZScoreResult> {
    let k = chi_null.len();
    if k < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 null values, got {k}"
        )));
    }
    if !chi_observed.is_finite() {
        return Err(Error::NonFiniteInput(0));
    }
    if let Some(i) = chi_null.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(i));
    }
    // Bitwise equality, not sd == 0: averaging k identical values wobbles
    // by an ulp, so the variance of a genuinely collapsed null can come
    // out as rounding dust instead of zero.
    if chi_null.iter().all(|v| v.to_bits() == chi_null[0].to_bits()) {
        return Err(Error::DegenerateNullSpread);
    }
    let mean = chi_null.iter().sum::<f64>() / k as f64;
    let var = chi_null.iter().map(|&c| (c - mean) * (c - mean)).sum::<f64>() / (k - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Err(Error::DegenerateNullSpread);
    }
    let z = (chi_observed - mean) / sd;
    Ok(ZScoreResult {
        z,
        k,
        chi_observed,
        chi_null_mean: mean,
        chi_null_sd: sd,
        p_approx: dist::normal_cdf(-z),
        checkpoint_hash: None,
        model_hashes: Vec::new(),
    })
}

fn check_bundle_vocab(text: &TextBundle, vocab: u32) -> Result<()> {
    for d in text.docs() {
        for &t in d.ids() {
            if t >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
        }
    }
    Ok(())
}

/// Trains the k + 1 models on one given tail window (model 0 in the given
/// order, 1..=k on reshuffles) and standardizes. `r` is split per model
/// index, so the result is a pure function of (tail, checkpoint, r).
fn z_on_window<T: Trainer>(
    tail: &Transcript,
    checkpoint: Option<&T::Checkpoint>,
    trainer: &T,
    text: &TextBundle,
    cfg: &ShuffleTestConfig,
    r: &RandomSource,
) -> Result<ZScoreResult> {
    let variants: Vec<Transcript> = std::iter::once(tail.clone())
        .chain((1..=cfg.k).map(|j| shuffle_transcript(tail, &r.stream(j as u64).stream(1))))
        .collect();
    let scored: Vec<(f64, String)> = variants
        .par_iter()
        .enumerate()
        .map(|(j, tt)| {
            let model = trainer.train(tt, checkpoint, &r.stream(j as u64).stream(2))?;
            let model = if cfg.finetune_on_text {
                trainer.finetune(&model, text.docs(), cfg.finetune_passes)?
            } else {
                model
            };
            let hash = trainer.checkpoint_hash(&trainer.checkpoint(&model));
            Ok((bundle_chi(&model, text), hash))
        })
        .collect::<Result<_>>()?;
    let chi_null: Vec<f64> = scored[1..].iter().map(|(c, _)| *c).collect();
    let mut result = z_from_chis(scored[0].0, &chi_null)?;
    result.checkpoint_hash = checkpoint.map(|c| trainer.checkpoint_hash(c));
    result.model_hashes = scored.into_iter().map(|(_, h)| h).collect();
    Ok(result)
}

fn resolve_checkpoint<T: Trainer>(
    prefix: Option<&Transcript>,
    checkpoint: Option<&T::Checkpoint>,
    trainer: &T,
    r: &RandomSource,
) -> Result<Option<T::Checkpoint>> {
    match (checkpoint, prefix) {
        (Some(cp), _) => Ok(Some(cp.clone())),
        (None, Some(p)) => Ok(Some(trainer.checkpoint(&trainer.train(p, None, r)?))),
        (None, None) => Ok(None),
    }
}

/// The reshuffle test. The transcript is split at the configured retrain
/// boundary; pass a checkpoint for the prefix if one is already trained,
/// otherwise the prefix is trained here (once, shared by all k + 1 runs).
pub fn reshuffle_test<T: Trainer>(
    t: &Transcript,
    checkpoint: Option<&T::Checkpoint>,
    trainer: &T,
    text: &TextBundle,
    cfg: &ShuffleTestConfig,
    r: &RandomSource,
) -> Result<ZScoreResult> {
    check_bundle_vocab(text, t.vocab())?;
    let (prefix, tail) = split_tail(t, cfg.retrain_fraction)?;
    let cp = resolve_checkpoint(prefix.as_ref(), checkpoint, trainer, &r.stream(1))?;
    z_on_window(&tail, cp.as_ref(), trainer, text, cfg, &r.stream(0))
}

/// Exact-p variant: the z statistic becomes the test statistic of the
/// permutation engine, recomputed per tail permutation with the same
/// internal seeds, so the observed order is compared against the full
/// permutation null and the p-value is exact, at the price of
/// (m + 1)(k + 1) trainings.
pub fn reshuffle_test_exact<T: Trainer>(
    t: &Transcript,
    checkpoint: Option<&T::Checkpoint>,
    trainer: &T,
    text: &TextBundle,
    cfg: &ShuffleTestConfig,
    m: usize,
    r: &RandomSource,
) -> Result<PermutationResult> {
    if m == 0 {
        return Err(Error::InvalidParameter(
            "need at least one permutation".into(),
        ));
    }
    check_bundle_vocab(text, t.vocab())?;
    let (prefix, tail) = split_tail(t, cfg.retrain_fraction)?;
    let cp = resolve_checkpoint(prefix.as_ref(), checkpoint, trainer, &r.stream(1))?;
    let inner = r.stream(0);
    // A statistic must be total: a permutation whose null spread collapses
    // maps to +inf, which can only push the p-value up.
    let phi = |tt: &Transcript| -> f64 {
        z_on_window(tt, cp.as_ref(), trainer, text, cfg, &inner)
            .map(|res| res.z)
            .unwrap_or(f64::INFINITY)
    };
    Ok(stats::permutation_test(&tail, phi, m, &r.stream(2)))
}

/// Adapted copy of the model, trained further on the bundle. The input
/// model is untouched.
pub fn finetune_on_text<T: Trainer>(
    model: &T::Model,
    trainer: &T,
    text: &TextBundle,
    passes: usize,
) -> Result<T::Model> {
    trainer.finetune(model, text.docs(), passes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylm::DecayLmTrainer;
    use crate::transcript::Document;
    use rand::Rng;

    fn doc(ids: &[u32]) -> Document {
        Document::new(ids.to_vec()).unwrap()
    }

    fn random_transcript(n: usize, len: usize, vocab: u32, seed: u64) -> Transcript {
        let mut rng = RandomSource::new(seed).rng();
        let docs: Vec<Document> = (0..n)
            .map(|_| doc(&(0..len).map(|_| rng.random_range(0..vocab)).collect::<Vec<_>>()))
            .collect();
        Transcript::from_docs(docs, vocab).unwrap()
    }

    #[test]
    fn hand_computed_z() {
        let res = z_from_chis(2.0, &[1.0, 3.0]).unwrap();
        assert_eq!(res.z, 0.0);
        assert_eq!(res.chi_null_mean, 2.0);
        assert_eq!(res.chi_null_sd.to_bits(), 2.0f64.sqrt().to_bits());
        assert_eq!(res.p_approx, 0.5);
        assert_eq!(res.k, 2);
    }

    #[test]
    fn collapsed_null_spread_is_an_error() {
        assert!(matches!(
            z_from_chis(2.0, &[1.0, 1.0, 1.0]),
            Err(Error::DegenerateNullSpread)
        ));
        assert!(z_from_chis(2.0, &[1.0]).is_err());
        assert!(z_from_chis(f64::INFINITY, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn z_ignores_shift_and_positive_scale() {
        let obs = -2.31;
        let null = [-2.5, -2.41, -2.62, -2.48, -2.55];
        let base = z_from_chis(obs, &null).unwrap();
        // Scaling by a power of two is exact arithmetic.
        let doubled: Vec<f64> = null.iter().map(|&c| c * 2.0).collect();
        assert_eq!(
            z_from_chis(obs * 2.0, &doubled).unwrap().z.to_bits(),
            base.z.to_bits()
        );
        let moved: Vec<f64> = null.iter().map(|&c| 1.7 * c + 0.3).collect();
        let z_moved = z_from_chis(1.7 * obs + 0.3, &moved).unwrap().z;
        assert!((z_moved - base.z).abs() < 1e-12);
    }

    #[test]
    fn split_respects_fraction_and_clamps() {
        let t = random_transcript(10, 4, 8, 1);
        // 30% of 10 steps: window 3, boundary 7.
        let (prefix, tail) = split_tail(&t, 0.3).unwrap();
        let prefix = prefix.unwrap();
        assert_eq!(prefix.num_steps(), 7);
        assert_eq!(prefix.len(), 7);
        assert_eq!(tail.num_steps(), 3);
        assert_eq!(
            tail.entries().iter().map(|e| e.step).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        // The tail is the last three documents, renumbered.
        assert_eq!(tail.entries()[0].doc, t.entries()[7].doc);

        // Tiny fraction clamps to one step.
        let (prefix, tail) = split_tail(&t, 0.001).unwrap();
        assert_eq!(prefix.unwrap().num_steps(), 9);
        assert_eq!(tail.num_steps(), 1);

        // Full fraction: everything is tail, original numbering kept.
        let (prefix, tail) = split_tail(&t, 1.0).unwrap();
        assert!(prefix.is_none());
        assert_eq!(tail.num_steps(), 10);

        assert!(split_tail(&t, 0.0).is_err());
        assert!(split_tail(&t, 1.5).is_err());
    }

    #[test]
    fn identical_tail_documents_collapse_the_null() {
        let docs: Vec<Document> = (0..10).map(|_| doc(&[1, 2, 3])).collect();
        let t = Transcript::from_docs(docs, 8).unwrap();
        let trainer = DecayLmTrainer::new(2, 0.9, 0.1);
        let cfg = ShuffleTestConfig::new(3, 0.4).unwrap();
        let text = TextBundle::new(vec![doc(&[1, 2])]).unwrap();
        let err = reshuffle_test(&t, None, &trainer, &text, &cfg, &RandomSource::new(0)).unwrap_err();
        assert!(matches!(err, Error::DegenerateNullSpread));
    }

    #[test]
    fn rerun_reproduces_z_exactly() {
        let t = random_transcript(24, 10, 32, 5);
        let trainer = DecayLmTrainer::new(3, 0.8, 0.1);
        let cfg = ShuffleTestConfig::new(4, 0.5).unwrap();
        let text = TextBundle::new(
            (0..6)
                .map(|i| t.entries()[18 + (i % 6)].doc.clone())
                .collect(),
        )
        .unwrap();
        let r = RandomSource::new(77);
        let a = reshuffle_test(&t, None, &trainer, &text, &cfg, &r).unwrap();
        let b = reshuffle_test(&t, None, &trainer, &text, &cfg, &r).unwrap();
        assert_eq!(a.z.to_bits(), b.z.to_bits());
        assert_eq!(a.model_hashes, b.model_hashes);

        // One rayon thread versus many: same bits.
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool
            .install(|| reshuffle_test(&t, None, &trainer, &text, &cfg, &r))
            .unwrap();
        assert_eq!(a.z.to_bits(), c.z.to_bits());
        assert_eq!(a.model_hashes, c.model_hashes);
    }

    #[test]
    fn supplied_and_internal_checkpoints_agree() {
        let t = random_transcript(20, 8, 16, 9);
        let trainer = DecayLmTrainer::new(2, 0.9, 0.1);
        let cfg = ShuffleTestConfig::new(3, 0.25).unwrap();
        let text = TextBundle::new(vec![t.entries()[19].doc.clone()]).unwrap();
        let r = RandomSource::new(3);

        let internal = reshuffle_test(&t, None, &trainer, &text, &cfg, &r).unwrap();
        let (prefix, _) = split_tail(&t, cfg.retrain_fraction).unwrap();
        let head_model = trainer
            .train(&prefix.unwrap(), None, &r.stream(1))
            .unwrap();
        let cp = trainer.checkpoint(&head_model);
        let supplied = reshuffle_test(&t, Some(&cp), &trainer, &text, &cfg, &r).unwrap();
        assert_eq!(
            internal.checkpoint_hash.as_ref().unwrap(),
            &trainer.checkpoint_hash(&cp)
        );
        assert_eq!(internal.z.to_bits(), supplied.z.to_bits());
        assert_eq!(internal.model_hashes, supplied.model_hashes);
    }

    #[test]
    fn copied_text_pushes_z_positive() {
        // Bob samples from a model trained on Alice's full run: his text
        // carries her order, so the true-order tail model wins.
        let t = random_transcript(40, 12, 64, 13);
        let trainer = DecayLmTrainer::new(3, 0.7, 0.1);
        let bob = trainer.train(&t, None, &RandomSource::new(0)).unwrap();
        let gen = RandomSource::new(21);
        let text = TextBundle::new(
            (0..20)
                .map(|i| bob.sample(&[], 12, 1.0, &gen.stream(i)).unwrap())
                .collect(),
        )
        .unwrap();
        let cfg = ShuffleTestConfig::new(8, 0.5).unwrap();
        let res = reshuffle_test(&t, None, &trainer, &text, &cfg, &RandomSource::new(4)).unwrap();
        assert!(res.z > 0.0, "z = {}", res.z);
        assert!(res.p_approx < 0.5, "p = {}", res.p_approx);
        assert_eq!(res.model_hashes.len(), cfg.k + 1);
        assert!((0.0..=1.0).contains(&res.p_approx));
    }

    #[test]
    fn finetuning_raises_bundle_likelihood() {
        let t = random_transcript(15, 8, 16, 2);
        let trainer = DecayLmTrainer::new(2, 0.9, 0.2);
        let model = trainer.train(&t, None, &RandomSource::new(0)).unwrap();
        let text = TextBundle::new(vec![doc(&[9, 9, 1, 4]), doc(&[4, 9, 9])]).unwrap();
        let before = bundle_chi(&model, &text);
        let tuned = finetune_on_text(&model, &trainer, &text, 1).unwrap();
        assert!(bundle_chi(&tuned, &text) > before);
        // The original is untouched.
        assert_eq!(bundle_chi(&model, &text).to_bits(), before.to_bits());
    }

    #[test]
    fn exact_variant_hits_the_support_floor_on_strong_copies() {
        let t = random_transcript(16, 10, 32, 31);
        let trainer = DecayLmTrainer::new(3, 0.6, 0.1);
        let bob = trainer.train(&t, None, &RandomSource::new(0)).unwrap();
        let gen = RandomSource::new(8);
        let text = TextBundle::new(
            (0..12)
                .map(|i| bob.sample(&[], 10, 1.0, &gen.stream(i)).unwrap())
                .collect(),
        )
        .unwrap();
        let cfg = ShuffleTestConfig::new(4, 0.5).unwrap();
        let m = 9;
        let r = RandomSource::new(6);
        let res = reshuffle_test_exact(&t, None, &trainer, &text, &cfg, m, &r).unwrap();
        assert_eq!(res.m, 9);
        assert!(res.p_hat >= 1.0 / 10.0);
        assert_eq!(res.p_hat.to_bits(), 0.1f64.to_bits(), "observed z {}", res.observed);

        let again = reshuffle_test_exact(&t, None, &trainer, &text, &cfg, m, &r).unwrap();
        assert_eq!(res.p_hat.to_bits(), again.p_hat.to_bits());
        assert_eq!(res.observed.to_bits(), again.observed.to_bits());
    }
}
