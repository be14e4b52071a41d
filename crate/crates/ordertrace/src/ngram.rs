//! Observational-setting partition tests.
//!
//! Alice cannot query Bob's model here; she only sees text he published.
//! The transcript is split into k contiguous partitions by training
//! position, and each partition becomes a tiny "model" of what was trained
//! there: either the literal set of its n-grams, or an add-alpha n-gram LM
//! fit to it. If Bob's text leans on memorized training data, it matches
//! late partitions more than early ones, and the rank correlation of the
//! per-partition affinity against partition order is positive.
//!
//! The n-gram index subsamples by value hash: an n-gram is indexed iff a
//! seeded hash of its tokens clears the rate threshold. Inclusion then
//! depends only on the n-gram itself, never on where it sat in training,
//! so building the index commutes with relabeling steps. That is what lets
//! permutation p-values be computed by permuting partition labels instead
//! of re-indexing.

use rayon::prelude::*;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use crate::error::Error;
use crate::lm::Trainer;
use crate::rng::RandomSource;
use crate::stats::{self, ScoreSeries, SpearmanResult};
use crate::toylm::DecayLmTrainer;
use crate::transcript::{TextBundle, Transcript};
use crate::Result;

const MAGIC: &[u8; 5] = b"PNGX1";

fn fnv1a64(seed: u64, gram: &[u32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut absorb = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    absorb(&seed.to_le_bytes());
    for &t in gram {
        absorb(&t.to_le_bytes());
    }
    h
}

/// Maps n-grams of orders 1..=n_max to the partitions that trained on
/// them, with occurrence counts. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramBatchIndex {
    n_max: usize,
    k: usize,
    subsample_rate: f64,
    hash_seed: u64,
    postings: HashMap<Box<[u32]>, BTreeMap<u32, u32>>,
}

/// Matches attributed to each of the k partitions, in partition order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchProfile {
    pub counts: Vec<u64>,
}

impl MatchProfile {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Sizes of k near-equal contiguous blocks: earlier blocks absorb the
/// remainder, so sizes differ by at most one.
fn block_sizes(n: usize, k: usize) -> Vec<usize> {
    let base = n / k;
    let extra = n % k;
    (0..k).map(|b| base + usize::from(b < extra)).collect()
}

impl NGramBatchIndex {
    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn subsample_rate(&self) -> f64 {
        self.subsample_rate
    }

    pub fn hash_seed(&self) -> u64 {
        self.hash_seed
    }

    pub fn posting_count(&self) -> usize {
        self.postings.len()
    }

    /// Total indexed occurrences across all postings and partitions.
    pub fn total_mass(&self) -> u64 {
        self.postings
            .values()
            .map(|p| p.values().map(|&c| c as u64).sum::<u64>())
            .sum()
    }

    /// Partitions holding this n-gram, as (partition, count) pairs in
    /// partition order. Partitions are 1-based.
    pub fn lookup(&self, gram: &[u32]) -> Option<&BTreeMap<u32, u32>> {
        self.postings.get(gram)
    }

    fn included(&self, gram: &[u32]) -> bool {
        let threshold = (self.subsample_rate * 18_446_744_073_709_551_616.0) as u128;
        (fnv1a64(self.hash_seed, gram) as u128) < threshold
    }
}

/// Sorts the transcript by training position, splits it into `k`
/// contiguous partitions of near-equal example count, and indexes every
/// n-gram of orders 1..=n_max that clears the subsample threshold.
pub fn build_index(
    t: &Transcript,
    k: usize,
    n_max: usize,
    subsample_rate: f64,
    r: &RandomSource,
) -> Result<NGramBatchIndex> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if k > t.len() {
        return Err(Error::TooManyPartitions {
            requested: k,
            max: t.len(),
        });
    }
    if n_max == 0 || n_max > 255 {
        return Err(Error::InvalidParameter(format!(
            "n_max must lie in 1..=255, got {n_max}"
        )));
    }
    if !(subsample_rate > 0.0 && subsample_rate <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "subsample_rate must lie in (0, 1], got {subsample_rate}"
        )));
    }
    let hash_seed: u64 = {
        let mut rng = r.rng();
        rand::Rng::random(&mut rng)
    };
    let mut idx = NGramBatchIndex {
        n_max,
        k,
        subsample_rate,
        hash_seed,
        postings: HashMap::new(),
    };

    // Partition label per entry, in entry order.
    let order = t.order();
    let mut partition = vec![0u32; t.len()];
    let mut cursor = 0usize;
    for (b, size) in block_sizes(t.len(), k).into_iter().enumerate() {
        for &e in &order[cursor..cursor + size] {
            partition[e] = b as u32 + 1;
        }
        cursor += size;
    }

    let locals: Vec<HashMap<Box<[u32]>, u32>> = t
        .entries()
        .par_iter()
        .map(|e| {
            let mut local: HashMap<Box<[u32]>, u32> = HashMap::new();
            let ids = e.doc.ids();
            for j in 1..=n_max.min(ids.len()) {
                for gram in ids.windows(j) {
                    if idx.included(gram) {
                        *local.entry(gram.to_vec().into_boxed_slice()).or_insert(0) += 1;
                    }
                }
            }
            local
        })
        .collect();
    for (local, &part) in locals.into_iter().zip(&partition) {
        for (gram, count) in local {
            *idx.postings.entry(gram).or_default().entry(part).or_insert(0) += count;
        }
    }
    Ok(idx)
}

/// Greedy longest-match scan of the bundle against the index. At each
/// position the longest indexed n-gram wins, every partition holding it is
/// credited once, and the scan jumps past the matched span; unmatched
/// positions advance by one. Unigram matches are skipped over but not
/// credited unless `include_unigrams` is set.
pub fn match_profile_with(
    idx: &NGramBatchIndex,
    text: &TextBundle,
    include_unigrams: bool,
) -> MatchProfile {
    let min_credited = if include_unigrams { 1 } else { 2 };
    let per_doc: Vec<Vec<u64>> = text
        .docs()
        .par_iter()
        .map(|doc| {
            let ids = doc.ids();
            let mut counts = vec![0u64; idx.k];
            let mut pos = 0;
            while pos < ids.len() {
                let longest = (1..=idx.n_max.min(ids.len() - pos))
                    .rev()
                    .find_map(|j| idx.lookup(&ids[pos..pos + j]).map(|p| (j, p)));
                match longest {
                    Some((j, posting)) => {
                        if j >= min_credited {
                            for &part in posting.keys() {
                                counts[part as usize - 1] += 1;
                            }
                        }
                        pos += j;
                    }
                    None => pos += 1,
                }
            }
            counts
        })
        .collect();
    let mut counts = vec![0u64; idx.k];
    for doc_counts in per_doc {
        for (total, c) in counts.iter_mut().zip(doc_counts) {
            *total += c;
        }
    }
    MatchProfile { counts }
}

pub fn match_profile(idx: &NGramBatchIndex, text: &TextBundle) -> MatchProfile {
    match_profile_with(idx, text, false)
}

/// Outcome of a partition test. A constant affinity profile carries no
/// ordering evidence; it reports p = 1 with the `degenerate` flag instead
/// of failing, because constant evidence is exactly what the null looks
/// like.
#[derive(Debug, Clone, Serialize)]
pub struct PartitionTest {
    /// Per-partition affinity, in partition order.
    pub chi: Vec<f64>,
    pub spearman: Option<SpearmanResult>,
    pub p_one_sided: f64,
    pub degenerate: bool,
}

fn partition_test_from_chi(chi: Vec<f64>) -> Result<PartitionTest> {
    let k = chi.len();
    let series = ScoreSeries::new(chi.clone(), (1..=k as u64).collect())?;
    match stats::spearman(&series) {
        Ok(s) => Ok(PartitionTest {
            chi,
            p_one_sided: s.p_one_sided,
            spearman: Some(s),
            degenerate: false,
        }),
        Err(Error::DegenerateRanks) => Ok(PartitionTest {
            chi,
            spearman: None,
            p_one_sided: 1.0,
            degenerate: true,
        }),
        Err(e) => Err(e),
    }
}

/// Rank correlation of match counts against partition order.
pub fn partition_order_test(idx: &NGramBatchIndex, text: &TextBundle) -> Result<PartitionTest> {
    partition_order_test_with(idx, text, false)
}

/// As [`partition_order_test`], with unigram crediting selectable.
pub fn partition_order_test_with(
    idx: &NGramBatchIndex,
    text: &TextBundle,
    include_unigrams: bool,
) -> Result<PartitionTest> {
    let profile = match_profile_with(idx, text, include_unigrams);
    partition_test_from_chi(profile.counts.iter().map(|&c| c as f64).collect())
}

/// Likelihood form of the partition test: fits one add-alpha n-gram model
/// per contiguous partition (no decay, so each model sees only its own
/// slice and order within the slice cannot matter) and rank correlates the
/// bundle's mean per-token log-likelihood against partition order.
pub fn partition_likelihood_test(
    t: &Transcript,
    k: usize,
    text: &TextBundle,
    lm_order: usize,
    smoothing: f64,
) -> Result<PartitionTest> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if k > t.len() {
        return Err(Error::TooManyPartitions {
            requested: k,
            max: t.len(),
        });
    }
    let order = t.order();
    let sizes = block_sizes(t.len(), k);
    let trainer = DecayLmTrainer::new(lm_order, 1.0, smoothing);
    let r = RandomSource::new(0);
    let mut chi = Vec::with_capacity(k);
    let mut cursor = 0;
    for size in sizes {
        let docs: Vec<_> = order[cursor..cursor + size]
            .iter()
            .map(|&e| t.entries()[e].doc.clone())
            .collect();
        cursor += size;
        let slice = Transcript::from_docs(docs, t.vocab())?;
        let model = trainer.train(&slice, None, &r)?;
        let ll: f64 = text
            .docs()
            .iter()
            .map(|d| crate::lm::LanguageModel::log_prob(&model, d))
            .sum();
        chi.push(ll / text.total_tokens() as f64);
    }
    partition_test_from_chi(chi)
}

/// Writes the index in its binary format: magic `PNGX1`, little-endian
/// header, postings sorted by (order, tokens). Canonical bytes for equal
/// indexes.
pub fn write_index<W: Write>(idx: &NGramBatchIndex, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(idx.n_max as u32).to_le_bytes())?;
    w.write_all(&(idx.k as u32).to_le_bytes())?;
    w.write_all(&idx.subsample_rate.to_le_bytes())?;
    w.write_all(&idx.hash_seed.to_le_bytes())?;
    w.write_all(&(idx.postings.len() as u64).to_le_bytes())?;
    let mut grams: Vec<&Box<[u32]>> = idx.postings.keys().collect();
    grams.sort_by(|a, b| (a.len(), a.as_ref()).cmp(&(b.len(), b.as_ref())));
    for gram in grams {
        let posting = &idx.postings[gram];
        w.write_all(&[gram.len() as u8])?;
        for &t in gram.iter() {
            w.write_all(&t.to_le_bytes())?;
        }
        w.write_all(&(posting.len() as u32).to_le_bytes())?;
        for (&part, &count) in posting {
            w.write_all(&part.to_le_bytes())?;
            w.write_all(&count.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_index<R: Read>(mut r: R) -> Result<NGramBatchIndex> {
    let bad = |msg: &str| Error::Format {
        format: "PNGX1",
        message: msg.to_string(),
    };
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("wrong magic bytes"));
    }
    let n_max = read_u32(&mut r)? as usize;
    let k = read_u32(&mut r)? as usize;
    let subsample_rate = read_f64(&mut r)?;
    let hash_seed = read_u64(&mut r)?;
    if n_max == 0 || n_max > 255 || k == 0 {
        return Err(bad("header out of range"));
    }
    if !(subsample_rate > 0.0 && subsample_rate <= 1.0) {
        return Err(bad("subsample rate outside (0, 1]"));
    }
    let n_postings = read_u64(&mut r)?;
    let mut postings = HashMap::new();
    for _ in 0..n_postings {
        let mut len = [0u8; 1];
        r.read_exact(&mut len)?;
        if len[0] == 0 || len[0] as usize > n_max {
            return Err(bad("posting order outside 1..=n_max"));
        }
        let mut gram = Vec::with_capacity(len[0] as usize);
        for _ in 0..len[0] {
            gram.push(read_u32(&mut r)?);
        }
        let pairs = read_u32(&mut r)?;
        let mut posting = BTreeMap::new();
        for _ in 0..pairs {
            let part = read_u32(&mut r)?;
            let count = read_u32(&mut r)?;
            if part == 0 || part as usize > k || count == 0 {
                return Err(bad("partition pair out of range"));
            }
            posting.insert(part, count);
        }
        postings.insert(gram.into_boxed_slice(), posting);
    }
    Ok(NGramBatchIndex {
        n_max,
        k,
        subsample_rate,
        hash_seed,
        postings,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transcript::Document;
    use rand::Rng;

    fn doc(ids: &[u32]) -> Document {
        Document::new(ids.to_vec()).unwrap()
    }

    fn bundle(docs: Vec<Document>) -> TextBundle {
        TextBundle::new(docs).unwrap()
    }

    fn random_corpus(n: usize, len_max: usize, vocab: u32, seed: u64) -> Transcript {
        let mut rng = RandomSource::new(seed).rng();
        let docs: Vec<Document> = (0..n)
            .map(|_| {
                let len = rng.random_range(1..=len_max);
                doc(&(0..len).map(|_| rng.random_range(0..vocab)).collect::<Vec<_>>())
            })
            .collect();
        Transcript::from_docs(docs, vocab).unwrap()
    }

    #[test]
    fn single_doc_enumeration() {
        // "a b c" with a=0, b=1, c=2.
        let t = Transcript::from_docs(vec![doc(&[0, 1, 2])], 3).unwrap();
        let idx = build_index(&t, 1, 2, 1.0, &RandomSource::new(0)).unwrap();
        assert_eq!(idx.posting_count(), 5);
        for gram in [&[0u32][..], &[1], &[2], &[0, 1], &[1, 2]] {
            let posting = idx.lookup(gram).unwrap();
            assert_eq!(posting.len(), 1);
            assert_eq!(posting[&1], 1);
        }
        assert!(idx.lookup(&[0, 2]).is_none());
        assert_eq!(idx.total_mass(), 5);
    }

    #[test]
    fn full_rate_mass_is_the_window_count() {
        let t = random_corpus(40, 20, 16, 7);
        let n_max = 5;
        let idx = build_index(&t, 4, n_max, 1.0, &RandomSource::new(1)).unwrap();
        let want: u64 = t
            .entries()
            .iter()
            .map(|e| {
                (1..=n_max)
                    .map(|n| e.doc.len().saturating_sub(n - 1) as u64)
                    .sum::<u64>()
            })
            .sum();
        assert_eq!(idx.total_mass(), want);
    }

    #[test]
    fn per_partition_counts_match_brute_force() {
        let t = random_corpus(120, 18, 8, 11);
        let k = 10;
        let n_max = 4;
        let idx = build_index(&t, k, n_max, 1.0, &RandomSource::new(2)).unwrap();

        // Straight recount: walk the sorted corpus, assign blocks, count
        // every window.
        let order = t.order();
        let mut brute: HashMap<Vec<u32>, BTreeMap<u32, u32>> = HashMap::new();
        let mut cursor = 0;
        for (b, size) in block_sizes(t.len(), k).into_iter().enumerate() {
            for &e in &order[cursor..cursor + size] {
                let ids = t.entries()[e].doc.ids();
                for j in 1..=n_max.min(ids.len()) {
                    for gram in ids.windows(j) {
                        *brute
                            .entry(gram.to_vec())
                            .or_default()
                            .entry(b as u32 + 1)
                            .or_insert(0) += 1;
                    }
                }
            }
            cursor += size;
        }
        assert_eq!(idx.posting_count(), brute.len());
        for (gram, posting) in &brute {
            assert_eq!(idx.lookup(gram).unwrap(), posting, "gram {gram:?}");
        }
    }

    #[test]
    fn partition_sizes_differ_by_at_most_one() {
        for (n, k) in [(10, 3), (12, 4), (7, 7), (23, 5)] {
            let sizes = block_sizes(n, k);
            assert_eq!(sizes.iter().sum::<usize>(), n);
            let min = *sizes.iter().min().unwrap();
            let max = *sizes.iter().max().unwrap();
            assert!(max - min <= 1, "sizes {sizes:?}");
        }
        let t = random_corpus(5, 6, 8, 0);
        assert!(matches!(
            build_index(&t, 6, 3, 1.0, &RandomSource::new(0)),
            Err(Error::TooManyPartitions { requested: 6, max: 5 })
        ));
    }

    #[test]
    fn subsampling_thins_by_value() {
        let t = random_corpus(60, 20, 64, 3);
        let r = RandomSource::new(5);
        let full = build_index(&t, 4, 3, 1.0, &r).unwrap();
        let half = build_index(&t, 4, 3, 0.5, &r).unwrap();
        // Every retained posting is exactly its full-rate counterpart: the
        // subsample drops n-grams whole, it never thins their counts.
        assert!(half.posting_count() < full.posting_count());
        for (gram, posting) in &half.postings {
            assert_eq!(full.lookup(gram).unwrap(), posting);
        }
        // Dropped fraction lands near the rate: distinct grams are a
        // Bernoulli(0.5) sample.
        let kept = half.posting_count() as f64 / full.posting_count() as f64;
        let se = 0.5 / (full.posting_count() as f64).sqrt();
        assert!((kept - 0.5).abs() < 5.0 * se, "kept fraction {kept}");
    }

    #[test]
    fn no_overlap_means_zero_profile() {
        let t = random_corpus(20, 10, 8, 9);
        let idx = build_index(&t, 4, 3, 1.0, &RandomSource::new(0)).unwrap();
        let text = bundle(vec![doc(&[20, 21, 22, 23])]);
        let profile = match_profile(&idx, &text);
        assert_eq!(profile.counts, vec![0; 4]);
        assert_eq!(profile.total(), 0);
    }

    #[test]
    fn indexed_doc_matches_greedy_cover_bound() {
        let ids: Vec<u32> = (0..17).map(|i| i % 13).collect();
        let t = Transcript::from_docs(vec![doc(&ids)], 16).unwrap();
        let idx = build_index(&t, 1, 8, 1.0, &RandomSource::new(0)).unwrap();
        let text = bundle(vec![doc(&ids)]);
        // With the unigram floor credited, every scan position lands a
        // match, so credits cover the doc in spans of at most n_max.
        let with_unigrams = match_profile_with(&idx, &text, true);
        assert!(with_unigrams.counts[0] >= (ids.len() as u64).div_ceil(8));
        // Default profile: the 17th token is a lone unigram match, skipped
        // but not credited.
        let default = match_profile(&idx, &text);
        assert_eq!(default.counts[0], 2);
    }

    #[test]
    fn unique_gram_credits_its_partition_once() {
        // 16 docs over k=8, so partition 7 holds docs 12 and 13. The
        // 8-gram 100..108 is planted in doc 12 and nowhere else; filler
        // tokens are all distinct from text tokens.
        let mut docs: Vec<Document> = (0..16u32)
            .map(|i| doc(&[300 + 3 * i, 301 + 3 * i, 302 + 3 * i]))
            .collect();
        docs[12] = doc(&[100, 101, 102, 103, 104, 105, 106, 107]);
        let t = Transcript::from_docs(docs, 400).unwrap();
        let idx = build_index(&t, 8, 8, 1.0, &RandomSource::new(0)).unwrap();
        let text = bundle(vec![doc(&[200, 100, 101, 102, 103, 104, 105, 106, 107, 201])]);
        let profile = match_profile(&idx, &text);
        let mut want = vec![0u64; 8];
        want[6] = 1;
        assert_eq!(profile.counts, want);
    }

    #[test]
    fn profile_matches_brute_force_scan() {
        // Independent oracle: membership by scanning raw partition docs,
        // same greedy policy, no index.
        let t = random_corpus(50, 25, 6, 17);
        let k = 5;
        let n_max = 6;
        let idx = build_index(&t, k, n_max, 1.0, &RandomSource::new(3)).unwrap();
        let text = {
            let mut rng = RandomSource::new(99).rng();
            bundle(
                (0..8)
                    .map(|_| {
                        let len = rng.random_range(5..=40usize);
                        doc(&(0..len).map(|_| rng.random_range(0..6u32)).collect::<Vec<_>>())
                    })
                    .collect(),
            )
        };

        let order = t.order();
        let sizes = block_sizes(t.len(), k);
        let mut part_docs: Vec<Vec<&Document>> = Vec::new();
        let mut cursor = 0;
        for size in sizes {
            part_docs.push(
                order[cursor..cursor + size]
                    .iter()
                    .map(|&e| &t.entries()[e].doc)
                    .collect(),
            );
            cursor += size;
        }
        let occurs_in = |gram: &[u32], p: usize| -> bool {
            part_docs[p].iter().any(|d| {
                d.len() >= gram.len() && d.ids().windows(gram.len()).any(|w| w == gram)
            })
        };
        let mut want = vec![0u64; k];
        for d in text.docs() {
            let ids = d.ids();
            let mut pos = 0;
            while pos < ids.len() {
                let mut advanced = false;
                for j in (1..=n_max.min(ids.len() - pos)).rev() {
                    let gram = &ids[pos..pos + j];
                    let holders: Vec<usize> = (0..k).filter(|&p| occurs_in(gram, p)).collect();
                    if !holders.is_empty() {
                        if j >= 2 {
                            for p in holders {
                                want[p] += 1;
                            }
                        }
                        pos += j;
                        advanced = true;
                        break;
                    }
                }
                if !advanced {
                    pos += 1;
                }
            }
        }
        assert_eq!(match_profile(&idx, &text).counts, want);
    }

    #[test]
    fn profile_ignores_document_order() {
        let t = random_corpus(30, 15, 8, 23);
        let idx = build_index(&t, 3, 4, 1.0, &RandomSource::new(0)).unwrap();
        let a = doc(&[1, 2, 3, 4, 5]);
        let b = doc(&[5, 4, 3, 2, 1, 0]);
        let fwd = match_profile(&idx, &bundle(vec![a.clone(), b.clone()]));
        let rev = match_profile(&idx, &bundle(vec![b, a]));
        assert_eq!(fwd, rev);
    }

    #[test]
    fn index_build_commutes_with_step_relabeling() {
        // One partition per example: relabeling steps by a permutation and
        // rebuilding gives exactly the permuted per-partition profile, at
        // full rate and subsampled alike.
        for rate in [1.0, 0.5] {
            let t = random_corpus(8, 12, 6, 29);
            let r = RandomSource::new(7);
            let idx = build_index(&t, 8, 4, rate, &r).unwrap();
            let perm = crate::transcript::random_step_permutation(8, &RandomSource::new(41));
            let relabeled = t.relabel_steps(&perm);
            let idx_perm = build_index(&relabeled, 8, 4, rate, &r).unwrap();
            let text = {
                let mut rng = RandomSource::new(101).rng();
                bundle(vec![doc(&(0..60)
                    .map(|_| rng.random_range(0..6u32))
                    .collect::<Vec<_>>())])
            };
            let base = match_profile(&idx, &text);
            let perm_profile = match_profile(&idx_perm, &text);
            // Example at old step s sits at partition s; after relabeling
            // it sits at partition perm[s - 1].
            for s in 1..=8usize {
                assert_eq!(
                    base.counts[s - 1],
                    perm_profile.counts[perm[s - 1] as usize - 1],
                    "rate {rate}, step {s}"
                );
            }
        }
    }

    #[test]
    fn strictly_increasing_profile_gives_rho_one() {
        let test = partition_test_from_chi(vec![1.0, 2.0, 5.0, 9.0]).unwrap();
        assert_eq!(test.spearman.unwrap().rho, 1.0);
        assert_eq!(test.p_one_sided, 0.0);
        assert!(!test.degenerate);
    }

    #[test]
    fn constant_profile_reports_p_one() {
        let test = partition_test_from_chi(vec![3.0, 3.0, 3.0, 3.0]).unwrap();
        assert!(test.degenerate);
        assert!(test.spearman.is_none());
        assert_eq!(test.p_one_sided, 1.0);
        // Too few partitions to rank at all is an error, not a flag.
        assert!(matches!(
            partition_test_from_chi(vec![1.0, 2.0]),
            Err(Error::TooFewExamples { min: 3, found: 2 })
        ));
    }

    #[test]
    fn duplicated_corpus_degenerates_likelihood_test() {
        // Four identical partitions of three docs each: the per-partition
        // models are identical, so chi is constant.
        let block = vec![doc(&[1, 2, 3, 4]), doc(&[2, 3]), doc(&[4, 1, 2])];
        let docs: Vec<Document> = (0..4).flat_map(|_| block.clone()).collect();
        let t = Transcript::from_docs(docs, 8).unwrap();
        let text = bundle(vec![doc(&[1, 2, 3])]);
        let test = partition_likelihood_test(&t, 4, &text, 2, 0.5).unwrap();
        assert!(test.degenerate);
        assert_eq!(test.p_one_sided, 1.0);
    }

    #[test]
    fn verbatim_text_from_last_partition_scores_highest_there() {
        let t = random_corpus(40, 12, 16, 51);
        let k = 4;
        // The bundle is drawn verbatim from the final partition's docs.
        let order = t.order();
        let last_block: Vec<Document> = order[30..40]
            .iter()
            .map(|&e| t.entries()[e].doc.clone())
            .collect();
        let text = bundle(last_block);
        let test = partition_likelihood_test(&t, k, &text, 3, 0.1).unwrap();
        let max = test.chi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(test.chi[k - 1], max, "chi {:?}", test.chi);
    }

    #[test]
    fn index_file_round_trips_bit_exact() {
        let t = random_corpus(30, 15, 8, 61);
        let idx = build_index(&t, 5, 4, 0.8, &RandomSource::new(8)).unwrap();
        let mut bytes = Vec::new();
        write_index(&idx, &mut bytes).unwrap();
        let back = read_index(&bytes[..]).unwrap();
        assert_eq!(back, idx);
        let mut bytes2 = Vec::new();
        write_index(&back, &mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
        let mut broken = bytes.clone();
        broken[4] = b'9';
        assert!(read_index(&broken[..]).is_err());
    }

    #[test]
    fn permuting_profile_labels_equals_rerunning_the_test() {
        // The permutation engine can act on the profile alone: permuting
        // partition labels and recomputing Spearman equals relabeling the
        // transcript, rebuilding, and rerunning end to end (one example
        // per partition).
        let t = random_corpus(9, 10, 4, 71);
        let r = RandomSource::new(2);
        let idx = build_index(&t, 9, 3, 1.0, &r).unwrap();
        let text = {
            let mut rng = RandomSource::new(55).rng();
            bundle(vec![doc(&(0..50)
                .map(|_| rng.random_range(0..4u32))
                .collect::<Vec<_>>())])
        };
        let base = match_profile(&idx, &text);
        for pseed in [1u64, 2, 3] {
            let perm = crate::transcript::random_step_permutation(9, &RandomSource::new(pseed));
            let rebuilt = build_index(&t.relabel_steps(&perm), 9, 3, 1.0, &r).unwrap();
            let full = partition_test_from_chi(
                match_profile(&rebuilt, &text)
                    .counts
                    .iter()
                    .map(|&c| c as f64)
                    .collect(),
            )
            .unwrap();
            let mut shortcut_chi = vec![0.0; 9];
            for s in 1..=9usize {
                shortcut_chi[perm[s - 1] as usize - 1] = base.counts[s - 1] as f64;
            }
            let shortcut = partition_test_from_chi(shortcut_chi).unwrap();
            assert_eq!(
                full.p_one_sided.to_bits(),
                shortcut.p_one_sided.to_bits(),
                "perm seed {pseed}"
            );
        }
    }
}
