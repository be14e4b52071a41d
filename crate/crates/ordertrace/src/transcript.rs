//! Training-run transcripts: which document was visited at which step.
//!
//! A [`Transcript`] is the unit every test in this crate consumes: a bag of
//! (document, step) pairs over a fixed vocabulary, with steps in
//! `1..=num_steps`. Several entries may share a step (a minibatch), and a
//! document may appear at several steps (multiple epochs). Steps are
//! optimizer-step indices; nothing here assumes one document per step.
//!
//! The interchange format is JSON Lines: a header object
//! `{"num_steps": N, "vocab": V}` followed by one `{"tokens": [...],
//! "step": s}` object per entry, LF-terminated.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::rng::RandomSource;
use crate::Result;

/// Index into a vocabulary of size `V`; valid ids are `0..V` where `V` is
/// fixed by the owning transcript or model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

/// An immutable, non-empty token sequence. Cheap to clone: the token buffer
/// is shared, which keeps the permutation engine allocation-light.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Document {
    tokens: Arc<[u32]>,
}

impl Document {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyDocument);
        }
        Ok(Self {
            tokens: tokens.into(),
        })
    }

    /// Byte-level tokenization: each byte is its own token, vocabulary 256.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::new(bytes.iter().map(|&b| b as u32).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Raw token ids, for windowed scans.
    pub fn ids(&self) -> &[u32] {
        &self.tokens
    }

    pub fn get(&self, i: usize) -> TokenId {
        TokenId(self.tokens[i])
    }

    /// Largest token id plus one; zero never occurs (documents are
    /// non-empty).
    pub fn max_id(&self) -> u32 {
        *self.tokens.iter().max().expect("non-empty") + 1
    }
}

/// One visited example: `doc` was trained on at optimizer step `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub doc: Document,
    pub step: u64,
}

/// The texts the audited party published, treated jointly as one body of
/// evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBundle {
    docs: Vec<Document>,
}

impl TextBundle {
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::InvalidParameter("empty text bundle".into()));
        }
        Ok(Self { docs })
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn total_tokens(&self) -> usize {
        self.docs.iter().map(Document::len).sum()
    }
}

/// A complete record of a training run's data order.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    entries: Vec<Entry>,
    num_steps: u64,
    vocab: u32,
}

impl Transcript {
    /// Validates steps against `1..=num_steps` and tokens against `vocab`.
    pub fn new(entries: Vec<Entry>, num_steps: u64, vocab: u32) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidTranscript("no entries".into()));
        }
        if num_steps == 0 {
            return Err(Error::InvalidTranscript("num_steps must be >= 1".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.step == 0 || e.step > num_steps {
                return Err(Error::InvalidTranscript(format!(
                    "entry {i} has step {} outside 1..={num_steps}",
                    e.step
                )));
            }
            for &t in e.doc.ids() {
                if t >= vocab {
                    return Err(Error::TokenOutOfRange { id: t, vocab });
                }
            }
        }
        Ok(Self {
            entries,
            num_steps,
            vocab,
        })
    }

    /// One document per step, in the order given: doc `i` at step `i + 1`.
    pub fn from_docs(docs: Vec<Document>, vocab: u32) -> Result<Self> {
        let n = docs.len() as u64;
        let entries = docs
            .into_iter()
            .enumerate()
            .map(|(i, doc)| Entry {
                doc,
                step: i as u64 + 1,
            })
            .collect();
        Self::new(entries, n, vocab)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_steps(&self) -> u64 {
        self.num_steps
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    /// Entry indices sorted by (step, original position); the canonical
    /// training order.
    pub fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.entries.len()).collect();
        idx.sort_by_key(|&i| (self.entries[i].step, i));
        idx
    }

    /// Applies a step-relabeling map (`map[s - 1]` is the new label of step
    /// `s`). Entries keep their position; only labels move, so entries
    /// sharing a step still share one afterwards.
    pub fn relabel_steps(&self, map: &[u64]) -> Transcript {
        debug_assert_eq!(map.len() as u64, self.num_steps);
        let entries = self
            .entries
            .iter()
            .map(|e| Entry {
                doc: e.doc.clone(),
                step: map[(e.step - 1) as usize],
            })
            .collect();
        Transcript {
            entries,
            num_steps: self.num_steps,
            vocab: self.vocab,
        }
    }
}

/// A uniformly random permutation of `1..=n`, as a relabeling map.
pub fn random_step_permutation(n: u64, r: &RandomSource) -> Vec<u64> {
    let mut perm: Vec<u64> = (1..=n).collect();
    perm.shuffle(&mut r.rng());
    perm
}

/// Relabels steps by a fresh uniform permutation of `1..=num_steps`.
///
/// This is the null move of every test here: under a random data order,
/// a shuffled transcript is exchangeable with the original.
pub fn shuffle_transcript(t: &Transcript, r: &RandomSource) -> Transcript {
    let perm = random_step_permutation(t.num_steps(), r);
    t.relabel_steps(&perm)
}

/// Draws `k` distinct entries uniformly without replacement, preserving
/// entry order, step labels, and `num_steps`.
pub fn subsample_transcript(t: &Transcript, k: usize, r: &RandomSource) -> Result<Transcript> {
    if k == 0 || k > t.len() {
        return Err(Error::SampleTooLarge {
            requested: k,
            available: t.len(),
        });
    }
    let mut chosen = rand::seq::index::sample(&mut r.rng(), t.len(), k).into_vec();
    chosen.sort_unstable();
    let entries = chosen
        .into_iter()
        .map(|i| t.entries()[i].clone())
        .collect();
    Ok(Transcript {
        entries,
        num_steps: t.num_steps(),
        vocab: t.vocab(),
    })
}

/// Contiguous, ordered, non-overlapping step ranges covering `1..=num_steps`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochMap {
    ranges: Vec<(u64, u64)>,
}

impl EpochMap {
    /// `k` near-equal contiguous ranges over `1..=num_steps`; earlier ranges
    /// take the remainder.
    pub fn uniform(num_steps: u64, k: usize) -> Result<Self> {
        if k == 0 || k as u64 > num_steps {
            return Err(Error::InvalidParameter(format!(
                "cannot split {num_steps} steps into {k} epochs"
            )));
        }
        let base = num_steps / k as u64;
        let extra = num_steps % k as u64;
        let mut ranges = Vec::with_capacity(k);
        let mut start = 1;
        for i in 0..k as u64 {
            let len = base + if i < extra { 1 } else { 0 };
            ranges.push((start, start + len - 1));
            start += len;
        }
        Ok(Self { ranges })
    }

    /// Validates that `ranges` tile `1..=num_steps` exactly, in order.
    pub fn from_ranges(ranges: Vec<(u64, u64)>, num_steps: u64) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::InvalidParameter("no epoch ranges".into()));
        }
        let mut expect = 1;
        for &(a, b) in &ranges {
            if a != expect || b < a {
                return Err(Error::InvalidParameter(format!(
                    "epoch ranges must tile 1..={num_steps}; got ({a}, {b}) where {expect} was expected"
                )));
            }
            expect = b + 1;
        }
        if expect != num_steps + 1 {
            return Err(Error::InvalidParameter(format!(
                "epoch ranges stop at {} but the transcript has {num_steps} steps",
                expect - 1
            )));
        }
        Ok(Self { ranges })
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn range(&self, epoch: usize) -> Option<(u64, u64)> {
        self.ranges.get(epoch).copied()
    }
}

/// Restricts a transcript to one epoch, remapping steps so the epoch starts
/// at 1. The relative order within the epoch is untouched.
pub fn filter_epoch(t: &Transcript, epochs: &EpochMap, epoch: usize) -> Result<Transcript> {
    let (start, end) = epochs.range(epoch).ok_or(Error::UnknownEpoch(epoch))?;
    let entries: Vec<Entry> = t
        .entries()
        .iter()
        .filter(|e| e.step >= start && e.step <= end)
        .map(|e| Entry {
            doc: e.doc.clone(),
            step: e.step - start + 1,
        })
        .collect();
    if entries.is_empty() {
        return Err(Error::EmptyEpoch(epoch));
    }
    Ok(Transcript {
        entries,
        num_steps: end - start + 1,
        vocab: t.vocab(),
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    num_steps: u64,
    vocab: u32,
}

#[derive(Serialize, Deserialize)]
struct Line {
    tokens: Vec<u32>,
    step: u64,
}

/// Writes the JSONL interchange form.
pub fn write_transcript<W: Write>(t: &Transcript, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    serde_json::to_writer(
        &mut w,
        &Header {
            num_steps: t.num_steps(),
            vocab: t.vocab(),
        },
    )
    .map_err(io_err)?;
    w.write_all(b"\n")?;
    for e in t.entries() {
        serde_json::to_writer(
            &mut w,
            &Line {
                tokens: e.doc.ids().to_vec(),
                step: e.step,
            },
        )
        .map_err(io_err)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the JSONL interchange form, validating as [`Transcript::new`].
/// `path` only labels error messages.
pub fn read_transcript<R: Read>(r: R, path: &str) -> Result<Transcript> {
    let mut lines = BufReader::new(r).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file; expected a header object"))??;
    let header: Header = serde_json::from_str(&header_line)
        .map_err(|e| parse_err(path, 1, &format!("bad header: {e}")))?;
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Line = serde_json::from_str(&line)
            .map_err(|e| parse_err(path, i + 2, &format!("bad entry: {e}")))?;
        let doc = Document::new(rec.tokens)
            .map_err(|e| parse_err(path, i + 2, &e.to_string()))?;
        entries.push(Entry {
            doc,
            step: rec.step,
        });
    }
    Transcript::new(entries, header.num_steps, header.vocab)
}

pub(crate) fn io_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub(crate) fn parse_err(path: &str, line: usize, message: &str) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.to_string(),
    }
}

/// Entry count per step label, used by tests and the harness.
pub fn step_histogram(t: &Transcript) -> HashMap<u64, usize> {
    let mut h = HashMap::new();
    for e in t.entries() {
        *h.entry(e.step).or_insert(0) += 1;
    }
    h
}
