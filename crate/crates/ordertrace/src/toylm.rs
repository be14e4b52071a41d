//! A tiny interpolated n-gram model with exponentially decayed counts.
//!
//! This is the desk-scale stand-in for a neural language model. It has the
//! one property the tests need, by construction: training order matters.
//! Every n-gram occurrence adds weight 1, and all weights decay by a factor
//! `gamma` per training step, so an example seen later carries strictly
//! more weight than the same example seen earlier. At `gamma = 1` the model
//! collapses to a plain add-alpha count model and order independence is
//! exact, which gives the null-hypothesis regime a closed form.
//!
//! Probabilities interpolate add-alpha estimates across orders j = n..1
//! with weight `LAMBDA` on the higher order:
//!
//! ```text
//! P_1(tok)        = (w(tok) + a) / (W + aV)
//! P_j(tok | ctx)  = LAMBDA * Q_j(tok | ctx_j) + (1 - LAMBDA) * P_{j-1}(tok | ctx_{j-1})
//! ```
//!
//! where `Q_j` is the add-alpha estimate on decayed j-gram weights and
//! `ctx_j` is the last j − 1 context tokens. An untrained model is exactly
//! uniform.
//!
//! Decay is applied lazily: each cell stores (weight, last-touched step)
//! and scales by `gamma^(now - then)` when read or updated. The tests pin
//! this to an eagerly rescaled reference implementation.
//!
//! Snapshots serialize to a little-endian binary format, magic `PTLM1`,
//! with contexts sorted so the bytes are a pure function of model state.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::lm::{LanguageModel, Trainer};
use crate::rng::RandomSource;
use crate::transcript::{Document, TokenId, Transcript};
use crate::Result;

/// Interpolation weight on the higher order at every level.
pub const LAMBDA: f64 = 0.5;

const MAGIC: &[u8; 5] = b"PTLM1";

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    weight: f64,
    /// Clock value at which `weight` was last materialized.
    ts: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextStats {
    /// BTreeMap so every sum over a context runs in token order: results
    /// are independent of insertion history and snapshots are canonical.
    tokens: std::collections::BTreeMap<u32, Cell>,
}

/// Decayed-count interpolated n-gram language model.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayNgramLm {
    order: usize,
    vocab: u32,
    decay: f64,
    smoothing: f64,
    clock: u64,
    table: HashMap<Box<[u32]>, ContextStats>,
}

impl DecayNgramLm {
    /// `order` is the longest n-gram stored (so contexts reach order − 1
    /// tokens), `decay` in (0, 1], `smoothing` > 0.
    pub fn new(order: usize, vocab: u32, decay: f64, smoothing: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidParameter("order must be >= 1".into()));
        }
        if vocab < 2 {
            return Err(Error::InvalidParameter("vocab must be >= 2".into()));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "decay must lie in (0, 1], got {decay}"
            )));
        }
        if !(smoothing > 0.0 && smoothing.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "smoothing must be positive, got {smoothing}"
            )));
        }
        Ok(Self {
            order,
            vocab,
            decay,
            smoothing,
            clock: 0,
            table: HashMap::new(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    /// Training steps consumed so far.
    pub fn clock(&self) -> u64 {
        self.clock
    }

    fn decay_factor(&self, delta: u64) -> f64 {
        // powi keeps one deterministic code path; toy scales stay far
        // below i32::MAX steps.
        self.decay.powi(i32::try_from(delta).expect("clock delta fits i32"))
    }

    /// Trains on one document: advances the clock by one step and adds
    /// weight 1 to every j-gram of the document for j = 1..=order.
    /// Validates the document before mutating anything.
    pub fn train_step(&mut self, doc: &Document) -> Result<()> {
        for &t in doc.ids() {
            if t >= self.vocab {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    vocab: self.vocab,
                });
            }
        }
        self.clock += 1;
        let now = self.clock;
        let ids = doc.ids();
        for j in 1..=self.order.min(ids.len()) {
            for w in ids.windows(j) {
                let (ctx, tok) = w.split_at(j - 1);
                let stats = self
                    .table
                    .entry(ctx.to_vec().into_boxed_slice())
                    .or_default();
                let cell = stats.tokens.entry(tok[0]).or_insert(Cell { weight: 0.0, ts: now });
                if cell.ts < now {
                    cell.weight *= self.decay.powi(
                        i32::try_from(now - cell.ts).expect("clock delta fits i32"),
                    );
                    cell.ts = now;
                }
                cell.weight += 1.0;
            }
        }
        Ok(())
    }

    /// Decayed weight of (context, token) and total decayed weight of the
    /// context, both as of the current clock.
    fn context_mass(&self, ctx: &[u32]) -> Option<(&ContextStats, f64)> {
        let stats = self.table.get(ctx)?;
        let total: f64 = stats
            .tokens
            .values()
            .map(|c| c.weight * self.decay_factor(self.clock - c.ts))
            .sum();
        Some((stats, total))
    }

    fn addalpha(&self, ctx: &[u32], token: u32) -> f64 {
        let denom_base = self.smoothing * self.vocab as f64;
        match self.context_mass(ctx) {
            None => 1.0 / self.vocab as f64,
            Some((stats, total)) => {
                let w = stats
                    .tokens
                    .get(&token)
                    .map(|c| c.weight * self.decay_factor(self.clock - c.ts))
                    .unwrap_or(0.0);
                (w + self.smoothing) / (total + denom_base)
            }
        }
    }

    /// P(token | context), blending orders from unigram upward.
    pub fn prob(&self, context: &[u32], token: TokenId) -> f64 {
        assert!(token.0 < self.vocab, "token outside vocabulary");
        let mut p = self.addalpha(&[], token.0);
        let max_ctx = (self.order - 1).min(context.len());
        for used in 1..=max_ctx {
            let ctx = &context[context.len() - used..];
            let q = self.addalpha(ctx, token.0);
            p = LAMBDA * q + (1.0 - LAMBDA) * p;
        }
        p
    }

    /// Full next-token distribution, in token-id order. Computed per order
    /// so it costs O(order * (V + branching)) rather than V separate
    /// lookups.
    pub fn next_token_dist(&self, context: &[u32]) -> Vec<f64> {
        let v = self.vocab as usize;
        let denom_base = self.smoothing * self.vocab as f64;
        let mut dist = vec![0.0; v];
        let fill = |dist: &mut Vec<f64>, ctx: &[u32]| match self.context_mass(ctx) {
            None => {
                let u = 1.0 / v as f64;
                for p in dist.iter_mut() {
                    *p = u;
                }
            }
            Some((stats, total)) => {
                let base = self.smoothing / (total + denom_base);
                for p in dist.iter_mut() {
                    *p = base;
                }
                for (&tok, cell) in &stats.tokens {
                    dist[tok as usize] = (cell.weight * self.decay_factor(self.clock - cell.ts)
                        + self.smoothing)
                        / (total + denom_base);
                }
            }
        };
        fill(&mut dist, &[]);
        let max_ctx = (self.order - 1).min(context.len());
        let mut level = vec![0.0; v];
        for used in 1..=max_ctx {
            let ctx = &context[context.len() - used..];
            fill(&mut level, ctx);
            for (p, &q) in dist.iter_mut().zip(&level) {
                *p = LAMBDA * q + (1.0 - LAMBDA) * *p;
            }
        }
        dist
    }

    /// Autoregressive sampling: returns `prefix` extended by `max_len`
    /// drawn tokens. Temperature reshapes each conditional as p^(1/T);
    /// T = 0 is the argmax limit (lowest token id on exact ties).
    pub fn sample(
        &self,
        prefix: &[u32],
        max_len: usize,
        temperature: f64,
        r: &RandomSource,
    ) -> Result<Document> {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be finite and >= 0, got {temperature}"
            )));
        }
        if prefix.is_empty() && max_len == 0 {
            return Err(Error::EmptyDocument);
        }
        let mut rng = r.rng();
        let mut out: Vec<u32> = prefix.to_vec();
        for _ in 0..max_len {
            let dist = self.next_token_dist(&out);
            let tok = if temperature == 0.0 {
                argmax(&dist)
            } else {
                draw(&reshape(&dist, temperature), &mut rng)
            };
            out.push(tok);
        }
        Document::new(out)
    }

    /// A copy trained further on `docs`, one step per document per pass.
    pub fn clone_and_finetune(&self, docs: &[Document], passes: usize) -> Result<Self> {
        let mut m = self.clone();
        for _ in 0..passes {
            for d in docs {
                m.train_step(d)?;
            }
        }
        Ok(m)
    }

    /// Serializes the full model state; canonical bytes for equal states.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.order as u32).to_le_bytes())?;
        w.write_all(&self.vocab.to_le_bytes())?;
        w.write_all(&self.decay.to_le_bytes())?;
        w.write_all(&self.smoothing.to_le_bytes())?;
        w.write_all(&LAMBDA.to_le_bytes())?;
        w.write_all(&self.clock.to_le_bytes())?;
        let mut ctxs: Vec<&Box<[u32]>> = self.table.keys().collect();
        ctxs.sort_by(|a, b| (a.len(), a.as_ref()).cmp(&(b.len(), b.as_ref())));
        w.write_all(&(ctxs.len() as u64).to_le_bytes())?;
        for ctx in ctxs {
            let stats = &self.table[ctx];
            w.write_all(&[ctx.len() as u8])?;
            for &t in ctx.iter() {
                w.write_all(&t.to_le_bytes())?;
            }
            w.write_all(&(stats.tokens.len() as u32).to_le_bytes())?;
            for (&tok, cell) in &stats.tokens {
                w.write_all(&tok.to_le_bytes())?;
                w.write_all(&cell.weight.to_le_bytes())?;
                w.write_all(&cell.ts.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            format: "PTLM1",
            message: msg.to_string(),
        };
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("wrong magic bytes"));
        }
        let order = read_u32(&mut r)? as usize;
        let vocab = read_u32(&mut r)?;
        let decay = read_f64(&mut r)?;
        let smoothing = read_f64(&mut r)?;
        let lambda = read_f64(&mut r)?;
        if lambda != LAMBDA {
            return Err(bad("unsupported interpolation weight"));
        }
        let mut m = Self::new(order, vocab, decay, smoothing)
            .map_err(|e| bad(&e.to_string()))?;
        m.clock = read_u64(&mut r)?;
        let n_ctx = read_u64(&mut r)?;
        for _ in 0..n_ctx {
            let mut len = [0u8; 1];
            r.read_exact(&mut len)?;
            if len[0] as usize >= order {
                return Err(bad("context longer than order allows"));
            }
            let mut ctx = Vec::with_capacity(len[0] as usize);
            for _ in 0..len[0] {
                ctx.push(read_u32(&mut r)?);
            }
            let n_tok = read_u32(&mut r)?;
            let mut stats = ContextStats::default();
            for _ in 0..n_tok {
                let tok = read_u32(&mut r)?;
                let weight = read_f64(&mut r)?;
                let ts = read_u64(&mut r)?;
                if tok >= vocab || ts > m.clock || !(weight > 0.0) {
                    return Err(bad("posting out of range"));
                }
                stats.tokens.insert(tok, Cell { weight, ts });
            }
            m.table.insert(ctx.into_boxed_slice(), stats);
        }
        Ok(m)
    }

    /// SHA-256 of the canonical snapshot bytes.
    pub fn snapshot_hash(&self) -> String {
        let mut bytes = Vec::new();
        self.write_snapshot(&mut bytes).expect("in-memory write");
        let mut h = Sha256::new();
        h.update(&bytes);
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
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

fn argmax(dist: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best as u32
}

fn reshape(dist: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return dist.to_vec();
    }
    // p^(1/T) via logs; alpha-smoothed probabilities are never zero.
    let inv = 1.0 / temperature;
    let logs: Vec<f64> = dist.iter().map(|&p| p.ln() * inv).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|&x| x / z).collect()
}

fn draw(dist: &[f64], rng: &mut ChaCha8Rng) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    (dist.len() - 1) as u32
}

impl LanguageModel for DecayNgramLm {
    fn vocab_size(&self) -> u32 {
        self.vocab
    }

    fn conditional_log_prob(&self, context: &[u32], token: TokenId) -> f64 {
        self.prob(context, token).ln()
    }

    fn sample_next(&self, prefix: &[u32], rng: &mut ChaCha8Rng) -> TokenId {
        TokenId(draw(&self.next_token_dist(prefix), rng))
    }
}

/// Deterministic trainer over [`DecayNgramLm`]: one training step per
/// transcript entry, visited in (step, position) order.
#[derive(Debug, Clone, Copy)]
pub struct DecayLmTrainer {
    pub order: usize,
    pub decay: f64,
    pub smoothing: f64,
}

impl DecayLmTrainer {
    pub fn new(order: usize, decay: f64, smoothing: f64) -> Self {
        Self {
            order,
            decay,
            smoothing,
        }
    }
}

impl Trainer for DecayLmTrainer {
    type Model = DecayNgramLm;
    type Checkpoint = DecayNgramLm;

    /// Counting is deterministic, so the seed is unused; it stays in the
    /// signature because the contract must hold for stochastic trainers.
    fn train(
        &self,
        t: &Transcript,
        from: Option<&Self::Checkpoint>,
        _r: &RandomSource,
    ) -> Result<Self::Model> {
        let mut m = match from {
            Some(cp) => {
                if cp.vocab_size() != t.vocab() {
                    return Err(Error::InvalidParameter(format!(
                        "checkpoint vocabulary {} does not match transcript vocabulary {}",
                        cp.vocab_size(),
                        t.vocab()
                    )));
                }
                cp.clone()
            }
            None => DecayNgramLm::new(self.order, t.vocab(), self.decay, self.smoothing)?,
        };
        for i in t.order() {
            m.train_step(&t.entries()[i].doc)?;
        }
        Ok(m)
    }

    fn checkpoint(&self, model: &Self::Model) -> Self::Checkpoint {
        model.clone()
    }

    fn checkpoint_hash(&self, c: &Self::Checkpoint) -> String {
        c.snapshot_hash()
    }

    fn finetune(
        &self,
        model: &Self::Model,
        docs: &[Document],
        passes: usize,
    ) -> Result<Self::Model> {
        model.clone_and_finetune(docs, passes)
    }
}
