//! Span-factored pseudo-probabilities over discrete unit sequences.
//!
//! A [`UnitLm`] scores a span of units given the rest of the sequence.
//! [`pseudo_logprob`] samples overlapping spans until about half the
//! sequence is covered and sums their log-probabilities. The shipped model
//! is [`NGramLm`], an interpolated add-k n-gram that conditions on the left
//! context only, so its span probability is the chain-rule product over the
//! span.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::UnitSequence;

/// Padding symbol placed before the first unit of every sequence.
pub const BOS: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanSpec {
    pub mean: f64,
    pub std: f64,
    pub coverage_target: f64,
    pub seed: u64,
}

impl Default for SpanSpec {
    fn default() -> Self {
        Self { mean: 5.0, std: 5.0, coverage_target: 0.5, seed: 42 }
    }
}

impl SpanSpec {
    pub fn new(mean: f64, std: f64, coverage_target: f64, seed: u64) -> Result<Self> {
        let spec = Self { mean, std, coverage_target, seed };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if !(self.mean.is_finite() && self.mean > 0.0) {
            return Err(Error::InvalidArgument(format!("span mean must be positive, got {}", self.mean)));
        }
        if !(self.std.is_finite() && self.std >= 0.0) {
            return Err(Error::InvalidArgument(format!("span std must be non-negative, got {}", self.std)));
        }
        if !(self.coverage_target > 0.0 && self.coverage_target <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "coverage target {} outside (0, 1]",
                self.coverage_target
            )));
        }
        Ok(())
    }
}

/// `(start, len)` spans whose union covers at least `coverage_target * t`
/// positions. The last span is kept whole, so coverage overshoots.
pub fn span_sample(t: usize, spec: &SpanSpec) -> Result<Vec<(usize, usize)>> {
    spec.validate()?;
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let target = spec.coverage_target * t as f64;
    let mut covered = vec![false; t];
    let mut count = 0usize;
    let mut spans = Vec::new();
    while (count as f64) < target {
        let z: f64 = rng.sample(StandardNormal);
        let len = (spec.mean + spec.std * z).round().clamp(1.0, t as f64) as usize;
        let start = rng.random_range(0..=t - len);
        for c in &mut covered[start..start + len] {
            if !*c {
                *c = true;
                count += 1;
            }
        }
        spans.push((start, len));
    }
    Ok(spans)
}

pub trait UnitLm {
    fn vocab_size(&self) -> usize;

    /// Log-probability of `units[start..start + len]` given the units
    /// outside the span.
    fn log_prob_span(&self, units: &[u32], start: usize, len: usize) -> Result<f64>;
}

/// Sum of span log-probabilities over the spans drawn by [`span_sample`].
pub fn pseudo_logprob(lm: &dyn UnitLm, units: &UnitSequence, spec: &SpanSpec) -> Result<f64> {
    span_sample(units.len(), spec)?
        .into_iter()
        .map(|(s, l)| lm.log_prob_span(&units.units, s, l))
        .sum()
}

/// Mean of [`pseudo_logprob`] over seeds `spec.seed + r` for `r < repeats`.
pub fn pseudo_logprob_repeated(lm: &dyn UnitLm, units: &UnitSequence, spec: &SpanSpec, repeats: usize) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let mut total = 0.0;
    for r in 0..repeats {
        let s = SpanSpec { seed: spec.seed.wrapping_add(r as u64), ..*spec };
        total += pseudo_logprob(lm, units, &s)?;
    }
    Ok(total / repeats as f64)
}

/// Fraction of pairs with `pos > neg`; ties count one half.
pub fn paired_accuracy(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.len() != neg.len() {
        return Err(Error::LengthMismatch { left: pos.len(), right: neg.len() });
    }
    if pos.is_empty() {
        return Err(Error::DegenerateInput("no pairs to compare"));
    }
    let wins: f64 = pos
        .iter()
        .zip(neg)
        .map(|(p, n)| match p.partial_cmp(n) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Equal) => 0.5,
            _ => 0.0,
        })
        .sum();
    Ok(wins / pos.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramLm {
    order: usize,
    vocab: usize,
    add_k: f64,
    weights: Vec<f64>,
    /// `tables[m]` holds contexts of length `m`.
    tables: Vec<HashMap<Vec<u32>, ContextCounts>>,
}

fn context_key(history: &[u32], len: usize) -> Vec<u32> {
    let pad = len.saturating_sub(history.len());
    let mut key = vec![BOS; pad];
    key.extend_from_slice(&history[history.len() - (len - pad)..]);
    key
}

pub fn ngram_train(sequences: &[UnitSequence], order: usize, add_k: f64) -> Result<NGramLm> {
    ngram_train_with_vocab(sequences, order, add_k, None)
}

/// Vocabulary defaults to the largest observed unit plus one.
pub fn ngram_train_with_vocab(
    sequences: &[UnitSequence],
    order: usize,
    add_k: f64,
    vocab: Option<usize>,
) -> Result<NGramLm> {
    if order == 0 {
        return Err(Error::InvalidArgument("order must be at least 1".into()));
    }
    if !(add_k.is_finite() && add_k > 0.0) {
        return Err(Error::InvalidArgument(format!("add-k constant must be positive, got {add_k}")));
    }
    if sequences.iter().all(|s| s.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let max_unit = sequences.iter().flat_map(|s| s.units.iter()).copied().max().unwrap_or(0);
    if max_unit == BOS {
        return Err(Error::InvalidArgument("unit id u32::MAX is reserved".into()));
    }
    let observed = max_unit as usize + 1;
    let vocab = match vocab {
        Some(v) if v < observed => return Err(Error::UnitOutOfVocab { unit: max_unit, vocab: v }),
        Some(v) => v,
        None => observed,
    };
    let mut tables = vec![HashMap::<Vec<u32>, ContextCounts>::new(); order];
    for seq in sequences {
        for t in 0..seq.len() {
            let w = seq.units[t];
            for (m, table) in tables.iter_mut().enumerate() {
                let entry = table.entry(context_key(&seq.units[..t], m)).or_default();
                entry.total += 1;
                *entry.next.entry(w).or_default() += 1;
            }
        }
    }
    let norm = (order * (order + 1) / 2) as f64;
    let weights = (1..=order).map(|m| m as f64 / norm).collect();
    Ok(NGramLm { order, vocab, add_k, weights, tables })
}

impl NGramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn add_k(&self) -> f64 {
        self.add_k
    }

    /// Interpolation weight per order, lowest order first.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.order {
            return Err(Error::LengthMismatch { left: weights.len(), right: self.order });
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("interpolation weights must be non-negative and sum to 1".into()));
        }
        self.weights = weights;
        Ok(self)
    }

    /// Observed contexts of length `len`, in unspecified order.
    pub fn contexts(&self, len: usize) -> impl Iterator<Item = &[u32]> + '_ {
        self.tables.get(len).into_iter().flat_map(|t| t.keys().map(Vec::as_slice))
    }

    /// `P(w | history)`, using the last `order - 1` units of `history`.
    pub fn prob(&self, history: &[u32], w: u32) -> Result<f64> {
        if w as usize >= self.vocab {
            return Err(Error::UnitOutOfVocab { unit: w, vocab: self.vocab });
        }
        let kv = self.add_k * self.vocab as f64;
        let mut p = 0.0;
        for (m, (table, lambda)) in self.tables.iter().zip(&self.weights).enumerate() {
            let (c_hw, c_h) = match table.get(&context_key(history, m)) {
                Some(c) => (c.next.get(&w).copied().unwrap_or(0), c.total),
                None => (0, 0),
            };
            p += lambda * (c_hw as f64 + self.add_k) / (c_h as f64 + kv);
        }
        Ok(p)
    }

    /// The full next-unit distribution after `history`.
    pub fn distribution(&self, history: &[u32]) -> Vec<f64> {
        (0..self.vocab as u32).map(|w| self.prob(history, w).expect("in vocabulary")).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec(&StoredLm::from(self)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let stored: StoredLm =
            serde_json::from_slice(&bytes).map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
        stored.try_into()
    }
}

impl UnitLm for NGramLm {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn log_prob_span(&self, units: &[u32], start: usize, len: usize) -> Result<f64> {
        if start + len > units.len() {
            return Err(Error::InvalidArgument(format!(
                "span ({start}, {len}) exceeds sequence length {}",
                units.len()
            )));
        }
        (start..start + len).map(|t| Ok(self.prob(&units[..t], units[t])?.ln())).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct StoredContext {
    context: Vec<u32>,
    total: u64,
    next: Vec<(u32, u64)>,
}

#[derive(Serialize, Deserialize)]
struct StoredLm {
    order: usize,
    vocab: usize,
    add_k: f64,
    weights: Vec<f64>,
    tables: Vec<Vec<StoredContext>>,
}

impl From<&NGramLm> for StoredLm {
    fn from(lm: &NGramLm) -> Self {
        let tables = lm
            .tables
            .iter()
            .map(|table| {
                let mut rows: Vec<StoredContext> = table
                    .iter()
                    .map(|(ctx, c)| {
                        let mut next: Vec<(u32, u64)> = c.next.iter().map(|(&w, &n)| (w, n)).collect();
                        next.sort_unstable();
                        StoredContext { context: ctx.clone(), total: c.total, next }
                    })
                    .collect();
                rows.sort_by(|a, b| a.context.cmp(&b.context));
                rows
            })
            .collect();
        Self { order: lm.order, vocab: lm.vocab, add_k: lm.add_k, weights: lm.weights.clone(), tables }
    }
}

impl TryFrom<StoredLm> for NGramLm {
    type Error = Error;

    fn try_from(s: StoredLm) -> Result<Self> {
        if s.order == 0 || s.tables.len() != s.order || s.vocab == 0 {
            return Err(Error::InvalidShape("n-gram tables do not match the stored order".into()));
        }
        let tables = s
            .tables
            .into_iter()
            .enumerate()
            .map(|(m, rows)| {
                rows.into_iter()
                    .map(|r| {
                        if r.context.len() != m {
                            return Err(Error::InvalidShape(format!("context of length {} in order-{} table", r.context.len(), m + 1)));
                        }
                        let next: HashMap<u32, u64> = r.next.into_iter().collect();
                        Ok((r.context, ContextCounts { total: r.total, next }))
                    })
                    .collect::<Result<HashMap<_, _>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let lm = NGramLm { order: s.order, vocab: s.vocab, add_k: s.add_k, weights: s.weights.clone(), tables };
        lm.with_weights(s.weights)
    }
}

#[derive(Serialize, Deserialize)]
struct UnitRecord {
    utterance_id: String,
    units: String,
}

/// Reads `{"utterance_id", "units": "3 1 4"}` records.
pub fn read_units(path: impl AsRef<Path>) -> Result<Vec<UnitSequence>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        let rec: UnitRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.utterance_id.is_empty() {
            return Err(Error::EmptyField { line: i + 1, field: "utterance_id" });
        }
        let units = rec
            .units
            .split_whitespace()
            .map(|u| u.parse::<u32>().map_err(|e| parse_err(format!("unit {u:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if units.is_empty() {
            return Err(Error::EmptyField { line: i + 1, field: "units" });
        }
        out.push(UnitSequence::new(rec.utterance_id, units)?);
    }
    Ok(out)
}

pub fn write_units(sequences: &[UnitSequence], path: impl AsRef<Path>) -> Result<()> {
    let records: Vec<UnitRecord> = sequences
        .iter()
        .map(|s| UnitRecord {
            utterance_id: s.utterance_id.clone(),
            units: s.units.iter().map(u32::to_string).collect::<Vec<_>>().join(" "),
        })
        .collect();
    crate::featstore::write_jsonl(&records, path)
}
