//! Coarse dot-product retrieval, coarse-to-fine re-ranking and recall@N.
//!
//! Coarse-to-fine (CTF) retrieval ranks every target with a cheap dot product,
//! keeps the best `kc`, and asks the expensive [`FineScorer`] only about those.
//! With `kc` equal to the number of targets it reduces to exhaustive fine
//! ranking; with small `kc` the fine scorer is called `queries × kc` times.

use std::cmp::Ordering;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featstore::{FeatureMatrix, PairManifest};
use crate::losses::{ScoreKind, ScoreMatrix};
use crate::vecmath::dot_f32;

/// `S[i][j] = <query_i, target_j>`.
pub fn coarse_scores(queries: &FeatureMatrix, targets: &FeatureMatrix) -> Result<ScoreMatrix> {
    if queries.cols() != targets.cols() {
        return Err(Error::DimMismatch { expected: queries.cols(), found: targets.cols() });
    }
    let values: Vec<f64> = (0..queries.rows())
        .into_par_iter()
        .flat_map_iter(|i| {
            let q = queries.row(i);
            targets.iter_rows().map(move |t| dot_f32(q, t))
        })
        .collect();
    ScoreMatrix::new(queries.rows(), targets.rows(), values, ScoreKind::Coarse)
}

fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest scores, best first, lower index first on ties.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = by_score_then_index(scores);
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, &cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(&cmp);
    idx
}

/// An expensive pairwise scorer. Implementations count their own calls.
pub trait FineScorer: Sync {
    fn score(&self, query: usize, candidate: usize) -> f64;

    fn call_count(&self) -> u64;

    /// Whether `score` may be called from several threads at once.
    fn is_concurrent(&self) -> bool {
        true
    }
}

/// Fine scores looked up in a precomputed `queries × targets` table.
#[derive(Debug)]
pub struct TableScorer {
    table: FeatureMatrix,
    calls: AtomicU64,
}

impl TableScorer {
    pub fn new(table: FeatureMatrix) -> Self {
        Self { table, calls: AtomicU64::new(0) }
    }

    pub fn table(&self) -> &FeatureMatrix {
        &self.table
    }

    /// The same table with queries and targets swapped.
    pub fn transposed(&self) -> Self {
        Self::new(self.table.transpose())
    }
}

impl FineScorer for TableScorer {
    fn score(&self, query: usize, candidate: usize) -> f64 {
        self.calls.fetch_add(1, AtomicOrdering::Relaxed);
        f64::from(self.table.get(query, candidate))
    }

    fn call_count(&self) -> u64 {
        self.calls.load(AtomicOrdering::Relaxed)
    }
}

/// Wraps a closure as a [`FineScorer`].
pub struct FnScorer<F> {
    f: F,
    calls: AtomicU64,
    concurrent: bool,
}

impl<F: Fn(usize, usize) -> f64 + Sync> FnScorer<F> {
    pub fn new(f: F) -> Self {
        Self { f, calls: AtomicU64::new(0), concurrent: true }
    }

    /// Marks the scorer as serial-only.
    pub fn serial(mut self) -> Self {
        self.concurrent = false;
        self
    }
}

impl<F: Fn(usize, usize) -> f64 + Sync> FineScorer for FnScorer<F> {
    fn score(&self, query: usize, candidate: usize) -> f64 {
        self.calls.fetch_add(1, AtomicOrdering::Relaxed);
        (self.f)(query, candidate)
    }

    fn call_count(&self) -> u64 {
        self.calls.load(AtomicOrdering::Relaxed)
    }

    fn is_concurrent(&self) -> bool {
        self.concurrent
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query: usize,
    /// Target indices, best first.
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
}

fn rerank(query: usize, pool: &[usize], fine: &dyn FineScorer, n: usize) -> RankedList {
    let fine_scores: Vec<f64> = pool.iter().map(|&c| fine.score(query, c)).collect();
    // ties resolve by target index, not pool position
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_unstable_by(|&a, &b| fine_scores[b].total_cmp(&fine_scores[a]).then(pool[a].cmp(&pool[b])));
    order.truncate(n);
    RankedList {
        query,
        candidates: order.iter().map(|&k| pool[k]).collect(),
        scores: order.iter().map(|&k| fine_scores[k]).collect(),
    }
}

fn map_queries<T: Send>(n_queries: usize, concurrent: bool, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if concurrent {
        (0..n_queries).into_par_iter().map(f).collect()
    } else {
        (0..n_queries).map(f).collect()
    }
}

/// Coarse-to-fine retrieval. `kc` larger than the number of targets is capped
/// to it, so the fine scorer is called `queries × min(kc, targets)` times.
pub fn ctf_retrieve(
    queries: &FeatureMatrix,
    targets: &FeatureMatrix,
    fine: &dyn FineScorer,
    kc: usize,
    n: usize,
) -> Result<Vec<RankedList>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    if kc < n {
        return Err(Error::KcSmallerThanN { kc, n });
    }
    if queries.cols() != targets.cols() {
        return Err(Error::DimMismatch { expected: queries.cols(), found: targets.cols() });
    }
    Ok(map_queries(queries.rows(), fine.is_concurrent(), |i| {
        let q = queries.row(i);
        let coarse: Vec<f64> = targets.iter_rows().map(|t| dot_f32(q, t)).collect();
        rerank(i, &top_k(&coarse, kc), fine, n)
    }))
}

/// Ranks every target of every query by fine score alone.
pub fn exhaustive_retrieve(n_queries: usize, n_targets: usize, fine: &dyn FineScorer, n: usize) -> Vec<RankedList> {
    let pool: Vec<usize> = (0..n_targets).collect();
    map_queries(n_queries, fine.is_concurrent(), |i| rerank(i, &pool, fine, n))
}

/// Top-`n` by coarse score only.
pub fn coarse_retrieve(queries: &FeatureMatrix, targets: &FeatureMatrix, n: usize) -> Result<Vec<RankedList>> {
    let s = coarse_scores(queries, targets)?;
    Ok((0..s.rows())
        .map(|i| {
            let candidates = top_k(s.row(i), n);
            let scores = candidates.iter().map(|&c| s.get(i, c)).collect();
            RankedList { query: i, candidates, scores }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Queries are captions (manifest record order), targets are images.
    SpeechToImage,
    /// Queries are images (first-appearance order), targets are captions.
    ImageToSpeech,
}

/// Fraction of queries with at least one ground-truth match among their
/// first `n` candidates.
pub fn recall_at_n(ranked: &[RankedList], manifest: &PairManifest, n: usize, direction: Direction) -> Result<f64> {
    if ranked.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n_queries = match direction {
        Direction::SpeechToImage => manifest.n_captions(),
        Direction::ImageToSpeech => manifest.n_images(),
    };
    let mut hits = 0usize;
    for list in ranked {
        if list.query >= n_queries {
            return Err(Error::UnknownQuery(list.query));
        }
        let hit = list.candidates.iter().take(n).any(|&c| match direction {
            Direction::SpeechToImage => manifest.image_of(list.query) == c,
            Direction::ImageToSpeech => c < manifest.n_captions() && manifest.image_of(c) == list.query,
        });
        hits += usize::from(hit);
    }
    Ok(hits as f64 / ranked.len() as f64)
}
