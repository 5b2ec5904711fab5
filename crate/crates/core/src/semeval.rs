//! Semantic similarity evaluation: pooled utterance vectors compared by
//! cosine and correlated with human judgments by Spearman's rho.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featstore::{read_jsonl, FrameSequence};
use crate::vecmath::norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector {
    pub values: Vec<f64>,
    pub mode: PoolMode,
}

/// Coordinate-wise mean or max over time.
pub fn pool(frames: &FrameSequence, mode: PoolMode) -> Result<PooledVector> {
    pool_frames((0..frames.len()).map(|t| frames.frame(t)), mode)
}

pub fn pool_frames<'a>(frames: impl IntoIterator<Item = &'a [f32]>, mode: PoolMode) -> Result<PooledVector> {
    let mut acc: Option<Vec<f64>> = None;
    let mut count = 0usize;
    for f in frames {
        count += 1;
        match acc.as_mut() {
            None => acc = Some(f.iter().map(|&v| f64::from(v)).collect()),
            Some(a) => {
                if a.len() != f.len() {
                    return Err(Error::DimMismatch { expected: a.len(), found: f.len() });
                }
                for (x, &v) in a.iter_mut().zip(f) {
                    let v = f64::from(v);
                    match mode {
                        PoolMode::Mean => *x += v,
                        PoolMode::Max => *x = x.max(v),
                    }
                }
            }
        }
    }
    let mut values = acc.ok_or(Error::EmptySequence)?;
    if mode == PoolMode::Mean {
        values.iter_mut().for_each(|x| *x /= count as f64);
    }
    Ok(PooledVector { values, mode })
}

/// Cosine similarity of two pooled vectors.
pub fn model_similarity(a: &PooledVector, b: &PooledVector) -> Result<f64> {
    if a.values.len() != b.values.len() {
        return Err(Error::DimMismatch { expected: a.values.len(), found: b.values.len() });
    }
    let (na, nb) = (norm(&a.values), norm(&b.values));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    // 1 - |â - b̂|² / 2 is exact for identical directions
    let d2: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x / na - y / nb).powi(2)).sum();
    Ok((1.0 - 0.5 * d2).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing the average of the ranks they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch { left: xs.len(), right: ys.len() });
    }
    if xs.len() < 2 {
        return Err(Error::DegenerateInput("need at least two observations"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite observation"));
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(xs) || constant(ys) {
        return Err(Error::DegenerateInput("constant series"));
    }
    Ok(pearson(&average_ranks(xs), &average_ranks(ys)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub id_1: String,
    pub id_2: String,
    pub human_score: f64,
}

impl Judgment {
    pub fn new(id_1: impl Into<String>, id_2: impl Into<String>, human_score: f64) -> Self {
        Self { id_1: id_1.into(), id_2: id_2.into(), human_score }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgmentSet {
    judgments: Vec<Judgment>,
}

impl JudgmentSet {
    /// Rejects non-finite scores and pairs listed twice in either order.
    pub fn new(judgments: Vec<Judgment>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, j) in judgments.iter().enumerate() {
            if !j.human_score.is_finite() {
                return Err(Error::Parse { line: i + 1, message: "non-finite human score".into() });
            }
            let key = if j.id_1 <= j.id_2 { (&j.id_1, &j.id_2) } else { (&j.id_2, &j.id_1) };
            if !seen.insert(key) {
                return Err(Error::DuplicateId(format!("{} / {}", j.id_1, j.id_2)));
            }
        }
        Ok(Self { judgments })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_jsonl(path)?)
    }

    pub fn judgments(&self) -> &[Judgment] {
        &self.judgments
    }
}

/// `100 × spearman(model cosine, human score)` over all judged pairs.
pub fn semantic_score(
    judgments: &JudgmentSet,
    features: &HashMap<String, FrameSequence>,
    mode: PoolMode,
) -> Result<f64> {
    let lookup = |id: &str| features.get(id).ok_or_else(|| Error::MissingFeature(id.to_owned()));
    let model: Vec<f64> = judgments
        .judgments()
        .par_iter()
        .map(|j| model_similarity(&pool(lookup(&j.id_1)?, mode)?, &pool(lookup(&j.id_2)?, mode)?))
        .collect::<Result<_>>()?;
    let human: Vec<f64> = judgments.judgments().iter().map(|j| j.human_score).collect();
    Ok(100.0 * spearman(&model, &human)?)
}
