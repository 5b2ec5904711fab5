//! Phonetic ABX discriminability with DTW over frame-level cosine distances.
//!
//! For a triple `(A, B, X)` where `A` and `X` share a category, the triple
//! scores 0 when `X` is closer to `A` than to `B`, 1 when it is closer to `B`,
//! and 0.5 on an exact tie. Errors are averaged within each group key and then
//! across groups.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featstore::{read_jsonl, FrameSequence};
use crate::vecmath::sq_dist;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub a_id: String,
    pub b_id: String,
    pub x_id: String,
    pub group_key: String,
}

impl Triplet {
    pub fn new(a: impl Into<String>, b: impl Into<String>, x: impl Into<String>, group: impl Into<String>) -> Self {
        Self { a_id: a.into(), b_id: b.into(), x_id: x.into(), group_key: group.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletManifest {
    triplets: Vec<Triplet>,
}

impl TripletManifest {
    pub fn new(triplets: Vec<Triplet>) -> Result<Self> {
        if triplets.is_empty() {
            return Err(Error::EmptyManifest);
        }
        for (i, t) in triplets.iter().enumerate() {
            if t.group_key.is_empty() {
                return Err(Error::EmptyField { line: i + 1, field: "group_key" });
            }
        }
        Ok(Self { triplets })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_jsonl(path)?)
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }
}

/// Unit-normalized frames of a sequence.
fn normalized_frames(seq: &FrameSequence) -> Result<Vec<Vec<f64>>> {
    (0..seq.len())
        .map(|t| {
            let f: Vec<f64> = seq.frame(t).iter().map(|&v| f64::from(v)).collect();
            let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::ZeroNormFrame { sequence: seq.id().to_owned(), frame: t });
            }
            Ok(f.iter().map(|v| v / n).collect())
        })
        .collect()
}

/// `1 - cos(x, y)` on unit vectors, computed as `|x - y|² / 2` so that equal
/// frames cost exactly zero.
fn cosine_cost(x: &[f64], y: &[f64]) -> f64 {
    (0.5 * sq_dist(x, y)).clamp(0.0, 2.0)
}

/// DTW with steps `(1,0)`, `(0,1)`, `(1,1)` over `1 - cos` frame costs.
///
/// Returns the accumulated cost of the cheapest monotone alignment divided by
/// its number of cells. Among equally cheap alignments the longest is used.
pub fn dtw_distance(x: &FrameSequence, y: &FrameSequence) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::DimMismatch { expected: x.dim(), found: y.dim() });
    }
    let (xs, ys) = (normalized_frames(x)?, normalized_frames(y)?);
    Ok(dtw_normalized(&xs, &ys))
}

pub(crate) fn dtw_normalized(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    #[derive(Clone, Copy)]
    struct Cell {
        cost: f64,
        len: u32,
    }
    // lexicographic: lower cost, then longer path
    fn better(a: Cell, b: Cell) -> Cell {
        if a.cost < b.cost || (a.cost == b.cost && a.len > b.len) { a } else { b }
    }

    let m = ys.len();
    let mut prev = vec![Cell { cost: 0.0, len: 0 }; m];
    let mut cur = prev.clone();
    for (i, xi) in xs.iter().enumerate() {
        for (j, yj) in ys.iter().enumerate() {
            let c = cosine_cost(xi, yj);
            let best = match (i, j) {
                (0, 0) => Cell { cost: 0.0, len: 0 },
                (0, _) => cur[j - 1],
                (_, 0) => prev[j],
                _ => better(better(prev[j - 1], prev[j]), cur[j - 1]),
            };
            cur[j] = Cell { cost: best.cost + c, len: best.len + 1 };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let end = prev[m - 1];
    end.cost / f64::from(end.len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Every group key counts equally.
    #[default]
    Unweighted,
    /// Groups weighted by their number of triples.
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupError {
    pub group: String,
    pub error: f64,
    pub triples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AbxReport {
    /// Sorted by group key.
    pub groups: Vec<GroupError>,
    pub overall: f64,
    pub triples: usize,
}

/// Score of one triple: 0 if `X` is closer to `A`, 1 if closer to `B`, 0.5 on ties.
pub fn triple_score(a: &FrameSequence, b: &FrameSequence, x: &FrameSequence) -> Result<f64> {
    let da = dtw_distance(a, x)?;
    let db = dtw_distance(b, x)?;
    Ok(if da < db {
        0.0
    } else if da > db {
        1.0
    } else {
        0.5
    })
}

pub fn abx_error(manifest: &TripletManifest, features: &HashMap<String, FrameSequence>) -> Result<AbxReport> {
    abx_error_with(manifest, features, Aggregation::Unweighted)
}

pub fn abx_error_with(
    manifest: &TripletManifest,
    features: &HashMap<String, FrameSequence>,
    aggregation: Aggregation,
) -> Result<AbxReport> {
    let lookup = |id: &str| features.get(id).ok_or_else(|| Error::MissingFeature(id.to_owned()));
    for t in manifest.triplets() {
        lookup(&t.a_id)?;
        lookup(&t.b_id)?;
        lookup(&t.x_id)?;
    }
    let scores: Vec<f64> = manifest
        .triplets()
        .par_iter()
        .map(|t| triple_score(lookup(&t.a_id)?, lookup(&t.b_id)?, lookup(&t.x_id)?))
        .collect::<Result<_>>()?;

    let mut by_group: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (t, s) in manifest.triplets().iter().zip(&scores) {
        let e = by_group.entry(t.group_key.as_str()).or_default();
        e.0 += s;
        e.1 += 1;
    }
    let groups: Vec<GroupError> = by_group
        .into_iter()
        .map(|(g, (sum, n))| GroupError { group: g.to_owned(), error: sum / n as f64, triples: n })
        .collect();
    let overall = match aggregation {
        Aggregation::Unweighted => groups.iter().map(|g| g.error).sum::<f64>() / groups.len() as f64,
        Aggregation::Weighted => scores.iter().sum::<f64>() / scores.len() as f64,
    };
    Ok(AbxReport { groups, overall, triples: scores.len() })
}
