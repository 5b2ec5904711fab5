//! Product-codebook assignment and k-means unit discovery.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featstore::{read_features, write_features, FeatureMatrix, FrameSequence};
use crate::losses::CodeDistribution;
use crate::vecmath::{argmax, softmax_in_place, sq_dist};

/// `steps × groups × entries` values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedTensor {
    steps: usize,
    groups: usize,
    entries: usize,
    values: Vec<f64>,
}

impl GroupedTensor {
    pub fn new(steps: usize, groups: usize, entries: usize, values: Vec<f64>) -> Result<Self> {
        if steps == 0 || groups == 0 || entries == 0 || steps * groups * entries != values.len() {
            return Err(Error::InvalidShape(format!(
                "{steps}x{groups}x{entries} from {} values",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { index });
        }
        Ok(Self { steps, groups, entries, values })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn entries(&self) -> usize {
        self.entries
    }

    pub fn at(&self, t: usize, g: usize) -> &[f64] {
        let start = (t * self.groups + g) * self.entries;
        &self.values[start..start + self.entries]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Concatenate along the step axis.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.groups != other.groups || self.entries != other.entries {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.groups, self.entries, other.groups, other.entries
            )));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Self::new(self.steps + other.steps, self.groups, self.entries, values)
    }
}

/// `groups × entries` codewords of dimension `dim` each.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    groups: usize,
    entries: usize,
    dim: usize,
    codewords: Vec<f64>,
}

impl Codebook {
    pub fn new(groups: usize, entries: usize, dim: usize, codewords: Vec<f64>) -> Result<Self> {
        if groups == 0 || entries < 2 || dim == 0 {
            return Err(Error::InvalidShape(format!(
                "codebook needs G >= 1, V >= 2, d >= 1; got {groups}, {entries}, {dim}"
            )));
        }
        if groups * entries * dim != codewords.len() {
            return Err(Error::InvalidShape(format!(
                "{groups}x{entries}x{dim} codebook from {} values",
                codewords.len()
            )));
        }
        if let Some(index) = codewords.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { index });
        }
        Ok(Self { groups, entries, dim, codewords })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn entries(&self) -> usize {
        self.entries
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn codeword(&self, g: usize, v: usize) -> &[f64] {
        let start = (g * self.entries + v) * self.dim;
        &self.codewords[start..start + self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignMode {
    Hard,
    Gumbel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Selected entry per `(t, g)`, row-major `T × G`.
    pub indices: Vec<usize>,
    /// Noise-free softmax of the logits.
    pub probs: GroupedTensor,
    /// Per step, the selected codewords concatenated across groups (`G·d`).
    pub codes: Vec<Vec<f64>>,
}

/// Selects one entry per group and timestep.
///
/// Hard mode takes the logit argmax. Gumbel mode takes the argmax of
/// `logits + g` with `g ~ Gumbel(0, 1)` drawn from `seed` in `(t, g, v)` order.
/// The temperature scales the perturbed logits, which leaves the argmax
/// unchanged, so it is only validated here. Ties go to the lowest index.
pub fn codebook_assign(
    logits: &GroupedTensor,
    codebook: &Codebook,
    mode: AssignMode,
    temperature: f64,
    seed: u64,
) -> Result<Assignment> {
    if logits.groups != codebook.groups {
        return Err(Error::DimMismatch { expected: codebook.groups, found: logits.groups });
    }
    if logits.entries != codebook.entries {
        return Err(Error::DimMismatch { expected: codebook.entries, found: logits.entries });
    }
    if mode == AssignMode::Gumbel && !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard Gumbel");
    let (steps, groups, entries) = (logits.steps, logits.groups, logits.entries);

    let mut indices = Vec::with_capacity(steps * groups);
    let mut probs = Vec::with_capacity(logits.values.len());
    let mut codes = Vec::with_capacity(steps);
    let mut perturbed = vec![0.0; entries];
    for t in 0..steps {
        let mut code = Vec::with_capacity(groups * codebook.dim);
        for g in 0..groups {
            let row = logits.at(t, g);
            let choice = match mode {
                AssignMode::Hard => argmax(row),
                AssignMode::Gumbel => {
                    for (p, &l) in perturbed.iter_mut().zip(row) {
                        *p = l + gumbel.sample(&mut rng);
                    }
                    argmax(&perturbed)
                }
            };
            indices.push(choice);
            code.extend_from_slice(codebook.codeword(g, choice));
            let mut p = row.to_vec();
            softmax_in_place(&mut p);
            probs.extend(p);
        }
        codes.push(code);
    }
    Ok(Assignment {
        indices,
        probs: GroupedTensor::new(steps, groups, entries, probs)?,
        codes,
    })
}

/// `p̄[g][v]`: the mean over steps of the per-step assignment probabilities.
pub fn batch_code_distribution(probs: &GroupedTensor) -> Result<CodeDistribution> {
    let (groups, entries) = (probs.groups, probs.entries);
    for t in 0..probs.steps {
        for g in 0..groups {
            let s: f64 = probs.at(t, g).iter().sum();
            if (s - 1.0).abs() > CodeDistribution::ROW_TOLERANCE || probs.at(t, g).iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidDistribution {
                    row: t * groups + g,
                    reason: format!("step {t} group {g} sums to {s}"),
                });
            }
        }
    }
    let mut mean = vec![0.0; groups * entries];
    for t in 0..probs.steps {
        for g in 0..groups {
            for (m, p) in mean[g * entries..(g + 1) * entries].iter_mut().zip(probs.at(t, g)) {
                *m += p;
            }
        }
    }
    let n = probs.steps as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    CodeDistribution::new(groups, entries, mean)
}

/// Hard-count estimate of `p̄` from selected indices (`T × G`, row-major).
pub fn batch_code_distribution_hard(indices: &[usize], groups: usize, entries: usize) -> Result<CodeDistribution> {
    if groups == 0 || indices.is_empty() || !indices.len().is_multiple_of(groups) {
        return Err(Error::InvalidShape(format!("{} indices for {groups} groups", indices.len())));
    }
    let steps = indices.len() / groups;
    let mut counts = vec![0.0; groups * entries];
    for (k, &v) in indices.iter().enumerate() {
        if v >= entries {
            return Err(Error::InvalidArgument(format!("index {v} >= {entries} entries")));
        }
        counts[(k % groups) * entries + v] += 1.0;
    }
    counts.iter_mut().for_each(|c| *c /= steps as f64);
    CodeDistribution::new(groups, entries, counts)
}

/// Discrete units of one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitSequence {
    pub utterance_id: String,
    pub units: Vec<u32>,
}

impl UnitSequence {
    pub fn new(utterance_id: impl Into<String>, units: Vec<u32>) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::EmptySequence);
        }
        Ok(Self { utterance_id: utterance_id.into(), units })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    centroids: FeatureMatrix,
    inertia_history: Vec<f64>,
    seed: u64,
    iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct KMeansMeta {
    k: usize,
    dim: usize,
    seed: u64,
    iters: usize,
    inertia_history: Vec<f64>,
}

impl KMeansModel {
    pub fn from_centroids(centroids: FeatureMatrix) -> Self {
        Self { centroids, inertia_history: Vec::new(), seed: 0, iterations: 0 }
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroids(&self) -> &FeatureMatrix {
        &self.centroids
    }

    /// Sum of squared distances after each assignment step.
    pub fn inertia_history(&self) -> &[f64] {
        &self.inertia_history
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of centroid updates performed.
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn meta_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    }

    /// Writes the `k × D` centroids as `FVF1` plus a one-line metadata record
    /// next to it (`<path>.meta.json`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_features(&self.centroids, path)?;
        let meta = KMeansMeta {
            k: self.k(),
            dim: self.dim(),
            seed: self.seed,
            iters: self.iterations,
            inertia_history: self.inertia_history.clone(),
        };
        let mut line = serde_json::to_string(&meta).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        line.push('\n');
        let meta_path = Self::meta_path(path);
        fs::write(&meta_path, line).map_err(|e| Error::io(meta_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let centroids = read_features(path)?;
        let meta_path = Self::meta_path(path);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: KMeansMeta =
            serde_json::from_str(text.trim()).map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
        if meta.k != centroids.rows() || meta.dim != centroids.cols() {
            return Err(Error::ShapeMismatch(format!(
                "metadata says {}x{}, centroids are {}x{}",
                meta.k,
                meta.dim,
                centroids.rows(),
                centroids.cols()
            )));
        }
        Ok(Self {
            centroids,
            inertia_history: meta.inertia_history,
            seed: meta.seed,
            iterations: meta.iters,
        })
    }
}

/// Nearest centroid by squared Euclidean distance, lowest index on ties.
fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign_all(data: &[f64], centroids: &[f64], dim: usize) -> (Vec<usize>, Vec<f64>) {
    data.par_chunks_exact(dim)
        .map(|p| nearest(p, centroids, dim))
        .unzip()
}

fn kmeans_pp_init(data: &[f64], n: usize, dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(point(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(point(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), &centroids[start..start + dim]));
        }
    }
    centroids
}

/// Seeded k-means++ initialization followed by Lloyd iterations until the
/// assignment stops changing or `max_iters` updates have run. A cluster left
/// empty by an update is moved onto the point farthest from its own centroid.
pub fn kmeans_fit(data: &FeatureMatrix, k: usize, max_iters: usize, seed: u64) -> Result<KMeansModel> {
    let (n, dim) = data.shape();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::TooFewPoints { points: n, clusters: k });
    }
    let points: Vec<f64> = data.as_slice().iter().map(|&v| f64::from(v)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(&points, n, dim, k, &mut rng);
    let mut previous = centroids.clone();
    let mut history: Vec<f64> = Vec::new();
    let mut last_assign: Option<Vec<usize>> = None;
    let mut iterations = 0;

    loop {
        let (assign, dists) = assign_all(&points, &centroids, dim);
        let inertia: f64 = dists.iter().sum();
        if history.last().is_some_and(|&last| inertia > last) {
            // rounding in the mean update; the previous centroids are better
            centroids = previous;
            iterations -= 1;
            break;
        }
        history.push(inertia);
        if last_assign.as_ref() == Some(&assign) || iterations == max_iters {
            break;
        }

        previous.clone_from(&centroids);
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(&points[i * dim..(i + 1) * dim]) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for d in 0..dim {
                    centroids[c * dim + d] = sums[c * dim + d] * inv;
                }
            }
        }
        let mut taken = vec![false; n];
        for c in (0..k).filter(|&c| counts[c] == 0) {
            let mut far = None;
            let mut far_d = f64::NEG_INFINITY;
            for i in 0..n {
                if taken[i] {
                    continue;
                }
                let own = assign[i];
                let d = sq_dist(&points[i * dim..(i + 1) * dim], &centroids[own * dim..(own + 1) * dim]);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
            if let Some(i) = far {
                taken[i] = true;
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
            }
        }
        last_assign = Some(assign);
        iterations += 1;
    }

    let centroids = FeatureMatrix::new(k, dim, centroids.iter().map(|&v| v as f32).collect())?;
    Ok(KMeansModel { centroids, inertia_history: history, seed, iterations })
}

/// Maps each frame to its nearest centroid; ties go to the lowest index.
pub fn kmeans_quantize(model: &KMeansModel, frames: &FrameSequence) -> Result<UnitSequence> {
    if frames.dim() != model.dim() {
        return Err(Error::DimMismatch { expected: model.dim(), found: frames.dim() });
    }
    let centroids: Vec<f64> = model.centroids.as_slice().iter().map(|&v| f64::from(v)).collect();
    let units = (0..frames.len())
        .into_par_iter()
        .map(|t| {
            let x: Vec<f64> = frames.frame(t).iter().map(|&v| f64::from(v)).collect();
            nearest(&x, &centroids, model.dim()).0 as u32
        })
        .collect();
    UnitSequence::new(frames.id(), units)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::diversity_loss;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn codebook(groups: usize, entries: usize, dim: usize) -> Codebook {
        let values = (0..groups * entries * dim).map(|i| i as f64).collect();
        Codebook::new(groups, entries, dim, values).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> FeatureMatrix {
        let v = (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        FeatureMatrix::new(rows, cols, v).unwrap()
    }

    #[test]
    fn dominant_logit_wins_in_both_modes() {
        let mut logits = vec![0.0; 2 * 4];
        logits[2] = 100.0;
        logits[4 + 1] = 100.0;
        let logits = GroupedTensor::new(1, 2, 4, logits).unwrap();
        let cb = codebook(2, 4, 3);
        for mode in [AssignMode::Hard, AssignMode::Gumbel] {
            let a = codebook_assign(&logits, &cb, mode, 2.0, 9).unwrap();
            assert_eq!(a.indices, vec![2, 1]);
            assert!(a.probs.at(0, 0)[2] > 1.0 - 1e-12);
            let mut expected = cb.codeword(0, 2).to_vec();
            expected.extend_from_slice(cb.codeword(1, 1));
            assert_eq!(a.codes[0], expected);
        }
    }

    #[test]
    fn gumbel_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = (0..50 * 2 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let logits = GroupedTensor::new(50, 2, 4, v).unwrap();
        let cb = codebook(2, 4, 2);
        let a = codebook_assign(&logits, &cb, AssignMode::Gumbel, 1.0, 77).unwrap();
        let b = codebook_assign(&logits, &cb, AssignMode::Gumbel, 1.0, 77).unwrap();
        let c = codebook_assign(&logits, &cb, AssignMode::Gumbel, 1.0, 78).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.indices, c.indices);
    }

    #[test]
    fn gumbel_frequencies_match_uniform_logits() {
        let steps = 10_000;
        let logits = GroupedTensor::new(steps, 2, 4, vec![0.0; steps * 8]).unwrap();
        let a = codebook_assign(&logits, &codebook(2, 4, 1), AssignMode::Gumbel, 1.0, 2024).unwrap();
        let sigma = (0.25f64 * 0.75 / steps as f64).sqrt();
        for g in 0..2 {
            for v in 0..4 {
                let count = (0..steps).filter(|t| a.indices[t * 2 + g] == v).count();
                let freq = count as f64 / steps as f64;
                assert!((freq - 0.25).abs() <= 3.0 * sigma, "group {g} entry {v}: {freq}");
            }
        }
    }

    #[test]
    fn gumbel_requires_positive_temperature() {
        let logits = GroupedTensor::new(1, 1, 2, vec![0.0, 1.0]).unwrap();
        let cb = codebook(1, 2, 1);
        assert!(matches!(
            codebook_assign(&logits, &cb, AssignMode::Gumbel, 0.0, 1),
            Err(Error::NonPositiveTemperature(_))
        ));
        assert!(codebook_assign(&logits, &cb, AssignMode::Hard, 0.0, 1).is_ok());
    }

    #[test]
    fn codebook_shape_checks() {
        assert!(Codebook::new(1, 1, 1, vec![0.0]).is_err());
        assert!(Codebook::new(1, 2, 1, vec![0.0]).is_err());
    }

    #[test]
    fn code_distribution_basics() {
        let single = GroupedTensor::new(1, 1, 3, vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(batch_code_distribution(&single).unwrap().row(0), &[0.2, 0.3, 0.5]);
        let two = GroupedTensor::new(2, 1, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(batch_code_distribution(&two).unwrap().row(0), &[0.5, 0.5, 0.0]);
        let bad = GroupedTensor::new(1, 1, 2, vec![0.7, 0.7]).unwrap();
        assert!(matches!(batch_code_distribution(&bad), Err(Error::InvalidDistribution { .. })));
    }

    #[test]
    fn code_distribution_feeds_diversity_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = (0..64 * 2 * 8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let logits = GroupedTensor::new(64, 2, 8, v).unwrap();
        let a = codebook_assign(&logits, &codebook(2, 8, 1), AssignMode::Hard, 1.0, 0).unwrap();
        let l = diversity_loss(&batch_code_distribution(&a.probs).unwrap()).loss;
        assert!(l >= -(8f64.ln()) / 8.0 - 1e-12 && l <= 0.0);
        let hard = batch_code_distribution_hard(&a.indices, 2, 8).unwrap();
        for g in 0..2 {
            assert!((hard.row(g).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_exact_points_zero_inertia() {
        let data = FeatureMatrix::from_rows(&[[0.0f32, 0.0], [5.0, 1.0], [-3.0, 2.0], [1.0, -4.0]]).unwrap();
        let m = kmeans_fit(&data, 4, 50, 3).unwrap();
        assert_eq!(*m.inertia_history().last().unwrap(), 0.0);
    }

    #[test]
    fn kmeans_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = random_matrix(&mut rng, 200, 3);
        let a = kmeans_fit(&data, 6, 100, 5).unwrap();
        let b = kmeans_fit(&data, 6, 100, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kmeans_too_few_points() {
        let data = FeatureMatrix::from_rows(&[[0.0f32], [1.0]]).unwrap();
        assert!(matches!(kmeans_fit(&data, 3, 10, 0), Err(Error::TooFewPoints { points: 2, clusters: 3 })));
    }

    #[test]
    fn kmeans_duplicate_points_fill_all_clusters() {
        let data = FeatureMatrix::from_rows(&[[1.0f32], [1.0], [1.0], [9.0]]).unwrap();
        let m = kmeans_fit(&data, 3, 20, 0).unwrap();
        assert_eq!(m.k(), 3);
        assert!(m.inertia_history().windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quantize_nearest_and_ties() {
        let centroids = FeatureMatrix::from_rows(&[[9.0f32, 9.0], [1.0, 0.0], [5.0, 5.0], [2.0, 2.0], [-1.0, 0.0]]).unwrap();
        let model = KMeansModel::from_centroids(centroids);
        let frames = FrameSequence::from_frames("u", &[[2.0f32, 2.0], [0.0, 0.0]]).unwrap();
        let units = kmeans_quantize(&model, &frames).unwrap();
        assert_eq!(units.units, vec![3, 1]);
        let wrong = FrameSequence::from_frames("u", &[[1.0f32]]).unwrap();
        assert!(matches!(kmeans_quantize(&model, &wrong), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn quantize_matches_distance_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = KMeansModel::from_centroids(random_matrix(&mut rng, 7, 4));
        let frames = FrameSequence::new(random_matrix(&mut rng, 100, 4), 50.0, "r").unwrap();
        let units = kmeans_quantize(&model, &frames).unwrap();
        for t in 0..frames.len() {
            let dists: Vec<f64> = (0..7)
                .map(|c| {
                    frames.frame(t).iter().zip(model.centroids().row(c))
                        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                        .sum()
                })
                .collect();
            let best = (0..7).fold(0, |b, c| if dists[c] < dists[b] { c } else { b });
            assert_eq!(units.units[t] as usize, best);
        }
    }

    #[test]
    fn model_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = random_matrix(&mut rng, 50, 2);
        let m = kmeans_fit(&data, 4, 30, 1).unwrap();
        let path = dir.path().join("km.fvf");
        m.save(&path).unwrap();
        assert_eq!(KMeansModel::load(&path).unwrap(), m);
        let meta = fs::read_to_string(KMeansModel::meta_path(&path)).unwrap();
        assert_eq!(meta.lines().count(), 1);
        assert!(meta.starts_with(r#"{"k":4,"dim":2,"seed":1,"iters":"#));
    }

    proptest! {
        #[test]
        fn hard_indices_are_prob_argmax(seed in any::<u64>(), t in 1usize..8, g in 1usize..4, v in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals = (0..t * g * v).map(|_| rng.random_range(-5.0..5.0)).collect();
            let logits = GroupedTensor::new(t, g, v, vals).unwrap();
            let a = codebook_assign(&logits, &codebook(g, v, 1), AssignMode::Hard, 1.0, 0).unwrap();
            for s in 0..t {
                for h in 0..g {
                    prop_assert_eq!(a.indices[s * g + h], argmax(a.probs.at(s, h)));
                }
            }
        }

        #[test]
        fn code_distribution_concat_is_weighted_mean(seed in any::<u64>(), t1 in 1usize..10, t2 in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut probs = |t: usize| {
                let mut vals = Vec::new();
                for _ in 0..t * 2 {
                    let mut row: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                    softmax_in_place(&mut row);
                    vals.extend(row);
                }
                GroupedTensor::new(t, 2, 3, vals).unwrap()
            };
            let (a, b) = (probs(t1), probs(t2));
            let joint = batch_code_distribution(&a.concat(&b).unwrap()).unwrap();
            let (pa, pb) = (batch_code_distribution(&a).unwrap(), batch_code_distribution(&b).unwrap());
            for k in 0..6 {
                let w = (t1 as f64 * pa.as_slice()[k] + t2 as f64 * pb.as_slice()[k]) / (t1 + t2) as f64;
                prop_assert!((joint.as_slice()[k] - w).abs() < 1e-12);
            }
        }

        #[test]
        fn inertia_never_increases(seed in any::<u64>(), k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = random_matrix(&mut rng, 60, 3);
            let m = kmeans_fit(&data, k, 50, seed).unwrap();
            prop_assert!(m.inertia_history().windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
