//! Training objectives as pure kernels with analytic gradients.
//!
//! - [`matching_loss`]: masked and marginalized InfoNCE over a caption × image
//!   score matrix, summed over both retrieval directions.
//! - [`w2v2_contrastive_loss`]: cosine/temperature softmax contrastive loss of a
//!   masked timestep against its quantized target and distractors.
//! - [`diversity_loss`]: mean negative entropy of the per-group code usage.
//! - [`total_objective`]: weighted combination of the above.
//! - [`finite_difference_check`]: gradient oracle used by the tests and the
//!   `loss-check` subcommand.

use crate::error::{Error, Result};
use crate::featstore::MatchMask;
use crate::vecmath::{dot, log_sum_exp, norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Coarse,
    Fine,
}

/// Similarities between audio captions (rows) and images (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    kind: ScoreKind,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, kind: ScoreKind) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != values.len() {
            return Err(Error::InvalidShape(format!("{rows}x{cols} scores from {} values", values.len())));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { index });
        }
        Ok(Self { rows, cols, values, kind })
    }

    pub fn from_rows(rows: &[Vec<f64>], kind: ScoreKind) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape("ragged score rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat(), kind)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn transpose(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                values.push(self.get(i, j));
            }
        }
        Self { rows: self.cols, cols: self.rows, values, kind: self.kind }
    }
}

/// How per-pair terms are combined within each direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Plain sum over the batch.
    #[default]
    Sum,
    /// Sum divided by the batch size B.
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchingLossConfig {
    pub delta: f64,
    pub mask: MatchMask,
    /// Column of the positive image for each caption row.
    pub positives: Vec<usize>,
    pub reduction: Reduction,
}

impl MatchingLossConfig {
    pub const DEFAULT_DELTA: f64 = 1.0;

    /// Positives default to the diagonal where the mask allows it, otherwise
    /// the first matched column of the row.
    pub fn new(delta: f64, mask: MatchMask) -> Result<Self> {
        let mut positives = Vec::with_capacity(mask.rows());
        for i in 0..mask.rows() {
            let p = if i < mask.cols() && !mask.is_negative(i, i) {
                i
            } else {
                (0..mask.cols())
                    .find(|&j| !mask.is_negative(i, j))
                    .ok_or(Error::MaskRowAllOnes(i))?
            };
            positives.push(p);
        }
        let cfg = Self { delta, mask, positives, reduction: Reduction::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_positives(mut self, positives: Vec<usize>) -> Result<Self> {
        self.positives = positives;
        self.validate()?;
        Ok(self)
    }

    pub fn with_reduction(mut self, reduction: Reduction) -> Self {
        self.reduction = reduction;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::InvalidArgument(format!("margin {} must be finite and >= 0", self.delta)));
        }
        if self.positives.len() != self.mask.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} positives for {} rows",
                self.positives.len(),
                self.mask.rows()
            )));
        }
        for (i, &p) in self.positives.iter().enumerate() {
            if p >= self.mask.cols() || self.mask.is_negative(i, p) {
                return Err(Error::MaskRowAllOnes(i));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchingLoss {
    pub loss: f64,
    pub audio_to_image: f64,
    pub image_to_audio: f64,
    /// Unreduced per-row terms of each direction.
    pub audio_to_image_terms: Vec<f64>,
    pub image_to_audio_terms: Vec<f64>,
    /// `∂loss/∂S`, row-major like the scores.
    pub grad: Vec<f64>,
}

/// Masked, marginalized InfoNCE in both directions.
///
/// For caption `i` with positive column `p`, let `a = S[i][p] - δ`. The
/// audio→image term is `-a + ln(e^a + Σ_j M[i][j] e^{S[i][j]})` and the
/// image→audio term is `-a + ln(e^a + Σ_r M[r][p] e^{S[r][p]})`.
pub fn matching_loss(scores: &ScoreMatrix, cfg: &MatchingLossConfig) -> Result<MatchingLoss> {
    let (rows, cols) = (scores.rows(), scores.cols());
    if cfg.mask.rows() != rows || cfg.mask.cols() != cols {
        return Err(Error::ShapeMismatch(format!(
            "scores {rows}x{cols} vs mask {}x{}",
            cfg.mask.rows(),
            cfg.mask.cols()
        )));
    }
    cfg.validate()?;
    let scale = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / rows as f64,
    };

    let mut grad = vec![0.0; rows * cols];
    let mut a2i_terms = Vec::with_capacity(rows);
    let mut i2a_terms = Vec::with_capacity(rows);
    let mut logits = Vec::with_capacity(rows.max(cols) + 1);
    let mut index = Vec::with_capacity(rows.max(cols) + 1);

    for (i, &p) in cfg.positives.iter().enumerate() {
        let anchor = scores.get(i, p) - cfg.delta;

        // audio -> image: negatives along row i
        logits.clear();
        index.clear();
        logits.push(anchor);
        for j in (0..cols).filter(|&j| cfg.mask.is_negative(i, j)) {
            logits.push(scores.get(i, j));
            index.push(i * cols + j);
        }
        a2i_terms.push(accumulate_term(&logits, &index, i * cols + p, scale, &mut grad));

        // image -> audio: negatives down column p
        logits.clear();
        index.clear();
        logits.push(anchor);
        for r in (0..rows).filter(|&r| cfg.mask.is_negative(r, p)) {
            logits.push(scores.get(r, p));
            index.push(r * cols + p);
        }
        i2a_terms.push(accumulate_term(&logits, &index, i * cols + p, scale, &mut grad));
    }

    let audio_to_image = scale * a2i_terms.iter().sum::<f64>();
    let image_to_audio = scale * i2a_terms.iter().sum::<f64>();
    Ok(MatchingLoss {
        loss: audio_to_image + image_to_audio,
        audio_to_image,
        image_to_audio,
        audio_to_image_terms: a2i_terms,
        image_to_audio_terms: i2a_terms,
        grad,
    })
}

/// One `-log softmax` term where `logits[0]` is the positive. Adds the scaled
/// gradient into `grad` and returns the unscaled term.
fn accumulate_term(logits: &[f64], neg_index: &[usize], pos_index: usize, scale: f64, grad: &mut [f64]) -> f64 {
    let lse = log_sum_exp(logits);
    grad[pos_index] += scale * ((logits[0] - lse).exp() - 1.0);
    for (&l, &k) in logits[1..].iter().zip(neg_index) {
        grad[k] += scale * (l - lse).exp();
    }
    lse - logits[0]
}

/// Inputs of the masked-prediction contrastive loss at one masked timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct W2V2LossInput {
    pub context: Vec<f64>,
    pub target: Vec<f64>,
    pub distractors: Vec<Vec<f64>>,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct W2V2Loss {
    pub loss: f64,
    pub grad_context: Vec<f64>,
    pub grad_target: Vec<f64>,
    pub grad_distractors: Vec<Vec<f64>>,
}

/// `-ln softmax_0(sim(c, x_k) / κ)` over `x = [q, q̃_1, …, q̃_K]` with cosine `sim`.
pub fn w2v2_contrastive_loss(inp: &W2V2LossInput) -> Result<W2V2Loss> {
    let kappa = inp.temperature;
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::NonPositiveTemperature(kappa));
    }
    let d = inp.context.len();
    let candidates: Vec<&[f64]> = std::iter::once(inp.target.as_slice())
        .chain(inp.distractors.iter().map(Vec::as_slice))
        .collect();
    for x in &candidates {
        if x.len() != d {
            return Err(Error::DimMismatch { expected: d, found: x.len() });
        }
    }
    let c_norm = norm(&inp.context);
    if c_norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    let norms: Vec<f64> = candidates.iter().map(|x| norm(x)).collect();
    if norms.contains(&0.0) {
        return Err(Error::ZeroVector);
    }

    let cos: Vec<f64> = candidates
        .iter()
        .zip(&norms)
        .map(|(x, &xn)| dot(&inp.context, x) / (c_norm * xn))
        .collect();
    let logits: Vec<f64> = cos.iter().map(|c| c / kappa).collect();
    let lse = log_sum_exp(&logits);
    let loss = lse - logits[0];

    // ∂loss/∂cos_k = (softmax_k - [k = 0]) / κ
    let mut grad_context = vec![0.0; d];
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(candidates.len());
    for (k, (x, &xn)) in candidates.iter().zip(&norms).enumerate() {
        let mut w = (logits[k] - lse).exp();
        if k == 0 {
            w -= 1.0;
        }
        let g = w / kappa;
        // ∂cos/∂c = x/(|c||x|) - cos·c/|c|²,  ∂cos/∂x = c/(|c||x|) - cos·x/|x|²
        let inv = 1.0 / (c_norm * xn);
        for t in 0..d {
            grad_context[t] += g * (x[t] * inv - cos[k] * inp.context[t] / (c_norm * c_norm));
        }
        grads.push(
            (0..d)
                .map(|t| g * (inp.context[t] * inv - cos[k] * x[t] / (xn * xn)))
                .collect(),
        );
    }
    let grad_target = grads.remove(0);
    Ok(W2V2Loss { loss, grad_context, grad_target, grad_distractors: grads })
}

/// Averaged code usage `p̄[g][v]` of a product codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeDistribution {
    groups: usize,
    entries: usize,
    values: Vec<f64>,
}

impl CodeDistribution {
    pub const ROW_TOLERANCE: f64 = 1e-6;

    pub fn new(groups: usize, entries: usize, values: Vec<f64>) -> Result<Self> {
        if groups == 0 || entries == 0 || groups * entries != values.len() {
            return Err(Error::InvalidShape(format!("{groups}x{entries} from {} values", values.len())));
        }
        for (g, row) in values.chunks_exact(entries).enumerate() {
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidDistribution { row: g, reason: format!("entry {v} outside [0, 1]") });
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > Self::ROW_TOLERANCE {
                return Err(Error::InvalidDistribution { row: g, reason: format!("sums to {s}") });
            }
        }
        Ok(Self { groups, entries, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let entries = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != entries) {
            return Err(Error::InvalidShape("ragged distribution rows".into()));
        }
        Self::new(rows.len(), entries, rows.concat())
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn entries(&self) -> usize {
        self.entries
    }

    pub fn row(&self, g: usize) -> &[f64] {
        &self.values[g * self.entries..(g + 1) * self.entries]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityLoss {
    pub loss: f64,
    /// `(ln p + 1) / GV`; `-inf` at entries where `p = 0`.
    pub grad: Vec<f64>,
}

/// `(1/GV) Σ_g Σ_v p̄ ln p̄` with `0 ln 0 = 0`. Lies in `[-ln V / V, 0]`: zero
/// for one-hot usage, minimal for uniform usage.
pub fn diversity_loss(p: &CodeDistribution) -> DiversityLoss {
    diversity_loss_signed(p, false)
}

/// [`diversity_loss`], optionally negated so that minimizing it spreads usage
/// out rather than concentrating it.
pub fn diversity_loss_signed(p: &CodeDistribution, negate: bool) -> DiversityLoss {
    entropy_terms(&p.values, p.groups * p.entries, negate)
}

/// The diversity formula on raw `G × V` values that need not lie on the
/// simplex, for finite-difference checks.
pub fn diversity_loss_unnormalized(groups: usize, entries: usize, values: &[f64]) -> Result<DiversityLoss> {
    if groups == 0 || entries == 0 || values.len() != groups * entries {
        return Err(Error::ShapeMismatch(format!("{} values for {groups}x{entries}", values.len())));
    }
    if let Some(row) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidDistribution { row: row / entries, reason: "negative or non-finite entry".into() });
    }
    Ok(entropy_terms(values, groups * entries, false))
}

fn entropy_terms(values: &[f64], cells: usize, negate: bool) -> DiversityLoss {
    let scale = 1.0 / cells as f64;
    let sign = if negate { -1.0 } else { 1.0 };
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(values.len());
    for &v in values {
        if v > 0.0 {
            total += v * v.ln();
            grad.push(sign * scale * (v.ln() + 1.0));
        } else {
            grad.push(sign * f64::NEG_INFINITY);
        }
    }
    DiversityLoss { loss: sign * scale * total, grad }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub coarse: f64,
    pub fine: f64,
    pub masked: f64,
    pub diversity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { coarse: 0.1, fine: 1.0, masked: 1.0, diversity: 0.1 }
    }
}

impl LossWeights {
    pub fn new(coarse: f64, fine: f64, masked: f64, diversity: f64) -> Result<Self> {
        let w = Self { coarse, fine, masked, diversity };
        if [coarse, fine, masked, diversity].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0: {w:?}")));
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Coarse and fine matching only.
    FastVgs,
    /// Matching plus masked prediction and codebook diversity.
    FastVgsPlus,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub coarse: f64,
    pub fine: f64,
    pub masked: f64,
    pub diversity: f64,
}

pub fn total_objective(terms: LossTerms, w: LossWeights, objective: Objective) -> f64 {
    let matching = w.coarse * terms.coarse + w.fine * terms.fine;
    match objective {
        Objective::FastVgs => matching,
        Objective::FastVgsPlus => matching + w.masked * terms.masked + w.diversity * terms.diversity,
    }
}

/// Central-difference gradient with the fourth-order five-point stencil
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
pub fn central_difference<F>(f: F, x0: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("step {eps} must be positive")));
    }
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let mut eval = |offset: f64| {
            x[i] = x0[i] + offset;
            let v = f(&x);
            x[i] = x0[i];
            if v.is_finite() { Ok(v) } else { Err(Error::NonFiniteEvaluation) }
        };
        let (p2, p1, m1, m2) = (eval(2.0 * eps)?, eval(eps)?, eval(-eps)?, eval(-2.0 * eps)?);
        out.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps));
    }
    Ok(out)
}

/// Max over coordinates of `|g_analytic - g_fd| / max(1e-12, |g_fd|)`, where
/// `f` returns the value and analytic gradient at a point.
pub fn finite_difference_check<F>(f: F, x0: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (value, analytic) = f(x0);
    if !value.is_finite() {
        return Err(Error::NonFiniteEvaluation);
    }
    if analytic.len() != x0.len() {
        return Err(Error::ShapeMismatch(format!("gradient has {} entries for {} inputs", analytic.len(), x0.len())));
    }
    let numeric = central_difference(|x| f(x).0, x0, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1e-12))
        .fold(0.0, f64::max))
}
