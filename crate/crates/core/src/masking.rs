//! Span masks for masked prediction.
//!
//! Span starts are drawn per timestep with probability `p`; each start masks
//! `span_len` frames, truncated at the end of the utterance, with overlaps
//! merged. In [`MaskMode::BatchMinCrop`] every utterance in a batch keeps only
//! as many starts as the utterance with the fewest, so short utterances end up
//! proportionally more masked than long ones.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    #[default]
    PerUtterance,
    BatchMinCrop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub p: f64,
    pub span_len: usize,
    pub mode: MaskMode,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self { p: 0.065, span_len: 10, mode: MaskMode::PerUtterance, seed: 42 }
    }
}

impl MaskSpec {
    pub fn new(p: f64, span_len: usize, mode: MaskMode, seed: u64) -> Result<Self> {
        let spec = Self { p, span_len, mode, seed };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidArgument(format!("mask probability {} outside [0, 1]", self.p)));
        }
        if self.span_len == 0 {
            return Err(Error::InvalidArgument("span length must be at least 1".into()));
        }
        Ok(())
    }

    /// `1 - (1 - p)^span_len`: the masked fraction away from the boundaries.
    pub fn expected_fraction(&self) -> f64 {
        1.0 - (1.0 - self.p).powi(self.span_len as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    flags: Vec<bool>,
    starts: Vec<usize>,
}

impl Mask {
    fn from_starts(len: usize, starts: Vec<usize>, span_len: usize) -> Self {
        let mut flags = vec![false; len];
        for &s in &starts {
            let end = (s + span_len).min(len);
            flags[s..end].iter_mut().for_each(|f| *f = true);
        }
        Self { flags, starts }
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    /// Span start positions, ascending.
    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_count() as f64 / self.len() as f64
    }

    pub fn masked_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i)
    }
}

fn draw_starts(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..len).filter(|_| rng.random_bool(p)).collect()
}

pub fn sample_mask(len: usize, spec: &MaskSpec) -> Result<Mask> {
    spec.validate()?;
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let starts = draw_starts(len, spec.p, &mut rng);
    Ok(Mask::from_starts(len, starts, spec.span_len))
}

/// Masks for a batch. Utterance `i` draws from the seed `spec.seed ^ i`.
pub fn batch_masks(lengths: &[usize], spec: &MaskSpec) -> Result<Vec<Mask>> {
    spec.validate()?;
    if lengths.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if lengths.contains(&0) {
        return Err(Error::EmptySequence);
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..lengths.len())
        .map(|i| ChaCha8Rng::seed_from_u64(spec.seed ^ i as u64))
        .collect();
    let mut starts: Vec<Vec<usize>> = lengths
        .iter()
        .zip(rngs.iter_mut())
        .map(|(&len, rng)| draw_starts(len, spec.p, rng))
        .collect();

    if spec.mode == MaskMode::BatchMinCrop {
        let min = starts.iter().map(Vec::len).min().unwrap_or(0);
        for (s, rng) in starts.iter_mut().zip(rngs.iter_mut()) {
            if s.len() > min {
                let mut keep: Vec<usize> = sample(rng, s.len(), min).into_iter().map(|k| s[k]).collect();
                keep.sort_unstable();
                *s = keep;
            }
        }
    }

    Ok(lengths
        .iter()
        .zip(starts)
        .map(|(&len, s)| Mask::from_starts(len, s, spec.span_len))
        .collect())
}
