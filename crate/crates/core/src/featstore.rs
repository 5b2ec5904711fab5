//! Feature matrices, the `FVF1` binary format and line-delimited manifests.
//!
//! `FVF1` layout (all integers little-endian):
//!
//! | bytes            | content                                  |
//! |------------------|------------------------------------------|
//! | 0..4             | ASCII magic `FVF1`                       |
//! | 4                | rank, 1 or 2                             |
//! | 5..5+8·rank      | dimension sizes as `u64`                 |
//! | rest             | row-major `f32` payload                  |
//!
//! A rank-1 file loads as a single-row matrix. Writers always emit rank 2.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FVF1";

/// Frame rate assumed for feature files, which do not record one.
pub const DEFAULT_FRAME_RATE_HZ: f64 = 50.0;

/// Dense row-major matrix of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape(format!("{rows}x{cols} has an empty dimension")));
        }
        if rows.checked_mul(cols) != Some(values.len()) {
            return Err(Error::InvalidShape(format!(
                "{rows}x{cols} needs {} values, got {}",
                rows.saturating_mul(cols),
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { index });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::InvalidShape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, values)
    }

    /// Lossy conversion from `f64` rows.
    pub fn from_rows_f64<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let rows: Vec<Vec<f32>> = rows
            .iter()
            .map(|r| r.as_ref().iter().map(|&v| v as f32).collect())
            .collect();
        Self::from_rows(&rows)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.cols + j]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn transpose(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                values.push(self.get(i, j));
            }
        }
        Self { rows: self.cols, cols: self.rows, values }
    }

    /// Stack matrices with equal column counts vertically.
    pub fn vstack<'a>(parts: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<Self> {
        let mut cols = None;
        let mut rows = 0;
        let mut values = Vec::new();
        for m in parts {
            match cols {
                None => cols = Some(m.cols),
                Some(c) if c != m.cols => {
                    return Err(Error::DimMismatch { expected: c, found: m.cols });
                }
                _ => {}
            }
            rows += m.rows;
            values.extend_from_slice(&m.values);
        }
        Self::new(rows, cols.unwrap_or(0), values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 1 + 16 + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.push(2);
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = |expected: usize| Error::TruncatedFile {
            expected: expected as u64,
            found: bytes.len() as u64,
        };
        if bytes.len() < 5 {
            if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                let mut found = [0u8; 4];
                found.copy_from_slice(&bytes[..4]);
                return Err(Error::BadMagic { found });
            }
            return Err(short(5));
        }
        if &bytes[..4] != MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[..4]);
            return Err(Error::BadMagic { found });
        }
        let rank = bytes[4];
        if rank != 1 && rank != 2 {
            return Err(Error::BadRank(rank));
        }
        let header_len = 5 + 8 * rank as usize;
        if bytes.len() < header_len {
            return Err(short(header_len));
        }
        let mut dims = [1u64; 2];
        for (k, chunk) in bytes[5..header_len].chunks_exact(8).enumerate() {
            dims[k] = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        // rank 1 is a single row vector
        let (rows, cols) = if rank == 1 { (1, dims[0]) } else { (dims[0], dims[1]) };
        let count = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(header_len as u64))
            .ok_or_else(|| Error::InvalidShape(format!("{rows}x{cols} overflows")))?;
        let found = bytes.len() as u64;
        if found < count {
            return Err(Error::TruncatedFile { expected: count, found });
        }
        if found > count {
            return Err(Error::TrailingData { extra: found - count });
        }
        let values = bytes[header_len..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Self::new(rows as usize, cols as usize, values)
    }
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMatrix::from_bytes(&bytes)
}

pub fn write_features(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, m.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Time-ordered frames of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    matrix: FeatureMatrix,
    frame_rate_hz: f64,
    utterance_id: String,
}

impl FrameSequence {
    pub fn new(matrix: FeatureMatrix, frame_rate_hz: f64, utterance_id: impl Into<String>) -> Result<Self> {
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(Error::InvalidArgument(format!("frame rate {frame_rate_hz} must be positive")));
        }
        Ok(Self { matrix, frame_rate_hz, utterance_id: utterance_id.into() })
    }

    pub fn from_frames<R: AsRef<[f32]>>(id: impl Into<String>, frames: &[R]) -> Result<Self> {
        Self::new(FeatureMatrix::from_rows(frames)?, DEFAULT_FRAME_RATE_HZ, id)
    }

    pub fn matrix(&self) -> &FeatureMatrix {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        self.matrix.row(t)
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn id(&self) -> &str {
        &self.utterance_id
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.frame_rate_hz
    }
}

/// Loads one `.fvf` file, or every `.fvf` file of a directory in file-name order.
/// Utterance ids are the file stems.
pub fn load_sequences(path: impl AsRef<Path>, frame_rate_hz: f64) -> Result<Vec<FrameSequence>> {
    let path = path.as_ref();
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut files = Vec::new();
        for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
            let p = entry.map_err(|e| Error::io(path, e))?.path();
            if p.extension().is_some_and(|ext| ext == "fvf") {
                files.push(p);
            }
        }
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    files
        .iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            FrameSequence::new(read_features(p)?, frame_rate_hz, id)
        })
        .collect()
}

/// Like [`load_sequences`] but keyed by utterance id.
pub fn load_sequence_map(path: impl AsRef<Path>, frame_rate_hz: f64) -> Result<HashMap<String, FrameSequence>> {
    Ok(load_sequences(path, frame_rate_hz)?
        .into_iter()
        .map(|s| (s.id().to_owned(), s))
        .collect())
}

/// Parses a line-delimited JSON file, skipping blank lines. Line numbers are 1-based.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub caption_id: String,
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<String>,
}

impl PairRecord {
    pub fn new(caption_id: impl Into<String>, image_id: impl Into<String>) -> Self {
        Self {
            caption_id: caption_id.into(),
            image_id: image_id.into(),
            speaker_id: None,
            feature_path: None,
        }
    }
}

/// Caption to image pairing. Caption order is record order; image order is the
/// order of first appearance. These orders index the rows and columns of every
/// caption × image score matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PairManifest {
    records: Vec<PairRecord>,
    images: Vec<String>,
    image_of_caption: Vec<usize>,
}

impl PairManifest {
    pub fn new(records: Vec<PairRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let mut seen = HashSet::new();
        let mut image_index: HashMap<&str, usize> = HashMap::new();
        let mut images = Vec::new();
        let mut image_of_caption = Vec::with_capacity(records.len());
        for (line, r) in records.iter().enumerate() {
            if r.caption_id.is_empty() {
                return Err(Error::EmptyField { line: line + 1, field: "caption_id" });
            }
            if r.image_id.is_empty() {
                return Err(Error::EmptyField { line: line + 1, field: "image_id" });
            }
            if !seen.insert(r.caption_id.as_str()) {
                return Err(Error::DuplicateId(r.caption_id.clone()));
            }
            let idx = *image_index.entry(r.image_id.as_str()).or_insert_with(|| {
                images.push(r.image_id.clone());
                images.len() - 1
            });
            image_of_caption.push(idx);
        }
        Ok(Self { records, images, image_of_caption })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_jsonl(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(&self.records, path)
    }

    pub fn records(&self) -> &[PairRecord] {
        &self.records
    }

    pub fn n_captions(&self) -> usize {
        self.records.len()
    }

    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn images(&self) -> &[String] {
        &self.images
    }

    /// Column index of the image matched by caption `caption`.
    pub fn image_of(&self, caption: usize) -> usize {
        self.image_of_caption[caption]
    }

    pub fn captions_of(&self, image: usize) -> impl Iterator<Item = usize> + '_ {
        self.image_of_caption
            .iter()
            .enumerate()
            .filter(move |(_, &img)| img == image)
            .map(|(c, _)| c)
    }

    pub fn match_mask(&self) -> MatchMask {
        let (rows, cols) = (self.n_captions(), self.n_images());
        let mut bits = vec![1u8; rows * cols];
        for (i, &j) in self.image_of_caption.iter().enumerate() {
            bits[i * cols + j] = 0;
        }
        MatchMask { rows, cols, bits }
    }
}

/// The masking matrix `M` of the matching loss: 0 where caption `i` matches
/// image `j`, 1 where the pair counts as a negative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchMask {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl MatchMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<u8>) -> Result<Self> {
        if rows * cols != bits.len() || rows == 0 || cols == 0 {
            return Err(Error::InvalidShape(format!("{rows}x{cols} mask from {} entries", bits.len())));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape("ragged mask rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// `1 - I`: the aligned-batch mask where only the diagonal is positive.
    pub fn off_diagonal(n: usize) -> Self {
        let mut bits = vec![1u8; n * n];
        for i in 0..n {
            bits[i * n + i] = 0;
        }
        Self { rows: n, cols: n, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.bits[i * self.cols + j]
    }

    pub fn is_negative(&self, i: usize, j: usize) -> bool {
        self.get(i, j) == 1
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.bits.chunks_exact(self.cols).map(<[u8]>::to_vec).collect()
    }
}

pub fn build_positive_mask(manifest: &PairManifest) -> MatchMask {
    manifest.match_mask()
}
