//! Dense matrices, seeded randomness and the `TSEM` feature file format.
//!
//! `TSEM` layout, all integers little-endian:
//!
//! | bytes        | content                          |
//! |--------------|----------------------------------|
//! | 4            | magic `b"TSEM"`                  |
//! | 4            | version, `u32` = 1               |
//! | 4            | `ndim`, `u32`                    |
//! | 4 * ndim     | dims, `u32` each                 |
//! | 4 * prod(dims) | payload, `f32` row-major       |
//!
//! Values are held as `f64` in memory and narrowed to `f32` on write.

use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};

pub const MAGIC: [u8; 4] = *b"TSEM";
pub const VERSION: u32 = 1;

/// Row-major dense matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "non-finite value at row {}, col {}",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds a matrix by evaluating `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks(0) panics, and a 0-column matrix still has `rows` empty rows
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.row_iter().map(<[f64]>::to_vec).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        self.matmul_with(rhs, Execution::default())
    }

    /// `self · rhs`, rows of the product computed independently.
    pub fn matmul_with(&self, rhs: &Self, exec: Execution) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let n = rhs.cols;
        let mut data = vec![0.0; self.rows * n];
        par::fill_chunks(exec, &mut data, n, |i, out| {
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        });
        Self::new(self.rows, n, data)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_transposed(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::shape(format!(
                "matmul_transposed {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let n = rhs.rows;
        let mut data = vec![0.0; self.rows * n];
        par::fill_chunks(Execution::default(), &mut data, n, |i, out| {
            let a = self.row(i);
            for (j, o) in out.iter_mut().enumerate() {
                *o = dot(a, rhs.row(j));
            }
        });
        Self::new(self.rows, n, data)
    }

    /// `selfᵀ · rhs`.
    pub fn transposed_matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::shape(format!(
                "transposed_matmul ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        self.transpose().matmul(rhs)
    }

    /// Horizontal concatenation; all blocks must share the row count.
    pub fn hconcat(blocks: &[&Self]) -> Result<Self> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(Error::shape("hconcat blocks differ in row count"));
        }
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Self> {
        if start + width > self.cols {
            return Err(Error::shape(format!(
                "column block {start}..{} out of {} columns",
                start + width,
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * width);
        for r in self.row_iter() {
            data.extend_from_slice(&r[start..start + width]);
        }
        Ok(Self {
            rows: self.rows,
            cols: width,
            data,
        })
    }

    /// Vertical concatenation; all blocks must share the column count.
    pub fn vconcat(blocks: &[&Self]) -> Result<Self> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        if blocks.iter().any(|b| b.cols != cols) {
            return Err(Error::shape("vconcat blocks differ in column count"));
        }
        let rows = blocks.iter().map(|b| b.rows).sum();
        let data = blocks.iter().flat_map(|b| b.data.iter().copied()).collect();
        Ok(Self { rows, cols, data })
    }

    pub fn row_block(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.rows {
            return Err(Error::shape(format!(
                "row block {start}..{} out of {} rows",
                start + count,
                self.rows
            )));
        }
        Ok(Self {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        })
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::shape(format!("row {i} out of {}", self.rows)));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        Self::new(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * alpha).collect(),
        )
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(format!(
                "add {:?} and {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        Self::new(
            self.rows,
            self.cols,
            self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        )
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&self, bias: &[f64]) -> Result<Self> {
        if bias.len() != self.cols {
            return Err(Error::shape(format!(
                "bias of length {} for {} columns",
                bias.len(),
                self.cols
            )));
        }
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(self.cols.max(1)) {
            for (v, b) in chunk.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Self::new(self.rows, self.cols, data)
    }

    /// Mean of the rows, a vector of length `cols`.
    pub fn mean_rows(&self) -> Vec<f64> {
        let mut out = self.column_sums();
        if self.rows > 0 {
            let n = self.rows as f64;
            out.iter_mut().for_each(|v| *v /= n);
        }
        out
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Deterministic generator: ChaCha8 keyed by a 64-bit seed.
///
/// ChaCha8 output is specified bit-for-bit and independent of platform
/// endianness and word size, so seeded outputs are reproducible everywhere.
/// Gaussian draws use the ziggurat sampler from `rand_distr`.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` under the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[lo, hi)`.
    pub fn below(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..hi)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates with our own draws so the permutation is pinned to this crate
        for i in (1..items.len()).rev() {
            let j = self.below(0, i + 1);
            items.swap(i, j);
        }
    }
}

/// `rows x cols` matrix with entries drawn i.i.d. from `N(0, scale²)`.
pub fn seeded_gaussian_matrix(
    rng: &mut SeededRng,
    rows: usize,
    cols: usize,
    scale: f64,
) -> Result<FeatureMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::param("gaussian matrix needs rows, cols >= 1"));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::param(format!("scale must be positive, got {scale}")));
    }
    let data = (0..rows * cols)
        .map(|_| rng.standard_normal() * scale)
        .collect();
    FeatureMatrix::new(rows, cols, data)
}

/// Serializes an arbitrary-rank `f32` tensor to `TSEM` bytes.
pub fn encode_tensor(dims: &[usize], values: &[f32]) -> Result<Vec<u8>> {
    let numel: usize = dims.iter().product();
    if numel != values.len() {
        return Err(Error::shape(format!(
            "dims {dims:?} need {numel} values, got {}",
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(12 + 4 * dims.len() + 4 * values.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_dim(dims.len())?.to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&u32_dim(d)?.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn u32_dim(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))
}

/// Parses `TSEM` bytes into `(dims, values)`.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut cursor = Cursor { bytes, pos: 0 };
    let magic = cursor.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:02x?}")));
    }
    let version = cursor.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let ndim = cursor.u32("ndim")? as usize;
    let mut dims = Vec::with_capacity(ndim.min(16));
    for _ in 0..ndim {
        dims.push(cursor.u32("dims")? as usize);
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("dims overflow".into()))?;
    let payload = &bytes[cursor.pos..];
    if Some(payload.len()) != numel.checked_mul(4) {
        return Err(Error::Format(format!(
            "payload length mismatch: dims {dims:?} need {numel} floats, found {} bytes",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, values))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format(format!("truncated header while reading {what}")));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_tensor(path: impl AsRef<Path>, dims: &[usize], values: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(dims, values)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

/// Narrows a matrix to `f32` and serializes it with dims `[rows, cols]`.
pub fn encode_features(m: &FeatureMatrix) -> Result<Vec<u8>> {
    let values: Vec<f32> = m.data().iter().map(|&v| v as f32).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("value overflows f32".into()));
    }
    encode_tensor(&[m.rows(), m.cols()], &values)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    let (dims, values) = decode_tensor(bytes)?;
    if dims.len() != 2 {
        return Err(Error::Format(format!(
            "feature matrix needs 2 dims, file has {}",
            dims.len()
        )));
    }
    FeatureMatrix::new(
        dims[0],
        dims[1],
        values.into_iter().map(f64::from).collect(),
    )
}

pub fn write_features(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_features(m)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

/// One row of a sentence-bank manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceEntry {
    pub row: usize,
    pub sentence_id: String,
    pub text: String,
}

pub fn read_sentence_manifest(path: impl AsRef<Path>) -> Result<Vec<SentenceEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<SentenceEntry> = serde_json::from_str(&text)?;
    for (i, e) in entries.iter().enumerate() {
        if e.row != i {
            return Err(Error::Format(format!(
                "manifest entry {i} declares row {}",
                e.row
            )));
        }
    }
    Ok(entries)
}

pub fn write_sentence_manifest(entries: &[SentenceEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(entries)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
