//! Pixel embeddings and the row-stochastic similarity matrix built from them.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GcrfError, Result};
use crate::formats::{ByteReader, ByteWriter};
use crate::image::GrayImage;

pub const EMBEDDINGS_MAGIC: &[u8; 8] = b"GCRFEMB1";

/// `D x P` embedding matrix; column `j` is the embedding of pixel `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelEmbeddings {
    values: DMatrix<f64>,
}

impl PixelEmbeddings {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(GcrfError::InvalidInput("embeddings need D >= 1 and P >= 1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GcrfError::NonFinite("pixel embeddings"));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn pixel_count(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Copy with every pixel column scaled to unit norm (zero columns kept).
    pub fn normalized_columns(&self) -> Self {
        let mut values = self.values.clone();
        for mut col in values.column_iter_mut() {
            let n = col.norm();
            if n > 0.0 {
                col /= n;
            }
        }
        Self { values }
    }

    pub fn gram(&self) -> DMatrix<f64> {
        self.values.tr_mul(&self.values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.magic(EMBEDDINGS_MAGIC);
        w.u32(self.dim() as u32);
        w.u32(self.pixel_count() as u32);
        // nalgebra storage is column-major, i.e. pixel-major here
        w.f64s(self.values.as_slice());
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(EMBEDDINGS_MAGIC)?;
        let d = r.u32()? as usize;
        let p = r.u32()? as usize;
        let data = r.f64s(d * p)?;
        r.finish()?;
        Self::new(DMatrix::from_vec(d, p, data))
    }
}

/// Row-stochastic `P x P` matrix `Ŝ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: DMatrix<f64>,
}

impl SimilarityMatrix {
    /// Wraps an explicit matrix after checking it is square and
    /// row-stochastic.
    pub fn from_matrix(rows: DMatrix<f64>) -> Result<Self> {
        if !rows.is_square() || rows.nrows() == 0 {
            return Err(GcrfError::DimensionMismatch(format!(
                "similarity matrix must be square and non-empty, got {}x{}",
                rows.nrows(),
                rows.ncols()
            )));
        }
        for (i, row) in rows.row_iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(GcrfError::InvalidInput(format!("row {i} is not stochastic (sum {s})")));
            }
        }
        Ok(Self { rows })
    }

    pub fn pixel_count(&self) -> usize {
        self.rows.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn row(&self, p: usize) -> Vec<f64> {
        self.rows.row(p).iter().copied().collect()
    }

    /// `(I - Ŝ)^T (I - Ŝ)`, the structure part of the system matrix.
    pub fn structure_matrix(&self) -> DMatrix<f64> {
        let m = self.complement();
        let mut out = m.transpose() * &m;
        symmetrize(&mut out);
        out
    }

    /// `I - Ŝ`.
    pub fn complement(&self) -> DMatrix<f64> {
        let mut m = -self.rows.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += 1.0;
        }
        m
    }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Applies `softmax(gram_i / temperature)` to every row, stabilized by
/// subtracting the row maximum.
pub fn softmax_rows(gram: &DMatrix<f64>, temperature: f64) -> Result<SimilarityMatrix> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(GcrfError::InvalidInput(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if !gram.is_square() || gram.nrows() == 0 {
        return Err(GcrfError::DimensionMismatch(format!(
            "gram matrix must be square and non-empty, got {}x{}",
            gram.nrows(),
            gram.ncols()
        )));
    }
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(GcrfError::NonFinite("gram matrix"));
    }
    let p = gram.nrows();
    // transposed column-major storage is the row-major layout of `gram`
    let by_rows = gram.transpose();
    let mut out = vec![0.0; p * p];
    out.par_chunks_mut(p)
        .zip(by_rows.as_slice().par_chunks(p))
        .for_each(|(dst, src)| {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = ((s - max) / temperature).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        });
    Ok(SimilarityMatrix {
        rows: DMatrix::from_row_slice(p, p, &out),
    })
}

/// Pulls a gradient with respect to `Ŝ` back to the Gram matrix:
/// `dK_ij = Ŝ_ij (dŜ_ij - Σ_k Ŝ_ik dŜ_ik) / T`.
pub fn softmax_rows_backward(
    s: &SimilarityMatrix,
    d_s: &DMatrix<f64>,
    temperature: f64,
) -> DMatrix<f64> {
    let s = s.matrix();
    let mut d_k = DMatrix::zeros(s.nrows(), s.ncols());
    for i in 0..s.nrows() {
        let dot: f64 = s.row(i).iter().zip(d_s.row(i).iter()).map(|(a, b)| a * b).sum();
        for j in 0..s.ncols() {
            d_k[(i, j)] = s[(i, j)] * (d_s[(i, j)] - dot) / temperature;
        }
    }
    d_k
}

/// `softmax_rows(𝒜ᵀ𝒜)`.
pub fn build_similarity(emb: &PixelEmbeddings, temperature: f64) -> Result<SimilarityMatrix> {
    softmax_rows(&emb.gram(), temperature)
}

/// Per-feature weights of the hand-crafted embedding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineWeights {
    pub intensity: f64,
    pub x: f64,
    pub y: f64,
    pub local_mean: f64,
    pub local_std: f64,
    /// Shared weight of the intensity bumps.
    pub bumps: f64,
}

impl Default for BaselineWeights {
    fn default() -> Self {
        Self {
            intensity: 1.0,
            x: 1.0,
            y: 1.0,
            local_mean: 1.0,
            local_std: 0.5,
            bumps: 3.0,
        }
    }
}

/// Number of Gaussian bumps tiling the intensity range.
pub const INTENSITY_BUMPS: usize = 8;

/// Rows of the full baseline embedding: the standardized features followed
/// by the intensity bumps.
pub const BASELINE_EMBEDDING_DIM: usize = BASELINE_FEATURES + INTENSITY_BUMPS;

/// `INTENSITY_BUMPS x P` Gaussian bumps of width `1/8` centered on the
/// eighths of `[0, 1]`.
///
/// Under a dot-product kernel a standardized intensity `z` only ranks pixels
/// (`exp(z_i z_j)` grows with `z_j`), so a mid-gray pixel has no preference
/// for its own level. Bumps make "same intensity" a large inner product.
pub fn intensity_bumps(g: &GrayImage) -> DMatrix<f64> {
    let width = 1.0 / INTENSITY_BUMPS as f64;
    let values = g.intensity();
    DMatrix::from_fn(INTENSITY_BUMPS, g.pixel_count(), |k, i| {
        let t = (values[i] - (k as f64 + 0.5) * width) / width;
        (-0.5 * t * t).exp()
    })
}

/// Raw per-pixel features before standardization: intensity, column,
/// row, 3x3 mean and 3x3 standard deviation.
pub const BASELINE_FEATURES: usize = 5;

/// Standardized, unweighted baseline features as a `5 x P` matrix.
pub fn baseline_features(g: &GrayImage) -> DMatrix<f64> {
    let (w, h) = (g.width(), g.height());
    let p = g.pixel_count();
    let plane = g.plane();
    let mut f = DMatrix::zeros(BASELINE_FEATURES, p);
    for r in 0..h {
        for c in 0..w {
            let idx = r * w + c;
            let (mut sum, mut sq, mut n) = (0.0, 0.0, 0.0);
            for rr in r.saturating_sub(1)..(r + 2).min(h) {
                for cc in c.saturating_sub(1)..(c + 2).min(w) {
                    let v = plane.get(rr, cc);
                    sum += v;
                    sq += v * v;
                    n += 1.0;
                }
            }
            let mean = sum / n;
            f[(0, idx)] = plane.get(r, c);
            f[(1, idx)] = c as f64 / w as f64;
            f[(2, idx)] = r as f64 / h as f64;
            f[(3, idx)] = mean;
            f[(4, idx)] = (sq / n - mean * mean).max(0.0).sqrt();
        }
    }
    for mut row in f.row_iter_mut() {
        let mean = row.mean();
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
        let std = var.sqrt();
        if std < 1e-12 {
            row.fill(0.0);
        } else {
            for v in row.iter_mut() {
                *v = (*v - mean) / std;
            }
        }
    }
    f
}

/// Hand-crafted stand-in for a learned structure encoder.
///
/// Standardized features and intensity bumps, weighted, then truncated or
/// zero-padded to `dim` rows.
pub fn baseline_embeddings(g: &GrayImage, dim: usize, weights: &BaselineWeights) -> Result<PixelEmbeddings> {
    if dim < 3 {
        return Err(GcrfError::InvalidInput(format!("embedding dimension must be >= 3, got {dim}")));
    }
    let f = baseline_features(g);
    let w = [
        weights.intensity,
        weights.x,
        weights.y,
        weights.local_mean,
        weights.local_std,
    ];
    let bumps = intensity_bumps(g);
    let mut values = DMatrix::zeros(dim, g.pixel_count());
    for k in 0..dim.min(BASELINE_EMBEDDING_DIM) {
        if k < BASELINE_FEATURES {
            values.row_mut(k).copy_from(&(f.row(k) * w[k]));
        } else {
            values.row_mut(k).copy_from(&(bumps.row(k - BASELINE_FEATURES) * weights.bumps));
        }
    }
    PixelEmbeddings::new(values)
}
