//! Set-level metrics on pooled embeddings.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::extractor::FeatureExtractor;
use crate::tile::ImageTile;

/// Eigenvalues below `-EIG_TOL * max(1, |lambda_max|)` count as a
/// significant clamp and are flagged.
pub const EIG_TOL: f64 = 1e-10;

/// `n x d` embedding matrix, one row per image.
pub fn embedding_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("embeddings have differing dimensions".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

fn mean_and_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = DVector::from_fn(x.ncols(), |j, _| x.column(j).sum() / n);
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu, cov)
}

/// Square root of a symmetric PSD matrix; returns whether a significantly
/// negative eigenvalue had to be clamped.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let clamped = eig.eigenvalues.iter().any(|v| *v < -EIG_TOL * scale);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    (q * DMatrix::from_diagonal(&roots) * q.transpose(), clamped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidResult {
    pub value: f64,
    /// True when an ill-conditioned covariance forced eigenvalue clamping.
    pub clamped: bool,
}

/// Frechet distance between Gaussians fitted to two embedding sets.
/// `Tr (S_a S_b)^(1/2)` is evaluated as `Tr (R S_b R)^(1/2)` with
/// `R = S_a^(1/2)`, which keeps every decomposition symmetric.
pub fn fid_from_embeddings(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<FidResult> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Data(format!("FID needs at least 2 samples per set, got {} and {}", a.nrows(), b.nrows())));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("embedding dims differ: {} vs {}", a.ncols(), b.ncols())));
    }
    let (mu_a, cov_a) = mean_and_cov(a);
    let (mu_b, cov_b) = mean_and_cov(b);
    let (root_a, c1) = sqrtm_psd(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let (cross, c2) = sqrtm_psd(&inner);
    let diff = mu_a - mu_b;
    let value = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok(FidResult {
        value: value.max(0.0),
        clamped: c1 || c2,
    })
}

/// `k(x, y) = (x.y / d + 1)^3`.
pub fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

fn kernel_matrix(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let d = x.ncols() as f64;
    (x * y.transpose()).map(|v| (v / d + 1.0).powi(3))
}

fn off_diagonal_mean(k: &DMatrix<f64>) -> f64 {
    let m = k.nrows();
    (k.sum() - k.trace()) / (m * (m - 1)) as f64
}

/// Unbiased MMD^2 of one pair of equally sized blocks. All three kernel
/// sums skip the `i == j` terms, so a block compared with itself scores 0.
pub fn mmd2_unbiased(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    off_diagonal_mean(&kernel_matrix(x, x)) + off_diagonal_mean(&kernel_matrix(y, y))
        - 2.0 * off_diagonal_mean(&kernel_matrix(x, y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidResult {
    pub raw: f64,
    /// `raw * 1e3`.
    pub scaled: f64,
    pub blocks: usize,
}

/// Mean of [`mmd2_unbiased`] over consecutive blocks of `block_size` rows.
pub fn kid_from_embeddings(a: &DMatrix<f64>, b: &DMatrix<f64>, block_size: usize) -> Result<KidResult> {
    if block_size < 2 {
        return Err(Error::Config(format!("KID block size {block_size} must be at least 2")));
    }
    if a.nrows() < block_size || b.nrows() < block_size {
        return Err(Error::Data(format!(
            "KID needs at least {block_size} samples per set, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("embedding dims differ: {} vs {}", a.ncols(), b.ncols())));
    }
    let blocks = a.nrows().min(b.nrows()) / block_size;
    let mut total = 0.0;
    for blk in 0..blocks {
        let s = blk * block_size;
        total += mmd2_unbiased(&a.rows(s, block_size).into_owned(), &b.rows(s, block_size).into_owned());
    }
    let raw = total / blocks as f64;
    Ok(KidResult {
        raw,
        scaled: raw * 1e3,
        blocks,
    })
}

fn pooled_set(images: &[ImageTile], fx: &dyn FeatureExtractor) -> Result<DMatrix<f64>> {
    let rows = images.iter().map(|i| fx.pooled(i)).collect::<Result<Vec<_>>>()?;
    embedding_matrix(&rows)
}

pub fn fid(set_a: &[ImageTile], set_b: &[ImageTile], fx: &dyn FeatureExtractor) -> Result<FidResult> {
    fid_from_embeddings(&pooled_set(set_a, fx)?, &pooled_set(set_b, fx)?)
}

pub fn kid(set_a: &[ImageTile], set_b: &[ImageTile], fx: &dyn FeatureExtractor, block_size: usize) -> Result<KidResult> {
    kid_from_embeddings(&pooled_set(set_a, fx)?, &pooled_set(set_b, fx)?, block_size)
}
