use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below this are treated as a failed decomposition.
const NEGATIVE_EIGEN_TOLERANCE: f64 = -1e-8;
const JITTER: f64 = 1e-6;
/// Smallest-to-largest eigenvalue ratio below which a covariance counts as
/// ill-conditioned.
const CONDITION_FLOOR: f64 = 1e-10;

/// Mean and (unbiased) covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        if features.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 feature vectors, got {}",
                features.len()
            )));
        }
        let d = features[0].len();
        if d == 0 {
            return Err(Error::InvalidArgument("empty feature vectors".into()));
        }
        let n = features.len();
        let mut data = DMatrix::zeros(n, d);
        for (i, f) in features.iter().enumerate() {
            if f.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: f.len(),
                });
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("feature vector {i}")));
            }
            data.row_mut(i).copy_from(&DVector::from_column_slice(f).transpose());
        }
        let mean = data.row_mean().transpose();
        for mut row in data.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = data.transpose() * &data / (n as f64 - 1.0);
        Ok(Self { mean, cov })
    }
}

fn eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
}

fn jittered(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let e = eigen(cov).eigenvalues;
    let max = e.max().max(0.0);
    let min = e.min();
    if min <= CONDITION_FLOOR * max.max(1.0) {
        cov + DMatrix::identity(cov.nrows(), cov.ncols()) * JITTER
    } else {
        cov.clone()
    }
}

/// Square root of a symmetric positive semi-definite matrix.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = eigen(m);
    let mut vals = e.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < NEGATIVE_EIGEN_TOLERANCE {
            return Err(Error::Degenerate(format!("covariance eigenvalue {v} is negative")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose())
}

/// `‖μ₁ − μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁^½ Σ₂ Σ₁^½)^½)`.
///
/// Ill-conditioned covariances get `1e-6·I` added first.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::DimensionMismatch {
            expected: a.mean.len(),
            actual: b.mean.len(),
        });
    }
    let (s1, s2) = (jittered(&a.cov), jittered(&b.cov));
    let root1 = sqrt_psd(&s1)?;
    let inner = &root1 * &s2 * &root1;
    let e = eigen(&inner).eigenvalues;
    let mut trace_sqrt = 0.0;
    for &v in e.iter() {
        if v < NEGATIVE_EIGEN_TOLERANCE {
            return Err(Error::Degenerate(format!("product eigenvalue {v} is negative")));
        }
        trace_sqrt += v.max(0.0).sqrt();
    }
    let diff = &a.mean - &b.mean;
    let value = diff.norm_squared() + s1.trace() + s2.trace() - 2.0 * trace_sqrt;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("Fréchet distance {value}")));
    }
    Ok(value)
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    frechet_distance(&GaussianStats::fit(features_a)?, &GaussianStats::fit(features_b)?)
}
