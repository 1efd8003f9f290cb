use nalgebra::{DMatrix, DVector};

use super::ut::{sigma_points_4m_from_factor, sigma_points_from_factor, Placement, SigmaSet, UtParams};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, mean_diagonal};

/// Sigma points of the augmented state `z = [x, ξ]` with covariance
/// `diag(P, I)`. Noise-axis points sit at `x = m` and carry a single
/// nonzero noise coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSigma {
    pub state_dim: usize,
    /// `d x count` state block.
    pub zx: DMatrix<f64>,
    /// `(noise axis, value)` for noise-axis points.
    pub noise: Vec<Option<(usize, f64)>>,
    pub wm: DVector<f64>,
    pub wc: DVector<f64>,
}

impl AugmentedSigma {
    pub fn len(&self) -> usize {
        self.zx.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.zx.ncols() == 0
    }

    /// A single point at the mean with unit weight: the decoupled flow of
    /// this set is the first-order (linearized) mean prediction.
    pub fn center_only(mean: &DVector<f64>) -> Self {
        AugmentedSigma {
            state_dim: mean.len(),
            zx: DMatrix::from_column_slice(mean.len(), 1, mean.as_slice()),
            noise: vec![None],
            wm: DVector::from_element(1, 1.0),
            wc: DVector::from_element(1, 1.0),
        }
    }

    fn from_set(set: SigmaSet, d: usize) -> Self {
        let noise = set
            .placements
            .iter()
            .enumerate()
            .map(|(i, p)| match p {
                Placement::Axis { axis, .. } if *axis >= d => Some((axis - d, set.points[(*axis, i)])),
                _ => None,
            })
            .collect();
        AugmentedSigma {
            state_dim: d,
            zx: set.points.rows(0, d).into_owned(),
            noise,
            wm: set.mean_weights,
            wc: set.cov_weights,
        }
    }
}

fn augment(mean: &DVector<f64>, chol: &DMatrix<f64>, noise_dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let d = mean.len();
    let n = d + noise_dim;
    let mut m = DVector::zeros(n);
    m.rows_mut(0, d).copy_from(mean);
    let mut l = DMatrix::zeros(n, n);
    l.view_mut((0, 0), (d, d)).copy_from(chol);
    for j in d..n {
        l[(j, j)] = 1.0;
    }
    (m, l)
}

fn factor(cov: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    cholesky_jittered(cov, mean_diagonal(cov), context)
}

/// Symmetric (two-moment) augmented sigma points.
pub fn augmented_sigma_2m(mean: &DVector<f64>, cov: &DMatrix<f64>, noise_dim: usize, p: &UtParams) -> Result<AugmentedSigma> {
    let d = mean.len();
    if cov.nrows() != d || cov.ncols() != d {
        return Err(Error::Shape(format!("mean has {d} entries, covariance is {}x{}", cov.nrows(), cov.ncols())));
    }
    let chol = factor(cov, "augmented sigma points")?;
    augmented_from_factor(mean, &chol, noise_dim, p)
}

pub(crate) fn augmented_from_factor(
    mean: &DVector<f64>,
    chol: &DMatrix<f64>,
    noise_dim: usize,
    p: &UtParams,
) -> Result<AugmentedSigma> {
    let (m, l) = augment(mean, chol, noise_dim);
    Ok(AugmentedSigma::from_set(sigma_points_from_factor(&m, &l, p)?, mean.len()))
}

/// Four-moment augmented sigma points: the state block matches the given
/// marginal skewness and kurtosis, the noise block is standard normal
/// (skewness 0, kurtosis 3). Returns whether the symmetric set had to be
/// used instead.
pub fn augmented_sigma_4m(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    skew: &[f64],
    kurt: &[f64],
    noise_dim: usize,
    fallback: &UtParams,
) -> Result<(AugmentedSigma, bool)> {
    let d = mean.len();
    if cov.nrows() != d || skew.len() != d || kurt.len() != d {
        return Err(Error::Shape("four-moment augmented sigma points: dimension mismatch".into()));
    }
    let chol = factor(cov, "augmented four-moment sigma points")?;
    let (m, l) = augment(mean, &chol, noise_dim);
    let n = d + noise_dim;
    let mut p = DMatrix::zeros(n, n);
    p.view_mut((0, 0), (d, d)).copy_from(cov);
    for j in d..n {
        p[(j, j)] = 1.0;
    }
    let mut s = skew.to_vec();
    s.resize(n, 0.0);
    let mut k = kurt.to_vec();
    k.resize(n, 3.0);
    let r = sigma_points_4m_from_factor(&m, &l, &p, &s, &k, fallback)?;
    Ok((AugmentedSigma::from_set(r.set, d), r.fell_back))
}
