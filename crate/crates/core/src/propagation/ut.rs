//! Sigma-point construction and the static unscented transform.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, mean_diagonal};

/// Spread parameters of the scaled unscented transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UtParams {
    fn default() -> Self {
        Self { alpha: 1e-3, beta: 2.0, kappa: 0.0 }
    }
}

impl UtParams {
    pub fn new(alpha: f64, beta: f64, kappa: f64) -> Self {
        Self { alpha, beta, kappa }
    }

    /// `λ = α²(n + κ) - n`
    pub fn lambda(&self, n: usize) -> f64 {
        self.alpha * self.alpha * (n as f64 + self.kappa) - n as f64
    }

    /// Validates the parameters for dimension `n`, returning `n + λ`.
    pub fn check(&self, n: usize) -> Result<f64> {
        let spread = n as f64 + self.lambda(n);
        if !(self.alpha > 0.0) || !(spread > 0.0) {
            return Err(Error::Config(format!(
                "unscented transform needs alpha > 0 and n + lambda > 0 (alpha {}, n {n}, kappa {})",
                self.alpha, self.kappa
            )));
        }
        Ok(spread)
    }
}

/// Where a sigma point sits relative to the mean, in whitened coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Center,
    /// Positive or negative excursion along whitened axis `axis`.
    Axis { axis: usize, positive: bool },
}

/// Sigma points `Z` (one column per point) with mean weights `w_m` and the
/// diagonal covariance weights `W^{(c)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSet {
    pub points: DMatrix<f64>,
    pub mean_weights: DVector<f64>,
    pub cov_weights: DVector<f64>,
    pub placements: Vec<Placement>,
}

impl SigmaSet {
    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    /// `W = (I - [w_m … w_m]) diag(W^{(c)}) (I - [w_m … w_m])ᵀ`
    pub fn cov_weight_matrix(&self) -> DMatrix<f64> {
        let p = self.len();
        let mut centering = DMatrix::<f64>::identity(p, p);
        for c in 0..p {
            for r in 0..p {
                centering[(r, c)] -= self.mean_weights[r];
            }
        }
        &centering * DMatrix::from_diagonal(&self.cov_weights) * centering.transpose()
    }

    /// Weighted mean and covariance of arbitrary columns `y` laid out like
    /// the points.
    pub fn moments_of(&self, y: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        weighted_moments(y, &self.mean_weights, &self.cov_weights)
    }
}

/// Weighted mean `y₀ + Σ_{i≥1} w_i (y_i - y₀)` and covariance of the columns
/// of `y`. Equal to `Y w_m` and `Y W Yᵀ`, but free of cancellation between
/// the large opposite weights that small spreads produce.
pub fn weighted_moments(y: &DMatrix<f64>, wm: &DVector<f64>, wc: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mean = y.column(0) + center_offset(y, wm);
    (mean, cross_moment(y, y, wm, wc))
}

/// `Σ_{i≥1} w_i (y_i - y₀)`
pub fn center_offset(y: &DMatrix<f64>, w: &DVector<f64>) -> DVector<f64> {
    let mut e = DVector::zeros(y.nrows());
    for i in 1..y.ncols() {
        for r in 0..y.nrows() {
            e[r] += w[i] * (y[(r, i)] - y[(r, 0)]);
        }
    }
    e
}

/// `Σ_i W^{(c)}_i (a_i - ā)(b_i - b̄)ᵀ` with `ā = Σ_i w_i a_i`, evaluated
/// relative to the first column: with `a_i ← a_i - a_0`,
/// `Σ_{i≥1} W^{(c)}_i a_i b_iᵀ - f_a e_bᵀ - e_a f_bᵀ + (Σ W^{(c)}) e_a e_bᵀ`
/// where `e = Σ w_i a_i` and `f = Σ W^{(c)}_i a_i`.
pub fn cross_moment(a: &DMatrix<f64>, b: &DMatrix<f64>, wm: &DVector<f64>, wc: &DVector<f64>) -> DMatrix<f64> {
    let (da, db, p) = (a.nrows(), b.nrows(), a.ncols());
    let (ea, eb) = (center_offset(a, wm), center_offset(b, wm));
    let (fa, fb) = (center_offset(a, wc), center_offset(b, wc));
    let s = wc.sum();
    let mut c = DMatrix::zeros(da, db);
    let mut ai = vec![0.0; da];
    let mut bi = vec![0.0; db];
    for i in 1..p {
        for r in 0..da {
            ai[r] = a[(r, i)] - a[(r, 0)];
        }
        for r in 0..db {
            bi[r] = b[(r, i)] - b[(r, 0)];
        }
        let w = wc[i];
        for r in 0..da {
            let wa = w * ai[r];
            for q in 0..db {
                c[(r, q)] += wa * bi[q];
            }
        }
    }
    for r in 0..da {
        for q in 0..db {
            c[(r, q)] += -fa[r] * eb[q] - ea[r] * fb[q] + s * ea[r] * eb[q];
        }
    }
    c
}

/// Reverse pass of [`cross_moment`]: accumulates the cotangents of the
/// columns of `a` and `b` given `C̄`.
pub fn cross_moment_vjp(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    wm: &DVector<f64>,
    wc: &DVector<f64>,
    c_bar: &DMatrix<f64>,
    a_bar: &mut DMatrix<f64>,
    b_bar: &mut DMatrix<f64>,
) {
    let p = a.ncols();
    let (ea, eb) = (center_offset(a, wm), center_offset(b, wm));
    let (fa, fb) = (center_offset(a, wc), center_offset(b, wc));
    let s = wc.sum();
    let ea_bar = -(c_bar * &fb) + c_bar * &eb * s;
    let eb_bar = -(c_bar.transpose() * &fa) + c_bar.transpose() * &ea * s;
    let fa_bar = -(c_bar * &eb);
    let fb_bar = -(c_bar.transpose() * &ea);
    let mut a0 = DVector::zeros(a.nrows());
    let mut b0 = DVector::zeros(b.nrows());
    for i in 1..p {
        let ai = a.column(i) - a.column(0);
        let bi = b.column(i) - b.column(0);
        let ga = c_bar * &bi * wc[i] + &ea_bar * wm[i] + &fa_bar * wc[i];
        let gb = c_bar.transpose() * &ai * wc[i] + &eb_bar * wm[i] + &fb_bar * wc[i];
        let mut col = a_bar.column_mut(i);
        col += &ga;
        a0 -= &ga;
        let mut col = b_bar.column_mut(i);
        col += &gb;
        b0 -= &gb;
    }
    let mut col = a_bar.column_mut(0);
    col += a0;
    let mut col = b_bar.column_mut(0);
    col += b0;
}

/// `2n + 1` sigma points `m`, `m ± sqrt(n + λ) [chol P]_i` with the scaled
/// unscented weights.
pub fn sigma_points(mean: &DVector<f64>, cov: &DMatrix<f64>, p: &UtParams) -> Result<SigmaSet> {
    let n = mean.len();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(Error::Shape(format!("mean has {n} entries but covariance is {}x{}", cov.nrows(), cov.ncols())));
    }
    let chol = cholesky_jittered(cov, mean_diagonal(cov), "sigma_points")?;
    sigma_points_from_factor(mean, &chol, p)
}

/// Same as [`sigma_points`] with a precomputed square-root factor.
pub fn sigma_points_from_factor(mean: &DVector<f64>, factor: &DMatrix<f64>, p: &UtParams) -> Result<SigmaSet> {
    let n = mean.len();
    let spread = p.check(n)?;
    let lambda = p.lambda(n);
    let c = spread.sqrt();
    let count = 2 * n + 1;
    let mut points = DMatrix::zeros(n, count);
    let mut placements = Vec::with_capacity(count);
    points.set_column(0, mean);
    placements.push(Placement::Center);
    for i in 0..n {
        let col = factor.column(i) * c;
        points.set_column(1 + i, &(mean + &col));
        points.set_column(1 + n + i, &(mean - &col));
    }
    for i in 0..n {
        placements.push(Placement::Axis { axis: i, positive: true });
    }
    for i in 0..n {
        placements.push(Placement::Axis { axis: i, positive: false });
    }
    let wi = 1.0 / (2.0 * spread);
    let mut wm = DVector::from_element(count, wi);
    let mut wc = DVector::from_element(count, wi);
    wm[0] = lambda / spread;
    wc[0] = lambda / spread + (1.0 - p.alpha * p.alpha + p.beta);
    Ok(SigmaSet { points, mean_weights: wm, cov_weights: wc, placements })
}

/// Applies `f` to every sigma point and returns `(Y w_m, Y W Yᵀ)`.
pub fn ut_transform<F>(s: &SigmaSet, mut f: F) -> Result<(DVector<f64>, DMatrix<f64>)>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let mut cols = Vec::with_capacity(s.len());
    for i in 0..s.len() {
        let y = f(&s.points.column(i).into_owned());
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinitePropagation { point: i });
        }
        if let Some(first) = cols.first() {
            let first: &DVector<f64> = first;
            if first.len() != y.len() {
                return Err(Error::Shape("transform output length varies across sigma points".into()));
            }
        }
        cols.push(y);
    }
    let y = DMatrix::from_columns(&cols);
    Ok(s.moments_of(&y))
}

/// Outcome of the four-moment construction.
#[derive(Debug, Clone)]
pub struct FourMomentSet {
    pub set: SigmaSet,
    /// True when the requested moments were not realizable and the
    /// symmetric two-moment set was returned instead.
    pub fell_back: bool,
}

/// Sigma points matching mean, covariance, and per-component skewness and
/// kurtosis.
///
/// In whitened coordinates `z = L⁻¹(x - m)` each axis carries one point at
/// `+a` and one at `-b` plus a shared center. Per axis the weights solve
/// `p a = q b`, `p a² + q b² = 1`, `p a³ - q b³ = s`, `p a⁴ + q b⁴ = k`,
/// which gives `a - b = s`, `ab = k - s²`, `p + q = 1 / (k - s²)`. The
/// whitened third and fourth moments are chosen so that the marginals of
/// `x = m + L z` hit the targets; since every point lies on a single axis,
/// `E[(x_j - m_j)^r] = Σ_i L_ji^r E[z_i^r]`, a triangular system.
pub fn sigma_points_4m(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    skew: &[f64],
    kurt: &[f64],
    fallback: &UtParams,
) -> Result<FourMomentSet> {
    let n = mean.len();
    if cov.nrows() != n || skew.len() != n || kurt.len() != n {
        return Err(Error::Shape("four-moment sigma points: dimension mismatch".into()));
    }
    let chol = cholesky_jittered(cov, mean_diagonal(cov), "sigma_points_4m")?;
    sigma_points_4m_from_factor(mean, &chol, cov, skew, kurt, fallback)
}

pub fn sigma_points_4m_from_factor(
    mean: &DVector<f64>,
    chol: &DMatrix<f64>,
    cov: &DMatrix<f64>,
    skew: &[f64],
    kurt: &[f64],
    fallback: &UtParams,
) -> Result<FourMomentSet> {
    let n = mean.len();
    let fall = || -> Result<FourMomentSet> {
        Ok(FourMomentSet { set: sigma_points_from_factor(mean, chol, fallback)?, fell_back: true })
    };
    // whitened third/fourth moments by forward substitution
    let mut m3 = vec![0.0; n];
    let mut m4 = vec![0.0; n];
    for j in 0..n {
        let var = cov[(j, j)];
        if !(var > 0.0) || !skew[j].is_finite() || !kurt[j].is_finite() {
            return fall();
        }
        let sd = var.sqrt();
        let mut t3 = skew[j] * sd.powi(3);
        let mut t4 = kurt[j] * var * var;
        for i in 0..j {
            t3 -= chol[(j, i)].powi(3) * m3[i];
            t4 -= chol[(j, i)].powi(4) * m4[i];
        }
        let ljj = chol[(j, j)];
        m3[j] = t3 / ljj.powi(3);
        m4[j] = t4 / ljj.powi(4);
    }
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut pw = vec![0.0; n];
    let mut qw = vec![0.0; n];
    let mut axis_mass = 0.0;
    for i in 0..n {
        let excess = m4[i] - m3[i] * m3[i];
        // realizability: kurtosis >= 1 + skew² (strict for a 3-point law)
        if !(excess > 1.0 + 1e-12) {
            return fall();
        }
        let root = (4.0 * m4[i] - 3.0 * m3[i] * m3[i]).sqrt();
        a[i] = 0.5 * (m3[i] + root);
        b[i] = 0.5 * (root - m3[i]);
        pw[i] = 1.0 / (a[i] * root);
        qw[i] = 1.0 / (b[i] * root);
        axis_mass += 1.0 / excess;
    }
    let count = 2 * n + 1;
    let mut points = DMatrix::zeros(n, count);
    let mut w = DVector::zeros(count);
    let mut placements = Vec::with_capacity(count);
    points.set_column(0, mean);
    w[0] = 1.0 - axis_mass;
    placements.push(Placement::Center);
    for i in 0..n {
        let col = chol.column(i);
        points.set_column(1 + i, &(mean + col * a[i]));
        points.set_column(1 + n + i, &(mean - col * b[i]));
        w[1 + i] = pw[i];
        w[1 + n + i] = qw[i];
    }
    for i in 0..n {
        placements.push(Placement::Axis { axis: i, positive: true });
    }
    for i in 0..n {
        placements.push(Placement::Axis { axis: i, positive: false });
    }
    Ok(FourMomentSet {
        set: SigmaSet { points, mean_weights: w.clone(), cov_weights: w, placements },
        fell_back: false,
    })
}
