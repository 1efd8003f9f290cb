//! Moment propagation through a known SDE structure with embedded networks.
//!
//! Three propagators share one calling convention:
//!
//! * [`propagate_decoupled`]: every augmented sigma point `[x, ξ]` follows
//!   its own ODE; the mean only depends on the drift network.
//! * [`propagate_coupled`]: the mean and covariance ODEs with sigma points
//!   re-formed from `(m(t), P(t))` at every solver stage.
//! * [`propagate_linearized`]: first-order moment ODEs around the mean.
//!
//! Differentiable variants feed gradients with respect to the flat
//! parameter vector `[θ₁, θ₂]` (drift network first, then diffusion).

mod augmented;
mod coupled;
mod decoupled;
mod linearized;
pub mod ut;

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::neural::Mlp;
use crate::odeint::SolverConfig;

pub use augmented::{augmented_sigma_2m, augmented_sigma_4m, AugmentedSigma};
pub use coupled::{propagate_coupled, CoupledSystem};
pub use decoupled::{decoupled_backward, decoupled_forward, propagate_decoupled, propagate_decoupled_with, DecoupledTape};
pub use linearized::{propagate_linearized, LinearizedSystem};
pub use ut::{
    cross_moment, cross_moment_vjp, sigma_points, sigma_points_4m, sigma_points_from_factor, ut_transform,
    weighted_moments, FourMomentSet, Placement, SigmaSet, UtParams,
};

/// How uncertainty is carried across a sampling interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PropagatorKind {
    Linearization,
    Ut2m,
    Ut4m,
}

impl PropagatorKind {
    pub const ALL: [PropagatorKind; 3] = [PropagatorKind::Linearization, PropagatorKind::Ut2m, PropagatorKind::Ut4m];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linearization" => Ok(Self::Linearization),
            "ut2m" => Ok(Self::Ut2m),
            "ut4m" => Ok(Self::Ut4m),
            other => Err(Error::Config(format!("unknown propagator `{other}` (expected linearization, ut2m, ut4m)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Linearization => "linearization",
            Self::Ut2m => "ut2m",
            Self::Ut4m => "ut4m",
        }
    }
}

impl fmt::Display for PropagatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The hidden-term networks; `None` drift means `g₁ ≡ 0`.
#[derive(Debug, Clone, Copy)]
pub struct Nets<'a> {
    pub drift: Option<&'a Mlp>,
    pub diffusion: Option<&'a Mlp>,
}

impl<'a> Nets<'a> {
    pub fn new(drift: Option<&'a Mlp>, diffusion: Option<&'a Mlp>) -> Self {
        Self { drift, diffusion }
    }

    pub fn drift_params(&self) -> usize {
        self.drift.map_or(0, |n| n.num_params())
    }

    pub fn diffusion_params(&self) -> usize {
        self.diffusion.map_or(0, |n| n.num_params())
    }

    pub fn total_params(&self) -> usize {
        self.drift_params() + self.diffusion_params()
    }
}

/// Which parameter blocks receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradMask {
    pub drift: bool,
    pub diffusion: bool,
}

impl GradMask {
    pub const ALL: GradMask = GradMask { drift: true, diffusion: true };
    pub const DRIFT: GradMask = GradMask { drift: true, diffusion: false };
    pub const DIFFUSION: GradMask = GradMask { drift: false, diffusion: true };
}

/// Splits `[θ₁, θ₂]` cotangents according to the mask.
pub(crate) fn split_theta<'t>(
    theta_bar: &'t mut [f64],
    nets: &Nets<'_>,
    mask: GradMask,
) -> (Option<&'t mut [f64]>, Option<&'t mut [f64]>) {
    let (a, b) = theta_bar.split_at_mut(nets.drift_params());
    (
        if mask.drift && !a.is_empty() { Some(a) } else { None },
        if mask.diffusion && !b.is_empty() { Some(b) } else { None },
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationConfig {
    pub ut: UtParams,
    pub solver: SolverConfig,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self { ut: UtParams::default(), solver: SolverConfig::default() }
    }
}

/// Flattens `(m, P)` into the ODE state `[m, vec(P)]` (row-major).
pub(crate) fn pack(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Vec<f64> {
    let d = mean.len();
    let mut y = Vec::with_capacity(d + d * d);
    y.extend(mean.iter());
    for r in 0..d {
        for c in 0..d {
            y.push(cov[(r, c)]);
        }
    }
    y
}

pub(crate) fn unpack(y: &[f64], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    (DVector::from_column_slice(&y[..d]), DMatrix::from_row_slice(d, d, &y[d..d + d * d]))
}

/// Symmetrizes a propagated covariance, warning when the asymmetry exceeds
/// `1e-8` of its scale.
pub(crate) fn symmetrize(cov: &mut DMatrix<f64>, context: &str) {
    let asym = (&*cov - cov.transpose()).amax();
    if asym > 1e-8 * cov.amax().max(1e-300) {
        log::warn!("{context}: covariance asymmetry {asym:e}; symmetrized");
    }
    let s = (&*cov + cov.transpose()) * 0.5;
    *cov = s;
}

pub(crate) fn check_inputs(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    u: &[f64],
    dt: f64,
    structure: &crate::structure::SdeStructure,
) -> Result<()> {
    let d = structure.state_dim;
    if mean.len() != d || cov.nrows() != d || cov.ncols() != d || u.len() != structure.input_dim {
        return Err(Error::Shape(format!(
            "propagation: mean {}, covariance {}x{}, input {} for structure `{}`",
            mean.len(),
            cov.nrows(),
            cov.ncols(),
            u.len(),
            structure.name
        )));
    }
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(Error::Domain(format!("propagation horizon must be >= 0, got {dt}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
