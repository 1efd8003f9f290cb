use nalgebra::{DMatrix, DVector};

use super::augmented::{augmented_sigma_2m, AugmentedSigma};
use super::ut::{center_offset, cross_moment, cross_moment_vjp};
use super::{check_inputs, split_theta, symmetrize, GradMask, Nets, PropagationConfig};
use crate::error::{Error, Result};
use crate::neural::Trace;
use crate::odeint::{backprop_integrate, integrate, IntegrationTape, Method, OdeSystem, SolverConfig};
use crate::structure::SdeStructure;

/// One sigma point's flow `dY/dt = f(Y) + h(Y) ξ / sqrt(Δt)`; over the
/// sampling interval `Δt` the noise term contributes `h sqrt(Δt) ξ`, the
/// Euler-Maruyama increment with `Δw = sqrt(Δt) ξ`.
struct PointFlow<'a> {
    structure: &'a SdeStructure,
    nets: Nets<'a>,
    u: &'a [f64],
    /// `(axis, ξ / sqrt(Δt))`
    noise: Option<(usize, f64)>,
    mask: GradMask,
}

impl OdeSystem for PointFlow<'_> {
    fn dim(&self) -> usize {
        self.structure.state_dim
    }

    fn rhs(&self, y: &[f64], dy: &mut [f64]) -> Result<()> {
        self.structure.drift_traced(self.nets.drift, y, self.u, dy)?;
        if let Some((j, v)) = self.noise {
            let mut h = vec![0.0; y.len()];
            self.structure.diffusion_traced(self.nets.diffusion, y, self.u, &mut h)?;
            dy[j] += h[j] * v;
        }
        Ok(())
    }

    fn rhs_vjp(&self, y: &[f64], cot: &[f64], mut y_bar: Option<&mut [f64]>, theta_bar: &mut [f64]) -> Result<()> {
        let (t1, t2) = split_theta(theta_bar, &self.nets, self.mask);
        let mut f = vec![0.0; y.len()];
        let trace = self.structure.drift_traced(self.nets.drift, y, self.u, &mut f)?;
        self.structure.drift_backward(self.nets.drift, trace.as_ref(), cot, y_bar.as_deref_mut(), t1);
        if let Some((j, v)) = self.noise {
            let mut h = vec![0.0; y.len()];
            let t = self.structure.diffusion_traced(self.nets.diffusion, y, self.u, &mut h)?;
            let mut hb = vec![0.0; y.len()];
            hb[j] = v * cot[j];
            self.structure.diffusion_backward(self.nets.diffusion, t.as_ref(), &h, &hb, y_bar, t2);
        }
        Ok(())
    }
}

enum Stored {
    /// Single Euler step: `Y = Zx + Δt f(Zx) + sqrt(Δt) h(m) ξ`.
    Euler {
        drift_traces: Vec<Option<Trace>>,
        h: Vec<f64>,
        diffusion_trace: Option<Trace>,
    },
    Ode {
        tapes: Vec<Option<IntegrationTape>>,
    },
}

/// Forward results of the decoupled propagator plus what its reverse pass
/// needs.
pub struct DecoupledTape {
    pub mean: DVector<f64>,
    pub cov: Option<DMatrix<f64>>,
    ys: DMatrix<f64>,
    stored: Stored,
}

fn is_single_euler(solver: &SolverConfig) -> bool {
    solver.method == Method::Euler && solver.substeps == 1
}

/// Integrates the sigma points over `[0, dt]`. The mean is formed from the
/// noise-free points only (noise-axis points share the center's drift
/// flow), so it does not depend on the diffusion network at all. With
/// `need_cov = false` the noise-axis points are skipped.
pub fn decoupled_forward(
    structure: &SdeStructure,
    nets: Nets<'_>,
    sig: &AugmentedSigma,
    u: &[f64],
    dt: f64,
    solver: &SolverConfig,
    need_cov: bool,
) -> Result<DecoupledTape> {
    let d = structure.state_dim;
    let count = sig.len();
    if sig.state_dim != d || count == 0 || sig.noise[0].is_some() {
        return Err(Error::Shape("sigma set does not match the structure".into()));
    }
    let mut ys = DMatrix::zeros(d, count);
    let sq = dt.sqrt();
    let stored = if is_single_euler(solver) {
        let mut drift_traces: Vec<Option<Trace>> = (0..count).map(|_| None).collect();
        let mut f = vec![0.0; d];
        for i in 0..count {
            if sig.noise[i].is_some() {
                continue;
            }
            let x: Vec<f64> = sig.zx.column(i).iter().copied().collect();
            drift_traces[i] = structure.drift_traced(nets.drift, &x, u, &mut f)?;
            for r in 0..d {
                ys[(r, i)] = x[r] + dt * f[r];
            }
        }
        let mut h = vec![0.0; d];
        let mut diffusion_trace = None;
        if need_cov && sig.noise.iter().any(|n| n.is_some()) {
            let m: Vec<f64> = sig.zx.column(0).iter().copied().collect();
            diffusion_trace = structure.diffusion_traced(nets.diffusion, &m, u, &mut h)?;
            for i in 0..count {
                if let Some((j, v)) = sig.noise[i] {
                    for r in 0..d {
                        ys[(r, i)] = ys[(r, 0)];
                    }
                    ys[(j, i)] += sq * v * h[j];
                }
            }
        }
        Stored::Euler { drift_traces, h, diffusion_trace }
    } else {
        let mut tapes = Vec::with_capacity(count);
        for i in 0..count {
            if sig.noise[i].is_some() && !need_cov {
                tapes.push(None);
                continue;
            }
            let flow = PointFlow {
                structure,
                nets,
                u,
                noise: sig.noise[i].map(|(j, v)| (j, if dt > 0.0 { v / sq } else { 0.0 })),
                mask: GradMask::ALL,
            };
            let x: Vec<f64> = sig.zx.column(i).iter().copied().collect();
            let (y, tape) = integrate(&flow, &x, dt, solver)?;
            ys.set_column(i, &DVector::from_vec(y));
            tapes.push(Some(tape));
        }
        Stored::Ode { tapes }
    };
    if ys.iter().any(|v| !v.is_finite()) {
        let point = (0..count).find(|&i| ys.column(i).iter().any(|v| !v.is_finite())).unwrap_or(0);
        return Err(Error::NonFinitePropagation { point });
    }
    let mean = ys.column(0) + noise_free_offset(&ys, sig);
    let cov = if need_cov {
        let mut c = cross_moment(&ys, &ys, &sig.wm, &sig.wc);
        symmetrize(&mut c, "decoupled propagation");
        Some(c)
    } else {
        None
    };
    Ok(DecoupledTape { mean, cov, ys, stored })
}

/// `Σ w_i (Y_i - Y_0)` over the noise-free points.
fn noise_free_offset(ys: &DMatrix<f64>, sig: &AugmentedSigma) -> DVector<f64> {
    let mut w = sig.wm.clone();
    for (i, n) in sig.noise.iter().enumerate() {
        if n.is_some() {
            w[i] = 0.0;
        }
    }
    center_offset(ys, &w)
}

/// Reverse pass of [`decoupled_forward`]; accumulates into `theta_bar`
/// (layout `[θ₁, θ₂]`) for the blocks enabled in `mask`.
#[allow(clippy::too_many_arguments)]
pub fn decoupled_backward(
    structure: &SdeStructure,
    nets: Nets<'_>,
    sig: &AugmentedSigma,
    u: &[f64],
    dt: f64,
    tape: &DecoupledTape,
    mean_bar: &DVector<f64>,
    cov_bar: Option<&DMatrix<f64>>,
    mask: GradMask,
    theta_bar: &mut [f64],
) -> Result<()> {
    let d = structure.state_dim;
    let count = sig.len();
    let mut yb = DMatrix::zeros(d, count);
    let mut rest = 1.0;
    for i in 1..count {
        if sig.noise[i].is_none() {
            let mut col = yb.column_mut(i);
            col += mean_bar * sig.wm[i];
            rest -= sig.wm[i];
        }
    }
    {
        let mut col = yb.column_mut(0);
        col += mean_bar * rest;
    }
    if let Some(cb) = cov_bar {
        if tape.cov.is_none() {
            return Err(Error::Shape("covariance cotangent without a covariance forward pass".into()));
        }
        let mut b2 = DMatrix::zeros(d, count);
        cross_moment_vjp(&tape.ys, &tape.ys, &sig.wm, &sig.wc, cb, &mut yb, &mut b2);
        yb += b2;
    }
    match &tape.stored {
        Stored::Euler { drift_traces, h, diffusion_trace } => {
            let (t1, t2) = split_theta(theta_bar, &nets, mask);
            let sq = dt.sqrt();
            let mut f0_bar = yb.column(0) * dt;
            let mut h_bar = vec![0.0; d];
            for i in 1..count {
                if let Some((j, v)) = sig.noise[i] {
                    f0_bar += yb.column(i) * dt;
                    h_bar[j] += sq * v * yb[(j, i)];
                }
            }
            if let Some(t1) = t1 {
                for i in 0..count {
                    if sig.noise[i].is_some() {
                        continue;
                    }
                    let fb: Vec<f64> = if i == 0 { f0_bar.iter().copied().collect() } else { yb.column(i).iter().map(|v| v * dt).collect() };
                    structure.drift_backward(nets.drift, drift_traces[i].as_ref(), &fb, None, Some(&mut *t1));
                }
            }
            if let (Some(t2), Some(tr)) = (t2, diffusion_trace.as_ref()) {
                structure.diffusion_backward(nets.diffusion, Some(tr), h, &h_bar, None, Some(t2));
            }
        }
        Stored::Ode { tapes } => {
            let sq = dt.sqrt();
            for i in 0..count {
                let Some(tp) = &tapes[i] else { continue };
                let flow = PointFlow {
                    structure,
                    nets,
                    u,
                    noise: sig.noise[i].map(|(j, v)| (j, if dt > 0.0 { v / sq } else { 0.0 })),
                    mask,
                };
                let cot: Vec<f64> = yb.column(i).iter().copied().collect();
                backprop_integrate(&flow, tp, &cot, theta_bar, false)?;
            }
        }
    }
    Ok(())
}

/// Decoupled propagation with symmetric augmented sigma points built from
/// `(mean, cov)`.
#[allow(clippy::too_many_arguments)]
pub fn propagate_decoupled(
    nets: Nets<'_>,
    structure: &SdeStructure,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    u: &[f64],
    dt: f64,
    cfg: &PropagationConfig,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_inputs(mean, cov, u, dt, structure)?;
    structure.check_nets(nets.drift, nets.diffusion)?;
    let sig = augmented_sigma_2m(mean, cov, structure.state_dim, &cfg.ut)?;
    propagate_decoupled_with(nets, structure, &sig, u, dt, &cfg.solver)
}

/// Decoupled propagation from a prepared sigma set.
pub fn propagate_decoupled_with(
    nets: Nets<'_>,
    structure: &SdeStructure,
    sig: &AugmentedSigma,
    u: &[f64],
    dt: f64,
    solver: &SolverConfig,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let t = decoupled_forward(structure, nets, sig, u, dt, solver, true)?;
    Ok((t.mean, t.cov.expect("covariance requested")))
}
