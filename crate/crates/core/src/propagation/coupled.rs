use nalgebra::{DMatrix, DVector};

use super::augmented::{augmented_from_factor, AugmentedSigma};
use super::ut::{center_offset, cross_moment, cross_moment_vjp, UtParams};
use super::{check_inputs, pack, split_theta, symmetrize, unpack, GradMask, Nets, PropagationConfig};
use crate::error::Result;
use crate::linalg::{cholesky_backward, cholesky_jittered, mean_diagonal};
use crate::neural::Trace;
use crate::odeint::{integrate, OdeSystem};
use crate::structure::SdeStructure;

/// Moment ODEs of the augmented state, with state `[m, vec(P)]`:
///
/// `dm/dt = F w_m`, `dP/dt = Zˣ W Fᵀ + F W Zˣᵀ + G W Gᵀ`,
///
/// where `F_i = f(Zˣ_i)` and `G_i = h(Zˣ_i) ξ_i` is the dispersion acting on
/// the noise block of each sigma point. Sigma points are re-formed from
/// `(m, P)` at every evaluation.
pub struct CoupledSystem<'a> {
    pub structure: &'a SdeStructure,
    pub nets: Nets<'a>,
    pub u: &'a [f64],
    pub ut: UtParams,
    pub mask: GradMask,
}

struct Eval {
    l: DMatrix<f64>,
    spread: f64,
    sig: AugmentedSigma,
    f: DMatrix<f64>,
    g: DMatrix<f64>,
    drift_traces: Vec<Option<Trace>>,
    h: Vec<f64>,
    diffusion_trace: Option<Trace>,
}

impl CoupledSystem<'_> {
    fn d(&self) -> usize {
        self.structure.state_dim
    }

    fn eval(&self, y: &[f64]) -> Result<Eval> {
        let d = self.d();
        let (m, p) = unpack(y, d);
        let l = cholesky_jittered(&p, mean_diagonal(&p), "coupled propagation")?;
        let sig = augmented_from_factor(&m, &l, d, &self.ut)?;
        let n_aug = 2 * d;
        let spread = (n_aug as f64 + self.ut.lambda(n_aug)).sqrt();
        let count = sig.len();
        let mut f = DMatrix::zeros(d, count);
        let mut g = DMatrix::zeros(d, count);
        let mut drift_traces: Vec<Option<Trace>> = (0..count).map(|_| None).collect();
        let mut fi = vec![0.0; d];
        for i in 0..count {
            if sig.noise[i].is_some() {
                continue;
            }
            let x: Vec<f64> = sig.zx.column(i).iter().copied().collect();
            drift_traces[i] = self.structure.drift_traced(self.nets.drift, &x, self.u, &mut fi)?;
            f.set_column(i, &DVector::from_column_slice(&fi));
        }
        let mut h = vec![0.0; d];
        let mv: Vec<f64> = m.iter().copied().collect();
        let diffusion_trace = self.structure.diffusion_traced(self.nets.diffusion, &mv, self.u, &mut h)?;
        for i in 0..count {
            if let Some((j, v)) = sig.noise[i] {
                let c0 = f.column(0).into_owned();
                f.set_column(i, &c0);
                g[(j, i)] = h[j] * v;
            }
        }
        Ok(Eval { l, spread, sig, f, g, drift_traces, h, diffusion_trace })
    }
}

impl OdeSystem for CoupledSystem<'_> {
    fn dim(&self) -> usize {
        self.d() + self.d() * self.d()
    }

    fn rhs(&self, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let d = self.d();
        let e = self.eval(y)?;
        let dm = e.f.column(0) + center_offset(&e.f, &e.sig.wm);
        let dp = cross_moment(&e.sig.zx, &e.f, &e.sig.wm, &e.sig.wc)
            + cross_moment(&e.f, &e.sig.zx, &e.sig.wm, &e.sig.wc)
            + cross_moment(&e.g, &e.g, &e.sig.wm, &e.sig.wc);
        dy[..d].copy_from_slice(dm.as_slice());
        for r in 0..d {
            for c in 0..d {
                dy[d + r * d + c] = dp[(r, c)];
            }
        }
        Ok(())
    }

    fn rhs_vjp(&self, y: &[f64], cot: &[f64], y_bar: Option<&mut [f64]>, theta_bar: &mut [f64]) -> Result<()> {
        let d = self.d();
        let e = self.eval(y)?;
        let (wm, wc) = (&e.sig.wm, &e.sig.wc);
        let count = e.sig.len();
        let m_cot = DVector::from_column_slice(&cot[..d]);
        let p_cot = DMatrix::from_row_slice(d, d, &cot[d..d + d * d]);

        let mut fb = DMatrix::zeros(d, count);
        let mut zb = DMatrix::zeros(d, count);
        let mut gb = DMatrix::zeros(d, count);
        let mut gb2 = DMatrix::zeros(d, count);
        let mut rest = 1.0;
        for i in 1..count {
            let mut col = fb.column_mut(i);
            col += &m_cot * wm[i];
            rest -= wm[i];
        }
        {
            let mut col = fb.column_mut(0);
            col += &m_cot * rest;
        }
        cross_moment_vjp(&e.sig.zx, &e.f, wm, wc, &p_cot, &mut zb, &mut fb);
        let mut fb2 = DMatrix::zeros(d, count);
        let mut zb2 = DMatrix::zeros(d, count);
        cross_moment_vjp(&e.f, &e.sig.zx, wm, wc, &p_cot, &mut fb2, &mut zb2);
        fb += fb2;
        zb += zb2;
        cross_moment_vjp(&e.g, &e.g, wm, wc, &p_cot, &mut gb, &mut gb2);
        gb += gb2;

        let mut h_bar = vec![0.0; d];
        for i in 0..count {
            if let Some((j, v)) = e.sig.noise[i] {
                let col = fb.column(i).into_owned();
                let mut c0 = fb.column_mut(0);
                c0 += col;
                h_bar[j] += v * gb[(j, i)];
            }
        }
        let want_state = y_bar.is_some();
        let (mut t1, t2) = split_theta(theta_bar, &self.nets, self.mask);
        for i in 0..count {
            if e.sig.noise[i].is_some() {
                continue;
            }
            let fcot: Vec<f64> = fb.column(i).iter().copied().collect();
            let mut xb = vec![0.0; d];
            self.structure.drift_backward(
                self.nets.drift,
                e.drift_traces[i].as_ref(),
                &fcot,
                if want_state { Some(&mut xb) } else { None },
                t1.as_deref_mut(),
            );
            let mut col = zb.column_mut(i);
            col += DVector::from_vec(xb);
        }
        let mut mb = vec![0.0; d];
        self.structure.diffusion_backward(
            self.nets.diffusion,
            e.diffusion_trace.as_ref(),
            &e.h,
            &h_bar,
            if want_state { Some(&mut mb) } else { None },
            t2,
        );
        let Some(yb) = y_bar else { return Ok(()) };
        for r in 0..d {
            yb[r] += mb[r];
        }
        for i in 0..count {
            for r in 0..d {
                yb[r] += zb[(r, i)];
            }
        }
        // state-axis points: Zˣ = m ± spread · L[:, j]
        let n_aug = 2 * d;
        let mut l_bar = DMatrix::zeros(d, d);
        for j in 0..d {
            let (plus, minus) = (1 + j, 1 + n_aug + j);
            for r in 0..d {
                l_bar[(r, j)] += e.spread * (zb[(r, plus)] - zb[(r, minus)]);
            }
        }
        let p_bar = cholesky_backward(&e.l, &l_bar);
        for r in 0..d {
            for c in 0..d {
                yb[d + r * d + c] += p_bar[(r, c)];
            }
        }
        Ok(())
    }
}

/// Coupled mean/covariance propagation over `[0, dt]`.
#[allow(clippy::too_many_arguments)]
pub fn propagate_coupled(
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
    let sys = CoupledSystem { structure, nets, u, ut: cfg.ut, mask: GradMask::ALL };
    let (y, _) = integrate(&sys, &pack(mean, cov), dt, &cfg.solver)?;
    let (m, mut p) = unpack(&y, structure.state_dim);
    symmetrize(&mut p, "coupled propagation");
    Ok((m, p))
}
