use nalgebra::{DMatrix, DVector};

use super::{check_inputs, pack, split_theta, symmetrize, unpack, GradMask, Nets, PropagationConfig};
use crate::error::Result;
use crate::neural::{JvpTrace, Trace};
use crate::odeint::{integrate, OdeSystem};
use crate::structure::SdeStructure;

/// First-order moment ODEs around the mean, with state `[m, vec(P)]`:
///
/// `dm/dt = f(m)`, `dP/dt = J P + P Jᵀ + h(m) h(m)ᵀ`, `J = ∂f/∂x (m)`.
///
/// `J` uses forward-mode derivatives of the drift network, so the reverse
/// pass differentiates through them (forward-over-reverse).
pub struct LinearizedSystem<'a> {
    pub structure: &'a SdeStructure,
    pub nets: Nets<'a>,
    pub u: &'a [f64],
    pub mask: GradMask,
}

struct Eval {
    f: Vec<f64>,
    f_trace: Option<Trace>,
    jac: DMatrix<f64>,
    /// Forward-mode traces, one per state component feeding the drift net.
    jvps: Vec<(usize, JvpTrace)>,
    h: Vec<f64>,
    h_trace: Option<Trace>,
}

impl LinearizedSystem<'_> {
    fn d(&self) -> usize {
        self.structure.state_dim
    }

    fn eval(&self, m: &[f64]) -> Result<Eval> {
        let s = self.structure;
        let d = self.d();
        let mut f = vec![0.0; d];
        let f_trace = s.drift_traced(self.nets.drift, m, self.u, &mut f)?;
        let mut jac = DMatrix::from_row_slice(d, d, &s.a);
        let mut jvps = Vec::new();
        if let Some(net) = self.nets.drift {
            let xin = s.drift_inputs.gather(m, self.u);
            let p = s.drift_outputs;
            for (k, &j) in s.drift_inputs.state.iter().enumerate() {
                let mut dir = vec![0.0; xin.len()];
                dir[k] = 1.0;
                let t = net.jvp(&xin, &dir)?;
                for r in 0..d {
                    for o in 0..p {
                        jac[(r, j)] += s.b[r * p + o] * t.output_dot[o];
                    }
                }
                jvps.push((j, t));
            }
        }
        let mut h = vec![0.0; d];
        let h_trace = s.diffusion_traced(self.nets.diffusion, m, self.u, &mut h)?;
        Ok(Eval { f, f_trace, jac, jvps, h, h_trace })
    }
}

impl OdeSystem for LinearizedSystem<'_> {
    fn dim(&self) -> usize {
        self.d() + self.d() * self.d()
    }

    fn rhs(&self, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let d = self.d();
        let (_, p) = unpack(y, d);
        let e = self.eval(&y[..d])?;
        let jp = &e.jac * &p;
        dy[..d].copy_from_slice(&e.f);
        for r in 0..d {
            for c in 0..d {
                let mut v = jp[(r, c)] + jp[(c, r)];
                if r == c {
                    v += e.h[r] * e.h[r];
                }
                dy[d + r * d + c] = v;
            }
        }
        Ok(())
    }

    fn rhs_vjp(&self, y: &[f64], cot: &[f64], y_bar: Option<&mut [f64]>, theta_bar: &mut [f64]) -> Result<()> {
        let s = self.structure;
        let d = self.d();
        let (_, p) = unpack(y, d);
        let e = self.eval(&y[..d])?;
        let m_cot = &cot[..d];
        let dp_bar = DMatrix::from_row_slice(d, d, &cot[d..d + d * d]);
        let sym = &dp_bar + dp_bar.transpose();
        let jac_bar = &sym * &p;
        let want_state = y_bar.is_some();
        let mut mb = vec![0.0; d];
        let (mut t1, t2) = split_theta(theta_bar, &self.nets, self.mask);

        s.drift_backward(self.nets.drift, e.f_trace.as_ref(), m_cot, if want_state { Some(&mut mb) } else { None }, t1.as_deref_mut());
        if let Some(net) = self.nets.drift {
            let zeros = vec![0.0; s.drift_outputs];
            for (j, t) in &e.jvps {
                let col: Vec<f64> = jac_bar.column(*j).iter().copied().collect();
                let od_bar = s.b_transpose(&col);
                if want_state {
                    let mut in_bar = vec![0.0; net.input_dim()];
                    net.jvp_backward(t, &zeros, &od_bar, t1.as_deref_mut(), Some(&mut in_bar));
                    s.drift_inputs.scatter(&in_bar, &mut mb);
                } else if t1.is_some() {
                    net.jvp_backward(t, &zeros, &od_bar, t1.as_deref_mut(), None);
                }
            }
        }
        let h_bar: Vec<f64> = (0..d).map(|i| sym[(i, i)] * e.h[i]).collect();
        s.diffusion_backward(self.nets.diffusion, e.h_trace.as_ref(), &e.h, &h_bar, if want_state { Some(&mut mb) } else { None }, t2);

        let Some(yb) = y_bar else { return Ok(()) };
        let p_bar = e.jac.transpose() * &dp_bar + &dp_bar * &e.jac;
        for r in 0..d {
            yb[r] += mb[r];
            for c in 0..d {
                yb[d + r * d + c] += p_bar[(r, c)];
            }
        }
        Ok(())
    }
}

/// Linearized mean/covariance propagation over `[0, dt]`.
#[allow(clippy::too_many_arguments)]
pub fn propagate_linearized(
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
    let sys = LinearizedSystem { structure, nets, u, mask: GradMask::ALL };
    let (y, _) = integrate(&sys, &pack(mean, cov), dt, &cfg.solver)?;
    let (m, mut p) = unpack(&y, structure.state_dim);
    symmetrize(&mut p, "linearized propagation");
    Ok((m, p))
}
