use nalgebra::{DMatrix, DVector};

use super::*;
use crate::neural::{Mlp, OutputHead};
use crate::odeint::{backprop_integrate, integrate, Method, OdeSystem, SolverConfig};
use crate::structure::{DiffusionForm, NetInputs, SdeStructure};

fn linear(a: Vec<f64>, c: Vec<f64>, s: Vec<f64>) -> SdeStructure {
    let d = c.len();
    SdeStructure {
        name: "linear".into(),
        state_dim: d,
        input_dim: 0,
        a,
        b: vec![],
        c,
        drift_outputs: 0,
        drift_inputs: NetInputs::new(vec![], false),
        diffusion: DiffusionForm::Constant(s),
        diffusion_inputs: NetInputs::new(vec![], false),
    }
}

fn ou() -> SdeStructure {
    linear(vec![-1.0], vec![0.0], vec![2f64.sqrt()])
}

fn none() -> Nets<'static> {
    Nets::new(None, None)
}

fn cfg(method: Method, substeps: usize) -> PropagationConfig {
    PropagationConfig { ut: UtParams::default(), solver: SolverConfig::new(method, substeps).unwrap() }
}

fn scalar(v: f64) -> (DVector<f64>, DMatrix<f64>) {
    (DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, v))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn ou_oracle_over_unit_interval() {
    let s = ou();
    let c = cfg(Method::Euler, 100);
    type Prop = fn(Nets<'_>, &SdeStructure, &DVector<f64>, &DMatrix<f64>, &[f64], f64, &PropagationConfig) -> crate::Result<(DVector<f64>, DMatrix<f64>)>;
    let props: [(&str, Prop); 2] = [("coupled", propagate_coupled), ("decoupled", propagate_decoupled)];
    for (name, prop) in props {
        let mut m = DVector::from_element(1, 1.0);
        let mut p = DMatrix::from_element(1, 1, 1.0);
        for k in 1..=10 {
            let (m2, p2) = prop(none(), &s, &m, &p, &[], 0.1, &c).unwrap();
            m = m2;
            p = p2;
            let t = 0.1 * k as f64;
            let var = (-2.0 * t).exp() + (1.0 - (-2.0 * t).exp());
            assert!(rel(m[0], (-t).exp()) < 1e-3, "{name} mean at t={t}: {}", m[0]);
            assert!(rel(p[(0, 0)], var) < 1e-3, "{name} var at t={t}: {}", p[(0, 0)]);
        }
    }
}

#[test]
fn coupled_linear_gaussian_example() {
    let (m, p) = propagate_coupled(none(), &ou(), &DVector::from_element(1, 1.0), &DMatrix::from_element(1, 1, 1.0), &[], 0.1, &cfg(Method::Rk4, 10)).unwrap();
    assert!((m[0] - (-0.1f64).exp()).abs() < 1e-3);
    assert!((p[(0, 0)] - 1.0).abs() < 1e-3);
}

#[test]
fn deterministic_decay() {
    let s = linear(vec![-1.0], vec![0.0], vec![0.0]);
    let (m, p) = propagate_decoupled(none(), &s, &DVector::from_element(1, 1.0), &DMatrix::from_element(1, 1, 1e-6), &[], 0.5, &cfg(Method::Rk4, 20)).unwrap();
    assert!((m[0] - (-0.5f64).exp()).abs() < 1e-8);
    // no process noise: the covariance follows the flow
    let (_, pc) = propagate_coupled(none(), &s, &DVector::from_element(1, 1.0), &DMatrix::from_element(1, 1, 0.2), &[], 0.5, &cfg(Method::Rk4, 20)).unwrap();
    assert!(rel(pc[(0, 0)], 0.2 * (-1.0f64).exp()) < 1e-6);
    assert!(p[(0, 0)] > 0.0);
}

#[test]
fn zero_horizon_is_identity() {
    let s = linear(vec![-1.0, 0.3, 0.0, -0.5], vec![0.1, 0.2], vec![0.5, 0.7]);
    let m = DVector::from_vec(vec![0.4, -1.0]);
    let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.2]);
    for method in [Method::Euler, Method::Rk4] {
        let c = cfg(method, 3);
        for (m2, p2) in [
            propagate_decoupled(none(), &s, &m, &p, &[], 0.0, &c).unwrap(),
            propagate_coupled(none(), &s, &m, &p, &[], 0.0, &c).unwrap(),
            propagate_linearized(none(), &s, &m, &p, &[], 0.0, &c).unwrap(),
        ] {
            assert!((&m2 - &m).amax() < 1e-9);
            assert!((&p2 - &p).amax() < 1e-9);
        }
    }
}

#[test]
fn linear_sde_equivalence() {
    let s = linear(vec![-0.8, 0.3, -0.2, -0.5], vec![0.1, -0.2], vec![0.4, 0.6]);
    let m = DVector::from_vec(vec![1.0, -0.5]);
    let p = DMatrix::from_row_slice(2, 2, &[0.3, 0.05, 0.05, 0.2]);
    let c = cfg(Method::Euler, 1);
    let dt = 1e-3;
    let (md, pd) = propagate_decoupled(none(), &s, &m, &p, &[], dt, &c).unwrap();
    let (mc, pc) = propagate_coupled(none(), &s, &m, &p, &[], dt, &c).unwrap();
    let (ml, pl) = propagate_linearized(none(), &s, &m, &p, &[], dt, &c).unwrap();
    let close = |a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64| (a - b).amax() <= tol * b.amax();
    assert!((&md - &mc).amax() <= 1e-6 * mc.amax());
    assert!((&ml - &mc).amax() <= 1e-12 * mc.amax());
    assert!(close(&pd, &pc, 1e-6));
    assert!(close(&pl, &pc, 1e-9));
    // over a longer horizon the moment ODEs stay identical for linear drift
    let c = cfg(Method::Rk4, 20);
    let (_, pc) = propagate_coupled(none(), &s, &m, &p, &[], 1.0, &c).unwrap();
    let (_, pl) = propagate_linearized(none(), &s, &m, &p, &[], 1.0, &c).unwrap();
    assert!(close(&pl, &pc, 1e-9));
}

fn toy_structure() -> SdeStructure {
    SdeStructure {
        name: "toy".into(),
        state_dim: 2,
        input_dim: 1,
        a: vec![-0.5, 0.2, 0.0, -0.3],
        b: vec![1.0, 0.0, 0.5, 1.0],
        c: vec![0.1, 0.0],
        drift_outputs: 2,
        drift_inputs: NetInputs::new(vec![0, 1], true),
        diffusion: DiffusionForm::SqrtTwoNet,
        diffusion_inputs: NetInputs::new(vec![0, 1], false),
    }
}

fn toy_nets(seed: u64) -> (Mlp, Mlp) {
    let g1 = Mlp::initialized(vec![3, 6, 2], OutputHead::Linear, seed).unwrap().with_output_scale(vec![0.3, 0.3]).unwrap();
    let g2 = Mlp::initialized(vec![2, 5, 2], OutputHead::Softplus, seed + 1).unwrap().with_output_scale(vec![0.2, 0.1]).unwrap();
    (g1, g2)
}

fn toy_moments() -> (DVector<f64>, DMatrix<f64>) {
    (DVector::from_vec(vec![0.3, -0.4]), DMatrix::from_row_slice(2, 2, &[0.2, 0.04, 0.04, 0.1]))
}

#[test]
fn decoupled_mean_ignores_the_diffusion_network() {
    let s = toy_structure();
    let (g1, g2) = toy_nets(3);
    let (m, p) = toy_moments();
    for c in [cfg(Method::Euler, 1), cfg(Method::Rk4, 3)] {
        let (m1, p1) = propagate_decoupled(Nets::new(Some(&g1), Some(&g2)), &s, &m, &p, &[0.5], 0.2, &c).unwrap();
        let mut g2b = g2.clone();
        for v in g2b.params_mut() {
            *v = -1.7 * *v + 0.3;
        }
        let (m2, p2) = propagate_decoupled(Nets::new(Some(&g1), Some(&g2b)), &s, &m, &p, &[0.5], 0.2, &c).unwrap();
        assert_eq!(m1, m2);
        assert_ne!(p1, p2);
    }
}

#[test]
fn single_euler_step_is_euler_maruyama_on_sigma_points() {
    let s = toy_structure();
    let (g1, g2) = toy_nets(5);
    let (m, p) = toy_moments();
    let u = [0.2];
    let dt = 0.3;
    let sig = augmented_sigma_2m(&m, &p, 2, &UtParams::new(0.5, 2.0, 0.0)).unwrap();
    let (mean, cov) = propagate_decoupled_with(Nets::new(Some(&g1), Some(&g2)), &s, &sig, &u, dt, &SolverConfig::default()).unwrap();
    let mut ys = DMatrix::zeros(2, sig.len());
    for i in 0..sig.len() {
        let x: Vec<f64> = sig.zx.column(i).iter().copied().collect();
        let mut f = [0.0; 2];
        let mut h = [0.0; 2];
        s.drift(Some(&g1), &x, &u, &mut f);
        s.diffusion(Some(&g2), &x, &u, &mut h);
        for r in 0..2 {
            ys[(r, i)] = x[r] + dt * f[r];
        }
        if let Some((j, v)) = sig.noise[i] {
            ys[(j, i)] += dt.sqrt() * v * h[j];
        }
    }
    let want_mean = &ys * &sig.wm;
    let centered = &ys - &want_mean * DVector::from_element(sig.len(), 1.0).transpose();
    let want_cov = &centered * DMatrix::from_diagonal(&sig.wc) * centered.transpose();
    assert!((mean - want_mean).amax() < 1e-12);
    assert!((cov - want_cov).amax() < 1e-12);
}

#[test]
fn returned_covariances_are_symmetric() {
    let s = toy_structure();
    let (g1, g2) = toy_nets(9);
    let (m, p) = toy_moments();
    let nets = Nets::new(Some(&g1), Some(&g2));
    let c = cfg(Method::Rk4, 4);
    for (_, pp) in [
        propagate_decoupled(nets, &s, &m, &p, &[0.1], 0.5, &c).unwrap(),
        propagate_coupled(nets, &s, &m, &p, &[0.1], 0.5, &c).unwrap(),
        propagate_linearized(nets, &s, &m, &p, &[0.1], 0.5, &c).unwrap(),
    ] {
        assert!((&pp - pp.transpose()).amax() <= 1e-10 * pp.amax());
        assert!(pp.diagonal().iter().all(|v| *v >= -1e-12));
    }
}

/// Scalar objective `⟨a, m⟩ + ⟨B, P⟩` of a propagation.
fn objective(mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let a = [0.7, -1.3];
    let b = [0.4, -0.9, 0.2, 1.5];
    mean.iter().zip(a).map(|(x, w)| x * w).sum::<f64>() + cov.iter().zip(b).map(|(x, w)| x * w).sum::<f64>()
}

fn obj_cotangents() -> (DVector<f64>, DMatrix<f64>) {
    // column-major storage of [[0.4, 0.2], [-0.9, 1.5]] as iterated above
    (DVector::from_vec(vec![0.7, -1.3]), DMatrix::from_column_slice(2, 2, &[0.4, -0.9, 0.2, 1.5]))
}

fn fd_check<F: Fn(&Mlp, &Mlp) -> f64>(g1: &Mlp, g2: &Mlp, grad: &[f64], f: F, tol: f64) {
    let eps = 1e-6;
    let p1 = g1.num_params();
    for k in 0..grad.len() {
        let (mut a1, mut a2, mut b1, mut b2) = (g1.clone(), g2.clone(), g1.clone(), g2.clone());
        if k < p1 {
            a1.params_mut()[k] += eps;
            b1.params_mut()[k] -= eps;
        } else {
            a2.params_mut()[k - p1] += eps;
            b2.params_mut()[k - p1] -= eps;
        }
        let fd = (f(&a1, &a2) - f(&b1, &b2)) / (2.0 * eps);
        let err = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-3);
        assert!(err < tol, "param {k}: fd {fd:e} vs {:e}", grad[k]);
    }
}

#[test]
fn decoupled_gradients_match_finite_differences() {
    let s = toy_structure();
    let (g1, g2) = toy_nets(21);
    let (m, p) = toy_moments();
    let u = [0.4];
    let dt = 0.25;
    let sig = augmented_sigma_2m(&m, &p, 2, &UtParams::new(0.5, 2.0, 0.0)).unwrap();
    let (mb, cb) = obj_cotangents();
    for solver in [SolverConfig::default(), SolverConfig::new(Method::Rk4, 2).unwrap()] {
        let nets = Nets::new(Some(&g1), Some(&g2));
        let tape = decoupled_forward(&s, nets, &sig, &u, dt, &solver, true).unwrap();
        let mut grad = vec![0.0; nets.total_params()];
        decoupled_backward(&s, nets, &sig, &u, dt, &tape, &mb, Some(&cb), GradMask::ALL, &mut grad).unwrap();
        fd_check(&g1, &g2, &grad, |a, b| {
            let t = decoupled_forward(&s, Nets::new(Some(a), Some(b)), &sig, &u, dt, &solver, true).unwrap();
            objective(&t.mean, t.cov.as_ref().unwrap())
        }, 1e-6);
        // mean-only loss: diffusion gradient is exactly zero
        let mut grad = vec![0.0; nets.total_params()];
        decoupled_backward(&s, nets, &sig, &u, dt, &tape, &mb, None, GradMask::ALL, &mut grad).unwrap();
        assert!(grad[g1.num_params()..].iter().all(|v| *v == 0.0));
        assert!(grad[..g1.num_params()].iter().any(|v| *v != 0.0));
    }
}

fn ode_grad<S: OdeSystem>(sys: &S, y0: &[f64], dt: f64, solver: &SolverConfig, n: usize) -> (Vec<f64>, Vec<f64>) {
    let (y1, tape) = integrate(sys, y0, dt, solver).unwrap();
    let (mb, cb) = obj_cotangents();
    let mut cot = mb.iter().copied().collect::<Vec<_>>();
    for r in 0..2 {
        for c in 0..2 {
            cot.push(cb[(r, c)]);
        }
    }
    let mut grad = vec![0.0; n];
    let y0_bar = backprop_integrate(sys, &tape, &cot, &mut grad, true).unwrap();
    let _ = y1;
    (grad, y0_bar)
}

fn ode_objective<S: OdeSystem>(sys: &S, y0: &[f64], dt: f64, solver: &SolverConfig) -> f64 {
    let (y1, _) = integrate(sys, y0, dt, solver).unwrap();
    let (m, p) = super::unpack(&y1, 2);
    objective(&m, &p)
}

#[test]
fn coupled_gradients_match_finite_differences() {
    let s = toy_structure();
    let (g1, g2) = toy_nets(33);
    let (m, p) = toy_moments();
    let u = [0.4];
    let ut = UtParams::new(0.6, 2.0, 0.0);
    let solver = SolverConfig::new(Method::Rk4, 2).unwrap();
    let y0 = super::pack(&m, &p);
    let nets = Nets::new(Some(&g1), Some(&g2));
    let sys = CoupledSystem { structure: &s, nets, u: &u, ut, mask: GradMask::ALL };
    let (grad, y0_bar) = ode_grad(&sys, &y0, 0.3, &solver, nets.total_params());
    fd_check(&g1, &g2, &grad, |a, b| {
        let sys = CoupledSystem { structure: &s, nets: Nets::new(Some(a), Some(b)), u: &u, ut, mask: GradMask::ALL };
        ode_objective(&sys, &y0, 0.3, &solver)
    }, 1e-5);
    // initial-moment sensitivities, perturbing P symmetrically
    let eps = 1e-6;
    let f = |y: &[f64]| ode_objective(&sys, y, 0.3, &solver);
    for k in 0..2 {
        let (mut yp, mut ym) = (y0.clone(), y0.clone());
        yp[k] += eps;
        ym[k] -= eps;
        let fd = (f(&yp) - f(&ym)) / (2.0 * eps);
        assert!((fd - y0_bar[k]).abs() < 1e-5 * fd.abs().max(1.0), "m{k}: {fd} vs {}", y0_bar[k]);
    }
    let (mut yp, mut ym) = (y0.clone(), y0.clone());
    for idx in [3, 4] {
        yp[idx] += eps;
        ym[idx] -= eps;
    }
    let fd = (f(&yp) - f(&ym)) / (2.0 * eps);
    let an = y0_bar[3] + y0_bar[4];
    assert!((fd - an).abs() < 1e-5 * fd.abs().max(1.0), "offdiag: {fd} vs {an}");
    for idx in [2, 5] {
        let (mut yp, mut ym) = (y0.clone(), y0.clone());
        yp[idx] += eps;
        ym[idx] -= eps;
        let fd = (f(&yp) - f(&ym)) / (2.0 * eps);
        assert!((fd - y0_bar[idx]).abs() < 1e-5 * fd.abs().max(1.0), "P{idx}: {fd} vs {}", y0_bar[idx]);
    }
}

#[test]
fn linearized_gradients_match_finite_differences() {
    let s = toy_structure();
    let (g1, g2) = toy_nets(44);
    let (m, p) = toy_moments();
    let u = [0.4];
    let solver = SolverConfig::new(Method::Rk4, 2).unwrap();
    let y0 = super::pack(&m, &p);
    let nets = Nets::new(Some(&g1), Some(&g2));
    let sys = LinearizedSystem { structure: &s, nets, u: &u, mask: GradMask::ALL };
    let (grad, y0_bar) = ode_grad(&sys, &y0, 0.3, &solver, nets.total_params());
    fd_check(&g1, &g2, &grad, |a, b| {
        let sys = LinearizedSystem { structure: &s, nets: Nets::new(Some(a), Some(b)), u: &u, mask: GradMask::ALL };
        ode_objective(&sys, &y0, 0.3, &solver)
    }, 1e-5);
    let eps = 1e-6;
    // off-diagonal covariance entries are perturbed as a symmetric pair
    for idx in [vec![0], vec![1], vec![2], vec![3, 4], vec![5]] {
        let (mut yp, mut ym) = (y0.clone(), y0.clone());
        for &k in &idx {
            yp[k] += eps;
            ym[k] -= eps;
        }
        let fd = (ode_objective(&sys, &yp, 0.3, &solver) - ode_objective(&sys, &ym, 0.3, &solver)) / (2.0 * eps);
        let an: f64 = idx.iter().map(|&k| y0_bar[k]).sum();
        assert!((fd - an).abs() < 1e-5 * fd.abs().max(1.0), "{idx:?}: {fd} vs {an}");
    }
}

#[test]
fn masked_blocks_receive_no_gradient() {
    let s = toy_structure();
    let (g1, g2) = toy_nets(2);
    let (m, p) = toy_moments();
    let u = [0.0];
    let nets = Nets::new(Some(&g1), Some(&g2));
    let solver = SolverConfig::default();
    let sys = CoupledSystem { structure: &s, nets, u: &u, ut: UtParams::default(), mask: GradMask::DIFFUSION };
    let (grad, _) = ode_grad(&sys, &super::pack(&m, &p), 0.1, &solver, nets.total_params());
    assert!(grad[..g1.num_params()].iter().all(|v| *v == 0.0));
    assert!(grad[g1.num_params()..].iter().any(|v| *v != 0.0));
}

#[test]
fn four_moment_sigma_set_propagates_like_two_moment_for_affine_drift() {
    let s = linear(vec![-0.8], vec![0.1], vec![0.5]);
    let m = DVector::from_element(1, 0.5);
    let p = DMatrix::from_element(1, 1, 0.3);
    let (s4, fell) = augmented_sigma_4m(&m, &p, &[0.4], &[3.5], 1, &UtParams::default()).unwrap();
    assert!(!fell);
    let s2 = augmented_sigma_2m(&m, &p, 1, &UtParams::default()).unwrap();
    let solver = SolverConfig::default();
    let (m4, p4) = propagate_decoupled_with(none(), &s, &s4, &[], 0.2, &solver).unwrap();
    let (m2, p2) = propagate_decoupled_with(none(), &s, &s2, &[], 0.2, &solver).unwrap();
    assert!((m4 - m2).amax() < 1e-10);
    assert!((p4 - p2).amax() < 1e-10);
}

#[test]
fn shape_errors() {
    let s = ou();
    let c = PropagationConfig::default();
    let m = DVector::from_element(2, 0.0);
    assert!(propagate_decoupled(none(), &s, &m, &DMatrix::identity(2, 2), &[], 0.1, &c).is_err());
    let (m1, p1) = scalar(1.0);
    assert!(propagate_coupled(none(), &s, &m1, &p1, &[], -0.1, &c).is_err());
}
