//! Fixed-step explicit ODE integration with an exact discrete reverse pass.
//!
//! Gradients are those of the solver map actually evaluated
//! (discretize-then-optimize), so they agree with finite differences of the
//! forward computation up to rounding.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Euler,
    Rk4,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            other => Err(Error::Config(format!("unknown solver method `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolverConfig {
    pub method: Method,
    /// Solver steps per integration horizon.
    pub substeps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { method: Method::Euler, substeps: 1 }
    }
}

impl SolverConfig {
    pub fn new(method: Method, substeps: usize) -> Result<Self> {
        if substeps == 0 {
            return Err(Error::Config("solver.substeps must be >= 1".into()));
        }
        Ok(Self { method, substeps })
    }
}

/// Autonomous right-hand side `dy/dt = f(y; θ)` with its vector-Jacobian
/// products.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    fn rhs(&self, y: &[f64], dy: &mut [f64]) -> Result<()>;

    /// Accumulates `cotᵀ ∂f/∂y` into `y_bar` (when requested) and
    /// `cotᵀ ∂f/∂θ` into `theta_bar`.
    fn rhs_vjp(&self, y: &[f64], cot: &[f64], y_bar: Option<&mut [f64]>, theta_bar: &mut [f64]) -> Result<()>;
}

/// Everything the reverse pass needs: the state entering every step and,
/// for RK4, every stage input.
#[derive(Debug, Clone)]
pub struct IntegrationTape {
    pub method: Method,
    pub step: f64,
    pub dim: usize,
    /// `states[j]` enters step `j`; the last entry is the final state.
    pub states: Vec<Vec<f64>>,
    /// RK4 stage inputs 2..4 per step.
    stages: Vec<[Vec<f64>; 3]>,
}

impl IntegrationTape {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("tape always holds the initial state")
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    /// Re-runs the forward map from the recorded initial state.
    pub fn replay<S: OdeSystem + ?Sized>(&self, sys: &S) -> Result<Vec<f64>> {
        if self.steps() == 0 {
            return Ok(self.states[0].clone());
        }
        Ok(integrate_with_step(sys, &self.states[0], self.step, self.steps(), self.method)?.0)
    }
}

fn check_finite(y: &[f64], step: usize) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration { step })
    }
}

/// Integrates over `[0, horizon]` with `cfg.substeps` equal steps.
pub fn integrate<S: OdeSystem + ?Sized>(
    sys: &S,
    y0: &[f64],
    horizon: f64,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, IntegrationTape)> {
    if y0.len() != sys.dim() {
        return Err(Error::Shape(format!("initial state has {} entries, system {}", y0.len(), sys.dim())));
    }
    if cfg.substeps == 0 {
        return Err(Error::Config("solver.substeps must be >= 1".into()));
    }
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::Domain(format!("integration horizon must be >= 0, got {horizon}")));
    }
    if horizon == 0.0 {
        let tape = IntegrationTape {
            method: cfg.method,
            step: 0.0,
            dim: y0.len(),
            states: vec![y0.to_vec()],
            stages: Vec::new(),
        };
        return Ok((y0.to_vec(), tape));
    }
    let (y, tape) = integrate_with_step(sys, y0, horizon / cfg.substeps as f64, cfg.substeps, cfg.method)?;
    Ok((y, tape))
}

fn integrate_with_step<S: OdeSystem + ?Sized>(
    sys: &S,
    y0: &[f64],
    h: f64,
    substeps: usize,
    method: Method,
) -> Result<(Vec<f64>, IntegrationTape)> {
    let n = y0.len();
    let mut states = Vec::with_capacity(substeps + 1);
    let mut stages = Vec::new();
    states.push(y0.to_vec());
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    for j in 0..substeps {
        match method {
            Method::Euler => {
                sys.rhs(&y, &mut k1)?;
                for i in 0..n {
                    y[i] += h * k1[i];
                }
            }
            Method::Rk4 => {
                let mut k2 = vec![0.0; n];
                let mut k3 = vec![0.0; n];
                let mut k4 = vec![0.0; n];
                sys.rhs(&y, &mut k1)?;
                let s2: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k1[i]).collect();
                sys.rhs(&s2, &mut k2)?;
                let s3: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k2[i]).collect();
                sys.rhs(&s3, &mut k3)?;
                let s4: Vec<f64> = (0..n).map(|i| y[i] + h * k3[i]).collect();
                sys.rhs(&s4, &mut k4)?;
                for i in 0..n {
                    y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
                stages.push([s2, s3, s4]);
            }
        }
        check_finite(&y, j)?;
        states.push(y.clone());
    }
    let tape = IntegrationTape { method, step: h, dim: n, states, stages };
    Ok((y, tape))
}

/// Reverse pass of [`integrate`]: given `dL/dy1`, accumulates `dL/dθ` into
/// `theta_bar` and returns `dL/dy0` (all zeros when `need_y0` is false and
/// the first step's state cotangent was skipped).
pub fn backprop_integrate<S: OdeSystem + ?Sized>(
    sys: &S,
    tape: &IntegrationTape,
    y1_bar: &[f64],
    theta_bar: &mut [f64],
    need_y0: bool,
) -> Result<Vec<f64>> {
    let n = tape.dim;
    if sys.dim() != n || y1_bar.len() != n {
        return Err(Error::Shape(format!(
            "tape dimension {n}, system {}, cotangent {}",
            sys.dim(),
            y1_bar.len()
        )));
    }
    if tape.method == Method::Rk4 && tape.stages.len() != tape.steps() {
        return Err(Error::Shape("tape is missing RK4 stages".into()));
    }
    let h = tape.step;
    let mut ybar = y1_bar.to_vec();
    for j in (0..tape.steps()).rev() {
        let y = &tape.states[j];
        let want_state = need_y0 || j > 0;
        match tape.method {
            Method::Euler => {
                let cot: Vec<f64> = ybar.iter().map(|v| h * v).collect();
                if want_state {
                    let mut acc = vec![0.0; n];
                    sys.rhs_vjp(y, &cot, Some(&mut acc), theta_bar)?;
                    for i in 0..n {
                        ybar[i] += acc[i];
                    }
                } else {
                    sys.rhs_vjp(y, &cot, None, theta_bar)?;
                }
            }
            Method::Rk4 => {
                let [s2, s3, s4] = &tape.stages[j];
                let k4b: Vec<f64> = ybar.iter().map(|v| h / 6.0 * v).collect();
                let mut k3b: Vec<f64> = ybar.iter().map(|v| h / 3.0 * v).collect();
                let mut k2b: Vec<f64> = k3b.clone();
                let mut k1b: Vec<f64> = k4b.clone();
                let mut acc = vec![0.0; n];
                sys.rhs_vjp(s4, &k4b, Some(&mut acc), theta_bar)?;
                for i in 0..n {
                    ybar[i] += acc[i];
                    k3b[i] += h * acc[i];
                }
                acc.fill(0.0);
                sys.rhs_vjp(s3, &k3b, Some(&mut acc), theta_bar)?;
                for i in 0..n {
                    ybar[i] += acc[i];
                    k2b[i] += 0.5 * h * acc[i];
                }
                acc.fill(0.0);
                sys.rhs_vjp(s2, &k2b, Some(&mut acc), theta_bar)?;
                for i in 0..n {
                    ybar[i] += acc[i];
                    k1b[i] += 0.5 * h * acc[i];
                }
                if want_state {
                    acc.fill(0.0);
                    sys.rhs_vjp(y, &k1b, Some(&mut acc), theta_bar)?;
                    for i in 0..n {
                        ybar[i] += acc[i];
                    }
                } else {
                    sys.rhs_vjp(y, &k1b, None, theta_bar)?;
                }
            }
        }
    }
    Ok(ybar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Mlp, OutputHead};
    use proptest::prelude::*;

    /// dy/dt = θ y
    struct Scaled {
        theta: f64,
    }

    impl OdeSystem for Scaled {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, y: &[f64], dy: &mut [f64]) -> Result<()> {
            dy[0] = self.theta * y[0];
            Ok(())
        }
        fn rhs_vjp(&self, y: &[f64], cot: &[f64], y_bar: Option<&mut [f64]>, theta_bar: &mut [f64]) -> Result<()> {
            if let Some(yb) = y_bar {
                yb[0] += cot[0] * self.theta;
            }
            theta_bar[0] += cot[0] * y[0];
            Ok(())
        }
    }

    /// dy/dt = g(y; θ) for a small network g: R^2 -> R^2.
    struct Neural {
        net: Mlp,
    }

    impl OdeSystem for Neural {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&self, y: &[f64], dy: &mut [f64]) -> Result<()> {
            dy.copy_from_slice(&self.net.forward(y)?);
            Ok(())
        }
        fn rhs_vjp(&self, y: &[f64], cot: &[f64], y_bar: Option<&mut [f64]>, theta_bar: &mut [f64]) -> Result<()> {
            let t = self.net.forward_trace(y)?;
            self.net.backward(&t, cot, Some(theta_bar), y_bar);
            Ok(())
        }
    }

    #[test]
    fn euler_decay() {
        let cfg = SolverConfig::new(Method::Euler, 100).unwrap();
        let (y, _) = integrate(&Scaled { theta: -1.0 }, &[1.0], 1.0, &cfg).unwrap();
        assert!((y[0] - 0.99f64.powi(100)).abs() < 1e-12);
        assert!((y[0] - 0.36603).abs() < 1e-5);
    }

    #[test]
    fn rk4_decay() {
        let cfg = SolverConfig::new(Method::Rk4, 100).unwrap();
        let (y, _) = integrate(&Scaled { theta: -1.0 }, &[1.0], 1.0, &cfg).unwrap();
        assert!((y[0] - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let exact = (-1f64).exp();
        let err = |n| {
            let cfg = SolverConfig::new(Method::Rk4, n).unwrap();
            (integrate(&Scaled { theta: -1.0 }, &[1.0], 1.0, &cfg).unwrap().0[0] - exact).abs()
        };
        let ratio = err(10) / err(20);
        assert!((ratio - 16.0).abs() < 1.5, "ratio {ratio}");
    }

    #[test]
    fn zero_horizon_is_identity() {
        for m in [Method::Euler, Method::Rk4] {
            let cfg = SolverConfig::new(m, 5).unwrap();
            let sys = Scaled { theta: -3.0 };
            let (y, tape) = integrate(&sys, &[0.7], 0.0, &cfg).unwrap();
            assert_eq!(y, vec![0.7]);
            let mut tb = [0.0];
            let yb = backprop_integrate(&sys, &tape, &[2.5], &mut tb, true).unwrap();
            assert_eq!(yb, vec![2.5]);
            assert_eq!(tb, [0.0]);
        }
    }

    #[test]
    fn non_finite_state_reports_step() {
        let cfg = SolverConfig::new(Method::Euler, 10).unwrap();
        let err = integrate(&Scaled { theta: 1e300 }, &[1e10], 1.0, &cfg).unwrap_err();
        assert!(matches!(err, Error::Integration { step: 0 }));
    }

    #[test]
    fn linear_sensitivity() {
        for (m, steps, tol_analytic) in [(Method::Euler, 1000, 1e-3), (Method::Rk4, 20, 1e-7)] {
            let cfg = SolverConfig::new(m, steps).unwrap();
            let sys = Scaled { theta: -1.0 };
            let (_, tape) = integrate(&sys, &[1.0], 1.0, &cfg).unwrap();
            let mut tb = [0.0];
            backprop_integrate(&sys, &tape, &[1.0], &mut tb, true).unwrap();
            // analytic dy(T)/dθ = T e^{θT}
            assert!((tb[0] - (-1f64).exp()).abs() < tol_analytic, "{m:?}: {}", tb[0]);
            let h = 1e-6;
            let f = |th: f64| integrate(&Scaled { theta: th }, &[1.0], 1.0, &cfg).unwrap().0[0];
            let fd = (f(-1.0 + h) - f(-1.0 - h)) / (2.0 * h);
            assert!(((tb[0] - fd) / fd).abs() < 1e-6);
        }
    }

    #[test]
    fn parameter_free_rhs_has_zero_parameter_gradient() {
        struct Fixed;
        impl OdeSystem for Fixed {
            fn dim(&self) -> usize {
                1
            }
            fn rhs(&self, y: &[f64], dy: &mut [f64]) -> Result<()> {
                dy[0] = -y[0] * y[0];
                Ok(())
            }
            fn rhs_vjp(&self, y: &[f64], cot: &[f64], y_bar: Option<&mut [f64]>, _t: &mut [f64]) -> Result<()> {
                if let Some(yb) = y_bar {
                    yb[0] += -2.0 * y[0] * cot[0];
                }
                Ok(())
            }
        }
        let cfg = SolverConfig::new(Method::Rk4, 7).unwrap();
        let (_, tape) = integrate(&Fixed, &[1.0], 0.5, &cfg).unwrap();
        let mut tb = [0.0; 3];
        backprop_integrate(&Fixed, &tape, &[1.0], &mut tb, true).unwrap();
        assert_eq!(tb, [0.0; 3]);
    }

    #[test]
    fn tape_replay_is_bit_identical() {
        let net = Mlp::initialized(vec![2, 5, 2], OutputHead::Linear, 3).unwrap();
        let sys = Neural { net };
        for m in [Method::Euler, Method::Rk4] {
            let cfg = SolverConfig::new(m, 6).unwrap();
            let (y, tape) = integrate(&sys, &[0.2, -0.1], 0.8, &cfg).unwrap();
            assert_eq!(tape.replay(&sys).unwrap(), y);
            assert_eq!(tape.final_state(), &y[..]);
        }
    }

    #[test]
    fn tape_dimension_mismatch() {
        let cfg = SolverConfig::new(Method::Euler, 2).unwrap();
        let (_, tape) = integrate(&Scaled { theta: 1.0 }, &[1.0], 1.0, &cfg).unwrap();
        let net = Mlp::initialized(vec![2, 3, 2], OutputHead::Linear, 0).unwrap();
        let mut tb = vec![0.0; net.num_params()];
        assert!(backprop_integrate(&Neural { net }, &tape, &[1.0, 0.0], &mut tb, true).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn backprop_matches_finite_differences(seed in 0u64..5000, rk4 in any::<bool>(), steps in 1usize..6) {
            let method = if rk4 { Method::Rk4 } else { Method::Euler };
            let cfg = SolverConfig::new(method, steps).unwrap();
            let net = Mlp::initialized(vec![2, 6, 2], OutputHead::Linear, seed).unwrap();
            let sys = Neural { net: net.clone() };
            let y0 = [0.3, -0.6];
            let w = [1.0, -0.7];
            let (_, tape) = integrate(&sys, &y0, 0.9, &cfg).unwrap();
            let mut tb = vec![0.0; net.num_params()];
            let yb = backprop_integrate(&sys, &tape, &w, &mut tb, true).unwrap();
            let loss = |n: &Mlp, y0: &[f64]| {
                let (y, _) = integrate(&Neural { net: n.clone() }, y0, 0.9, &cfg).unwrap();
                y[0] * w[0] + y[1] * w[1]
            };
            let h = 1e-6;
            let scale = tb.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..net.num_params() {
                let mut p = net.clone(); p.params_mut()[i] += h;
                let mut m = net.clone(); m.params_mut()[i] -= h;
                let fd = (loss(&p, &y0) - loss(&m, &y0)) / (2.0 * h);
                let err = (tb[i] - fd).abs() / tb[i].abs().max(fd.abs()).max(1e-3 * scale);
                prop_assert!(err < 1e-5, "param {}: {} vs {}", i, tb[i], fd);
            }
            for j in 0..2 {
                let mut p = y0; p[j] += h;
                let mut m = y0; m[j] -= h;
                let fd = (loss(&net, &p) - loss(&net, &m)) / (2.0 * h);
                prop_assert!((yb[j] - fd).abs() / fd.abs().max(1e-3) < 1e-5);
            }
        }
    }
}
