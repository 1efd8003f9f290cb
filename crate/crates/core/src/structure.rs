//! Known SDE structure with pluggable hidden-physics terms.
//!
//! Every case study has a drift that is affine in the state and the hidden
//! drift term, `f(x, u) = A x + B g₁(·) + c`, and a diagonal diffusion. The
//! hidden terms see a selection of state components, optionally followed by
//! the exogenous input.

use crate::error::{Error, Result};
use crate::neural::{Mlp, Trace};
use crate::sde::{DomainBox, SdeModel};

/// Which state components (and whether the input vector) feed a hidden term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetInputs {
    pub state: Vec<usize>,
    pub input: bool,
}

impl NetInputs {
    pub fn new(state: Vec<usize>, input: bool) -> Self {
        Self { state, input }
    }

    pub fn dim(&self, input_dim: usize) -> usize {
        self.state.len() + if self.input { input_dim } else { 0 }
    }

    pub fn gather(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = self.state.iter().map(|&i| x[i]).collect();
        if self.input {
            v.extend_from_slice(u);
        }
        v
    }

    /// Adds the state part of a net-input cotangent into `x_bar`.
    pub fn scatter(&self, in_bar: &[f64], x_bar: &mut [f64]) {
        for (k, &i) in self.state.iter().enumerate() {
            x_bar[i] += in_bar[k];
        }
    }
}

/// Diagonal diffusion `h(x)`.
#[derive(Debug, Clone, PartialEq)]
pub enum DiffusionForm {
    /// `h_ii = sqrt(2 g₂(·)_i)` with `g₂` a hidden term.
    SqrtTwoNet,
    /// `h_ii = σ_i x_i`
    StateProportional(Vec<f64>),
    /// `h_ii = s_i`
    Constant(Vec<f64>),
}

/// A scalar- or vector-valued hidden function.
pub trait HiddenFn: Send + Sync {
    fn output_dim(&self) -> usize;
    fn eval(&self, xin: &[f64]) -> Vec<f64>;
}

impl HiddenFn for Mlp {
    fn output_dim(&self) -> usize {
        Mlp::output_dim(self)
    }

    fn eval(&self, xin: &[f64]) -> Vec<f64> {
        self.forward(xin).expect("net input dimension checked at construction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdeStructure {
    pub name: String,
    pub state_dim: usize,
    pub input_dim: usize,
    /// `d x d`, row-major.
    pub a: Vec<f64>,
    /// `d x p`, row-major, `p` = drift hidden outputs.
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub drift_outputs: usize,
    pub drift_inputs: NetInputs,
    pub diffusion: DiffusionForm,
    pub diffusion_inputs: NetInputs,
}

impl SdeStructure {
    /// Checks all block shapes.
    pub fn validate(&self) -> Result<()> {
        let d = self.state_dim;
        let p = self.drift_outputs;
        let bad = |what: &str| Err(Error::Shape(format!("structure `{}`: {what}", self.name)));
        if d == 0 {
            return bad("zero state dimension");
        }
        if self.a.len() != d * d || self.b.len() != d * p || self.c.len() != d {
            return bad("drift blocks do not match the state dimension");
        }
        if self.drift_inputs.state.iter().chain(&self.diffusion_inputs.state).any(|&i| i >= d) {
            return bad("hidden-term input index out of range");
        }
        match &self.diffusion {
            DiffusionForm::StateProportional(s) | DiffusionForm::Constant(s) if s.len() != d => {
                bad("diffusion coefficients do not match the state dimension")
            }
            _ => Ok(()),
        }
    }

    pub fn drift_net_inputs(&self) -> usize {
        self.drift_inputs.dim(self.input_dim)
    }

    pub fn diffusion_net_inputs(&self) -> usize {
        self.diffusion_inputs.dim(self.input_dim)
    }

    pub fn has_diffusion_net(&self) -> bool {
        matches!(self.diffusion, DiffusionForm::SqrtTwoNet)
    }

    /// Checks that networks fit the hidden-term signatures.
    pub fn check_nets(&self, drift: Option<&Mlp>, diffusion: Option<&Mlp>) -> Result<()> {
        if let Some(n) = drift {
            if n.input_dim() != self.drift_net_inputs() || n.output_dim() != self.drift_outputs {
                return Err(Error::Shape(format!(
                    "drift network is {}->{}, structure `{}` needs {}->{}",
                    n.input_dim(),
                    n.output_dim(),
                    self.name,
                    self.drift_net_inputs(),
                    self.drift_outputs
                )));
            }
        }
        if self.has_diffusion_net() {
            match diffusion {
                Some(n) if n.input_dim() == self.diffusion_net_inputs() && n.output_dim() == self.state_dim => {}
                Some(n) => {
                    return Err(Error::Shape(format!(
                        "diffusion network is {}->{}, structure `{}` needs {}->{}",
                        n.input_dim(),
                        n.output_dim(),
                        self.name,
                        self.diffusion_net_inputs(),
                        self.state_dim
                    )))
                }
                None => return Err(Error::Config(format!("structure `{}` needs a diffusion network", self.name))),
            }
        }
        Ok(())
    }

    /// `A x + B g + c`
    pub fn drift_from(&self, g: &[f64], x: &[f64], out: &mut [f64]) {
        let d = self.state_dim;
        let p = self.drift_outputs;
        for i in 0..d {
            let mut v = self.c[i];
            for j in 0..d {
                v += self.a[i * d + j] * x[j];
            }
            for j in 0..p {
                v += self.b[i * p + j] * g[j];
            }
            out[i] = v;
        }
    }

    /// Drift with an arbitrary hidden term; `None` means `g₁ ≡ 0`.
    pub fn drift(&self, g1: Option<&dyn HiddenFn>, x: &[f64], u: &[f64], out: &mut [f64]) {
        let g = match g1 {
            Some(h) => h.eval(&self.drift_inputs.gather(x, u)),
            None => vec![0.0; self.drift_outputs],
        };
        self.drift_from(&g, x, out);
    }

    /// Diagonal of `h(x)` from the hidden diffusion values (ignored for the
    /// fixed forms). Returns how many components were clamped at zero.
    pub fn diffusion_from(&self, g2: Option<&[f64]>, x: &[f64], out: &mut [f64]) -> usize {
        match &self.diffusion {
            DiffusionForm::SqrtTwoNet => {
                let g = g2.expect("diffusion values required");
                let mut clamped = 0;
                for i in 0..self.state_dim {
                    let v = 2.0 * g[i];
                    if v < 0.0 {
                        clamped += 1;
                        out[i] = 0.0;
                    } else {
                        out[i] = v.sqrt();
                    }
                }
                clamped
            }
            DiffusionForm::StateProportional(s) => {
                for i in 0..self.state_dim {
                    out[i] = s[i] * x[i];
                }
                0
            }
            DiffusionForm::Constant(s) => {
                out.copy_from_slice(s);
                0
            }
        }
    }

    pub fn diffusion(&self, g2: Option<&dyn HiddenFn>, x: &[f64], u: &[f64], out: &mut [f64]) -> usize {
        if self.has_diffusion_net() {
            let g = g2.expect("structure requires a diffusion term").eval(&self.diffusion_inputs.gather(x, u));
            self.diffusion_from(Some(&g), x, out)
        } else {
            self.diffusion_from(None, x, out)
        }
    }

    /// Drift with a network, keeping the forward trace for [`Self::drift_backward`].
    pub fn drift_traced(&self, net: Option<&Mlp>, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<Option<Trace>> {
        match net {
            Some(n) => {
                let t = n.forward_trace(&self.drift_inputs.gather(x, u))?;
                self.drift_from(&t.output, x, out);
                Ok(Some(t))
            }
            None => {
                self.drift_from(&vec![0.0; self.drift_outputs], x, out);
                Ok(None)
            }
        }
    }

    /// Accumulates `f̄ᵀ ∂f/∂x` into `x_bar` and `f̄ᵀ ∂f/∂θ₁` into `theta_bar`.
    pub fn drift_backward(
        &self,
        net: Option<&Mlp>,
        trace: Option<&Trace>,
        f_bar: &[f64],
        mut x_bar: Option<&mut [f64]>,
        theta_bar: Option<&mut [f64]>,
    ) {
        let d = self.state_dim;
        let mut in_bar = None;
        if let Some(xb) = x_bar.as_deref_mut() {
            for i in 0..d {
                for j in 0..d {
                    xb[j] += self.a[i * d + j] * f_bar[i];
                }
            }
        }
        if let (Some(n), Some(t)) = (net, trace) {
            let g_bar = self.b_transpose(f_bar);
            if x_bar.is_some() {
                let mut ib = vec![0.0; n.input_dim()];
                n.backward(t, &g_bar, theta_bar, Some(&mut ib));
                in_bar = Some(ib);
            } else if theta_bar.is_some() {
                n.backward(t, &g_bar, theta_bar, None);
            }
        }
        if let (Some(xb), Some(ib)) = (x_bar, in_bar) {
            self.drift_inputs.scatter(&ib, xb);
        }
    }

    /// `Bᵀ v`
    pub fn b_transpose(&self, v: &[f64]) -> Vec<f64> {
        let p = self.drift_outputs;
        let mut out = vec![0.0; p];
        for i in 0..self.state_dim {
            for j in 0..p {
                out[j] += self.b[i * p + j] * v[i];
            }
        }
        out
    }

    /// Diffusion diagonal with a network, keeping what the reverse pass needs.
    pub fn diffusion_traced(&self, net: Option<&Mlp>, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<Option<Trace>> {
        if self.has_diffusion_net() {
            let n = net.ok_or_else(|| Error::Config(format!("structure `{}` needs a diffusion network", self.name)))?;
            let t = n.forward_trace(&self.diffusion_inputs.gather(x, u))?;
            self.diffusion_from(Some(&t.output), x, out);
            Ok(Some(t))
        } else {
            self.diffusion_from(None, x, out);
            Ok(None)
        }
    }

    /// Accumulates `h̄ᵀ ∂h/∂x` and `h̄ᵀ ∂h/∂θ₂`; `h` is the diagonal returned by
    /// the matching forward call.
    pub fn diffusion_backward(
        &self,
        net: Option<&Mlp>,
        trace: Option<&Trace>,
        h: &[f64],
        h_bar: &[f64],
        x_bar: Option<&mut [f64]>,
        theta_bar: Option<&mut [f64]>,
    ) {
        match &self.diffusion {
            DiffusionForm::SqrtTwoNet => {
                let (Some(n), Some(t)) = (net, trace) else { return };
                // h = sqrt(2 g) => dh/dg = 1 / h
                let g_bar: Vec<f64> = (0..self.state_dim)
                    .map(|i| if h[i] > 0.0 { h_bar[i] / h[i] } else { 0.0 })
                    .collect();
                match x_bar {
                    Some(xb) => {
                        let mut in_bar = vec![0.0; n.input_dim()];
                        n.backward(t, &g_bar, theta_bar, Some(&mut in_bar));
                        self.diffusion_inputs.scatter(&in_bar, xb);
                    }
                    None => {
                        if let Some(tb) = theta_bar {
                            n.backward(t, &g_bar, Some(tb), None);
                        }
                    }
                }
            }
            DiffusionForm::StateProportional(s) => {
                if let Some(xb) = x_bar {
                    for i in 0..self.state_dim {
                        xb[i] += s[i] * h_bar[i];
                    }
                }
            }
            DiffusionForm::Constant(_) => {}
        }
    }
}

/// An [`SdeModel`] assembled from a structure and concrete hidden terms.
pub struct StructuredSde {
    pub structure: SdeStructure,
    pub drift_term: Option<Box<dyn HiddenFn>>,
    pub diffusion_term: Option<Box<dyn HiddenFn>>,
    pub domain: Option<DomainBox>,
    /// Multiplies the diffusion matrix; 1 for the model itself.
    pub diffusion_gain: f64,
    /// Per-component absorbing lower bound.
    pub floor: Option<Vec<f64>>,
}

impl StructuredSde {
    pub fn new(
        structure: SdeStructure,
        drift_term: Option<Box<dyn HiddenFn>>,
        diffusion_term: Option<Box<dyn HiddenFn>>,
    ) -> Result<Self> {
        structure.validate()?;
        if let Some(t) = &drift_term {
            if t.output_dim() != structure.drift_outputs {
                return Err(Error::Shape("drift term output dimension".into()));
            }
        }
        if structure.has_diffusion_net() && diffusion_term.is_none() {
            return Err(Error::Config(format!("structure `{}` needs a diffusion term", structure.name)));
        }
        Ok(Self { structure, drift_term, diffusion_term, domain: None, diffusion_gain: 1.0, floor: None })
    }

    pub fn with_domain(mut self, domain: DomainBox) -> Self {
        self.domain = Some(domain);
        self
    }

    pub fn with_floor(mut self, floor: Option<Vec<f64>>) -> Self {
        self.floor = floor;
        self
    }

    pub fn with_diffusion_gain(mut self, gain: f64) -> Self {
        self.diffusion_gain = gain;
        self
    }
}

impl SdeModel for StructuredSde {
    fn state_dim(&self) -> usize {
        self.structure.state_dim
    }

    fn input_dim(&self) -> usize {
        self.structure.input_dim
    }

    fn drift(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.structure.drift(self.drift_term.as_deref(), x, u, out);
    }

    fn diffusion(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> usize {
        let d = self.structure.state_dim;
        let mut diag = vec![0.0; d];
        let clamped = self.structure.diffusion(self.diffusion_term.as_deref(), x, u, &mut diag);
        out.fill(0.0);
        for i in 0..d {
            out[i * d + i] = self.diffusion_gain * diag[i];
        }
        clamped
    }

    fn domain(&self) -> Option<&DomainBox> {
        self.domain.as_ref()
    }

    fn project(&self, x: &mut [f64]) -> bool {
        let Some(floor) = &self.floor else { return false };
        let mut hit = false;
        for (v, lo) in x.iter_mut().zip(floor) {
            if *v < *lo {
                *v = *lo;
                hit = true;
            }
        }
        hit
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::OutputHead;

    fn toy() -> SdeStructure {
        SdeStructure {
            name: "toy".into(),
            state_dim: 2,
            input_dim: 1,
            a: vec![-1.0, 0.5, 0.0, -2.0],
            b: vec![1.0, 0.0, 2.0, -1.0],
            c: vec![0.3, 0.0],
            drift_outputs: 2,
            drift_inputs: NetInputs::new(vec![0, 1], true),
            diffusion: DiffusionForm::SqrtTwoNet,
            diffusion_inputs: NetInputs::new(vec![1], true),
        }
    }

    #[test]
    fn drift_vjp_matches_finite_differences() {
        let s = toy();
        let net = Mlp::initialized(vec![3, 5, 2], OutputHead::Linear, 3).unwrap();
        let x = [0.4, -0.7];
        let u = [0.2];
        let fb = [0.3, -1.1];
        let mut f = [0.0; 2];
        let t = s.drift_traced(Some(&net), &x, &u, &mut f).unwrap();
        let mut xb = [0.0; 2];
        let mut tb = vec![0.0; net.num_params()];
        s.drift_backward(Some(&net), t.as_ref(), &fb, Some(&mut xb), Some(&mut tb));
        let obj = |x: &[f64], n: &Mlp| {
            let mut f = [0.0; 2];
            s.drift(Some(n), x, &u, &mut f);
            f[0] * fb[0] + f[1] * fb[1]
        };
        let eps = 1e-6;
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += eps;
            xm[j] -= eps;
            let fd = (obj(&xp, &net) - obj(&xm, &net)) / (2.0 * eps);
            assert!((fd - xb[j]).abs() < 1e-7, "{fd} vs {}", xb[j]);
        }
        for k in 0..net.num_params() {
            let mut np = net.clone();
            np.params_mut()[k] += eps;
            let mut nm = net.clone();
            nm.params_mut()[k] -= eps;
            let fd = (obj(&x, &np) - obj(&x, &nm)) / (2.0 * eps);
            assert!((fd - tb[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn diffusion_vjp_matches_finite_differences() {
        let s = toy();
        let net = Mlp::initialized(vec![2, 4, 2], OutputHead::Softplus, 5).unwrap();
        let x = [0.4, -0.7];
        let u = [0.2];
        let hb = [0.8, 0.25];
        let mut h = [0.0; 2];
        let t = s.diffusion_traced(Some(&net), &x, &u, &mut h).unwrap();
        let mut xb = [0.0; 2];
        let mut tb = vec![0.0; net.num_params()];
        s.diffusion_backward(Some(&net), t.as_ref(), &h, &hb, Some(&mut xb), Some(&mut tb));
        let obj = |x: &[f64], n: &Mlp| {
            let mut h = [0.0; 2];
            s.diffusion(Some(n), x, &u, &mut h);
            h[0] * hb[0] + h[1] * hb[1]
        };
        let eps = 1e-6;
        let mut xp = x;
        let mut xm = x;
        xp[1] += eps;
        xm[1] -= eps;
        assert!(((obj(&xp, &net) - obj(&xm, &net)) / (2.0 * eps) - xb[1]).abs() < 1e-7);
        assert_eq!(xb[0], 0.0);
        for k in 0..net.num_params() {
            let mut np = net.clone();
            np.params_mut()[k] += eps;
            let mut nm = net.clone();
            nm.params_mut()[k] -= eps;
            let fd = (obj(&x, &np) - obj(&x, &nm)) / (2.0 * eps);
            assert!((fd - tb[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn negative_diffusion_argument_is_clamped() {
        let s = toy();
        let mut h = [0.0; 2];
        assert_eq!(s.diffusion_from(Some(&[-1.0, 2.0]), &[0.0, 0.0], &mut h), 1);
        assert_eq!(h, [0.0, 2.0]);
    }

    #[test]
    fn net_shape_checks() {
        let s = toy();
        let good = Mlp::initialized(vec![3, 4, 2], OutputHead::Linear, 1).unwrap();
        let diff = Mlp::initialized(vec![2, 4, 2], OutputHead::Softplus, 1).unwrap();
        assert!(s.check_nets(Some(&good), Some(&diff)).is_ok());
        assert!(s.check_nets(Some(&diff), Some(&diff)).is_err());
        assert!(s.check_nets(Some(&good), None).is_err());
    }
}
