//! The three benchmark systems: directed colloidal self-assembly,
//! competitive Lotka-Volterra, and an SIR epidemic model.

use std::fmt;

use crate::error::{Error, Result};
use crate::sde::DomainBox;
use crate::structure::{DiffusionForm, HiddenFn, NetInputs, SdeStructure, StructuredSde};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CaseId {
    Colloidal,
    LotkaVolterra,
    Sir,
}

impl CaseId {
    pub const ALL: [CaseId; 3] = [CaseId::Colloidal, CaseId::LotkaVolterra, CaseId::Sir];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "colloidal" => Ok(CaseId::Colloidal),
            "lotka_volterra" | "lotka-volterra" | "lv" => Ok(CaseId::LotkaVolterra),
            "sir" => Ok(CaseId::Sir),
            other => Err(Error::Config(format!(
                "unknown case study `{other}` (expected colloidal, lotka_volterra, sir)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CaseId::Colloidal => "colloidal",
            CaseId::LotkaVolterra => "lotka_volterra",
            CaseId::Sir => "sir",
        }
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const LV_K1: f64 = 0.4;
const LV_K2: f64 = 0.5;

/// Ground-truth parameters of one case study.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthModel {
    pub id: CaseId,
    pub params: Vec<(&'static str, f64)>,
}

/// Drift, diffusion diagonal and hidden-physics values at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthEval {
    pub drift: Vec<f64>,
    pub diffusion: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl GroundTruthModel {
    pub fn new(id: CaseId) -> Self {
        let params = match id {
            // energies in units of K_b T
            CaseId::Colloidal => vec![
                ("kbt", 1.0),
                ("g2_peak", 4.5e-3),
                ("g2_floor", 0.5e-3),
                ("center", 2.1),
                ("input_shift", 0.75),
                ("stiffness", 10.0),
            ],
            CaseId::LotkaVolterra => {
                let den = 1.0 - LV_K1 * LV_K2;
                vec![("k1", LV_K1), ("k2", LV_K2), ("x1_eq", (1.0 - LV_K1) / den), ("x2_eq", (1.0 - LV_K2) / den)]
            }
            CaseId::Sir => vec![
                ("b", 1.0),
                ("d", 0.1),
                ("k", 0.2),
                ("alpha", 0.5),
                ("gamma", 0.01),
                ("mu", 0.05),
                ("delta", 0.01),
                ("h", 2.0),
                ("sigma1", 0.2),
                ("sigma2", 0.2),
                ("sigma3", 0.1),
            ],
        };
        Self { id, params }
    }

    pub fn param(&self, name: &str) -> f64 {
        self.params
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("{} has no parameter `{name}`", self.id))
    }

    pub fn structure(&self) -> SdeStructure {
        match self.id {
            CaseId::Colloidal => SdeStructure {
                name: "colloidal".into(),
                state_dim: 1,
                input_dim: 1,
                a: vec![0.0],
                b: vec![1.0],
                c: vec![0.0],
                drift_outputs: 1,
                drift_inputs: NetInputs::new(vec![0], true),
                diffusion: DiffusionForm::SqrtTwoNet,
                diffusion_inputs: NetInputs::new(vec![0], true),
            },
            CaseId::LotkaVolterra => SdeStructure {
                name: "lotka_volterra".into(),
                state_dim: 2,
                input_dim: 0,
                a: vec![0.0; 4],
                b: vec![1.0, 0.0, 0.0, 1.0],
                c: vec![0.0; 2],
                drift_outputs: 2,
                drift_inputs: NetInputs::new(vec![0, 1], false),
                diffusion: DiffusionForm::SqrtTwoNet,
                diffusion_inputs: NetInputs::new(vec![0, 1], false),
            },
            CaseId::Sir => {
                let p = |n| self.param(n);
                let (d, gamma, mu, delta) = (p("d"), p("gamma"), p("mu"), p("delta"));
                SdeStructure {
                    name: "sir".into(),
                    state_dim: 3,
                    input_dim: 0,
                    #[rustfmt::skip]
                    a: vec![
                        -d, 0.0, gamma,
                        0.0, -(d + mu + delta), 0.0,
                        0.0, mu, -(d + gamma),
                    ],
                    b: vec![-1.0, 1.0, 0.0],
                    c: vec![p("b"), 0.0, 0.0],
                    drift_outputs: 1,
                    drift_inputs: NetInputs::new(vec![0, 1], false),
                    diffusion: DiffusionForm::StateProportional(vec![p("sigma1"), p("sigma2"), p("sigma3")]),
                    diffusion_inputs: NetInputs::new(vec![], false),
                }
            }
        }
    }

    /// Hidden drift term `g₁` (or `g` for SIR) at a hidden-term input.
    pub fn hidden_drift(&self, xin: &[f64]) -> Vec<f64> {
        match self.id {
            CaseId::Colloidal => {
                let (x, u) = (xin[0], xin[1]);
                let s = x - self.param("center") - self.param("input_shift") * u;
                let g2 = self.colloidal_g2(x, u);
                let dg2 = -2.0 * s * self.param("g2_peak") * (-s * s).exp();
                // dF/dx = 2 · stiffness · K_bT · s
                let df = 2.0 * self.param("stiffness") * self.param("kbt") * s;
                vec![dg2 - df * g2 / self.param("kbt")]
            }
            CaseId::LotkaVolterra => {
                let (x1, x2) = (xin[0], xin[1]);
                vec![x1 * (1.0 - x1 - LV_K1 * x2), x2 * (1.0 - x2 - LV_K2 * x1)]
            }
            CaseId::Sir => {
                let (s, i) = (xin[0], xin[1]);
                let h = self.param("h");
                let sh = s.powf(h);
                let den = sh + self.param("alpha") * i.powf(h);
                if den == 0.0 {
                    vec![0.0]
                } else {
                    vec![self.param("k") * sh * i / den]
                }
            }
        }
    }

    /// Hidden diffusion term `g₂`, when the case has one.
    pub fn hidden_diffusion(&self, xin: &[f64]) -> Option<Vec<f64>> {
        match self.id {
            CaseId::Colloidal => Some(vec![self.colloidal_g2(xin[0], xin[1])]),
            CaseId::LotkaVolterra => {
                let (x1, x2) = (xin[0], xin[1]);
                Some(vec![x1 * (x2 - self.param("x2_eq")), x2 * (x1 - self.param("x1_eq"))])
            }
            CaseId::Sir => None,
        }
    }

    fn colloidal_g2(&self, x: f64, u: f64) -> f64 {
        let s = x - self.param("center") - self.param("input_shift") * u;
        self.param("g2_peak") * (-s * s).exp() + self.param("g2_floor")
    }

    /// All hidden-physics outputs at one evaluation point (drift term first).
    pub fn hidden(&self, xin: &[f64]) -> Vec<f64> {
        let mut v = self.hidden_drift(xin);
        if let Some(g2) = self.hidden_diffusion(xin) {
            v.extend(g2);
        }
        v
    }

    pub fn hidden_names(&self) -> Vec<&'static str> {
        match self.id {
            CaseId::Colloidal => vec!["g1", "g2"],
            CaseId::LotkaVolterra => vec!["g1_1", "g1_2", "g2_1", "g2_2"],
            CaseId::Sir => vec!["g"],
        }
    }

    /// The true SDE, with its runaway-detection box.
    pub fn model(&self) -> StructuredSde {
        let diffusion: Option<Box<dyn HiddenFn>> =
            if self.hidden_diffusion_dim() > 0 { Some(Box::new(TruthTerm { gt: self.clone(), drift: false })) } else { None };
        StructuredSde::new(self.structure(), Some(Box::new(TruthTerm { gt: self.clone(), drift: true })), diffusion)
            .expect("ground-truth structure is consistent")
            .with_domain(self.domain())
            .with_floor(self.floor())
    }

    /// Populations are absorbed at zero: a step that would make one negative
    /// ends at zero, where its drift and diffusion vanish (LV) or stay
    /// non-negative (SIR).
    pub fn floor(&self) -> Option<Vec<f64>> {
        match self.id {
            CaseId::Colloidal => None,
            CaseId::LotkaVolterra => Some(vec![0.0; 2]),
            CaseId::Sir => Some(vec![0.0; 3]),
        }
    }

    fn hidden_diffusion_dim(&self) -> usize {
        match self.id {
            CaseId::Sir => 0,
            _ => self.structure().state_dim,
        }
    }

    /// Generous box outside of which a trajectory is considered runaway.
    pub fn domain(&self) -> DomainBox {
        match self.id {
            CaseId::Colloidal => DomainBox::new(vec![-10.0], vec![15.0]),
            CaseId::LotkaVolterra => DomainBox::new(vec![-1.0, -1.0], vec![5.0, 5.0]),
            CaseId::Sir => DomainBox::new(vec![-1.0; 3], vec![100.0; 3]),
        }
    }

    /// Sampling interval of the recorded data.
    pub fn default_dt(&self) -> f64 {
        match self.id {
            CaseId::Colloidal => 1.0,
            CaseId::LotkaVolterra => 0.2,
            CaseId::Sir => 0.5,
        }
    }

    /// Box of initial conditions, over the state followed by the input.
    pub fn ic_box(&self) -> DomainBox {
        match self.id {
            CaseId::Colloidal => DomainBox::new(vec![0.5, 0.0], vec![3.5, 1.0]),
            CaseId::LotkaVolterra => DomainBox::new(vec![0.1, 0.1], vec![1.2, 1.2]),
            CaseId::Sir => DomainBox::new(vec![0.5, 0.5, 0.0], vec![8.0, 6.0, 4.0]),
        }
    }

    /// Splits an IC-box point into `(state, input)`.
    pub fn split_ic(&self, p: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.structure().state_dim;
        (p[..d].to_vec(), p[d..].to_vec())
    }

    /// Box over the hidden-term inputs on which reconstructions are scored.
    pub fn eval_box(&self) -> DomainBox {
        match self.id {
            CaseId::Colloidal => DomainBox::new(vec![0.5, 0.0], vec![3.5, 1.0]),
            CaseId::LotkaVolterra => DomainBox::new(vec![0.1, 0.1], vec![1.2, 1.2]),
            CaseId::Sir => DomainBox::new(vec![0.5, 0.5], vec![8.0, 6.0]),
        }
    }

    /// LV coexistence equilibrium.
    pub fn equilibrium(&self) -> Option<[f64; 2]> {
        match self.id {
            CaseId::LotkaVolterra => Some([self.param("x1_eq"), self.param("x2_eq")]),
            _ => None,
        }
    }
}

/// A ground-truth hidden term usable wherever a network is.
pub struct TruthTerm {
    pub gt: GroundTruthModel,
    pub drift: bool,
}

impl HiddenFn for TruthTerm {
    fn output_dim(&self) -> usize {
        if self.drift {
            self.gt.structure().drift_outputs
        } else {
            self.gt.hidden_diffusion_dim()
        }
    }

    fn eval(&self, xin: &[f64]) -> Vec<f64> {
        if self.drift {
            self.gt.hidden_drift(xin)
        } else {
            self.gt.hidden_diffusion(xin).unwrap_or_default()
        }
    }
}

/// Drift, diffusion and hidden values of a case study at `(x, u)`.
pub fn ground_truth_eval(gt: &GroundTruthModel, x: &[f64], u: &[f64]) -> Result<GroundTruthEval> {
    let s = gt.structure();
    if x.len() != s.state_dim || u.len() != s.input_dim {
        return Err(Error::Shape(format!("{}: state {} / input {}", gt.id, x.len(), u.len())));
    }
    if !gt.domain().contains(x) || u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{}: point {x:?} outside the model domain", gt.id)));
    }
    let model = gt.model();
    let mut drift = vec![0.0; s.state_dim];
    let mut diffusion = vec![0.0; s.state_dim];
    s.drift(model.drift_term.as_deref(), x, u, &mut drift);
    s.diffusion(model.diffusion_term.as_deref(), x, u, &mut diffusion);
    let xin = s.drift_inputs.gather(x, u);
    Ok(GroundTruthEval { drift, diffusion, hidden: gt.hidden(&xin) })
}

/// `n` points of the smallest uniform grid with at least `n` nodes over
/// `bx`, picked evenly in lexicographic order.
pub fn grid_points(bx: &DomainBox, n: usize) -> Vec<Vec<f64>> {
    let dims = bx.lo.len();
    if n == 0 || dims == 0 {
        return Vec::new();
    }
    let mut q = 1usize;
    while q.pow(dims as u32) < n {
        q += 1;
    }
    let total = q.pow(dims as u32);
    let node = |mut idx: usize| -> Vec<f64> {
        let mut p = vec![0.0; dims];
        for k in (0..dims).rev() {
            let i = idx % q;
            idx /= q;
            p[k] = if q == 1 { 0.5 * (bx.lo[k] + bx.hi[k]) } else { bx.lo[k] + (bx.hi[k] - bx.lo[k]) * i as f64 / (q - 1) as f64 };
        }
        p
    };
    if n == 1 {
        return vec![node(total / 2)];
    }
    (0..n)
        .map(|i| node(((i as f64) * (total - 1) as f64 / (n - 1) as f64).round() as usize))
        .collect()
}

/// Full `res^dims` tensor grid over `bx`, last axis fastest.
pub fn full_grid(bx: &DomainBox, res: usize) -> Vec<Vec<f64>> {
    let dims = bx.lo.len();
    let total = res.pow(dims as u32);
    (0..total)
        .map(|mut idx| {
            let mut p = vec![0.0; dims];
            for k in (0..dims).rev() {
                let i = idx % res;
                idx /= res;
                p[k] = if res == 1 { 0.5 * (bx.lo[k] + bx.hi[k]) } else { bx.lo[k] + (bx.hi[k] - bx.lo[k]) * i as f64 / (res - 1) as f64 };
            }
            p
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::SdeModel;

    #[test]
    fn colloidal_diffusion_peak() {
        let gt = GroundTruthModel::new(CaseId::Colloidal);
        let e = ground_truth_eval(&gt, &[2.1], &[0.0]).unwrap();
        assert!((e.hidden[1] - 5.0e-3).abs() < 1e-15);
        // g₁ vanishes at the well center, where dg₂/dx = 0 and dF/dx = 0
        assert!(e.hidden[0].abs() < 1e-15);
        assert!((e.diffusion[0] - (2.0 * 5.0e-3f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn colloidal_drift_matches_finite_difference_form() {
        let gt = GroundTruthModel::new(CaseId::Colloidal);
        let (x, u) = (1.7, 0.4);
        let g2 = |x: f64| gt.hidden_diffusion(&[x, u]).unwrap()[0];
        let f = |x: f64| 10.0 * (x - 2.1 - 0.75 * u).powi(2);
        let h = 1e-5;
        let want = (g2(x + h) - g2(x - h)) / (2.0 * h) - (f(x + h) - f(x - h)) / (2.0 * h) * g2(x);
        assert!((gt.hidden_drift(&[x, u])[0] - want).abs() < 1e-9);
    }

    #[test]
    fn lv_equilibrium() {
        let gt = GroundTruthModel::new(CaseId::LotkaVolterra);
        let [e1, e2] = gt.equilibrium().unwrap();
        assert!((e1 - 0.75).abs() < 1e-15 && (e2 - 0.625).abs() < 1e-15);
        let e = ground_truth_eval(&gt, &[e1, e2], &[]).unwrap();
        assert!(e.drift.iter().all(|v| v.abs() < 1e-12));
        assert!(e.diffusion.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sir_transmission() {
        let gt = GroundTruthModel::new(CaseId::Sir);
        let e = ground_truth_eval(&gt, &[1.0, 1.0, 0.0], &[]).unwrap();
        assert!((e.hidden[0] - 0.2 / 1.5).abs() < 1e-15);
        // dS = b - dS - g + γR
        assert!((e.drift[0] - (1.0 - 0.1 - 0.2 / 1.5)).abs() < 1e-15);
        assert!((e.drift[1] - (0.2 / 1.5 - 0.16)).abs() < 1e-15);
        assert!((e.drift[2] - 0.05).abs() < 1e-15);
        assert_eq!(e.diffusion, vec![0.2, 0.2, 0.0]);
    }

    #[test]
    fn printed_constants() {
        let gt = GroundTruthModel::new(CaseId::Sir);
        let want = [1.0, 0.1, 0.2, 0.5, 0.01, 0.05, 0.01, 2.0, 0.2, 0.2, 0.1];
        for ((_, v), w) in gt.params.iter().zip(want) {
            assert_eq!(*v, w);
        }
    }

    #[test]
    fn outside_domain_rejected() {
        let gt = GroundTruthModel::new(CaseId::Colloidal);
        assert!(matches!(ground_truth_eval(&gt, &[f64::NAN], &[0.0]), Err(Error::Domain(_))));
        assert!(ground_truth_eval(&gt, &[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn model_clamps_negative_lv_diffusion() {
        let gt = GroundTruthModel::new(CaseId::LotkaVolterra);
        let m = gt.model();
        let mut h = [0.0; 4];
        // below both equilibrium coordinates: both arguments negative
        assert_eq!(m.diffusion(&[0.5, 0.5], &[], &mut h), 2);
        assert_eq!(h, [0.0; 4]);
    }

    #[test]
    fn lv_populations_are_absorbed_at_zero() {
        let gt = GroundTruthModel::new(CaseId::LotkaVolterra);
        let m = gt.model();
        let mut x = [-0.05, 0.3];
        assert!(m.project(&mut x));
        assert_eq!(x, [0.0, 0.3]);
        assert!(!m.project(&mut x));
        // a small prey population with strong noise hits zero often
        let e = crate::sde::simulate_ensemble(&m, &[0.1, 1.2], &[], gt.default_dt(), 50, 500, 3).unwrap();
        assert_eq!(e.flagged_count(), 0);
        assert!(e.boundary_events > 0);
        assert!(e.states.iter().all(|v| *v >= 0.0));
        assert!(GroundTruthModel::new(CaseId::Colloidal).floor().is_none());
    }

    #[test]
    fn grids_have_requested_sizes() {
        let gt = GroundTruthModel::new(CaseId::Colloidal);
        let g = grid_points(&gt.ic_box(), 200);
        assert_eq!(g.len(), 200);
        assert!(g.iter().all(|p| gt.ic_box().contains(p)));
        let mut uniq = g.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 200);
        assert_eq!(grid_points(&gt.ic_box(), 1).len(), 1);
        assert_eq!(full_grid(&gt.eval_box(), 100).len(), 10_000);
        let f = full_grid(&gt.eval_box(), 3);
        assert_eq!(f[0], vec![0.5, 0.0]);
        assert_eq!(f[1], vec![0.5, 0.5]);
        assert_eq!(f[8], vec![3.5, 1.0]);
    }
}
