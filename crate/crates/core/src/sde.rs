//! SDE abstraction and the Euler-Maruyama ensemble simulator.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;

/// Axis-aligned box `[lo_i, hi_i]` used to flag runaway trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        Self { lo, hi }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (lo, hi))| v.is_finite() && *v >= *lo && *v <= *hi)
    }
}

/// `dx = drift(x, u) dt + diffusion(x, u) dw` with `w` a standard Wiener
/// process of dimension `noise_dim`.
pub trait SdeModel: Send + Sync {
    fn state_dim(&self) -> usize;

    fn noise_dim(&self) -> usize {
        self.state_dim()
    }

    fn input_dim(&self) -> usize;

    fn drift(&self, x: &[f64], u: &[f64], out: &mut [f64]);

    /// Writes the `state_dim x noise_dim` diffusion matrix (row-major) into
    /// `out` and returns how many components had to be clamped to stay real.
    fn diffusion(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> usize;

    fn domain(&self) -> Option<&DomainBox> {
        None
    }

    /// Maps a state after an update back onto the state space (e.g. an
    /// absorbing boundary). Returns whether anything changed.
    fn project(&self, _x: &mut [f64]) -> bool {
        false
    }
}

/// One Euler-Maruyama update `x + drift dt + diffusion dw`.
pub fn em_step<M: SdeModel + ?Sized>(
    model: &M,
    x: &[f64],
    u: &[f64],
    dt: f64,
    dw: &[f64],
) -> Result<Vec<f64>> {
    let d = model.state_dim();
    let m = model.noise_dim();
    if x.len() != d || dw.len() != m || u.len() != model.input_dim() {
        return Err(Error::Shape(format!(
            "em_step: state {} (want {d}), noise {} (want {m}), input {}",
            x.len(),
            dw.len(),
            u.len()
        )));
    }
    if !(dt >= 0.0) {
        return Err(Error::Domain(format!("negative time step {dt}")));
    }
    if x.iter().chain(u).chain(dw).any(|v| !v.is_finite()) || !dt.is_finite() {
        return Err(Error::Domain("non-finite input to em_step".into()));
    }
    let mut out = vec![0.0; d];
    let mut drift = vec![0.0; d];
    let mut diff = vec![0.0; d * m];
    step_into(model, x, u, dt, dw, &mut drift, &mut diff, &mut out);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn step_into<M: SdeModel + ?Sized>(
    model: &M,
    x: &[f64],
    u: &[f64],
    dt: f64,
    dw: &[f64],
    drift: &mut [f64],
    diff: &mut [f64],
    out: &mut [f64],
) -> usize {
    let m = dw.len();
    model.drift(x, u, drift);
    let clamped = model.diffusion(x, u, diff);
    for i in 0..x.len() {
        let noise: f64 = (0..m).map(|j| diff[i * m + j] * dw[j]).sum();
        out[i] = x[i] + drift[i] * dt + noise;
    }
    clamped
}

/// What to simulate: `replicates` paths of `steps` sampling intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub initial_condition: Vec<f64>,
    pub input: Vec<f64>,
    /// Sampling interval between recorded states.
    pub dt: f64,
    pub steps: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Euler-Maruyama steps per sampling interval.
    pub em_substeps: usize,
}

/// `N` replicate trajectories over `K + 1` recorded time points.
#[derive(Debug, Clone)]
pub struct TrajectoryEnsemble {
    pub initial_condition: Vec<f64>,
    pub input: Vec<f64>,
    pub dt: f64,
    pub times: Vec<f64>,
    /// Flat `N x (K+1) x d` tensor.
    pub states: Vec<f64>,
    pub state_dim: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Replicates that left the domain box or became non-finite.
    pub flagged: Vec<bool>,
    pub clamp_events: usize,
    pub diffusion_evals: usize,
    /// Updates that ended outside the state space and were projected back.
    pub boundary_events: usize,
}

impl TrajectoryEnsemble {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn state(&self, replicate: usize, k: usize) -> &[f64] {
        let d = self.state_dim;
        let off = (replicate * self.times.len() + k) * d;
        &self.states[off..off + d]
    }

    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().filter(|f| **f).count()
    }

    /// Fraction of diffusion evaluations where a component was clamped.
    pub fn clamp_rate(&self) -> f64 {
        if self.diffusion_evals == 0 {
            0.0
        } else {
            self.clamp_events as f64 / self.diffusion_evals as f64
        }
    }
}

/// Simulates with one Euler-Maruyama step per sampling interval.
pub fn simulate_ensemble<M: SdeModel + ?Sized>(
    model: &M,
    ic: &[f64],
    u: &[f64],
    dt: f64,
    steps: usize,
    replicates: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    simulate(
        model,
        &EnsembleSpec {
            initial_condition: ic.to_vec(),
            input: u.to_vec(),
            dt,
            steps,
            replicates,
            seed,
            em_substeps: 1,
        },
    )
}

struct ReplicateRun {
    path: Vec<f64>,
    flagged: bool,
    clamp_events: usize,
    diffusion_evals: usize,
    boundary_events: usize,
}

fn run_replicate<M: SdeModel + ?Sized>(model: &M, spec: &EnsembleSpec, r: usize) -> ReplicateRun {
    let d = model.state_dim();
    let m = model.noise_dim();
    let h = spec.dt / spec.em_substeps as f64;
    let sqrt_h = h.sqrt();
    let mut rng = rng::stream(spec.seed, r as u64);
    let mut path = Vec::with_capacity((spec.steps + 1) * d);
    path.extend_from_slice(&spec.initial_condition);
    let mut x = spec.initial_condition.clone();
    let mut next = vec![0.0; d];
    let mut drift = vec![0.0; d];
    let mut diff = vec![0.0; d * m];
    let mut dw = vec![0.0; m];
    let mut flagged = false;
    let mut clamp_events = 0;
    let mut diffusion_evals = 0;
    let mut boundary_events = 0;
    for _ in 0..spec.steps {
        for _ in 0..spec.em_substeps {
            for v in dw.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z * sqrt_h;
            }
            if !flagged {
                let c = step_into(model, &x, &spec.input, h, &dw, &mut drift, &mut diff, &mut next);
                clamp_events += usize::from(c > 0);
                diffusion_evals += 1;
                std::mem::swap(&mut x, &mut next);
                boundary_events += usize::from(model.project(&mut x));
                let inside = match model.domain() {
                    Some(b) => b.contains(&x),
                    None => x.iter().all(|v| v.is_finite()),
                };
                flagged = !inside;
            }
        }
        path.extend_from_slice(&x);
    }
    ReplicateRun { path, flagged, clamp_events, diffusion_evals, boundary_events }
}

/// Simulates `spec.replicates` independent Euler-Maruyama paths.
///
/// Replicate `r` draws its increments from stream `r` of `spec.seed`, so the
/// ensemble is bit-identical regardless of how replicates are scheduled.
/// A replicate leaving the model's domain box is frozen and flagged; more
/// than 1% flagged replicates fails the run.
pub fn simulate<M: SdeModel + ?Sized>(model: &M, spec: &EnsembleSpec) -> Result<TrajectoryEnsemble> {
    let d = model.state_dim();
    if spec.steps < 1 || spec.replicates < 1 || spec.em_substeps < 1 {
        return Err(Error::Config(format!(
            "simulation needs steps >= 1, replicates >= 1, em_substeps >= 1 (got {}, {}, {})",
            spec.steps, spec.replicates, spec.em_substeps
        )));
    }
    if spec.initial_condition.len() != d || spec.input.len() != model.input_dim() {
        return Err(Error::Shape(format!(
            "initial condition has {} components (want {d}), input {} (want {})",
            spec.initial_condition.len(),
            spec.input.len(),
            model.input_dim()
        )));
    }
    if !(spec.dt > 0.0) || !spec.dt.is_finite() {
        return Err(Error::Domain(format!("sampling interval must be positive, got {}", spec.dt)));
    }
    if spec.initial_condition.iter().chain(&spec.input).any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite initial condition or input".into()));
    }

    let runs: Vec<ReplicateRun> = (0..spec.replicates)
        .into_par_iter()
        .with_min_len(64)
        .map(|r| run_replicate(model, spec, r))
        .collect();

    let mut states = Vec::with_capacity(spec.replicates * (spec.steps + 1) * d);
    let mut flagged = Vec::with_capacity(spec.replicates);
    let (mut clamp_events, mut diffusion_evals, mut boundary_events) = (0, 0, 0);
    for run in runs {
        states.extend_from_slice(&run.path);
        flagged.push(run.flagged);
        clamp_events += run.clamp_events;
        diffusion_evals += run.diffusion_evals;
        boundary_events += run.boundary_events;
    }
    let ens = TrajectoryEnsemble {
        initial_condition: spec.initial_condition.clone(),
        input: spec.input.clone(),
        dt: spec.dt,
        times: (0..=spec.steps).map(|k| k as f64 * spec.dt).collect(),
        states,
        state_dim: d,
        replicates: spec.replicates,
        seed: spec.seed,
        flagged,
        clamp_events,
        diffusion_evals,
        boundary_events,
    };
    let n_flagged = ens.flagged_count();
    if n_flagged * 100 > spec.replicates {
        return Err(Error::FlaggedReplicates { flagged: n_flagged, total: spec.replicates });
    }
    if n_flagged > 0 {
        log::warn!("{n_flagged} of {} replicates left the domain box", spec.replicates);
    }
    Ok(ens)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// dx = a x dt + s dw, scalar.
    struct Linear {
        a: f64,
        s: f64,
    }

    impl SdeModel for Linear {
        fn state_dim(&self) -> usize {
            1
        }
        fn input_dim(&self) -> usize {
            0
        }
        fn drift(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = self.a * x[0];
        }
        fn diffusion(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) -> usize {
            out[0] = self.s;
            0
        }
    }

    struct Constant {
        f: f64,
        h: f64,
    }

    impl SdeModel for Constant {
        fn state_dim(&self) -> usize {
            1
        }
        fn input_dim(&self) -> usize {
            0
        }
        fn drift(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = self.f;
        }
        fn diffusion(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) -> usize {
            out[0] = self.h;
            0
        }
    }

    #[test]
    fn em_step_hand_arithmetic() {
        let m = Constant { f: -1.0, h: 0.5 };
        let x = em_step(&m, &[1.0], &[], 0.01, &[0.1]).unwrap();
        assert!((x[0] - 1.04).abs() < 1e-15);
    }

    #[test]
    fn em_step_zero_increments() {
        let m = Constant { f: 0.0, h: 3.0 };
        assert_eq!(em_step(&m, &[2.5], &[], 0.1, &[0.0]).unwrap(), vec![2.5]);
        let m = Constant { f: 7.0, h: 3.0 };
        assert_eq!(em_step(&m, &[2.5], &[], 0.0, &[0.0]).unwrap(), vec![2.5]);
    }

    #[test]
    fn em_step_rejects_non_finite() {
        let m = Constant { f: 0.0, h: 1.0 };
        assert!(matches!(em_step(&m, &[f64::NAN], &[], 0.1, &[0.0]), Err(Error::Domain(_))));
        assert!(matches!(em_step(&m, &[0.0], &[], 0.1, &[f64::INFINITY]), Err(Error::Domain(_))));
    }

    #[test]
    fn deterministic_decay() {
        let m = Linear { a: -1.0, s: 0.0 };
        let ens = simulate_ensemble(&m, &[1.0], &[], 0.01, 100, 4, 3).unwrap();
        let want = 0.99f64.powi(100);
        for r in 0..4 {
            assert!((ens.state(r, 100)[0] - want).abs() < 1e-12);
            assert!((want - 0.3660).abs() < 1e-4);
        }
    }

    #[test]
    fn shape_contract() {
        let m = Linear { a: -1.0, s: 1.0 };
        let ens = simulate_ensemble(&m, &[0.3], &[], 0.1, 7, 3, 1).unwrap();
        assert_eq!(ens.states.len(), 3 * 8);
        assert_eq!(ens.times.len(), 8);
        for r in 0..3 {
            assert_eq!(ens.state(r, 0), &[0.3]);
        }
        assert!(ens.times.windows(2).all(|w| (w[1] - w[0] - 0.1).abs() < 1e-12));
    }

    #[test]
    fn same_seed_same_ensemble() {
        let m = Linear { a: -0.5, s: 0.7 };
        let a = simulate_ensemble(&m, &[1.0], &[], 0.1, 20, 300, 42).unwrap();
        let b = simulate_ensemble(&m, &[1.0], &[], 0.1, 20, 300, 42).unwrap();
        assert_eq!(a.states, b.states);
        let c = simulate_ensemble(&m, &[1.0], &[], 0.1, 20, 300, 43).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn thread_count_does_not_matter() {
        let m = Linear { a: -0.5, s: 0.7 };
        let spec = EnsembleSpec {
            initial_condition: vec![1.0],
            input: vec![],
            dt: 0.1,
            steps: 10,
            replicates: 500,
            seed: 9,
            em_substeps: 2,
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| simulate(&m, &spec).unwrap());
        let b = three.install(|| simulate(&m, &spec).unwrap());
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn ou_stationary_variance() {
        // dx = -x dt + sqrt(2) dw has stationary variance s^2 / (2a) = 1.
        let m = Linear { a: -1.0, s: 2f64.sqrt() };
        let ens = simulate_ensemble(&m, &[0.0], &[], 0.01, 1000, 10_000, 5).unwrap();
        let finals: Vec<f64> = (0..ens.replicates).map(|r| ens.state(r, 1000)[0]).collect();
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / finals.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn weak_error_shrinks_with_dt() {
        // OU mean at t = 1 is e^{-1}; the Euler bias halves with dt.
        let m = Linear { a: -1.0, s: 0.1 };
        let mut errs = Vec::new();
        for (i, dt) in [0.04, 0.02, 0.01].into_iter().enumerate() {
            let steps = (1.0 / dt as f64).round() as usize;
            let ens = simulate_ensemble(&m, &[1.0], &[], dt, steps, 100_000, 11 + i as u64).unwrap();
            let mean = (0..ens.replicates).map(|r| ens.state(r, steps)[0]).sum::<f64>() / ens.replicates as f64;
            errs.push((mean - (-1f64).exp()).abs());
        }
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn runaway_replicates_fail_the_run() {
        struct Exploding;
        impl SdeModel for Exploding {
            fn state_dim(&self) -> usize {
                1
            }
            fn input_dim(&self) -> usize {
                0
            }
            fn drift(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
                out[0] = 10.0 * x[0];
            }
            fn diffusion(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) -> usize {
                out[0] = 0.0;
                0
            }
            fn domain(&self) -> Option<&DomainBox> {
                static BOX: std::sync::OnceLock<DomainBox> = std::sync::OnceLock::new();
                Some(BOX.get_or_init(|| DomainBox::new(vec![-5.0], vec![5.0])))
            }
        }
        let err = simulate_ensemble(&Exploding, &[1.0], &[], 0.1, 20, 10, 0).unwrap_err();
        assert!(matches!(err, Error::FlaggedReplicates { flagged: 10, total: 10 }));
    }

    #[test]
    fn rejects_bad_counts() {
        let m = Linear { a: -1.0, s: 1.0 };
        assert!(simulate_ensemble(&m, &[0.0], &[], 0.1, 0, 5, 0).is_err());
        assert!(simulate_ensemble(&m, &[0.0], &[], 0.1, 5, 0, 0).is_err());
    }
}
