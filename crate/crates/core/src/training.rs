//! Moment-matching losses, Adam, and the sequential and joint training
//! procedures.
//!
//! Training losses are computed on standardized scales: mean errors are
//! divided by the RMS one-step mean increment of each component, covariance
//! errors by `r_i r_j` with `r_i²` the RMS one-step increment of `Σ_ii`.
//! The raw forms are [`loss_two_moment`] and [`loss_sir_mean`].

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::moments::{build_transitions, split_indices, MomentDataset, Transition};
use crate::neural::{Mlp, OutputHead};
use crate::odeint::{backprop_integrate, integrate, OdeSystem, SolverConfig};
use crate::propagation::{
    augmented_sigma_2m, augmented_sigma_4m, decoupled_backward, decoupled_forward, AugmentedSigma, CoupledSystem,
    GradMask, LinearizedSystem, Nets, PropagationConfig, PropagatorKind, UtParams,
};
use crate::rng;
use crate::structure::SdeStructure;

const MAX_SKIPS: usize = 10;

/// `Σ_k ‖μ̂ - μ‖² + weight ‖Σ̂ - Σ‖²` with elementwise sums of squares.
pub fn loss_two_moment(
    predictions: &[(DVector<f64>, DMatrix<f64>)],
    targets: &[(DVector<f64>, DMatrix<f64>)],
    weight: f64,
) -> f64 {
    predictions
        .iter()
        .zip(targets)
        .map(|((pm, pc), (tm, tc))| (pm - tm).norm_squared() + weight * (pc - tc).norm_squared())
        .sum()
}

/// Squared errors of the S and I means, summed over transitions. The third
/// (R) component is ignored.
pub fn loss_sir_mean(predictions: &[DVector<f64>], targets: &[DVector<f64>]) -> f64 {
    predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2))
        .sum()
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Consecutive updates skipped because of non-finite gradients.
    pub skipped: usize,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, skipped: 0 }
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves everything
/// untouched and returns `Ok(false)`; ten in a row abort with
/// [`Error::Divergence`].
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<bool> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameters, {} gradients, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        log::warn!("non-finite gradient, update skipped ({} in a row)", state.skipped);
        if state.skipped >= MAX_SKIPS {
            return Err(Error::Divergence(state.skipped));
        }
        return Ok(false);
    }
    state.skipped = 0;
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * grads[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * grads[i] * grads[i];
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossMode {
    SequentialMeanThenCov,
    JointTwoMoment,
    SirMeanOnly,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sequential_mean_then_cov" | "sequential" => Ok(Self::SequentialMeanThenCov),
            "joint_two_moment" | "joint" => Ok(Self::JointTwoMoment),
            "sir_mean_only" | "sir" => Ok(Self::SirMeanOnly),
            other => Err(Error::Config(format!(
                "unknown loss mode `{other}` (expected sequential_mean_then_cov, joint_two_moment, sir_mean_only)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SequentialMeanThenCov => "sequential_mean_then_cov",
            Self::JointTwoMoment => "joint_two_moment",
            Self::SirMeanOnly => "sir_mean_only",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub propagator: PropagatorKind,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub split_seed: u64,
    /// Drift network initialization and mini-batch shuffling.
    pub init_seed: u64,
    /// Diffusion network initialization.
    pub diffusion_seed: u64,
    pub loss_mode: LossMode,
    pub covariance_loss_weight: f64,
    pub hidden_layers: Vec<usize>,
    pub ut: UtParams,
    pub solver: SolverConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            propagator: PropagatorKind::Ut2m,
            batch_size: 256,
            learning_rate: 1e-3,
            max_epochs: 500,
            patience: 20,
            split_seed: 0,
            init_seed: 1,
            diffusion_seed: 2,
            loss_mode: LossMode::SequentialMeanThenCov,
            covariance_loss_weight: 1.0,
            hidden_layers: vec![64, 64],
            ut: UtParams::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.learning_rate)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("train.max_epochs must be >= 1".into()));
        }
        if !(self.covariance_loss_weight >= 0.0) {
            return Err(Error::Config("train.covariance_loss_weight must be >= 0".into()));
        }
        if self.hidden_layers.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if self.loss_mode == LossMode::JointTwoMoment && self.propagator == PropagatorKind::Ut4m {
            return Err(Error::Config(
                "joint training re-forms sigma points from (m, P) and has no higher moments; use ut2m or linearization"
                    .into(),
            ));
        }
        self.ut.check(4)?;
        Ok(())
    }

    fn propagation(&self) -> PropagationConfig {
        PropagationConfig { ut: self.ut, solver: self.solver }
    }
}

/// Per-component loss scales.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean_scale: Vec<f64>,
    /// `r_i`; covariance entry `(i, j)` is divided by `r_i r_j`.
    pub cov_scale: Vec<f64>,
}

fn positive_or_one(v: f64) -> f64 {
    if v > 0.0 && v.is_finite() {
        v
    } else {
        1.0
    }
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Self { mean_scale: vec![1.0; d], cov_scale: vec![1.0; d] }
    }

    /// Scales from one-step increments of the given transitions.
    pub fn from_transitions(ts: &[&Transition]) -> Self {
        let d = ts.first().map_or(0, |t| t.source.mean.len());
        let n = ts.len().max(1) as f64;
        let mut ms = vec![0.0; d];
        let mut cs = vec![0.0; d];
        for t in ts {
            for i in 0..d {
                ms[i] += (t.target.mean[i] - t.source.mean[i]).powi(2);
                cs[i] += (t.target.cov[(i, i)] - t.source.cov[(i, i)]).powi(2);
            }
        }
        Self {
            mean_scale: ms.iter().map(|v| positive_or_one((v / n).sqrt())).collect(),
            cov_scale: cs.iter().map(|v| positive_or_one((v / n).sqrt().sqrt())).collect(),
        }
    }
}

/// What one training stage fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// `θ₁` on mean matching.
    Mean,
    /// `θ₂` on covariance matching with `θ₁` frozen.
    Covariance,
    /// `[θ₁, θ₂]` on both terms.
    Joint,
    /// `θ₁` on the S and I means.
    SirMean,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Mean => "mean",
            Stage::Covariance => "covariance",
            Stage::Joint => "joint",
            Stage::SirMean => "sir_mean",
        }
    }
}

fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::NonFinitePropagation { .. } | Error::Integration { .. } | Error::SingularCovariance { .. })
}

/// Standardized mini-batch loss of one stage over a fixed transition set.
pub struct Objective<'a> {
    structure: &'a SdeStructure,
    transitions: Vec<&'a Transition>,
    sigmas: Vec<AugmentedSigma>,
    stage: Stage,
    propagator: PropagatorKind,
    cfg: PropagationConfig,
    scale: Standardizer,
    cov_weight: f64,
    mean_components: Vec<usize>,
}

impl<'a> Objective<'a> {
    pub fn new(
        structure: &'a SdeStructure,
        transitions: Vec<&'a Transition>,
        stage: Stage,
        propagator: PropagatorKind,
        cfg: PropagationConfig,
        scale: Standardizer,
        cov_weight: f64,
    ) -> Result<Self> {
        let d = structure.state_dim;
        if scale.mean_scale.len() != d || scale.cov_scale.len() != d {
            return Err(Error::Shape("standardizer does not match the state dimension".into()));
        }
        if stage == Stage::Joint && propagator == PropagatorKind::Ut4m {
            return Err(Error::Config("joint training does not support ut4m".into()));
        }
        let mean_components = match stage {
            Stage::SirMean => {
                if d < 2 {
                    return Err(Error::Shape("S/I mean loss needs at least two state components".into()));
                }
                vec![0, 1]
            }
            _ => (0..d).collect(),
        };
        // decoupled stages form their sigma points from data moments once
        let decoupled = match stage {
            Stage::Mean | Stage::SirMean => true,
            Stage::Covariance => propagator != PropagatorKind::Linearization,
            Stage::Joint => false,
        };
        let sigmas = if decoupled {
            transitions
                .par_iter()
                .map(|t| source_sigma(t, d, propagator, &cfg.ut))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self { structure, transitions, sigmas, stage, propagator, cfg, scale, cov_weight, mean_components })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Length of the gradient returned by [`Self::evaluate`].
    pub fn trainable_params(&self, drift: Option<&Mlp>, diffusion: Option<&Mlp>) -> usize {
        let nets = Nets::new(drift, diffusion);
        match self.stage {
            Stage::Mean | Stage::SirMean => nets.drift_params(),
            Stage::Covariance => nets.diffusion_params(),
            Stage::Joint => nets.total_params(),
        }
    }

    /// Mean loss over `items` and, if requested, its gradient with respect
    /// to the stage's trainable parameters. Numerical failures inside the
    /// propagation make the loss (and gradient) non-finite instead of
    /// failing the call.
    pub fn evaluate(
        &self,
        drift: Option<&Mlp>,
        diffusion: Option<&Mlp>,
        items: &[usize],
        grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        let np = self.trainable_params(drift, diffusion);
        if items.is_empty() {
            return Ok((0.0, grad.then(|| vec![0.0; np])));
        }
        let parts: Vec<Result<(f64, Option<Vec<f64>>)>> =
            items.par_iter().map(|&i| self.item(drift, diffusion, i, grad)).collect();
        let mut loss = 0.0;
        let mut g = grad.then(|| vec![0.0; np]);
        for p in parts {
            match p {
                Ok((l, gi)) => {
                    loss += l;
                    if let (Some(acc), Some(gi)) = (g.as_mut(), gi) {
                        for (a, b) in acc.iter_mut().zip(gi) {
                            *a += b;
                        }
                    }
                }
                Err(e) if is_numerical(&e) => {
                    log::debug!("transition skipped in loss: {e}");
                    loss = f64::NAN;
                    if let Some(acc) = g.as_mut() {
                        acc.iter_mut().for_each(|v| *v = f64::NAN);
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let n = items.len() as f64;
        if let Some(acc) = g.as_mut() {
            acc.iter_mut().for_each(|v| *v /= n);
        }
        Ok((loss / n, g))
    }

    fn mean_term(&self, pred: &DVector<f64>, target: &DVector<f64>) -> (f64, DVector<f64>) {
        let mut bar = DVector::zeros(pred.len());
        let mut loss = 0.0;
        for &i in &self.mean_components {
            let s = self.scale.mean_scale[i];
            let e = (pred[i] - target[i]) / s;
            loss += e * e;
            bar[i] = 2.0 * e / s;
        }
        (loss, bar)
    }

    fn cov_term(&self, pred: &DMatrix<f64>, target: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let d = pred.nrows();
        let mut bar = DMatrix::zeros(d, d);
        let mut loss = 0.0;
        let w = self.cov_weight;
        for r in 0..d {
            for c in 0..d {
                let s = self.scale.cov_scale[r] * self.scale.cov_scale[c];
                let e = (pred[(r, c)] - target[(r, c)]) / s;
                loss += w * e * e;
                bar[(r, c)] = 2.0 * w * e / s;
            }
        }
        (loss, bar)
    }

    fn item(&self, drift: Option<&Mlp>, diffusion: Option<&Mlp>, i: usize, grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let t = self.transitions[i];
        let s = self.structure;
        let (u, dt) = (t.input.as_slice(), t.dt());
        match self.stage {
            Stage::Mean | Stage::SirMean => {
                let nets = Nets::new(drift, None);
                let sig = &self.sigmas[i];
                let tape = decoupled_forward(s, nets, sig, u, dt, &self.cfg.solver, false)?;
                let (loss, mean_bar) = self.mean_term(&tape.mean, &t.target.mean);
                if !grad {
                    return Ok((loss, None));
                }
                let mut g = vec![0.0; nets.total_params()];
                decoupled_backward(s, nets, sig, u, dt, &tape, &mean_bar, None, GradMask::DRIFT, &mut g)?;
                Ok((loss, Some(g)))
            }
            Stage::Covariance if self.propagator != PropagatorKind::Linearization => {
                let nets = Nets::new(drift, diffusion);
                let sig = &self.sigmas[i];
                let tape = decoupled_forward(s, nets, sig, u, dt, &self.cfg.solver, true)?;
                let cov = tape.cov.as_ref().expect("covariance requested");
                let (loss, cov_bar) = self.cov_term(cov, &t.target.cov);
                if !grad {
                    return Ok((loss, None));
                }
                let mut g = vec![0.0; nets.total_params()];
                let zero = DVector::zeros(s.state_dim);
                decoupled_backward(s, nets, sig, u, dt, &tape, &zero, Some(&cov_bar), GradMask::DIFFUSION, &mut g)?;
                Ok((loss, Some(g.split_off(nets.drift_params()))))
            }
            Stage::Covariance => {
                let nets = Nets::new(drift, diffusion);
                let sys = LinearizedSystem { structure: s, nets, u, mask: GradMask::DIFFUSION };
                let (loss, g) = self.moment_ode(&sys, nets, t, false, grad)?;
                Ok((loss, g.map(|mut g| g.split_off(nets.drift_params()))))
            }
            Stage::Joint => {
                let nets = Nets::new(drift, diffusion);
                if self.propagator == PropagatorKind::Linearization {
                    let sys = LinearizedSystem { structure: s, nets, u, mask: GradMask::ALL };
                    self.moment_ode(&sys, nets, t, true, grad)
                } else {
                    let sys = CoupledSystem { structure: s, nets, u, ut: self.cfg.ut, mask: GradMask::ALL };
                    self.moment_ode(&sys, nets, t, true, grad)
                }
            }
        }
    }

    /// Loss through a `[m, vec P]` moment ODE.
    fn moment_ode<S: OdeSystem>(
        &self,
        sys: &S,
        nets: Nets<'_>,
        t: &Transition,
        with_mean: bool,
        grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        let d = self.structure.state_dim;
        let y0 = pack_moments(&t.source.mean, &t.source.cov);
        let (y1, tape) = integrate(sys, &y0, t.dt(), &self.cfg.solver)?;
        let mean = DVector::from_column_slice(&y1[..d]);
        let cov = DMatrix::from_row_slice(d, d, &y1[d..]);
        let (mut loss, mut cot) = (0.0, vec![0.0; y1.len()]);
        if with_mean {
            let (l, mb) = self.mean_term(&mean, &t.target.mean);
            loss += l;
            cot[..d].copy_from_slice(mb.as_slice());
        }
        let (l, cb) = self.cov_term(&cov, &t.target.cov);
        loss += l;
        for r in 0..d {
            for c in 0..d {
                cot[d + r * d + c] = cb[(r, c)];
            }
        }
        if !grad {
            return Ok((loss, None));
        }
        let mut g = vec![0.0; nets.total_params()];
        backprop_integrate(sys, &tape, &cot, &mut g, false)?;
        Ok((loss, Some(g)))
    }
}

fn pack_moments(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Vec<f64> {
    let d = mean.len();
    let mut y: Vec<f64> = mean.iter().copied().collect();
    for r in 0..d {
        for c in 0..d {
            y.push(cov[(r, c)]);
        }
    }
    y
}

fn source_sigma(t: &Transition, d: usize, propagator: PropagatorKind, ut: &UtParams) -> Result<AugmentedSigma> {
    let src = &t.source;
    match propagator {
        PropagatorKind::Linearization => Ok(AugmentedSigma::center_only(&src.mean)),
        PropagatorKind::Ut2m => augmented_sigma_2m(&src.mean, &src.cov, d, ut),
        PropagatorKind::Ut4m => {
            let (Some(skew), Some(kurt)) = (&src.skew, &src.kurt) else {
                return Err(Error::Config("ut4m needs a moment dataset with max order 4".into()));
            };
            Ok(augmented_sigma_4m(&src.mean, &src.cov, skew, kurt, d, ut)?.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Outcome of one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    /// Epochs `1..`; the initial losses are kept separately.
    pub history: Vec<EpochRecord>,
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    /// 0 when no epoch improved on the initialization.
    pub best_epoch: usize,
    pub test_loss: f64,
    pub skipped_updates: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub drift: Option<Mlp>,
    pub diffusion: Option<Mlp>,
    pub stages: Vec<StageReport>,
    pub standardizer: Standardizer,
    pub config: TrainConfig,
}

impl TrainedModel {
    pub fn final_val_loss(&self) -> f64 {
        self.stages.last().map_or(f64::NAN, |s| s.best_val_loss)
    }
}

fn with_params(net: &Mlp, p: &[f64]) -> Mlp {
    let mut n = net.clone();
    n.params_mut().copy_from_slice(p);
    n
}

struct Fit {
    params: Vec<f64>,
    report: StageReport,
}

/// Mini-batch Adam with early stopping on the validation loss; returns the
/// best-validation parameters (the initialization counts as epoch 0).
fn fit<F>(init: Vec<f64>, n_train: usize, cfg: &TrainConfig, shuffle_key: u64, stage: Stage, eval: F) -> Result<Fit>
where
    F: Fn(&[f64], Part, &[usize], bool) -> Result<(f64, Option<Vec<f64>>)>,
{
    let all_train: Vec<usize> = (0..n_train).collect();
    let finite_or_inf = |v: f64| if v.is_finite() { v } else { f64::INFINITY };
    let initial_train_loss = eval(&init, Part::Train, &all_train, false)?.0;
    let initial_val_loss = eval(&init, Part::Validation, &[], false)?.0;
    let mut params = init.clone();
    let mut best = init;
    let mut best_val = finite_or_inf(initial_val_loss);
    let mut best_epoch = 0;
    let mut since = 0;
    let mut state = AdamState::new(params.len());
    let mut skipped_updates = 0;
    let mut history = Vec::new();
    let batch = cfg.batch_size.min(n_train).max(1);
    if batch < cfg.batch_size {
        log::warn!("batch size {} exceeds {} training transitions; using {batch}", cfg.batch_size, n_train);
    }
    let mut order = all_train.clone();
    for epoch in 1..=cfg.max_epochs {
        let mut rng = rng::stream(rng::mix(cfg.init_seed, shuffle_key), epoch as u64);
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(batch) {
            let (loss, g) = eval(&params, Part::Train, chunk, true)?;
            let mut g = g.expect("gradient requested");
            if !loss.is_finite() {
                g.iter_mut().for_each(|v| *v = f64::NAN);
            } else {
                sum += loss * chunk.len() as f64;
                count += chunk.len();
            }
            if !adam_step(&mut params, &g, &mut state, cfg.learning_rate)? {
                skipped_updates += 1;
            }
        }
        let train_loss = if count > 0 { sum / count as f64 } else { f64::NAN };
        let val_loss = eval(&params, Part::Validation, &[], false)?.0;
        history.push(EpochRecord { epoch, train_loss, val_loss });
        log::info!("{} epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e}", stage.name());
        if finite_or_inf(val_loss) < best_val {
            best_val = val_loss;
            best = params.clone();
            best_epoch = epoch;
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    let test_loss = eval(&best, Part::Test, &[], false)?.0;
    Ok(Fit {
        params: best,
        report: StageReport {
            stage,
            history,
            initial_train_loss,
            initial_val_loss,
            best_val_loss: best_val,
            best_epoch,
            test_loss,
            skipped_updates,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Train,
    Validation,
    Test,
}

/// One stage's objectives over the three splits.
struct Splits<'a> {
    train: Objective<'a>,
    validation: Objective<'a>,
    test: Objective<'a>,
}

impl<'a> Splits<'a> {
    fn new(
        structure: &'a SdeStructure,
        parts: [&[&'a Transition]; 3],
        stage: Stage,
        cfg: &TrainConfig,
        scale: &Standardizer,
    ) -> Result<Self> {
        let make = |ts: &[&'a Transition]| {
            Objective::new(
                structure,
                ts.to_vec(),
                stage,
                cfg.propagator,
                cfg.propagation(),
                scale.clone(),
                cfg.covariance_loss_weight,
            )
        };
        Ok(Self { train: make(parts[0])?, validation: make(parts[1])?, test: make(parts[2])? })
    }

    fn eval(
        &self,
        part: Part,
        items: &[usize],
        drift: Option<&Mlp>,
        diffusion: Option<&Mlp>,
        grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        let obj = match part {
            Part::Train => &self.train,
            Part::Validation => &self.validation,
            Part::Test => &self.test,
        };
        if part == Part::Train {
            obj.evaluate(drift, diffusion, items, grad)
        } else {
            let all: Vec<usize> = (0..obj.len()).collect();
            obj.evaluate(drift, diffusion, &all, grad)
        }
    }
}

/// Mean and population standard deviation per input column.
fn input_scaling(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let k = rows.first().map_or(0, |r| r.len());
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; k];
    for r in rows {
        for j in 0..k {
            mean[j] += r[j] / n;
        }
    }
    let mut var = vec![0.0; k];
    for r in rows {
        for j in 0..k {
            var[j] += (r[j] - mean[j]).powi(2) / n;
        }
    }
    let sd = var.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    (mean, sd)
}

/// RMS of the least-squares hidden drift implied by the mean increments,
/// `pinv(B) (Δμ/Δt - A μ - c)`.
fn drift_output_scale(structure: &SdeStructure, ts: &[&Transition]) -> Vec<f64> {
    let d = structure.state_dim;
    let p = structure.drift_outputs;
    let b = DMatrix::from_row_slice(d, p, &structure.b);
    let Ok(pinv) = b.pseudo_inverse(1e-12) else {
        return vec![1.0; p];
    };
    let mut acc = vec![0.0; p];
    for t in ts {
        let mut r = DVector::zeros(d);
        let mut known = vec![0.0; d];
        structure.drift_from(&vec![0.0; p], t.source.mean.as_slice(), &mut known);
        for i in 0..d {
            r[i] = (t.target.mean[i] - t.source.mean[i]) / t.dt() - known[i];
        }
        let g = &pinv * r;
        for j in 0..p {
            acc[j] += g[j] * g[j];
        }
    }
    let n = ts.len().max(1) as f64;
    acc.iter().map(|v| positive_or_one((v / n).sqrt())).collect()
}

/// RMS of `ΔΣ_ii / (2 Δt)`, the scale of `g₂` when `h = sqrt(2 g₂)`.
fn diffusion_output_scale(d: usize, ts: &[&Transition]) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    for t in ts {
        for i in 0..d {
            acc[i] += ((t.target.cov[(i, i)] - t.source.cov[(i, i)]) / (2.0 * t.dt())).powi(2);
        }
    }
    let n = ts.len().max(1) as f64;
    acc.iter().map(|v| positive_or_one((v / n).sqrt())).collect()
}

/// Builds initialized networks for a structure: input standardization from
/// the training sources and output scales from the data increments.
pub fn init_networks(
    structure: &SdeStructure,
    train: &[&Transition],
    cfg: &TrainConfig,
) -> Result<(Option<Mlp>, Option<Mlp>)> {
    let sizes = |input: usize, output: usize| {
        let mut s = vec![input];
        s.extend(&cfg.hidden_layers);
        s.push(output);
        s
    };
    let gather = |sel: &crate::structure::NetInputs| -> Vec<Vec<f64>> {
        train.iter().map(|t| sel.gather(t.source.mean.as_slice(), &t.input)).collect()
    };
    let drift = if structure.drift_outputs > 0 {
        let (shift, scale) = input_scaling(&gather(&structure.drift_inputs));
        Some(
            Mlp::initialized(sizes(structure.drift_net_inputs(), structure.drift_outputs), OutputHead::Linear, cfg.init_seed)?
                .with_input_scaling(shift, scale)?
                .with_output_scale(drift_output_scale(structure, train))?,
        )
    } else {
        None
    };
    let diffusion = if structure.has_diffusion_net() && cfg.loss_mode != LossMode::SirMeanOnly {
        let (shift, scale) = input_scaling(&gather(&structure.diffusion_inputs));
        Some(
            Mlp::initialized(
                sizes(structure.diffusion_net_inputs(), structure.state_dim),
                OutputHead::Softplus,
                cfg.diffusion_seed,
            )?
            .with_input_scaling(shift, scale)?
            .with_output_scale(diffusion_output_scale(structure.state_dim, train))?,
        )
    } else {
        None
    };
    Ok((drift, diffusion))
}

/// Trains the hidden-term networks of `structure` on a moment dataset.
///
/// * sequential: stage 1 fits `θ₁` on the decoupled mean, stage 2 freezes
///   `θ₁*` and fits `θ₂` on the covariance;
/// * joint: both networks on both terms through the coupled moment ODE (or
///   the linearized one);
/// * SIR: the single drift network on the S and I means.
pub fn train(ds: &MomentDataset, structure: &SdeStructure, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    structure.validate()?;
    ds.validate()?;
    if ds.state_dim != structure.state_dim || ds.input_dim != structure.input_dim {
        return Err(Error::Shape(format!(
            "dataset is {}-state/{}-input, structure `{}` is {}/{}",
            ds.state_dim, ds.input_dim, structure.name, structure.state_dim, structure.input_dim
        )));
    }
    if cfg.propagator == PropagatorKind::Ut4m && ds.max_order < 4 {
        return Err(Error::Config("ut4m needs a moment dataset with max order 4".into()));
    }
    if cfg.loss_mode == LossMode::SirMeanOnly && structure.state_dim != 3 {
        return Err(Error::Config("sir_mean_only needs a three-state (S, I, R) structure".into()));
    }
    let transitions = build_transitions(ds)?;
    let split = split_indices(transitions.len(), cfg.split_seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| &transitions[i]).collect::<Vec<_>>();
    let (tr, va, te) = (pick(&split.train), pick(&split.validation), pick(&split.test));
    if tr.is_empty() || va.is_empty() {
        return Err(Error::Config(format!(
            "{} transitions give {} training and {} validation pairs; both must be non-empty",
            transitions.len(),
            tr.len(),
            va.len()
        )));
    }
    let scale = Standardizer::from_transitions(&tr);
    let (mut drift, mut diffusion) = init_networks(structure, &tr, cfg)?;
    structure.check_nets(drift.as_ref(), diffusion.as_ref()).or_else(|e| match cfg.loss_mode {
        LossMode::SirMeanOnly => Ok(()),
        _ => Err(e),
    })?;
    let parts = [tr.as_slice(), va.as_slice(), te.as_slice()];
    let mut stages = Vec::new();

    let mean_stage = match cfg.loss_mode {
        LossMode::SirMeanOnly => Some(Stage::SirMean),
        LossMode::SequentialMeanThenCov => Some(Stage::Mean),
        LossMode::JointTwoMoment if diffusion.is_none() => Some(Stage::Mean),
        LossMode::JointTwoMoment => None,
    };
    if let Some(stage) = mean_stage {
        let net = drift.clone().ok_or_else(|| Error::Config("structure has no drift network to train".into()))?;
        let obj = Splits::new(structure, parts, stage, cfg, &scale)?;
        let f = fit(net.params().to_vec(), tr.len(), cfg, 1, stage, |p, part, items, grad| {
            obj.eval(part, items, Some(&with_params(&net, p)), None, grad)
        })?;
        drift = Some(with_params(&net, &f.params));
        stages.push(f.report);
    }
    if let Some(dnet) = diffusion.clone() {
        let frozen = drift.clone();
        match cfg.loss_mode {
            LossMode::SequentialMeanThenCov => {
                let obj = Splits::new(structure, parts, Stage::Covariance, cfg, &scale)?;
                let f = fit(dnet.params().to_vec(), tr.len(), cfg, 2, Stage::Covariance, |p, part, items, grad| {
                    obj.eval(part, items, frozen.as_ref(), Some(&with_params(&dnet, p)), grad)
                })?;
                diffusion = Some(with_params(&dnet, &f.params));
                stages.push(f.report);
            }
            LossMode::JointTwoMoment => {
                let obj = Splits::new(structure, parts, Stage::Joint, cfg, &scale)?;
                let n1 = frozen.as_ref().map_or(0, |n| n.num_params());
                let mut init: Vec<f64> = frozen.as_ref().map_or(vec![], |n| n.params().to_vec());
                init.extend_from_slice(dnet.params());
                let f = fit(init, tr.len(), cfg, 3, Stage::Joint, |p, part, items, grad| {
                    let d1 = frozen.as_ref().map(|n| with_params(n, &p[..n1]));
                    obj.eval(part, items, d1.as_ref(), Some(&with_params(&dnet, &p[n1..])), grad)
                })?;
                drift = frozen.as_ref().map(|n| with_params(n, &f.params[..n1]));
                diffusion = Some(with_params(&dnet, &f.params[n1..]));
                stages.push(f.report);
            }
            LossMode::SirMeanOnly => {}
        }
    }
    Ok(TrainedModel { drift, diffusion, stages, standardizer: scale, config: cfg.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::MomentRecord;

    #[test]
    fn raw_losses() {
        let m = |v: f64| DVector::from_element(1, v);
        let c = |v: f64| DMatrix::from_element(1, 1, v);
        let l = loss_two_moment(&[(m(1.1), c(0.7))], &[(m(1.0), c(0.5))], 1.0);
        assert!((l - 0.05).abs() < 1e-12);
        assert_eq!(loss_two_moment(&[(m(1.0), c(0.5))], &[(m(1.0), c(0.5))], 1.0), 0.0);
        let l0 = loss_two_moment(&[(m(1.1), c(0.7))], &[(m(1.0), c(0.5))], 0.0);
        assert!((l0 - 0.01).abs() < 1e-12);
        let p = DVector::from_vec(vec![1.1, 2.1, 8.0]);
        let t = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!((loss_sir_mean(&[p.clone()], &[t.clone()]) - 0.02).abs() < 1e-12);
        let two = loss_two_moment(
            &[(p.rows(0, 2).into_owned(), DMatrix::zeros(2, 2))],
            &[(t.rows(0, 2).into_owned(), DMatrix::identity(2, 2))],
            0.0,
        );
        assert!((two - loss_sir_mean(&[p], &[t])).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_and_skips() {
        let mut p = vec![0.5, 0.0];
        let mut s = AdamState::new(2);
        assert!(adam_step(&mut p, &[1.0, 0.0], &mut s, 1e-3).unwrap());
        assert!((p[0] - (0.5 - 1e-3)).abs() < 1e-10);
        assert_eq!(p[1], 0.0);
        let before = p.clone();
        for i in 0..9 {
            assert!(!adam_step(&mut p, &[f64::NAN, 0.0], &mut s, 1e-3).unwrap(), "skip {i}");
        }
        assert_eq!(p, before);
        assert!(matches!(adam_step(&mut p, &[f64::NAN, 0.0], &mut s, 1e-3), Err(Error::Divergence(10))));
        let mut q = vec![0.5, 0.0];
        let mut s2 = AdamState::new(2);
        adam_step(&mut q, &[1.0, 0.0], &mut s2, 1e-3).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn config_rejects_joint_ut4m() {
        let cfg = TrainConfig { loss_mode: LossMode::JointTwoMoment, propagator: PropagatorKind::Ut4m, ..Default::default() };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!(LossMode::parse("joint_two_moment").unwrap(), LossMode::JointTwoMoment);
    }

    fn record(k: usize, mean: f64, var: f64) -> MomentRecord {
        MomentRecord {
            ic_index: 0,
            k,
            t: k as f64,
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, var),
            skew: None,
            kurt: None,
            n_samples: 100,
            degenerate: false,
        }
    }

    #[test]
    fn standardizer_uses_increments() {
        let t1 = Transition { source: record(0, 1.0, 0.0), target: record(1, 0.7, 0.04), input: vec![] };
        let t2 = Transition { source: record(1, 0.7, 0.04), target: record(2, 0.8, 0.04), input: vec![] };
        let s = Standardizer::from_transitions(&[&t1, &t2]);
        assert!((s.mean_scale[0] - (0.05f64).sqrt()).abs() < 1e-12);
        assert!((s.cov_scale[0] - (0.0008f64).sqrt().sqrt()).abs() < 1e-12);
    }
}
