//! Generate → train → evaluate, with every artifact written to a run
//! directory.
//!
//! A run directory holds:
//!
//! | file | contents |
//! |---|---|
//! | `config.txt` | the exact [`RunConfig`] |
//! | `moments.csv`, `moments.csv.meta` | the moment dataset |
//! | `generation.txt` | simulation counters (flagged replicates, clamp rate, absorptions) |
//! | `trajectories/ic_<i>.csv` | optional raw ensembles |
//! | `drift.ckpt`, `diffusion.ckpt` | network checkpoints |
//! | `history.csv`, `history_diffusion.csv` | per-epoch losses of each stage |
//! | `training.txt` | stage summaries |
//! | `grid.csv` | learned vs true hidden terms on the evaluation grid |
//! | `kl.csv` | per-step KL validation error and two-seed control |
//! | `kde.csv` | optional marginal density evolution |
//! | `summary.txt` | per-output RMSE and KL totals |

use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::cases::{grid_points, CaseId, GroundTruthModel};
use crate::config::{RunConfig, Scale};
use crate::error::{Error, Result};
use crate::io;
use crate::moments::{generate_dataset, GenerationStats, MomentDataset};
use crate::neural::Mlp;
use crate::propagation::PropagatorKind;
use crate::rng;
use crate::sde::{simulate_ensemble, SdeModel, TrajectoryEnsemble};
use crate::structure::{HiddenFn, StructuredSde};
use crate::training::{train, Stage, TrainedModel};
use crate::validation::{
    evaluate_grid, kde, kl_validation, learned_hidden, rmse_grid, silverman_bandwidth, uniform_axis, EvalGrid, GridRow,
    KlReport, KlSettings, KL_GRID_POINTS,
};

/// Initial `(state, input)` pairs: a space-filling grid over the IC box.
pub fn initial_conditions(gt: &GroundTruthModel, n: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    grid_points(&gt.ic_box(), n).iter().map(|p| gt.split_ic(p)).collect()
}

pub fn generate(cfg: &RunConfig) -> Result<(MomentDataset, GenerationStats)> {
    cfg.validate()?;
    let gt = GroundTruthModel::new(cfg.case);
    let d = &cfg.data;
    generate_dataset(&gt.model(), &initial_conditions(&gt, d.ics), d.dt, d.steps, d.replicates, d.seed, d.max_order)
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

/// Generates the dataset and writes `moments.csv`, `generation.txt` and,
/// when enabled, one trajectory CSV per initial condition.
pub fn generate_to_dir(cfg: &RunConfig, dir: &Path) -> Result<(MomentDataset, GenerationStats)> {
    prepare_dir(dir)?;
    write_config(cfg, dir)?;
    let (ds, stats) = generate(cfg)?;
    io::write_moments(&ds, &dir.join("moments.csv"))?;
    io::write_key_values(
        &dir.join("generation.txt"),
        &[
            ("groups".into(), ds.groups.len().to_string()),
            ("records".into(), ds.record_count().to_string()),
            ("replicates".into(), stats.replicates.to_string()),
            ("flagged".into(), stats.flagged.to_string()),
            ("clamp_events".into(), stats.clamp_events.to_string()),
            ("diffusion_evals".into(), stats.diffusion_evals.to_string()),
            ("clamp_rate".into(), stats.clamp_rate().to_string()),
            ("boundary_events".into(), stats.boundary_events.to_string()),
        ],
    )?;
    if cfg.data.write_trajectories {
        let gt = GroundTruthModel::new(cfg.case);
        let tdir = dir.join("trajectories");
        prepare_dir(&tdir)?;
        let model = gt.model();
        for (i, (x0, u)) in initial_conditions(&gt, cfg.data.ics).iter().enumerate() {
            // same seed derivation as generate_dataset, so these are the
            // ensembles behind the moment file
            let ens = simulate_ensemble(&model, x0, u, cfg.data.dt, cfg.data.steps, cfg.data.replicates, rng::mix(cfg.data.seed, i as u64))?;
            io::write_trajectories(&ens, &tdir.join(format!("ic_{i}.csv")))?;
        }
    }
    Ok((ds, stats))
}

pub fn train_case(cfg: &RunConfig, ds: &MomentDataset) -> Result<TrainedModel> {
    cfg.validate()?;
    let gt = GroundTruthModel::new(cfg.case);
    let s = gt.structure();
    if ds.state_dim != s.state_dim || ds.input_dim != s.input_dim {
        return Err(Error::Shape(format!(
            "moment file has state/input dims {}/{}, {} expects {}/{}",
            ds.state_dim, ds.input_dim, cfg.case, s.state_dim, s.input_dim
        )));
    }
    train(ds, &s, &cfg.train)
}

/// Trains and writes checkpoints, `history.csv` (first stage),
/// `history_diffusion.csv` (covariance stage) and `training.txt`.
pub fn train_to_dir(cfg: &RunConfig, ds: &MomentDataset, dir: &Path) -> Result<TrainedModel> {
    prepare_dir(dir)?;
    write_config(cfg, dir)?;
    let model = train_case(cfg, ds)?;
    if let Some(n) = &model.drift {
        n.save("drift", &dir.join("drift.ckpt"))?;
    }
    if let Some(n) = &model.diffusion {
        n.save("diffusion", &dir.join("diffusion.ckpt"))?;
    }
    let mut summary = Vec::new();
    for st in &model.stages {
        let file = if st.stage == Stage::Covariance { "history_diffusion.csv" } else { "history.csv" };
        io::write_history(st, &dir.join(file))?;
        let p = st.stage.name();
        summary.push((format!("{p}.epochs"), st.history.len().to_string()));
        summary.push((format!("{p}.best_epoch"), st.best_epoch.to_string()));
        summary.push((format!("{p}.initial_val_loss"), st.initial_val_loss.to_string()));
        summary.push((format!("{p}.best_val_loss"), st.best_val_loss.to_string()));
        summary.push((format!("{p}.test_loss"), st.test_loss.to_string()));
        summary.push((format!("{p}.skipped_updates"), st.skipped_updates.to_string()));
    }
    summary.push(("final_val_loss".into(), model.final_val_loss().to_string()));
    io::write_key_values(&dir.join("training.txt"), &summary)?;
    Ok(model)
}

/// Loads `drift.ckpt` / `diffusion.ckpt` from a directory, whichever exist.
pub fn load_checkpoints(dir: &Path) -> Result<(Option<Mlp>, Option<Mlp>)> {
    let load = |name: &str| -> Result<Option<Mlp>> {
        let p = dir.join(format!("{name}.ckpt"));
        if !p.exists() {
            return Ok(None);
        }
        let (net, role) = Mlp::load(&p)?;
        if role != name {
            return Err(Error::Parse(format!("{} holds a `{role}` network", p.display())));
        }
        Ok(Some(net))
    };
    let nets = (load("drift")?, load("diffusion")?);
    if nets.0.is_none() && nets.1.is_none() {
        return Err(Error::Config(format!("no checkpoints in {}", dir.display())));
    }
    Ok(nets)
}

/// The case's SDE with learned terms in place of the hidden ones.
pub fn learned_model(gt: &GroundTruthModel, drift: Option<&Mlp>, diffusion: Option<&Mlp>) -> Result<StructuredSde> {
    let s = gt.structure();
    s.check_nets(drift, diffusion)?;
    let boxed = |n: Option<&Mlp>| n.map(|n| Box::new(n.clone()) as Box<dyn HiddenFn>);
    Ok(StructuredSde::new(s, boxed(drift), boxed(diffusion))?.with_domain(gt.domain()).with_floor(gt.floor()))
}

/// Hidden-term inputs visited by the data (ensemble means), for the
/// extrapolation flags of the evaluation grid.
pub fn training_inputs(gt: &GroundTruthModel, ds: &MomentDataset) -> Vec<Vec<f64>> {
    let s = gt.structure();
    ds.groups
        .iter()
        .flat_map(|g| {
            let s = &s;
            g.records.iter().map(move |r| {
                let x: Vec<f64> = r.mean.iter().copied().collect();
                s.drift_inputs.gather(&x, &g.input)
            })
        })
        .collect()
}

/// Evaluation results for one learned model.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub case: CaseId,
    pub names: Vec<&'static str>,
    pub rmse: Vec<f64>,
    pub grid_points: usize,
    pub extrapolated: usize,
    /// Per state component group evaluated (`"x0"`, `"x0,x1"`, ...).
    pub kl: Vec<(String, std::result::Result<KlReport, String>)>,
    pub control: Vec<(String, KlReport)>,
}

impl EvalReport {
    /// Summed KL validation error; `None` if a learned ensemble failed.
    pub fn kl_total(&self) -> Option<f64> {
        self.kl.iter().map(|(_, r)| r.as_ref().ok().map(|r| r.total)).sum()
    }

    pub fn control_total(&self) -> f64 {
        self.control.iter().map(|(_, r)| r.total).sum()
    }
}

/// Component groups the KL validation is run over: the full state for
/// one- and two-dimensional cases, S and I marginals for SIR.
pub fn kl_dims(case: CaseId) -> Vec<Vec<usize>> {
    match case {
        CaseId::Colloidal => vec![vec![0]],
        CaseId::LotkaVolterra => vec![vec![0, 1]],
        CaseId::Sir => vec![vec![0], vec![1]],
    }
}

/// Initial condition of the KL validation: the IC-box midpoint.
pub fn kl_initial_condition(gt: &GroundTruthModel) -> (Vec<f64>, Vec<f64>) {
    let b = gt.ic_box();
    let mid: Vec<f64> = b.lo.iter().zip(&b.hi).map(|(l, h)| 0.5 * (l + h)).collect();
    gt.split_ic(&mid)
}

fn kl_settings(cfg: &RunConfig, gt: &GroundTruthModel, dims: &[usize], seed_learned: u64) -> KlSettings {
    let dom = gt.domain();
    KlSettings {
        dt: cfg.data.dt,
        steps: cfg.eval.kv,
        replicates: cfg.eval.kl_replicates,
        seed_true: cfg.eval.kl_seed,
        seed_learned,
        dims: dims.to_vec(),
        width: dims.iter().map(|&j| dom.hi[j] - dom.lo[j]).collect(),
    }
}

/// KL validation of `learned` against the true model from the IC-box
/// midpoint, plus the same-model two-seed control.
pub fn kl_reports<M: SdeModel + ?Sized>(
    cfg: &RunConfig,
    learned: &M,
) -> Result<(Vec<(String, std::result::Result<KlReport, String>)>, Vec<(String, KlReport)>)> {
    let gt = GroundTruthModel::new(cfg.case);
    let truth = gt.model();
    let (ic, u) = kl_initial_condition(&gt);
    let mut kl = Vec::new();
    let mut control = Vec::new();
    for dims in kl_dims(cfg.case) {
        let label = dims.iter().map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
        let other = rng::mix(cfg.eval.kl_seed, 1);
        control.push((label.clone(), kl_validation(&truth, &truth, &ic, &u, &kl_settings(cfg, &gt, &dims, other))?));
        let r = kl_validation(&truth, learned, &ic, &u, &kl_settings(cfg, &gt, &dims, other)).map_err(|e| {
            warn!("KL validation of the learned model failed: {e}");
            e.to_string()
        });
        kl.push((label, r));
    }
    Ok((kl, control))
}

/// Scores arbitrary learned hidden terms. `hidden` maps a hidden-term
/// input to all outputs (in [`GroundTruthModel::hidden_names`] order) and
/// `model` is the SDE built from the same terms.
pub fn evaluate_terms<F, M>(
    cfg: &RunConfig,
    hidden: F,
    model: &M,
    train_inputs: Option<&[Vec<f64>]>,
) -> Result<(EvalReport, Vec<GridRow>)>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
    M: SdeModel + ?Sized,
{
    let gt = GroundTruthModel::new(cfg.case);
    let mut grid = EvalGrid::new(gt.eval_box(), cfg.eval.resolution);
    if let Some(t) = train_inputs {
        grid = grid.with_training_inputs(t);
    }
    let names = gt.hidden_names();
    let rows: Vec<GridRow> = grid
        .points
        .iter()
        .zip(&grid.extrapolated)
        .map(|(p, &e)| GridRow { input: p.clone(), truth: gt.hidden(p), learned: hidden(p), extrapolated: e })
        .collect();
    if rows.iter().any(|r| r.learned.len() != names.len()) {
        return Err(Error::Shape(format!("{} expects {} hidden outputs", cfg.case, names.len())));
    }
    let rmse = rmse_grid(&hidden, |p| gt.hidden(p), &grid);
    let (kl, control) = kl_reports(cfg, model)?;
    let report = EvalReport {
        case: cfg.case,
        names,
        rmse,
        grid_points: grid.points.len(),
        extrapolated: grid.extrapolated_count(),
        kl,
        control,
    };
    Ok((report, rows))
}

/// Scores trained networks.
pub fn evaluate(
    cfg: &RunConfig,
    drift: Option<&Mlp>,
    diffusion: Option<&Mlp>,
    train_inputs: Option<&[Vec<f64>]>,
) -> Result<(EvalReport, Vec<GridRow>)> {
    let gt = GroundTruthModel::new(cfg.case);
    // signature check against the case's hidden terms
    evaluate_grid(&gt, drift, diffusion, &EvalGrid::new(gt.eval_box(), 2))?;
    let model = learned_model(&gt, drift, diffusion)?;
    evaluate_terms(cfg, |p| learned_hidden(drift, diffusion, p).expect("signature checked"), &model, train_inputs)
}

/// Writes `grid.csv`, `kl.csv`, `summary.txt` and, when enabled,
/// `kde.csv`.
pub fn write_report<M: SdeModel + ?Sized>(cfg: &RunConfig, report: &EvalReport, rows: &[GridRow], learned: &M, dir: &Path) -> Result<()> {
    prepare_dir(dir)?;
    io::write_grid(rows, &report.names, &dir.join("grid.csv"))?;
    let mut kl_rows = Vec::new();
    for ((label, r), (_, c)) in report.kl.iter().zip(&report.control) {
        for (k, cv) in c.per_step.iter().enumerate() {
            let v = r.as_ref().map(|r| r.per_step[k].to_string()).unwrap_or_else(|_| "nan".into());
            kl_rows.push(vec![label.clone(), k.to_string(), (k as f64 * cfg.data.dt).to_string(), v, cv.to_string()]);
        }
    }
    let header: Vec<String> = ["components", "k", "t", "kl", "control"].iter().map(|s| s.to_string()).collect();
    io::write_table(&header, &kl_rows, &dir.join("kl.csv"))?;

    let mut s = vec![
        ("case".to_string(), cfg.case.name().to_string()),
        ("rmse_evaluation".into(), format!("uniform grid {0}x{0} over the evaluation box", cfg.eval.resolution)),
        ("grid_points".into(), report.grid_points.to_string()),
        ("extrapolated_points".into(), report.extrapolated.to_string()),
    ];
    for (n, v) in report.names.iter().zip(&report.rmse) {
        s.push((format!("rmse.{n}"), v.to_string()));
    }
    let gt = GroundTruthModel::new(cfg.case);
    let (ic, u) = kl_initial_condition(&gt);
    s.push(("kl.initial_condition".into(), ic.iter().chain(&u).map(|v| v.to_string()).collect::<Vec<_>>().join(",")));
    s.push(("kl.steps".into(), cfg.eval.kv.to_string()));
    s.push(("kl.replicates".into(), cfg.eval.kl_replicates.to_string()));
    for ((label, r), (_, c)) in report.kl.iter().zip(&report.control) {
        match r {
            Ok(r) => s.push((format!("kl.total[{label}]"), r.total.to_string())),
            Err(e) => s.push((format!("kl.error[{label}]"), e.clone())),
        }
        s.push((format!("kl.control_total[{label}]"), c.total.to_string()));
    }
    io::write_key_values(&dir.join("summary.txt"), &s)?;
    if cfg.eval.kde_csv {
        write_kde(cfg, learned, &dir.join("kde.csv"))?;
    }
    Ok(())
}

/// Marginal KDEs of the true and learned ensembles over time:
/// `k,t,component,x,true_density,learned_density`.
pub fn write_kde<M: SdeModel + ?Sized>(cfg: &RunConfig, learned: &M, path: &Path) -> Result<()> {
    let gt = GroundTruthModel::new(cfg.case);
    let (ic, u) = kl_initial_condition(&gt);
    let truth = gt.model();
    let a = simulate_ensemble(&truth, &ic, &u, cfg.data.dt, cfg.eval.kv, cfg.eval.kl_replicates, cfg.eval.kl_seed)?;
    let b = simulate_ensemble(learned, &ic, &u, cfg.data.dt, cfg.eval.kv, cfg.eval.kl_replicates, rng::mix(cfg.eval.kl_seed, 1))?;
    let dom = gt.domain();
    let mut rows = Vec::new();
    for j in 0..gt.structure().state_dim {
        for k in 0..=cfg.eval.kv {
            let pick = |e: &TrajectoryEnsemble| -> Vec<Vec<f64>> {
                (0..e.replicates).filter(|&r| !e.flagged[r]).map(|r| vec![e.state(r, k)[j]]).collect()
            };
            let (pa, pb) = (pick(&a), pick(&b));
            let floor = 1e-6 * (dom.hi[j] - dom.lo[j]);
            let ha = silverman_bandwidth(&pa)[0].max(floor);
            let hb = silverman_bandwidth(&pb)[0].max(floor);
            let lo = pa.iter().chain(&pb).map(|v| v[0]).fold(f64::INFINITY, f64::min) - 3.0 * ha.max(hb);
            let hi = pa.iter().chain(&pb).map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max) + 3.0 * ha.max(hb);
            let axes = vec![uniform_axis(lo, hi, KL_GRID_POINTS)];
            let da = kde(&pa, &axes, &[ha])?;
            let db = kde(&pb, &axes, &[hb])?;
            for (i, x) in axes[0].iter().enumerate() {
                rows.push(vec![
                    k.to_string(),
                    (k as f64 * cfg.data.dt).to_string(),
                    j.to_string(),
                    x.to_string(),
                    da.density[i].to_string(),
                    db.density[i].to_string(),
                ]);
            }
        }
    }
    let header: Vec<String> =
        ["k", "t", "component", "x", "true_density", "learned_density"].iter().map(|s| s.to_string()).collect();
    io::write_table(&header, &rows, path)
}

/// Loads checkpoints from `ckpt_dir`, evaluates and writes the report.
pub fn evaluate_dir(cfg: &RunConfig, ckpt_dir: &Path, moments: Option<&Path>, out: &Path) -> Result<EvalReport> {
    let (drift, diffusion) = load_checkpoints(ckpt_dir)?;
    let gt = GroundTruthModel::new(cfg.case);
    let inputs = match moments {
        Some(p) => Some(training_inputs(&gt, &io::read_moments(p)?)),
        None => None,
    };
    let (report, rows) = evaluate(cfg, drift.as_ref(), diffusion.as_ref(), inputs.as_deref())?;
    let model = learned_model(&gt, drift.as_ref(), diffusion.as_ref())?;
    write_report(cfg, &report, &rows, &model, out)?;
    Ok(report)
}

/// Result of one full pipeline run.
pub struct RunOutcome {
    pub stats: GenerationStats,
    pub model: TrainedModel,
    pub report: EvalReport,
}

/// Generate → train → evaluate into `dir`.
pub fn reproduce(cfg: &RunConfig, dir: &Path) -> Result<RunOutcome> {
    let (ds, stats) = generate_to_dir(cfg, dir)?;
    info!("{}: {} groups, {} records, clamp rate {:e}", cfg.case, ds.groups.len(), ds.record_count(), stats.clamp_rate());
    let model = train_to_dir(cfg, &ds, dir)?;
    let gt = GroundTruthModel::new(cfg.case);
    let inputs = training_inputs(&gt, &ds);
    let (report, rows) = evaluate(cfg, model.drift.as_ref(), model.diffusion.as_ref(), Some(&inputs))?;
    let learned = learned_model(&gt, model.drift.as_ref(), model.diffusion.as_ref())?;
    write_report(cfg, &report, &rows, &learned, dir)?;
    Ok(RunOutcome { stats, model, report })
}

/// Trains on an in-memory dataset and returns the grid RMSE only.
pub fn train_and_score(cfg: &RunConfig, ds: &MomentDataset) -> Result<(TrainedModel, Vec<f64>)> {
    let model = train_case(cfg, ds)?;
    let gt = GroundTruthModel::new(cfg.case);
    let grid = EvalGrid::new(gt.eval_box(), cfg.eval.resolution);
    let rmse = crate::validation::rmse_case(&gt, model.drift.as_ref(), model.diffusion.as_ref(), &grid)?;
    Ok((model, rmse))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Replicates,
    Datasize,
    Propagator,
    SamplingTime,
}

impl Sweep {
    pub const ALL: [Sweep; 4] = [Sweep::Replicates, Sweep::Datasize, Sweep::Propagator, Sweep::SamplingTime];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "replicates" => Ok(Self::Replicates),
            "datasize" => Ok(Self::Datasize),
            "propagator" => Ok(Self::Propagator),
            "sampling-time" | "sampling_time" => Ok(Self::SamplingTime),
            other => Err(Error::Config(format!(
                "unknown sweep `{other}` (expected replicates, datasize, propagator, sampling-time)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Replicates => "replicates",
            Self::Datasize => "datasize",
            Self::Propagator => "propagator",
            Self::SamplingTime => "sampling-time",
        }
    }

    /// The factor values swept, as config values.
    pub fn values(self, base: &RunConfig, scale: Scale) -> Vec<String> {
        let v: Vec<String> = match (self, scale) {
            (Self::Replicates, Scale::Desk) => [100, 1000, 10_000].iter().map(|n| n.to_string()).collect(),
            (Self::Replicates, Scale::Paper) => [100, 1000, 10_000, 100_000].iter().map(|n| n.to_string()).collect(),
            (Self::Datasize, Scale::Desk) => [50, 100, 200].iter().map(|n| n.to_string()).collect(),
            (Self::Datasize, Scale::Paper) => [250, 500, 1000, 2000].iter().map(|n| n.to_string()).collect(),
            (Self::Propagator, _) => {
                [PropagatorKind::Linearization, PropagatorKind::Ut2m, PropagatorKind::Ut4m].iter().map(|p| p.name().to_string()).collect()
            }
            (Self::SamplingTime, _) => {
                let dt = GroundTruthModel::new(base.case).default_dt();
                (1..=4).map(|m| (dt * m as f64).to_string()).collect()
            }
        };
        v
    }

    fn key(self) -> &'static str {
        match self {
            Self::Replicates => "data.replicates",
            Self::Datasize => "data.ics",
            Self::Propagator => "propagator",
            Self::SamplingTime => "data.dt",
        }
    }
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub rmse: Vec<f64>,
    pub final_val_loss: f64,
}

/// Runs a sweep, writing each run's directory under `dir/<sweep>/<value>`
/// and the table `dir/sweep_<sweep>.csv` (`factor,value,rmse_<name>..,final_val_loss`).
pub fn sweep(base: &RunConfig, which: Sweep, scale: Scale, dir: &Path) -> Result<Vec<SweepRow>> {
    prepare_dir(dir)?;
    let gt = GroundTruthModel::new(base.case);
    let mut rows = Vec::new();
    let mut shared: Option<MomentDataset> = None;
    for value in which.values(base, scale) {
        let mut cfg = base.clone();
        cfg.set(which.key(), &value)?;
        cfg.validate()?;
        let run_dir: PathBuf = dir.join(which.name()).join(&value);
        info!("sweep {} = {value}", which.name());
        // the propagator sweep trains every method on one dataset
        let ds = match (which, &shared) {
            (Sweep::Propagator, Some(ds)) => {
                prepare_dir(&run_dir)?;
                write_config(&cfg, &run_dir)?;
                ds.clone()
            }
            _ => generate_to_dir(&cfg, &run_dir)?.0,
        };
        if which == Sweep::Propagator {
            shared = Some(ds.clone());
        }
        let model = train_to_dir(&cfg, &ds, &run_dir)?;
        let (report, grid_rows) = evaluate(&cfg, model.drift.as_ref(), model.diffusion.as_ref(), Some(&training_inputs(&gt, &ds)))?;
        let learned = learned_model(&gt, model.drift.as_ref(), model.diffusion.as_ref())?;
        write_report(&cfg, &report, &grid_rows, &learned, &run_dir)?;
        rows.push(SweepRow { value, rmse: report.rmse.clone(), final_val_loss: model.final_val_loss() });
    }
    write_sweep_table(&gt, which, &rows, &dir.join(format!("sweep_{}.csv", which.name())))?;
    Ok(rows)
}

pub fn write_sweep_table(gt: &GroundTruthModel, which: Sweep, rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut header = vec!["factor".to_string(), "value".into()];
    header.extend(gt.hidden_names().iter().map(|n| format!("rmse_{n}")));
    header.push("final_val_loss".into());
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![which.name().to_string(), r.value.clone()];
            v.extend(r.rmse.iter().map(|x| x.to_string()));
            v.push(r.final_val_loss.to_string());
            v
        })
        .collect();
    io::write_table(&header, &table, path)
}

/// Sets the data, split and initialization seeds from one base seed.
pub fn reseed(cfg: &mut RunConfig, seed: u64) {
    cfg.data.seed = seed;
    cfg.train.split_seed = rng::mix(seed, 1);
    cfg.train.init_seed = rng::mix(seed, 2);
    cfg.train.diffusion_seed = rng::mix(seed, 3);
}

