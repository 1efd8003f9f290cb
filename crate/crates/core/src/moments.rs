//! Moment estimation from trajectory ensembles and one-step transition pairs.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::sde::{simulate_ensemble, SdeModel, TrajectoryEnsemble};

/// Estimated moments at one `(initial condition, time index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentRecord {
    pub ic_index: usize,
    pub k: usize,
    pub t: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub skew: Option<Vec<f64>>,
    pub kurt: Option<Vec<f64>>,
    pub n_samples: usize,
    /// Some component had zero variance while higher moments were requested.
    pub degenerate: bool,
}

/// All records from one initial condition, `k = 0..K` in order.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentGroup {
    pub ic_index: usize,
    pub initial_condition: Vec<f64>,
    pub input: Vec<f64>,
    pub records: Vec<MomentRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentDataset {
    pub state_dim: usize,
    pub input_dim: usize,
    pub dt: f64,
    pub max_order: usize,
    pub groups: Vec<MomentGroup>,
}

impl MomentDataset {
    pub fn record_count(&self) -> usize {
        self.groups.iter().map(|g| g.records.len()).sum()
    }

    /// Checks the contiguity and shape invariants.
    pub fn validate(&self) -> Result<()> {
        for g in &self.groups {
            if g.input.len() != self.input_dim {
                return Err(Error::Shape(format!("group {} input length {}", g.ic_index, g.input.len())));
            }
            for (k, r) in g.records.iter().enumerate() {
                if r.k != k || r.ic_index != g.ic_index {
                    return Err(Error::Parse(format!("group {}: records are not contiguous in k", g.ic_index)));
                }
                if r.mean.len() != self.state_dim || r.cov.nrows() != self.state_dim || r.cov.ncols() != self.state_dim {
                    return Err(Error::Shape(format!("group {} record {k}: wrong state dimension", g.ic_index)));
                }
            }
        }
        Ok(())
    }
}

/// `(1/N)`-normalized mean and covariance and, when requested, marginal
/// standardized skewness and kurtosis at every recorded time. Flagged
/// replicates are left out.
pub fn estimate_moments(ens: &TrajectoryEnsemble, max_order: usize) -> Result<MomentGroup> {
    if !(2..=4).contains(&max_order) {
        return Err(Error::Config(format!("max_order must be 2, 3 or 4, got {max_order}")));
    }
    let keep: Vec<usize> = (0..ens.replicates).filter(|&r| !ens.flagged[r]).collect();
    if keep.len() < 2 {
        return Err(Error::Domain(format!("moment estimation needs at least 2 replicates, have {}", keep.len())));
    }
    let records = (0..ens.times.len())
        .into_par_iter()
        .map(|k| {
            let samples: Vec<&[f64]> = keep.iter().map(|&r| ens.state(r, k)).collect();
            let mut rec = sample_moments(&samples, ens.state_dim, max_order);
            rec.k = k;
            rec.t = ens.times[k];
            rec
        })
        .collect();
    Ok(MomentGroup {
        ic_index: 0,
        initial_condition: ens.initial_condition.clone(),
        input: ens.input.clone(),
        records,
    })
}

/// Simulation counters accumulated while generating a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GenerationStats {
    pub replicates: usize,
    pub flagged: usize,
    pub clamp_events: usize,
    pub diffusion_evals: usize,
    pub boundary_events: usize,
}

impl GenerationStats {
    pub fn clamp_rate(&self) -> f64 {
        if self.diffusion_evals == 0 {
            0.0
        } else {
            self.clamp_events as f64 / self.diffusion_evals as f64
        }
    }
}

/// Simulates one ensemble per `(initial state, input)` pair and estimates
/// its moments. Group `i` uses seed `mix(seed, i)`.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset<M: SdeModel + ?Sized>(
    model: &M,
    ics: &[(Vec<f64>, Vec<f64>)],
    dt: f64,
    steps: usize,
    replicates: usize,
    seed: u64,
    max_order: usize,
) -> Result<(MomentDataset, GenerationStats)> {
    if replicates < 2 {
        return Err(Error::Config(format!("moment estimation needs at least 2 replicates, got {replicates}")));
    }
    let mut groups = Vec::with_capacity(ics.len());
    let mut stats = GenerationStats::default();
    for (i, (x0, u)) in ics.iter().enumerate() {
        let ens = simulate_ensemble(model, x0, u, dt, steps, replicates, rng::mix(seed, i as u64))?;
        stats.replicates += ens.replicates;
        stats.flagged += ens.flagged_count();
        stats.clamp_events += ens.clamp_events;
        stats.diffusion_evals += ens.diffusion_evals;
        stats.boundary_events += ens.boundary_events;
        let mut g = estimate_moments(&ens, max_order)?;
        g.ic_index = i;
        for r in &mut g.records {
            r.ic_index = i;
        }
        groups.push(g);
    }
    let ds = MomentDataset {
        state_dim: model.state_dim(),
        input_dim: model.input_dim(),
        dt,
        max_order,
        groups,
    };
    Ok((ds, stats))
}

/// Moments of a sample set (two-pass).
pub fn sample_moments(samples: &[&[f64]], d: usize, max_order: usize) -> MomentRecord {
    let n = samples.len();
    let inv = 1.0 / n as f64;
    let mut mean = DVector::zeros(d);
    for s in samples {
        for i in 0..d {
            mean[i] += s[i];
        }
    }
    mean *= inv;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut dev = vec![0.0; d];
    for s in samples {
        for i in 0..d {
            dev[i] = s[i] - mean[i];
        }
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += dev[i] * dev[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[(i, j)] *= inv;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    let mut degenerate = false;
    let (mut skew, mut kurt) = (None, None);
    if max_order >= 3 {
        let mut s3 = vec![0.0; d];
        let mut s4 = vec![0.0; d];
        for i in 0..d {
            let sd = cov[(i, i)].sqrt();
            if !(sd > 0.0) {
                degenerate = true;
                continue;
            }
            for s in samples {
                let z = (s[i] - mean[i]) / sd;
                let z2 = z * z;
                s3[i] += z2 * z;
                s4[i] += z2 * z2;
            }
            s3[i] *= inv;
            s4[i] *= inv;
        }
        skew = Some(s3);
        if max_order >= 4 {
            kurt = Some(s4);
        }
    }
    MomentRecord { ic_index: 0, k: 0, t: 0.0, mean, cov, skew, kurt, n_samples: n, degenerate }
}

/// One-step pair `t_{k-1} -> t_k` from one group.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub source: MomentRecord,
    pub target: MomentRecord,
    pub input: Vec<f64>,
}

impl Transition {
    pub fn dt(&self) -> f64 {
        self.target.t - self.source.t
    }
}

/// All one-step pairs: `K` per group of `K + 1` records.
pub fn build_transitions(ds: &MomentDataset) -> Result<Vec<Transition>> {
    let mut out = Vec::with_capacity(ds.record_count());
    for g in &ds.groups {
        if g.records.len() < 2 {
            return Err(Error::Domain(format!("group {} has {} record(s); need at least 2", g.ic_index, g.records.len())));
        }
        for w in g.records.windows(2) {
            out.push(Transition { source: w[0].clone(), target: w[1].clone(), input: g.input.clone() });
        }
    }
    Ok(out)
}

/// Index sets of a seeded train/validation/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random 70/15/15 split of `n` items.
pub fn split_indices(n: usize, seed: u64) -> Split {
    split_with_fractions(n, seed, 0.70, 0.15)
}

pub fn split_with_fractions(n: usize, seed: u64, train: f64, validation: f64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, 0x5b17);
    idx.shuffle(&mut r);
    let n_train = ((n as f64) * train).round() as usize;
    let n_val = (((n as f64) * validation).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let test = idx.split_off(n_train + n_val);
    let validation = idx.split_off(n_train);
    Split { train: idx, validation, test }
}
