//! Reconstruction RMSE on evaluation grids and the KDE/KL distributional
//! validation error.

use rayon::prelude::*;

use crate::cases::{full_grid, GroundTruthModel};
use crate::error::{Error, Result};
use crate::neural::Mlp;
use crate::sde::{simulate_ensemble, DomainBox, SdeModel, TrajectoryEnsemble};

/// Uniform grid over a box of hidden-term inputs. Points outside the box
/// spanned by the training inputs are flagged as extrapolation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalGrid {
    pub domain: DomainBox,
    pub resolution: usize,
    /// Last coordinate varies fastest.
    pub points: Vec<Vec<f64>>,
    pub extrapolated: Vec<bool>,
}

impl EvalGrid {
    pub fn new(domain: DomainBox, resolution: usize) -> Self {
        let points = full_grid(&domain, resolution);
        let extrapolated = vec![false; points.len()];
        Self { domain, resolution, points, extrapolated }
    }

    /// Flags points outside the bounding box of `inputs`.
    pub fn with_training_inputs(mut self, inputs: &[Vec<f64>]) -> Self {
        let k = self.domain.lo.len();
        let mut lo = vec![f64::INFINITY; k];
        let mut hi = vec![f64::NEG_INFINITY; k];
        for x in inputs {
            for j in 0..k {
                lo[j] = lo[j].min(x[j]);
                hi[j] = hi[j].max(x[j]);
            }
        }
        let hull = DomainBox::new(lo, hi);
        self.extrapolated = self.points.iter().map(|p| !hull.contains(p)).collect();
        self
    }

    pub fn extrapolated_count(&self) -> usize {
        self.extrapolated.iter().filter(|e| **e).count()
    }
}

/// `sqrt(mean of squared error)` per output over the grid points. Squared
/// errors are summed in sorted order, so the result does not depend on the
/// order of the points.
pub fn rmse_grid<L, T>(learned: L, truth: T, grid: &EvalGrid) -> Vec<f64>
where
    L: Fn(&[f64]) -> Vec<f64> + Sync,
    T: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let rows: Vec<(Vec<f64>, Vec<f64>)> = grid.points.par_iter().map(|p| (learned(p), truth(p))).collect();
    let outputs = rows.first().map_or(0, |r| r.1.len());
    (0..outputs)
        .map(|j| {
            let mut sq: Vec<f64> = rows.iter().map(|(l, t)| (l[j] - t[j]).powi(2)).collect();
            sq.sort_by(f64::total_cmp);
            (sq.iter().sum::<f64>() / sq.len().max(1) as f64).sqrt()
        })
        .collect()
}

/// Concatenated learned hidden terms `[g₁, g₂]` at a hidden-term input.
pub fn learned_hidden(drift: Option<&Mlp>, diffusion: Option<&Mlp>, xin: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    if let Some(n) = drift {
        out.extend(n.forward(xin)?);
    }
    if let Some(n) = diffusion {
        out.extend(n.forward(xin)?);
    }
    Ok(out)
}

/// One row of a grid evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub input: Vec<f64>,
    pub truth: Vec<f64>,
    pub learned: Vec<f64>,
    pub extrapolated: bool,
}

/// Learned vs true hidden terms at every grid point, checking that the
/// networks match the case's hidden-term signature.
pub fn evaluate_grid(
    gt: &GroundTruthModel,
    drift: Option<&Mlp>,
    diffusion: Option<&Mlp>,
    grid: &EvalGrid,
) -> Result<Vec<GridRow>> {
    let names = gt.hidden_names();
    let probe = grid.points.first().ok_or_else(|| Error::Config("empty evaluation grid".into()))?;
    let got = learned_hidden(drift, diffusion, probe)?.len();
    if got != names.len() {
        return Err(Error::Shape(format!(
            "{} expects {} hidden outputs ({}), networks provide {got}",
            gt.id,
            names.len(),
            names.join(", ")
        )));
    }
    grid.points
        .par_iter()
        .zip(&grid.extrapolated)
        .map(|(p, &e)| {
            Ok(GridRow { input: p.clone(), truth: gt.hidden(p), learned: learned_hidden(drift, diffusion, p)?, extrapolated: e })
        })
        .collect()
}

/// RMSE per hidden output (order of [`GroundTruthModel::hidden_names`]).
pub fn rmse_case(gt: &GroundTruthModel, drift: Option<&Mlp>, diffusion: Option<&Mlp>, grid: &EvalGrid) -> Result<Vec<f64>> {
    evaluate_grid(gt, drift, diffusion, grid)?;
    Ok(rmse_grid(
        |p| learned_hidden(drift, diffusion, p).expect("signature checked"),
        |p| gt.hidden(p),
        grid,
    ))
}

/// Silverman's rule per dimension for a product Gaussian kernel:
/// `h_j = σ_j (4 / ((D + 2) n))^(1/(D + 4))`.
pub fn silverman_bandwidth(samples: &[Vec<f64>]) -> Vec<f64> {
    let n = samples.len().max(1) as f64;
    let dims = samples.first().map_or(0, |s| s.len());
    let factor = (4.0 / ((dims as f64 + 2.0) * n)).powf(1.0 / (dims as f64 + 4.0));
    (0..dims)
        .map(|j| {
            let mean = samples.iter().map(|s| s[j]).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / n;
            var.sqrt() * factor
        })
        .collect()
}

/// Gaussian-kernel density on a tensor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeEstimate {
    pub bandwidth: Vec<f64>,
    pub axes: Vec<Vec<f64>>,
    /// Row-major over `axes` (last axis fastest).
    pub density: Vec<f64>,
    pub cell_volume: f64,
}

impl KdeEstimate {
    pub fn integral(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.cell_volume
    }
}

/// Uniform axis of `points` nodes over `[lo, hi]`.
pub fn uniform_axis(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

/// Binned Gaussian KDE: samples are linearly binned onto the grid nodes
/// and the bin masses convolved with the sampled kernel along each axis.
pub fn kde(samples: &[Vec<f64>], axes: &[Vec<f64>], bandwidth: &[f64]) -> Result<KdeEstimate> {
    let dims = axes.len();
    if samples.len() < 30 {
        return Err(Error::Domain(format!("kde needs at least 30 samples, got {}", samples.len())));
    }
    if bandwidth.len() != dims || samples.iter().any(|s| s.len() != dims) {
        return Err(Error::Shape("kde: samples, axes and bandwidth dimensions differ".into()));
    }
    let sizes: Vec<usize> = axes.iter().map(|a| a.len()).collect();
    if sizes.iter().any(|&n| n < 2) || bandwidth.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::Domain("kde needs >= 2 nodes per axis and positive bandwidths".into()));
    }
    let steps: Vec<f64> = axes.iter().map(|a| (a[a.len() - 1] - a[0]) / (a.len() - 1) as f64).collect();
    let total: usize = sizes.iter().product();
    let strides: Vec<usize> = (0..dims).map(|j| sizes[j + 1..].iter().product()).collect();
    let mut mass = vec![0.0; total];
    let w = 1.0 / samples.len() as f64;
    for s in samples {
        // linear binning: split each sample's weight between neighbouring nodes
        let mut corners = vec![(0usize, w)];
        for j in 0..dims {
            let pos = ((s[j] - axes[j][0]) / steps[j]).clamp(0.0, (sizes[j] - 1) as f64);
            let i0 = (pos.floor() as usize).min(sizes[j] - 2);
            let frac = pos - i0 as f64;
            let mut next = Vec::with_capacity(corners.len() * 2);
            for &(idx, cw) in &corners {
                next.push((idx + i0 * strides[j], cw * (1.0 - frac)));
                next.push((idx + (i0 + 1) * strides[j], cw * frac));
            }
            corners = next;
        }
        for (idx, cw) in corners {
            mass[idx] += cw;
        }
    }
    for j in 0..dims {
        let half = ((4.0 * bandwidth[j] / steps[j]).ceil() as usize).min(sizes[j] - 1);
        let mut kern: Vec<f64> = (0..=2 * half)
            .map(|o| {
                let z = (o as f64 - half as f64) * steps[j] / bandwidth[j];
                (-0.5 * z * z).exp()
            })
            .collect();
        let ksum: f64 = kern.iter().sum();
        kern.iter_mut().for_each(|k| *k /= ksum);
        let n = sizes[j];
        let stride = strides[j];
        let mut out = vec![0.0; total];
        for base in 0..total {
            // visit each line along axis j once, from its first node
            if (base / stride) % n != 0 {
                continue;
            }
            for i in 0..n {
                let m = mass[base + i * stride];
                if m == 0.0 {
                    continue;
                }
                let lo = i.saturating_sub(half);
                let hi = (i + half).min(n - 1);
                for t in lo..=hi {
                    out[base + t * stride] += m * kern[t + half - i];
                }
            }
        }
        mass = out;
    }
    let cell_volume: f64 = steps.iter().product();
    let density = mass.into_iter().map(|m| m / cell_volume).collect();
    Ok(KdeEstimate { bandwidth: bandwidth.to_vec(), axes: axes.to_vec(), density, cell_volume })
}

pub const KL_GRID_POINTS: usize = 256;
pub const DENSITY_FLOOR: f64 = 1e-12;

/// `∫ p log(p/q)` by grid quadrature with both densities floored.
pub fn kl_on_grid(p: &KdeEstimate, q: &KdeEstimate) -> f64 {
    p.density
        .iter()
        .zip(&q.density)
        .map(|(&a, &b)| {
            let (a, b) = (a.max(DENSITY_FLOOR), b.max(DENSITY_FLOOR));
            a * (a / b).ln()
        })
        .sum::<f64>()
        * p.cell_volume
}

/// KL divergence between the KDEs of two sample sets on a shared grid:
/// the union range padded by three bandwidths, `points` nodes per axis.
/// `width` sets the bandwidth floor `1e-6 * width` per dimension.
pub fn kl_samples(p: &[Vec<f64>], q: &[Vec<f64>], points: usize, width: &[f64]) -> Result<f64> {
    let dims = width.len();
    let floor = |h: Vec<f64>| -> Vec<f64> { h.iter().zip(width).map(|(h, w)| h.max(1e-6 * w)).collect() };
    let hp = floor(silverman_bandwidth(p));
    let hq = floor(silverman_bandwidth(q));
    let axes: Vec<Vec<f64>> = (0..dims)
        .map(|j| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for s in p.iter().chain(q) {
                lo = lo.min(s[j]);
                hi = hi.max(s[j]);
            }
            let pad = 3.0 * hp[j].max(hq[j]);
            uniform_axis(lo - pad, hi + pad, points)
        })
        .collect();
    let a = kde(p, &axes, &hp)?;
    let b = kde(q, &axes, &hq)?;
    Ok(kl_on_grid(&a, &b))
}

/// Per-step and summed KL validation error.
#[derive(Debug, Clone, PartialEq)]
pub struct KlReport {
    /// `k = 0..=K_V`
    pub per_step: Vec<f64>,
    pub total: f64,
}

/// Components `dims` of replicate states at step `k`, skipping flagged
/// replicates.
fn states_at(ens: &TrajectoryEnsemble, k: usize, dims: &[usize]) -> Vec<Vec<f64>> {
    (0..ens.replicates)
        .filter(|&r| !ens.flagged[r])
        .map(|r| {
            let s = ens.state(r, k);
            dims.iter().map(|&j| s[j]).collect()
        })
        .collect()
}

/// Settings of a KL validation run.
#[derive(Debug, Clone, PartialEq)]
pub struct KlSettings {
    pub dt: f64,
    pub steps: usize,
    pub replicates: usize,
    pub seed_true: u64,
    pub seed_learned: u64,
    /// State components the densities are estimated over (1 or 2).
    pub dims: Vec<usize>,
    /// Domain width per entry of `dims`, for the bandwidth floor.
    pub width: Vec<f64>,
}

/// Simulates both models from `ic` and sums the per-step KL divergence
/// `KL(p_true || p_learned)` over `k = 0..=steps`.
pub fn kl_validation<A: SdeModel + ?Sized, B: SdeModel + ?Sized>(
    true_model: &A,
    learned: &B,
    ic: &[f64],
    u: &[f64],
    s: &KlSettings,
) -> Result<KlReport> {
    if s.steps < 1 {
        return Err(Error::Config("KL validation needs K_V >= 1".into()));
    }
    if s.dims.is_empty() || s.dims.len() > 2 || s.width.len() != s.dims.len() {
        return Err(Error::Config("KL validation works on one or two state components".into()));
    }
    let a = simulate_ensemble(true_model, ic, u, s.dt, s.steps, s.replicates, s.seed_true)?;
    let b = simulate_ensemble(learned, ic, u, s.dt, s.steps, s.replicates, s.seed_learned)?;
    let per_step = (0..=s.steps)
        .into_par_iter()
        .map(|k| kl_samples(&states_at(&a, k, &s.dims), &states_at(&b, k, &s.dims), KL_GRID_POINTS, &s.width))
        .collect::<Result<Vec<f64>>>()?;
    let total = per_step.iter().sum();
    Ok(KlReport { per_step, total })
}
