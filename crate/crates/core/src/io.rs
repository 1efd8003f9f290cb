//! File formats of a run directory.
//!
//! Moment file (`moments.csv`): one row per `(ic_index, k)` with columns
//! `ic_index,k,t,mean_<i>..,cov_<i><j>.. (i <= j),skew_<i>..,kurt_<i>..,n`
//! (skew/kurt columns only when `max_order >= 3` / `4`). The sidecar
//! `moments.csv.meta` holds `key=value` lines: `state_dim`, `input_dim`,
//! `dt`, `max_order`, `groups`, and per group `group.<i>.ic` /
//! `group.<i>.input` as comma-separated floats.
//!
//! Trajectory file: `run,k,t,x_<i>..` with a `.meta` sidecar carrying the
//! initial condition, input, seed and flagged replicates.
//!
//! Floats are written in Rust's shortest round-trip form, so writing the
//! same data twice gives identical bytes and reading recovers it exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::moments::{MomentDataset, MomentGroup, MomentRecord};
use crate::sde::TrajectoryEnsemble;
use crate::training::StageReport;
use crate::validation::GridRow;

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad number `{v}`"))))
        .collect()
}

/// Appends `.meta` to the file name.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes ordered `key=value` lines.
pub fn write_key_values(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (k, v) in pairs {
        writeln!(w, "{k}={v}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_key_values(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse(format!("{}: bad line `{line}`", path.display())))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn moment_header(d: usize, max_order: usize) -> Vec<String> {
    let mut h = vec!["ic_index".to_string(), "k".into(), "t".into()];
    h.extend((0..d).map(|i| format!("mean_{i}")));
    for i in 0..d {
        for j in i..d {
            h.push(format!("cov_{i}{j}"));
        }
    }
    if max_order >= 3 {
        h.extend((0..d).map(|i| format!("skew_{i}")));
    }
    if max_order >= 4 {
        h.extend((0..d).map(|i| format!("kurt_{i}")));
    }
    h.push("n".into());
    h
}

pub fn write_moments(ds: &MomentDataset, path: &Path) -> Result<()> {
    let d = ds.state_dim;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(moment_header(d, ds.max_order))?;
    for g in &ds.groups {
        for r in &g.records {
            let mut row = vec![r.ic_index.to_string(), r.k.to_string(), r.t.to_string()];
            row.extend(r.mean.iter().map(|v| v.to_string()));
            for i in 0..d {
                for j in i..d {
                    row.push(r.cov[(i, j)].to_string());
                }
            }
            for (order, m) in [(3, &r.skew), (4, &r.kurt)] {
                if ds.max_order >= order {
                    let vals = m.as_ref().ok_or_else(|| Error::Shape(format!("record lacks order-{order} moments")))?;
                    row.extend(vals.iter().map(|v| v.to_string()));
                }
            }
            row.push(r.n_samples.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    let mut meta = vec![
        ("format".to_string(), "moments-v1".to_string()),
        ("state_dim".into(), d.to_string()),
        ("input_dim".into(), ds.input_dim.to_string()),
        ("dt".into(), ds.dt.to_string()),
        ("max_order".into(), ds.max_order.to_string()),
        ("groups".into(), ds.groups.len().to_string()),
    ];
    for g in &ds.groups {
        meta.push((format!("group.{}.ic", g.ic_index), join(&g.initial_condition)));
        meta.push((format!("group.{}.input", g.ic_index), join(&g.input)));
    }
    write_key_values(&meta_path(path), &meta)
}

pub fn read_moments(path: &Path) -> Result<MomentDataset> {
    let meta = read_key_values(&meta_path(path))?;
    let get = |k: &str| meta.get(k).ok_or_else(|| Error::Parse(format!("moment metadata lacks `{k}`")));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Parse(format!("bad `{k}`"))) };
    let d = num("state_dim")?;
    let input_dim = num("input_dim")?;
    let max_order = num("max_order")?;
    let n_groups = num("groups")?;
    let dt: f64 = get("dt")?.parse().map_err(|_| Error::Parse("bad `dt`".into()))?;
    let mut groups: Vec<MomentGroup> = (0..n_groups)
        .map(|i| {
            Ok(MomentGroup {
                ic_index: i,
                initial_condition: parse_list(get(&format!("group.{i}.ic"))?)?,
                input: parse_list(get(&format!("group.{i}.input"))?)?,
                records: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;

    let mut rdr = csv::Reader::from_path(path)?;
    let expected = moment_header(d, max_order);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    if header != expected {
        return Err(Error::Parse(format!("{}: unexpected columns", path.display())));
    }
    let nc = d * (d + 1) / 2;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| Error::Parse(format!("row {}: bad value `{}`", line + 1, &rec[i])))
        };
        let u = |i: usize| -> Result<usize> {
            rec[i].parse().map_err(|_| Error::Parse(format!("row {}: bad integer `{}`", line + 1, &rec[i])))
        };
        let ic = u(0)?;
        let mut c = 3;
        let mean = DVector::from_iterator(d, (0..d).map(|i| f(c + i)).collect::<Result<Vec<_>>>()?);
        c += d;
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] = f(c)?;
                cov[(j, i)] = cov[(i, j)];
                c += 1;
            }
        }
        debug_assert_eq!(c, 3 + d + nc);
        let mut take = |on: bool| -> Result<Option<Vec<f64>>> {
            if !on {
                return Ok(None);
            }
            let v = (0..d).map(|i| f(c + i)).collect::<Result<Vec<_>>>()?;
            c += d;
            Ok(Some(v))
        };
        let skew = take(max_order >= 3)?;
        let kurt = take(max_order >= 4)?;
        let record = MomentRecord {
            ic_index: ic,
            k: u(1)?,
            t: f(2)?,
            mean,
            cov,
            skew,
            kurt,
            n_samples: u(c)?,
            degenerate: false,
        };
        let record = MomentRecord { degenerate: max_order >= 3 && (0..d).any(|i| !(record.cov[(i, i)] > 0.0)), ..record };
        let g = groups.get_mut(ic).ok_or_else(|| Error::Parse(format!("row {}: ic_index {ic} out of range", line + 1)))?;
        g.records.push(record);
    }
    let ds = MomentDataset { state_dim: d, input_dim, dt, max_order, groups };
    ds.validate()?;
    Ok(ds)
}

/// Writes one ensemble as `run,k,t,x_<i>..` plus a `.meta` sidecar.
pub fn write_trajectories(ens: &TrajectoryEnsemble, path: &Path) -> Result<()> {
    let d = ens.state_dim;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["run".to_string(), "k".into(), "t".into()];
    header.extend((0..d).map(|i| format!("x_{i}")));
    w.write_record(&header)?;
    for r in 0..ens.replicates {
        for (k, t) in ens.times.iter().enumerate() {
            let mut row = vec![r.to_string(), k.to_string(), t.to_string()];
            row.extend(ens.state(r, k).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    let flagged: Vec<String> = (0..ens.replicates).filter(|&r| ens.flagged[r]).map(|r| r.to_string()).collect();
    write_key_values(
        &meta_path(path),
        &[
            ("format".into(), "trajectories-v1".into()),
            ("initial_condition".into(), join(&ens.initial_condition)),
            ("input".into(), join(&ens.input)),
            ("dt".into(), ens.dt.to_string()),
            ("replicates".into(), ens.replicates.to_string()),
            ("seed".into(), ens.seed.to_string()),
            ("flagged".into(), flagged.join(",")),
            ("clamp_events".into(), ens.clamp_events.to_string()),
            ("boundary_events".into(), ens.boundary_events.to_string()),
        ],
    )
}

/// `epoch,train_loss,val_loss`; epoch 0 is the initialization.
pub fn write_history(report: &StageReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    w.write_record(["0".to_string(), report.initial_train_loss.to_string(), report.initial_val_loss.to_string()])?;
    for e in &report.history {
        w.write_record([e.epoch.to_string(), e.train_loss.to_string(), e.val_loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Grid evaluation with columns `in_<i>.., <name>_truth, <name>_learned,
/// <name>_abs_err .., extrapolated`.
pub fn write_grid(rows: &[GridRow], names: &[&str], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = rows.first().map(|r| r.input.len()).unwrap_or(0);
    let mut header: Vec<String> = (0..dim).map(|i| format!("in_{i}")).collect();
    for n in names {
        header.push(format!("{n}_truth"));
        header.push(format!("{n}_learned"));
        header.push(format!("{n}_abs_err"));
    }
    header.push("extrapolated".into());
    w.write_record(&header)?;
    for r in rows {
        let mut row: Vec<String> = r.input.iter().map(|v| v.to_string()).collect();
        for j in 0..names.len() {
            row.push(r.truth[j].to_string());
            row.push(r.learned[j].to_string());
            row.push((r.learned[j] - r.truth[j]).abs().to_string());
        }
        row.push((r.extrapolated as u8).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Generic table writer for sweeps and KL reports.
pub fn write_table(header: &[String], rows: &[Vec<String>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}
