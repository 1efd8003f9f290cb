use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::info;
use momentflow_core::config::{RunConfig, Scale};
use momentflow_core::pipeline::{self, Sweep};
use momentflow_core::{io, CaseId};

/// Learn hidden physics in stochastic differential equations from
/// ensemble moments.
#[derive(Parser)]
#[command(name = "momentflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Case study (colloidal, lotka_volterra, sir); needed without --config.
    case: Option<String>,
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Data size preset: desk or paper.
    #[arg(long)]
    scale: Option<String>,
    /// Propagation method: linearization, ut2m or ut4m.
    #[arg(long)]
    propagator: Option<String>,
    /// Base seed for data generation, splitting and initialization.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate ensembles and write the moment dataset.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the hidden-physics networks on a moment file.
    Train {
        #[command(flatten)]
        common: Common,
        /// Moment file written by `generate`.
        #[arg(long)]
        moments: PathBuf,
    },
    /// Score checkpoints against the ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory holding drift.ckpt / diffusion.ckpt.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Moment file used for training (flags extrapolated grid points).
        #[arg(long)]
        moments: Option<PathBuf>,
    },
    /// Run generate, train and evaluate end to end, or a parameter sweep.
    Reproduce {
        #[command(flatten)]
        common: Common,
        /// replicates, datasize, propagator or sampling-time.
        #[arg(long)]
        sweep: Option<String>,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn build_config(c: &Common) -> Result<(RunConfig, Scale), Failure> {
    let scale = c.scale.as_deref().map(Scale::parse).transpose().map_err(usage)?.unwrap_or(Scale::Desk);
    let mut text = String::new();
    // flags go first so they win over the file's own `case` / `scale`
    if let Some(s) = &c.scale {
        text.push_str(&format!("scale = {s}\n"));
    }
    match (&c.config, &c.case) {
        (Some(p), case) => {
            let body = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(usage)?;
            if let Some(case) = case {
                text.push_str(&format!("case = {}\n", CaseId::parse(case).map_err(usage)?.name()));
            }
            text.push_str(&body);
        }
        (None, Some(case)) => text.push_str(&format!("case = {case}\n")),
        (None, None) => return Err(usage(anyhow::anyhow!("give a case study or --config"))),
    }
    let mut cfg = RunConfig::parse(&text).map_err(usage)?;
    if let Some(p) = &c.propagator {
        cfg.set("propagator", p).map_err(usage)?;
    }
    if let Some(seed) = c.seed {
        pipeline::reseed(&mut cfg, seed);
    }
    cfg.validate().map_err(usage)?;
    Ok((cfg, scale))
}

fn out_dir(c: &Common, cfg: &RunConfig) -> PathBuf {
    c.out.clone().unwrap_or_else(|| Path::new("runs").join(cfg.case.name()))
}

fn print_report(r: &pipeline::EvalReport) {
    for (n, v) in r.names.iter().zip(&r.rmse) {
        println!("rmse {n} = {v:.4e}");
    }
    match r.kl_total() {
        Some(kl) => println!("kl validation = {kl:.4e} (two-seed control {:.4e})", r.control_total()),
        None => println!("kl validation failed (control {:.4e})", r.control_total()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate { common } => {
            let (cfg, _) = build_config(&common)?;
            let out = out_dir(&common, &cfg);
            let (ds, stats) = pipeline::generate_to_dir(&cfg, &out).map_err(runtime)?;
            println!(
                "{}: {} groups, {} records, {} flagged replicates, clamp rate {:.3e} -> {}",
                cfg.case,
                ds.groups.len(),
                ds.record_count(),
                stats.flagged,
                stats.clamp_rate(),
                out.join("moments.csv").display()
            );
        }
        Command::Train { common, moments } => {
            let (cfg, _) = build_config(&common)?;
            let out = out_dir(&common, &cfg);
            let ds = io::read_moments(&moments).with_context(|| format!("reading {}", moments.display())).map_err(runtime)?;
            let model = pipeline::train_to_dir(&cfg, &ds, &out).map_err(runtime)?;
            for st in &model.stages {
                println!(
                    "{} stage: {} epochs, best epoch {}, validation loss {:.4e}",
                    st.stage.name(),
                    st.history.len(),
                    st.best_epoch,
                    st.best_val_loss
                );
            }
            println!("checkpoints -> {}", out.display());
        }
        Command::Evaluate { common, checkpoints, moments } => {
            let (cfg, _) = build_config(&common)?;
            let out = out_dir(&common, &cfg);
            let report = pipeline::evaluate_dir(&cfg, &checkpoints, moments.as_deref(), &out).map_err(runtime)?;
            print_report(&report);
        }
        Command::Reproduce { common, sweep } => {
            let (cfg, scale) = build_config(&common)?;
            let out = out_dir(&common, &cfg);
            match sweep {
                Some(s) => {
                    let which = Sweep::parse(&s).map_err(usage)?;
                    let rows = pipeline::sweep(&cfg, which, scale, &out).map_err(runtime)?;
                    for r in rows {
                        let v: Vec<String> = r.rmse.iter().map(|x| format!("{x:.4e}")).collect();
                        println!("{} = {}: rmse {}", which.name(), r.value, v.join(" "));
                    }
                }
                None => {
                    info!("reproducing {} at {} scale", cfg.case, scale.name());
                    let outcome = pipeline::reproduce(&cfg, &out).map_err(runtime)?;
                    print_report(&outcome.report);
                    println!("run directory -> {}", out.display());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
