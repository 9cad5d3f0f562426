use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use lodric::experiment::{self, ExperimentConfig, PRESETS};

/// Multiscale LQR Riccati benchmarks: plain FEM vs LOD convergence studies.
#[derive(Parser)]
#[command(name = "lodric", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a convergence study described by a TOML config file.
    Run {
        config: PathBuf,
        /// Per-step solver log on stderr.
        #[arg(short, long)]
        verbose: bool,
    },
    /// List the built-in presets.
    Presets,
    /// Write the diffusion coefficient of a config as a grid file.
    DumpKappa { config: PathBuf, out: PathBuf },
}

fn fmt_orders(orders: &[f64]) -> String {
    orders
        .iter()
        .map(|o| format!("{o:.2}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn run(config: PathBuf, verbose: bool) -> Result<()> {
    let mut cfg = ExperimentConfig::from_file(&config)
        .with_context(|| format!("reading {}", config.display()))?;
    cfg.solver.verbose |= verbose;
    println!(
        "preset {} on {}, reference level {}, coarse levels {}..={}, T = {}, N_t = {}",
        cfg.preset,
        cfg.domain.name(),
        cfg.reference_level,
        cfg.coarse_min,
        cfg.coarse_max,
        cfg.solver.final_time,
        cfg.solver.n_steps
    );
    let rec = experiment::run_experiment_to_file(&cfg)?;
    println!(
        "reference: n = {}, rank = {}, solve {:.2} s",
        rec.n_reference, rec.rank_reference, rec.time_solve_reference
    );
    println!(
        "{:>5} {:>9} {:>6} {:>3} {:>11} {:>11} {:>11} {:>11} {:>8} {:>8} {:>5}",
        "level", "H", "n", "k", "L2 fem", "L2 lod", "V fem", "V lod", "t_lod", "t_fem", "rank"
    );
    for r in &rec.levels {
        println!(
            "{:>5} {:>9.6} {:>6} {:>3} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e} {:>8.2} {:>8.2} {:>5}",
            r.level,
            r.h,
            r.n_coarse,
            r.patch_radius,
            r.err_l2_fem,
            r.err_l2_lod,
            r.err_v_fem,
            r.err_v_lod,
            r.time_lod_setup + r.time_solve_lod,
            r.time_solve_fem,
            r.rank_final
        );
    }
    if rec.levels.len() > 1 {
        println!("orders L2 fem: {}", fmt_orders(&rec.orders(|r| r.err_l2_fem)));
        println!("orders L2 lod: {}", fmt_orders(&rec.orders(|r| r.err_l2_lod)));
        println!("orders V  fem: {}", fmt_orders(&rec.orders(|r| r.err_v_fem)));
        println!("orders V  lod: {}", fmt_orders(&rec.orders(|r| r.err_v_lod)));
    }
    if let Some(path) = &cfg.csv {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn dump_kappa(config: PathBuf, out: PathBuf) -> Result<()> {
    let cfg = ExperimentConfig::from_file(&config)
        .with_context(|| format!("reading {}", config.display()))?;
    let grid = experiment::kappa_grid(&cfg)?;
    let mut w = BufWriter::new(
        File::create(&out).with_context(|| format!("creating {}", out.display()))?,
    );
    grid.write_grid(&mut w)?;
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, verbose } => run(config, verbose),
        Command::Presets => {
            for (name, desc) in PRESETS {
                println!("{name:<14} {desc}");
            }
            Ok(())
        }
        Command::DumpKappa { config, out } => dump_kappa(config, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
