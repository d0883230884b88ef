//! `dbf`: run, report on, and sweep dynamic backbone freezing experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dbf::experiment::{
    emit_report, parse_rhos, report_from_dirs, run_experiment, run_grid, switch_epoch_of,
    ExperimentConfig, Summary,
};
use dbf::flops::FlopsLedger;
use dbf::schedule::Rho;

#[derive(Parser)]
#[command(name = "dbf", version, about = "Dynamic backbone freezing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write curves, ledger, summary and checkpoint.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Ledger CSV of a baseline run, for the FLOPs delta.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Output directory; defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute a finished run's summary against a baseline run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Sweep ρ values with a fixed switch epoch; ρ=1 is the baseline.
    Grid {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated periods, e.g. `1,2,5,10,inf`.
        #[arg(long)]
        rhos: String,
        /// Epoch at which ρ takes over from full training; defaults to the
        /// first phase boundary of the config schedule.
        #[arg(long)]
        switch: Option<u64>,
        /// Comma-separated training seeds; defaults to the config seed.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the default desk-scale config as TOML.
    Init {
        #[arg(long, default_value = "inf")]
        rho: String,
    },
}

fn print_summary(dir: &Path, s: &Summary) {
    let opt = |v: Option<String>| v.unwrap_or_else(|| "NA".into());
    println!(
        "{}: schedule {} | final mAP@50 {} | FLOPs {} | delta {} | est. {} min",
        dir.display(),
        s.schedule,
        opt(s.final_map50.map(|m| format!("{m:.4}"))),
        s.total_flops,
        opt(s.delta_flops.as_ref().map(ToString::to_string)),
        s.est_minutes
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            baseline,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let baseline = baseline
                .map(|p| FlopsLedger::read_csv(&p))
                .transpose()
                .context("reading baseline ledger")?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let output = run_experiment(&cfg)?;
            let summary = emit_report(&out, &cfg, &output, baseline.as_ref())?;
            print_summary(&out, &summary);
        }
        Command::Report { run, baseline } => {
            let summary = report_from_dirs(&run, Some(&baseline))?;
            print_summary(&run, &summary);
        }
        Command::Grid {
            config,
            rhos,
            switch,
            seeds,
            out,
            threads,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let rhos = parse_rhos(&rhos)?;
            let Some(switch) = switch.or_else(|| switch_epoch_of(&cfg.schedule)) else {
                bail!("config schedule has no finite phase boundary; pass --switch");
            };
            let seeds = match seeds {
                Some(list) => list
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<u64>()
                            .with_context(|| format!("invalid seed `{s}`"))
                    })
                    .collect::<Result<Vec<_>>>()?,
                None => vec![cfg.seed],
            };
            let threads = threads
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from));
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let grid = run_grid(&cfg, &rhos, switch, &seeds, &out, threads)?;
            for r in &grid.runs {
                print_summary(&r.dir, &r.summary);
            }
            for row in &grid.delta_map {
                match row.std {
                    Some(s) => println!(
                        "rho {}: delta mAP@50 {:+.4} ± {:.4} (n={})",
                        row.rho, row.mean, s, row.n
                    ),
                    None => println!(
                        "rho {}: delta mAP@50 {:+.4} (n={})",
                        row.rho, row.mean, row.n
                    ),
                }
            }
        }
        Command::Init { rho } => {
            let rho: Rho = rho.parse()?;
            print!("{}", ExperimentConfig::desk(rho).to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
