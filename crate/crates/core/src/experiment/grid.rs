//! Sweeps over ρ with a fixed switch epoch. The ρ=1 run is the baseline for
//! ΔF and ΔmAP.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::ExperimentConfig;
use super::report::{emit_report, Summary, MISSING};
use super::train::{run_on_dataset, RunOutput, TrainingMode};
use crate::error::{Error, Result};
use crate::schedule::{EpochBound, Rho, ScheduleSpec};
use crate::synth::{generate_dataset, Dataset};

pub const GRID_FILE: &str = "grid.csv";
pub const DELTA_MAP_FILE: &str = "delta_map.csv";

/// First finite phase boundary of the schedule, if any.
pub fn switch_epoch_of(spec: &ScheduleSpec) -> Option<u64> {
    spec.phases().iter().find_map(|p| match p.end_epoch {
        EpochBound::Finite(e) => Some(e),
        EpochBound::Infinite => None,
    })
}

pub fn parse_rhos(list: &str) -> Result<Vec<Rho>> {
    let rhos = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Rho>>>()?;
    if rhos.is_empty() {
        return Err(Error::Config("empty rho list".into()));
    }
    Ok(rhos)
}

pub fn rho_config(
    base: &ExperimentConfig,
    switch_epoch: u64,
    rho: Rho,
    seed: u64,
) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.schedule = ScheduleSpec::two_phase(switch_epoch, rho)?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct GridRun {
    pub seed: u64,
    pub rho: Rho,
    pub dir: PathBuf,
    pub summary: Summary,
    pub first_loss: f64,
    pub last_loss: f64,
}

#[derive(Debug, Clone)]
pub struct DeltaMapRow {
    pub rho: Rho,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; `None` with fewer than two seeds.
    pub std: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GridOutput {
    pub runs: Vec<GridRun>,
    pub delta_map: Vec<DeltaMapRow>,
}

impl GridOutput {
    pub fn run(&self, seed: u64, rho: Rho) -> Option<&GridRun> {
        self.runs.iter().find(|r| r.seed == seed && r.rho == rho)
    }
}

fn run_dir(out: &Path, seeds: &[u64], seed: u64, rho: Rho) -> PathBuf {
    let leaf = format!("rho_{rho}");
    if seeds.len() > 1 {
        out.join(format!("seed_{seed}")).join(leaf)
    } else {
        out.join(leaf)
    }
}

/// Runs every (seed, ρ) pair on up to `threads` worker threads. Each run is
/// itself sequential, so results do not depend on the thread count.
pub fn run_grid(
    base: &ExperimentConfig,
    rhos: &[Rho],
    switch_epoch: u64,
    seeds: &[u64],
    out: &Path,
    threads: usize,
) -> Result<GridOutput> {
    if rhos.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "grid needs at least one rho and one seed".into(),
        ));
    }
    base.validate()?;
    let data: Dataset = generate_dataset(&base.scene, base.n_train, base.n_val)?;
    let jobs: Vec<(u64, Rho, ExperimentConfig)> = seeds
        .iter()
        .flat_map(|&s| rhos.iter().map(move |&r| (s, r)))
        .map(|(s, r)| rho_config(base, switch_epoch, r, s).map(|c| (s, r, c)))
        .collect::<Result<_>>()?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunOutput>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((_, _, cfg)) = jobs.get(i) else {
                    break;
                };
                let res =
                    run_on_dataset(cfg, &TrainingMode::Scheduled(cfg.schedule.clone()), &data);
                results.lock().expect("no worker panicked")[i] = Some(res);
            });
        }
    });
    let outputs: Vec<RunOutput> = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<_>>()?;

    let mut runs = Vec::with_capacity(jobs.len());
    for &seed in seeds {
        let of_seed = || {
            jobs.iter()
                .zip(&outputs)
                .filter(move |((s, _, _), _)| *s == seed)
        };
        let baseline = of_seed()
            .find(|((_, r, _), _)| *r == Rho::ONE)
            .map(|(_, o)| &o.ledger);
        for ((_, rho, cfg), output) in of_seed() {
            let dir = run_dir(out, seeds, seed, *rho);
            let summary = emit_report(&dir, cfg, output, baseline)?;
            runs.push(GridRun {
                seed,
                rho: *rho,
                dir,
                summary,
                first_loss: output.records.first().map_or(f64::NAN, |r| r.mean_loss),
                last_loss: output.records.last().map_or(f64::NAN, |r| r.mean_loss),
            });
        }
    }

    let delta_map = delta_map_rows(&runs, rhos, seeds);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_grid_csv(&runs, &out.join(GRID_FILE))?;
    write_delta_map_csv(&delta_map, &out.join(DELTA_MAP_FILE))?;
    Ok(GridOutput { runs, delta_map })
}

/// ΔmAP of each ρ against ρ=1 of the same seed, averaged over seeds.
fn delta_map_rows(runs: &[GridRun], rhos: &[Rho], seeds: &[u64]) -> Vec<DeltaMapRow> {
    let map_of = |seed: u64, rho: Rho| {
        runs.iter()
            .find(|r| r.seed == seed && r.rho == rho)
            .and_then(|r| r.summary.final_map50)
    };
    rhos.iter()
        .filter(|&&r| r != Rho::ONE)
        .map(|&rho| {
            let deltas: Vec<f64> = seeds
                .iter()
                .filter_map(|&s| Some(map_of(s, rho)? - map_of(s, Rho::ONE)?))
                .collect();
            let n = deltas.len();
            let mean = deltas.iter().sum::<f64>() / n as f64;
            let std = (n > 1).then(|| {
                (deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            });
            DeltaMapRow { rho, n, mean, std }
        })
        .collect()
}

fn write_rows(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let write = || -> csv::Result<()> {
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| Error::csv(path, e))
}

fn write_grid_csv(runs: &[GridRun], path: &Path) -> Result<()> {
    let na = || MISSING.to_string();
    let rows = runs
        .iter()
        .map(|r| {
            vec![
                r.seed.to_string(),
                r.rho.to_string(),
                r.summary.final_map50.map_or_else(na, |m| m.to_string()),
                r.summary.total_flops.to_string(),
                r.summary
                    .delta_flops
                    .as_ref()
                    .map_or_else(na, |d| d.to_string()),
                r.summary.est_minutes.to_string(),
                r.first_loss.to_string(),
                r.last_loss.to_string(),
            ]
        })
        .collect();
    write_rows(
        path,
        &[
            "seed",
            "rho",
            "final_map50",
            "total_flops",
            "delta_flops",
            "est_minutes",
            "first_loss",
            "last_loss",
        ],
        rows,
    )
}

fn write_delta_map_csv(rows: &[DeltaMapRow], path: &Path) -> Result<()> {
    let rows = rows
        .iter()
        .map(|r| {
            let std = r.std.map_or_else(|| MISSING.to_string(), |s| s.to_string());
            let shown = match r.std {
                Some(s) => format!("{:+.4} ± {:.4}", r.mean, s),
                None => format!("{:+.4}", r.mean),
            };
            vec![
                r.rho.to_string(),
                r.n.to_string(),
                r.mean.to_string(),
                std,
                shown,
            ]
        })
        .collect();
    write_rows(
        path,
        &[
            "rho",
            "n",
            "mean_delta_map50",
            "std_delta_map50",
            "formatted",
        ],
        rows,
    )
}
