//! Run outputs: `curves.csv`, `ledger.csv`, `summary.csv`, `checkpoint.bin`,
//! plus the `config.toml` the run was produced from.

use std::path::Path;

use num_bigint::{BigInt, BigUint};

use super::config::ExperimentConfig;
use super::train::{EpochRecord, RunOutput};
use crate::error::{Error, Result};
use crate::flops::{delta_flops, estimate_training_time, FlopsLedger};
use crate::nn::checkpoint;
use crate::schedule::ScheduleSpec;

pub const CURVES_FILE: &str = "curves.csv";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";

/// Written in place of fields that need a baseline or validation data.
pub const MISSING: &str = "NA";

const CURVES_HEADER: [&str; 6] = [
    "epoch",
    "frozen",
    "mean_loss",
    "lr",
    "cum_flops",
    "val_map50",
];
const SUMMARY_HEADER: [&str; 6] = [
    "epochs",
    "schedule",
    "final_map50",
    "total_flops",
    "delta_flops",
    "est_minutes",
];

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_curves(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut write = || -> csv::Result<()> {
            w.write_record(CURVES_HEADER)?;
            for r in records {
                w.write_record([
                    r.epoch.to_string(),
                    u8::from(r.frozen).to_string(),
                    r.mean_loss.to_string(),
                    r.lr.to_string(),
                    r.cum_flops.to_string(),
                    r.val_map50.map_or_else(String::new, |m| m.to_string()),
                ])?;
            }
            w.flush()?;
            Ok(())
        };
        write().map_err(|e| Error::csv(path, e))?;
    }
    write_file(path, &buf)
}

pub fn read_curves(path: &Path) -> Result<Vec<EpochRecord>> {
    let bad = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        if row.len() != CURVES_HEADER.len() {
            return Err(bad(format!("expected {} columns", CURVES_HEADER.len())));
        }
        let field = |i: usize| bad(format!("column {} = `{}`", CURVES_HEADER[i], &row[i]));
        out.push(EpochRecord {
            epoch: row[0].parse().map_err(|_| field(0))?,
            frozen: match &row[1] {
                "0" => false,
                "1" => true,
                _ => return Err(field(1)),
            },
            mean_loss: row[2].parse().map_err(|_| field(2))?,
            lr: row[3].parse().map_err(|_| field(3))?,
            cum_flops: row[4].parse().map_err(|_| field(4))?,
            val_map50: if row[5].is_empty() {
                None
            } else {
                Some(row[5].parse().map_err(|_| field(5))?)
            },
        });
    }
    Ok(out)
}

pub fn describe_schedule(spec: &ScheduleSpec) -> String {
    spec.phases()
        .iter()
        .map(|p| format!("{}:{}", p.end_epoch, p.rho))
        .collect::<Vec<_>>()
        .join(";")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub epochs: u64,
    pub schedule: String,
    pub final_map50: Option<f64>,
    pub total_flops: BigUint,
    pub delta_flops: Option<BigInt>,
    pub est_minutes: f64,
}

impl Summary {
    pub fn compute(
        cfg: &ExperimentConfig,
        records: &[EpochRecord],
        ledger: &FlopsLedger,
        baseline: Option<&FlopsLedger>,
    ) -> Result<Self> {
        Ok(Self {
            epochs: cfg.total_epochs,
            schedule: describe_schedule(&cfg.schedule),
            final_map50: records.last().and_then(|r| r.val_map50),
            total_flops: ledger.total_flops().clone(),
            delta_flops: baseline.map(|b| delta_flops(ledger, b)).transpose()?,
            est_minutes: estimate_training_time(&cfg.time_model, &cfg.schedule, cfg.total_epochs),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let opt = |v: Option<String>| v.unwrap_or_else(|| MISSING.to_string());
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            let mut write = || -> csv::Result<()> {
                w.write_record(SUMMARY_HEADER)?;
                w.write_record([
                    self.epochs.to_string(),
                    self.schedule.clone(),
                    opt(self.final_map50.map(|m| m.to_string())),
                    self.total_flops.to_string(),
                    opt(self.delta_flops.as_ref().map(BigInt::to_string)),
                    self.est_minutes.to_string(),
                ])?;
                w.flush()?;
                Ok(())
            };
            write().map_err(|e| Error::csv(path, e))?;
        }
        write_file(path, &buf)
    }
}

/// Writes every run artifact into `dir` and returns the summary.
pub fn emit_report(
    dir: &Path,
    cfg: &ExperimentConfig,
    run: &RunOutput,
    baseline: Option<&FlopsLedger>,
) -> Result<Summary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    write_curves(&run.records, &dir.join(CURVES_FILE))?;
    run.ledger.save_csv(&dir.join(LEDGER_FILE))?;
    checkpoint::save(&run.detector, &dir.join(CHECKPOINT_FILE))?;
    let summary = Summary::compute(cfg, &run.records, &run.ledger, baseline)?;
    summary.write(&dir.join(SUMMARY_FILE))?;
    Ok(summary)
}

/// Recomputes `summary.csv` of a finished run against another run's ledger.
pub fn report_from_dirs(run_dir: &Path, baseline_dir: Option<&Path>) -> Result<Summary> {
    let cfg = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))?;
    let records = read_curves(&run_dir.join(CURVES_FILE))?;
    let ledger = FlopsLedger::read_csv(&run_dir.join(LEDGER_FILE))?;
    let baseline = baseline_dir
        .map(|d| FlopsLedger::read_csv(&d.join(LEDGER_FILE)))
        .transpose()?;
    let summary = Summary::compute(&cfg, &records, &ledger, baseline.as_ref())?;
    summary.write(&run_dir.join(SUMMARY_FILE))?;
    Ok(summary)
}
