//! Exact training-cost accounting.
//!
//! Per sample and epoch, every layer pays its forward FLOPs; a trained layer
//! additionally pays a backward pass costed at twice its forward FLOPs. During
//! a frozen epoch the backbone still runs forward (the detach is free) but
//! pays no backward cost. All counts are unbounded integers.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use num_bigint::{BigInt, BigUint};
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Detector, Group, LayerId, LayerSpec};
use crate::schedule::{phase_freeze_signal, FreezeSignal, ScheduleSpec};

pub const BACKWARD_FACTOR: u32 = 2;

/// Forward FLOPs of one layer for one sample.
///
/// * dense: `2 * in * out + out` (one multiply-add is 2 FLOPs, plus the bias add)
/// * conv2d: `2 * in_ch * k * k * out_ch * h_out * w_out + out_ch * h_out * w_out`
/// * relu, maxpool2d: 1 per output element
/// * flatten: 0 (a view)
pub fn layer_forward_flops(spec: &LayerSpec, input_shape: &[usize]) -> Result<BigUint> {
    let out = spec
        .output_shape(input_shape)
        .map_err(|msg| Error::InvalidShape {
            op: "layer_forward_flops",
            msg,
        })?;
    let big = |v: usize| BigUint::from(v);
    let out_elems = big(out.iter().product());
    Ok(match spec {
        LayerSpec::Dense { inputs, outputs } => {
            big(2) * big(*inputs) * big(*outputs) + big(*outputs)
        }
        LayerSpec::Conv2d {
            in_channels,
            kernel,
            ..
        } => big(2) * big(*in_channels) * big(*kernel) * big(*kernel) * &out_elems + &out_elems,
        LayerSpec::Relu | LayerSpec::MaxPool2d { .. } => out_elems,
        LayerSpec::Flatten => BigUint::zero(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerFlopsSpec {
    pub layer_id: LayerId,
    pub group: Group,
    pub forward_flops_per_sample: BigUint,
}

pub fn model_flops(detector: &Detector) -> Result<Vec<LayerFlopsSpec>> {
    detector
        .layers()
        .iter()
        .map(|l| {
            Ok(LayerFlopsSpec {
                layer_id: l.id,
                group: l.group,
                forward_flops_per_sample: layer_forward_flops(&l.spec, &l.input_shape)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroupFlops {
    pub backbone: BigUint,
    pub neck: BigUint,
    pub head: BigUint,
}

impl GroupFlops {
    pub fn get_mut(&mut self, group: Group) -> &mut BigUint {
        match group {
            Group::Backbone => &mut self.backbone,
            Group::Neck => &mut self.neck,
            Group::Head => &mut self.head,
        }
    }

    pub fn total(&self) -> BigUint {
        &self.backbone + &self.neck + &self.head
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochFlops {
    pub epoch: u64,
    pub freeze: FreezeSignal,
    pub n_samples: u64,
    pub forward: GroupFlops,
    pub backward: GroupFlops,
}

impl EpochFlops {
    pub fn total(&self) -> BigUint {
        self.forward.total() + self.backward.total()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopsLedger {
    records: Vec<EpochFlops>,
    epochs: BTreeSet<u64>,
    total: BigUint,
}

impl FlopsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[EpochFlops] {
        &self.records
    }

    pub fn record_epoch(
        &mut self,
        epoch: u64,
        freeze: FreezeSignal,
        model: &[LayerFlopsSpec],
        n_samples: u64,
    ) -> Result<()> {
        if self.epochs.contains(&epoch) {
            return Err(Error::DuplicateEpoch(epoch));
        }
        let n = BigUint::from(n_samples);
        let mut forward = GroupFlops::default();
        let mut backward = GroupFlops::default();
        for layer in model {
            let fwd = &n * &layer.forward_flops_per_sample;
            let trained = !(layer.group == Group::Backbone && freeze.is_frozen());
            if trained {
                *backward.get_mut(layer.group) += &fwd * BACKWARD_FACTOR;
            }
            *forward.get_mut(layer.group) += fwd;
        }
        self.push(EpochFlops {
            epoch,
            freeze,
            n_samples,
            forward,
            backward,
        });
        Ok(())
    }

    fn push(&mut self, record: EpochFlops) {
        self.total += record.total();
        self.epochs.insert(record.epoch);
        self.records.push(record);
    }

    pub fn total_flops(&self) -> &BigUint {
        &self.total
    }

    /// Running total after each record, in record order.
    pub fn cumulative(&self) -> Vec<BigUint> {
        let mut acc = BigUint::zero();
        self.records
            .iter()
            .map(|r| {
                acc += r.total();
                acc.clone()
            })
            .collect()
    }

    pub const CSV_HEADER: [&'static str; 10] = [
        "epoch",
        "frozen",
        "n_samples",
        "fwd_backbone",
        "bwd_backbone",
        "fwd_neck",
        "bwd_neck",
        "fwd_head",
        "bwd_head",
        "cum_total",
    ];

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::CSV_HEADER)?;
        for (r, cum) in self.records.iter().zip(self.cumulative()) {
            out.write_record([
                r.epoch.to_string(),
                r.freeze.value().to_string(),
                r.n_samples.to_string(),
                r.forward.backbone.to_string(),
                r.backward.backbone.to_string(),
                r.forward.neck.to_string(),
                r.backward.neck.to_string(),
                r.forward.head.to_string(),
                r.backward.head.to_string(),
                cum.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a ledger written by [`FlopsLedger::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self> {
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            msg,
        };
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let header = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
        if header.iter().ne(Self::CSV_HEADER) {
            return Err(parse_err(format!("unexpected header {header:?}")));
        }
        let mut ledger = Self::new();
        for row in reader.records() {
            let row = row.map_err(|e| Error::csv(path, e))?;
            let big = |i: usize| -> Result<BigUint> {
                row[i].parse::<BigUint>().map_err(|_| {
                    parse_err(format!("column {} = `{}`", Self::CSV_HEADER[i], &row[i]))
                })
            };
            let int = |i: usize| -> Result<u64> {
                row[i].parse::<u64>().map_err(|_| {
                    parse_err(format!("column {} = `{}`", Self::CSV_HEADER[i], &row[i]))
                })
            };
            let epoch = int(0)?;
            if ledger.epochs.contains(&epoch) {
                return Err(Error::DuplicateEpoch(epoch));
            }
            let freeze =
                FreezeSignal::from_value(int(1)? as u8).map_err(|e| parse_err(e.to_string()))?;
            let record = EpochFlops {
                epoch,
                freeze,
                n_samples: int(2)?,
                forward: GroupFlops {
                    backbone: big(3)?,
                    neck: big(5)?,
                    head: big(7)?,
                },
                backward: GroupFlops {
                    backbone: big(4)?,
                    neck: big(6)?,
                    head: big(8)?,
                },
            };
            ledger.push(record);
            if ledger.total != big(9)? {
                return Err(parse_err(format!("cum_total mismatch at epoch {epoch}")));
            }
        }
        Ok(ledger)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|e| Error::csv(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// `total(candidate) - total(baseline)`; negative means the candidate is cheaper.
///
/// Both ledgers must cover the same epochs with the same sample counts and the
/// same forward cost (i.e. the same model), otherwise the comparison is refused.
pub fn delta_flops(candidate: &FlopsLedger, baseline: &FlopsLedger) -> Result<BigInt> {
    if candidate.records.len() != baseline.records.len() {
        return Err(Error::LedgerMismatch(format!(
            "{} epochs vs {} epochs",
            candidate.records.len(),
            baseline.records.len()
        )));
    }
    for (c, b) in candidate.records.iter().zip(&baseline.records) {
        if c.epoch != b.epoch || c.n_samples != b.n_samples {
            return Err(Error::LedgerMismatch(format!(
                "epoch {} (N={}) vs epoch {} (N={})",
                c.epoch, c.n_samples, b.epoch, b.n_samples
            )));
        }
        if c.forward != b.forward {
            return Err(Error::LedgerMismatch(format!(
                "forward cost differs at epoch {}",
                c.epoch
            )));
        }
    }
    Ok(BigInt::from(candidate.total.clone()) - BigInt::from(baseline.total.clone()))
}

/// Minutes per epoch with and without backbone updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeModel {
    pub t_unfrozen_epoch: f64,
    pub t_frozen_epoch: f64,
}

impl Default for TimeModel {
    fn default() -> Self {
        Self {
            t_unfrozen_epoch: 23.0,
            t_frozen_epoch: 16.0,
        }
    }
}

impl TimeModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_unfrozen_epoch > 0.0 && self.t_frozen_epoch > 0.0) {
            return Err(Error::Config("time model minutes must be > 0".into()));
        }
        if self.t_frozen_epoch > self.t_unfrozen_epoch {
            return Err(Error::Config(
                "a frozen epoch cannot take longer than an unfrozen one".into(),
            ));
        }
        Ok(())
    }

    pub fn epoch_minutes(&self, freeze: FreezeSignal) -> f64 {
        match freeze {
            FreezeSignal::Unfrozen => self.t_unfrozen_epoch,
            FreezeSignal::Frozen => self.t_frozen_epoch,
        }
    }
}

pub fn estimate_training_time(tm: &TimeModel, spec: &ScheduleSpec, total_epochs: u64) -> f64 {
    (0..total_epochs)
        .map(|e| tm.epoch_minutes(phase_freeze_signal(e, spec)))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::Rho;

    fn big(v: u64) -> BigUint {
        BigUint::from(v)
    }

    fn two_layer(backbone: u64, rest: u64) -> Vec<LayerFlopsSpec> {
        vec![
            LayerFlopsSpec {
                layer_id: LayerId(0),
                group: Group::Backbone,
                forward_flops_per_sample: big(backbone),
            },
            LayerFlopsSpec {
                layer_id: LayerId(1),
                group: Group::Head,
                forward_flops_per_sample: big(rest),
            },
        ]
    }

    #[test]
    fn counting_convention() {
        let dense = LayerSpec::Dense {
            inputs: 3,
            outputs: 2,
        };
        assert_eq!(layer_forward_flops(&dense, &[3]).unwrap(), big(14));
        assert_eq!(
            layer_forward_flops(&LayerSpec::Relu, &[10]).unwrap(),
            big(10)
        );
        let conv = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 2,
            stride: 1,
        };
        assert_eq!(layer_forward_flops(&conv, &[1, 3, 3]).unwrap(), big(36));
        let pool = LayerSpec::MaxPool2d {
            kernel: 2,
            stride: None,
        };
        assert_eq!(layer_forward_flops(&pool, &[2, 4, 4]).unwrap(), big(8));
        assert_eq!(
            layer_forward_flops(&LayerSpec::Flatten, &[2, 4, 4]).unwrap(),
            big(0)
        );
        assert!(layer_forward_flops(&dense, &[4]).is_err());
    }

    #[test]
    fn record_epoch_examples() {
        let model = two_layer(100, 50);
        let mut ledger = FlopsLedger::new();
        ledger
            .record_epoch(0, FreezeSignal::Unfrozen, &model, 10)
            .unwrap();
        assert_eq!(ledger.total_flops(), &big(4500));
        ledger
            .record_epoch(1, FreezeSignal::Frozen, &model, 10)
            .unwrap();
        assert_eq!(ledger.records()[1].total(), big(2500));
        assert_eq!(ledger.total_flops(), &big(7000));

        let before = ledger.total_flops().clone();
        ledger
            .record_epoch(2, FreezeSignal::Unfrozen, &model, 0)
            .unwrap();
        assert_eq!(ledger.total_flops(), &before);

        assert!(matches!(
            ledger.record_epoch(1, FreezeSignal::Frozen, &model, 10),
            Err(Error::DuplicateEpoch(1))
        ));
    }

    #[test]
    fn delta_identity_and_mismatch() {
        let model = two_layer(100, 50);
        let mut a = FlopsLedger::new();
        let mut b = FlopsLedger::new();
        a.record_epoch(0, FreezeSignal::Unfrozen, &model, 10)
            .unwrap();
        b.record_epoch(0, FreezeSignal::Unfrozen, &model, 11)
            .unwrap();
        assert_eq!(delta_flops(&a, &a).unwrap(), BigInt::zero());
        assert!(matches!(delta_flops(&a, &b), Err(Error::LedgerMismatch(_))));
        let mut c = FlopsLedger::new();
        c.record_epoch(0, FreezeSignal::Unfrozen, &two_layer(99, 50), 10)
            .unwrap();
        assert!(delta_flops(&a, &c).is_err());
        assert!(delta_flops(&a, &FlopsLedger::new()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let model = two_layer(123_456_789_012, 50);
        let mut a = FlopsLedger::new();
        for e in 0..5 {
            let f = if e % 2 == 0 {
                FreezeSignal::Unfrozen
            } else {
                FreezeSignal::Frozen
            };
            a.record_epoch(e, f, &model, 1_000_000_007).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.csv");
        a.save_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,frozen,n_samples,fwd_backbone,bwd_backbone,fwd_neck,bwd_neck,fwd_head,bwd_head,cum_total\n"));
        let b = FlopsLedger::read_csv(&path).unwrap();
        assert_eq!(b.total_flops(), a.total_flops());
        assert_eq!(delta_flops(&b, &a).unwrap(), BigInt::zero());
        assert_eq!(b, a);
    }

    #[test]
    fn table4_rows() {
        let tm = TimeModel::default();
        let row = |spec: ScheduleSpec| estimate_training_time(&tm, &spec, 400);
        let two = |r: Rho| ScheduleSpec::two_phase(50, r).unwrap();
        assert_eq!(row(ScheduleSpec::constant(Rho::ONE)), 9200.0);
        assert_eq!(row(ScheduleSpec::constant(Rho::Infinite)), 6400.0);
        assert_eq!(row(two(Rho::finite(2).unwrap())), 7975.0);
        assert_eq!(row(two(Rho::finite(5).unwrap())), 7240.0);
        assert_eq!(row(two(Rho::finite(10).unwrap())), 6995.0);
        assert_eq!(row(two(Rho::Infinite)), 6750.0);
    }

    #[test]
    fn time_model_validation() {
        assert!(TimeModel::default().validate().is_ok());
        assert!(TimeModel {
            t_unfrozen_epoch: 10.0,
            t_frozen_epoch: 11.0
        }
        .validate()
        .is_err());
    }
}
