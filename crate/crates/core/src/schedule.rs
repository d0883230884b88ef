//! Freezing schedulers and the learning-rate schedule.
//!
//! A freezing scheduler maps a 0-indexed epoch to a [`FreezeSignal`]:
//! `0` lets the backbone update, `1` freezes it for the whole epoch.

use std::fmt;
use std::num::NonZeroU64;
use std::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FreezeSignal {
    Unfrozen = 0,
    Frozen = 1,
}

impl FreezeSignal {
    pub fn value(self) -> u8 {
        self as u8
    }

    pub fn from_value(v: u8) -> Result<Self> {
        match v {
            0 => Ok(FreezeSignal::Unfrozen),
            1 => Ok(FreezeSignal::Frozen),
            other => Err(Error::Config(format!(
                "freeze signal must be 0 or 1, got {other}"
            ))),
        }
    }

    pub fn is_frozen(self) -> bool {
        self == FreezeSignal::Frozen
    }
}

/// Period of the step scheduler. `Infinite` is a distinct sentinel, never a
/// large number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rho {
    Finite(NonZeroU64),
    Infinite,
}

impl Rho {
    pub const ONE: Rho = Rho::Finite(NonZeroU64::MIN);

    pub fn finite(rho: u64) -> Result<Self> {
        NonZeroU64::new(rho)
            .map(Rho::Finite)
            .ok_or_else(|| Error::Config("rho must be >= 1".into()))
    }
}

impl fmt::Display for Rho {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rho::Finite(r) => write!(f, "{r}"),
            Rho::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Rho {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "∞" => Ok(Rho::Infinite),
            n => {
                let v = n
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("invalid rho `{s}`")))?;
                Rho::finite(v)
            }
        }
    }
}

/// End of a schedule phase (exclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EpochBound {
    Finite(u64),
    Infinite,
}

impl EpochBound {
    fn contains(self, epoch: u64) -> bool {
        match self {
            EpochBound::Finite(end) => epoch < end,
            EpochBound::Infinite => true,
        }
    }
}

impl fmt::Display for EpochBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EpochBound::Finite(e) => write!(f, "{e}"),
            EpochBound::Infinite => f.write_str("inf"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum IntOrInf {
    Int(u64),
    Str(String),
}

fn parse_int_or_inf<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<u64>, D::Error> {
    match IntOrInf::deserialize(d)? {
        IntOrInf::Int(v) => Ok(Some(v)),
        IntOrInf::Str(s) if s == "inf" => Ok(None),
        IntOrInf::Str(s) => Err(de::Error::custom(format!(
            "expected an integer or \"inf\", got `{s}`"
        ))),
    }
}

impl Serialize for Rho {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Rho::Finite(r) => s.serialize_u64(r.get()),
            Rho::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Rho {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match parse_int_or_inf(d)? {
            Some(v) => Rho::finite(v).map_err(de::Error::custom),
            None => Ok(Rho::Infinite),
        }
    }
}

impl Serialize for EpochBound {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            EpochBound::Finite(e) => s.serialize_u64(*e),
            EpochBound::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for EpochBound {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(parse_int_or_inf(d)?.map_or(EpochBound::Infinite, EpochBound::Finite))
    }
}

/// Anything that can decide, per epoch, whether the backbone is frozen.
pub trait FreezingScheduler {
    fn signal(&self, epoch: u64) -> FreezeSignal;
}

/// Step Freezing Scheduler: the backbone updates only on epochs divisible by ρ.
pub fn step_freeze_signal(epoch: u64, rho: Rho) -> FreezeSignal {
    match rho {
        Rho::Finite(r) if epoch % r.get() == 0 => FreezeSignal::Unfrozen,
        _ => FreezeSignal::Frozen,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepScheduler(pub Rho);

impl FreezingScheduler for StepScheduler {
    fn signal(&self, epoch: u64) -> FreezeSignal {
        step_freeze_signal(epoch, self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub end_epoch: EpochBound,
    pub rho: Rho,
}

/// Ordered phases; the first phase whose `end_epoch` exceeds the epoch wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct ScheduleSpec {
    phases: Vec<Phase>,
}

#[derive(Serialize, Deserialize)]
struct RawSchedule {
    phases: Vec<Phase>,
}

impl TryFrom<RawSchedule> for ScheduleSpec {
    type Error = Error;

    fn try_from(raw: RawSchedule) -> Result<Self> {
        ScheduleSpec::new(raw.phases)
    }
}

impl From<ScheduleSpec> for RawSchedule {
    fn from(s: ScheduleSpec) -> Self {
        RawSchedule { phases: s.phases }
    }
}

impl ScheduleSpec {
    pub fn new(phases: Vec<Phase>) -> Result<Self> {
        let Some(last) = phases.last() else {
            return Err(Error::Config("schedule needs at least one phase".into()));
        };
        if last.end_epoch != EpochBound::Infinite {
            return Err(Error::Config("last schedule phase must end at inf".into()));
        }
        if phases.windows(2).any(|w| w[0].end_epoch >= w[1].end_epoch) {
            return Err(Error::Config(
                "schedule phase ends must be strictly increasing".into(),
            ));
        }
        Ok(Self { phases })
    }

    /// One phase covering every epoch.
    pub fn constant(rho: Rho) -> Self {
        Self {
            phases: vec![Phase {
                end_epoch: EpochBound::Infinite,
                rho,
            }],
        }
    }

    /// Full fine-tuning (ρ = 1) until `switch_epoch`, then step freezing with `rho`.
    pub fn two_phase(switch_epoch: u64, rho: Rho) -> Result<Self> {
        Self::new(vec![
            Phase {
                end_epoch: EpochBound::Finite(switch_epoch),
                rho: Rho::ONE,
            },
            Phase {
                end_epoch: EpochBound::Infinite,
                rho,
            },
        ])
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    pub fn rho_at(&self, epoch: u64) -> Rho {
        self.phases
            .iter()
            .find(|p| p.end_epoch.contains(epoch))
            .map(|p| p.rho)
            .expect("last phase is unbounded")
    }
}

pub fn phase_freeze_signal(epoch: u64, spec: &ScheduleSpec) -> FreezeSignal {
    step_freeze_signal(epoch, spec.rho_at(epoch))
}

impl FreezingScheduler for ScheduleSpec {
    fn signal(&self, epoch: u64) -> FreezeSignal {
        phase_freeze_signal(epoch, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrConfig {
    pub base_lr: f64,
    pub warmup_iters: u64,
    pub warmup_end_fraction: f64,
    pub decay_epoch: u64,
    pub decay_factor: f64,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.005,
            warmup_iters: 500,
            warmup_end_fraction: 1.0 / 3.0,
            decay_epoch: 12,
            decay_factor: 0.25,
        }
    }
}

impl LrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("lr.base_lr must be > 0".into()));
        }
        if !(self.warmup_end_fraction > 0.0 && self.warmup_end_fraction <= 1.0) {
            return Err(Error::Config(
                "lr.warmup_end_fraction must be in (0, 1]".into(),
            ));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("lr.decay_factor must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `warmup_end_fraction * base_lr` over the first
/// `warmup_iters` iterations, then `base_lr`; scaled by `decay_factor` for
/// epochs after `decay_epoch`.
pub fn lr_at(iteration: u64, epoch: u64, cfg: &LrConfig) -> f64 {
    let mut lr = if iteration < cfg.warmup_iters {
        cfg.base_lr * cfg.warmup_end_fraction * (iteration + 1) as f64 / cfg.warmup_iters as f64
    } else {
        cfg.base_lr
    };
    if epoch > cfg.decay_epoch {
        lr *= cfg.decay_factor;
    }
    lr
}
