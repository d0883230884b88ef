use std::collections::BTreeSet;

use num_bigint::BigUint;
use rand::seq::SliceRandom;

use super::config::ExperimentConfig;
use crate::autodiff::{backward, ParamId, Tape, Tensor};
use crate::error::Result;
use crate::eval::{self, EvalReport, GroundTruth};
use crate::flops::{model_flops, FlopsLedger, LayerFlopsSpec};
use crate::nn::{decode_detections, detection_loss, Detector, GridTargets, Group};
use crate::optim::{clip_gradients, sgd_step, OptimState};
use crate::rng::{self, Field};
use crate::schedule::{lr_at, phase_freeze_signal, FreezeSignal, ScheduleSpec};
use crate::synth::{generate_dataset, Dataset, Scene};

/// How the backbone is treated over a run.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainingMode {
    /// Consult a freezing scheduler every epoch.
    Scheduled(ScheduleSpec),
    /// No scheduler: the backbone trains every epoch.
    Full,
    /// The backbone is never handed to the optimizer and its output is
    /// always detached.
    FrozenBackbone,
}

impl TrainingMode {
    fn signal(&self, epoch: u64) -> FreezeSignal {
        match self {
            TrainingMode::Scheduled(spec) => phase_freeze_signal(epoch, spec),
            TrainingMode::Full => FreezeSignal::Unfrozen,
            TrainingMode::FrozenBackbone => FreezeSignal::Frozen,
        }
    }
}

/// Mutable state carried across epochs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub detector: Detector,
    pub optim: OptimState,
    pub ledger: FlopsLedger,
    pub iteration: u64,
    layer_flops: Vec<LayerFlopsSpec>,
    /// Parameters the optimizer knows about; `None` means all of them.
    registered: Option<BTreeSet<ParamId>>,
    last_freeze: Option<FreezeSignal>,
}

impl TrainState {
    pub fn new(detector: Detector) -> Result<Self> {
        Ok(Self {
            layer_flops: model_flops(&detector)?,
            detector,
            optim: OptimState::new(),
            ledger: FlopsLedger::new(),
            iteration: 0,
            registered: None,
            last_freeze: None,
        })
    }

    /// Restricts the optimizer to the given parameters.
    pub fn register_only(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.registered = Some(ids.into_iter().collect());
    }
}

pub fn stack_images(scenes: &[&Scene]) -> Result<Tensor> {
    let shape = scenes[0].image.shape().to_vec();
    let mut values = Vec::with_capacity(scenes.len() * scenes[0].image.len());
    for s in scenes {
        values.extend_from_slice(s.image.values());
    }
    let mut batch_shape = vec![scenes.len()];
    batch_shape.extend(shape);
    Tensor::new(batch_shape, values)
}

/// Deterministic sample order for one epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, epoch, Field::EpochShuffle));
    order
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    /// Learning rate of the last step taken in the epoch.
    pub lr: f64,
}

/// One pass over `data` with a fixed freeze signal: forward, loss, backward,
/// clip, SGD step per mini-batch; then the epoch is charged to the ledger.
pub fn train_epoch(
    state: &mut TrainState,
    data: &[Scene],
    epoch: u64,
    freeze: FreezeSignal,
    cfg: &ExperimentConfig,
) -> Result<EpochStats> {
    if cfg.sgd.reset_momentum_on_unfreeze
        && state.last_freeze == Some(FreezeSignal::Frozen)
        && freeze == FreezeSignal::Unfrozen
    {
        let backbone = state.detector.parameter_groups()[&Group::Backbone].clone();
        state.optim.reset(backbone);
    }

    let order = epoch_order(cfg.seed, epoch, data.len());
    let mut loss_sum = 0.0;
    let mut lr = lr_at(state.iteration, epoch, &cfg.lr);
    for chunk in order.chunks(cfg.sgd.batch_size) {
        let scenes: Vec<&Scene> = chunk.iter().map(|&i| &data[i]).collect();
        let batch = stack_images(&scenes)?;
        let gts: Vec<&[GroundTruth]> = scenes.iter().map(|s| s.ground_truths.as_slice()).collect();
        let targets = GridTargets::encode(&gts, state.detector.config())?;

        let mut tape = Tape::new();
        let pred = state.detector.forward(&batch, freeze, &mut tape)?;
        let loss = detection_loss(&pred, &targets, &mut tape)?;
        let mut grads = backward(&loss, &tape)?;
        if let Some(registered) = &state.registered {
            grads.retain(|id| registered.contains(&id));
        }
        let grads = clip_gradients(grads, cfg.sgd.clip_max_norm);
        lr = lr_at(state.iteration, epoch, &cfg.lr);
        sgd_step(
            state.detector.parameters_mut(),
            &grads,
            &mut state.optim,
            lr,
            &cfg.sgd,
        )?;
        state.iteration += 1;
        loss_sum += loss.item().expect("scalar loss") * chunk.len() as f64;
    }

    state
        .ledger
        .record_epoch(epoch, freeze, &state.layer_flops, data.len() as u64)?;
    state.last_freeze = Some(freeze);
    Ok(EpochStats {
        mean_loss: if data.is_empty() {
            0.0
        } else {
            loss_sum / data.len() as f64
        },
        lr,
    })
}

/// mAP@50 of the detector's decoded predictions on `scenes`.
pub fn evaluate_detector(
    detector: &Detector,
    scenes: &[Scene],
    batch_size: usize,
) -> Result<EvalReport> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for chunk in scenes.chunks(batch_size.max(1)) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let batch = stack_images(&refs)?;
        let pred = detector.predict(&batch)?;
        let ids: Vec<u64> = chunk.iter().map(|s| s.index).collect();
        dets.extend(decode_detections(&pred, &ids, detector.config()));
        gts.extend(chunk.iter().flat_map(|s| s.ground_truths.iter().copied()));
    }
    eval::map50(&dets, &gts, detector.config().num_classes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub frozen: bool,
    pub mean_loss: f64,
    pub lr: f64,
    pub cum_flops: BigUint,
    pub val_map50: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<EpochRecord>,
    /// Validation report after the last epoch (`None` without a validation split).
    pub final_eval: Option<EvalReport>,
    pub ledger: FlopsLedger,
    pub detector: Detector,
}

impl RunOutput {
    pub fn final_map50(&self) -> Option<f64> {
        self.final_eval.as_ref().map(|r| r.map50)
    }
}

/// Trains under the config's schedule.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_with_mode(cfg, &TrainingMode::Scheduled(cfg.schedule.clone()))
}

pub fn run_with_mode(cfg: &ExperimentConfig, mode: &TrainingMode) -> Result<RunOutput> {
    cfg.validate()?;
    let data = generate_dataset(&cfg.scene, cfg.n_train, cfg.n_val)?;
    run_on_dataset(cfg, mode, &data)
}

pub fn run_on_dataset(
    cfg: &ExperimentConfig,
    mode: &TrainingMode,
    data: &Dataset,
) -> Result<RunOutput> {
    cfg.validate()?;
    let detector = Detector::build(&cfg.arch, cfg.seed)?;
    let mut state = TrainState::new(detector)?;
    if *mode == TrainingMode::FrozenBackbone {
        let groups = state.detector.parameter_groups();
        state.register_only(
            groups[&Group::Neck]
                .iter()
                .chain(&groups[&Group::Head])
                .copied(),
        );
    }

    let mut records = Vec::with_capacity(cfg.total_epochs as usize);
    let mut final_eval = None;
    for epoch in 0..cfg.total_epochs {
        let freeze = mode.signal(epoch);
        let stats = train_epoch(&mut state, &data.train, epoch, freeze, cfg)?;
        let last = epoch + 1 == cfg.total_epochs;
        let val_map50 = if !data.val.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || last) {
            let report = evaluate_detector(&state.detector, &data.val, cfg.sgd.batch_size)?;
            let map = report.map50;
            if last {
                final_eval = Some(report);
            }
            Some(map)
        } else {
            None
        };
        records.push(EpochRecord {
            epoch,
            frozen: freeze.is_frozen(),
            mean_loss: stats.mean_loss,
            lr: stats.lr,
            cum_flops: state.ledger.total_flops().clone(),
            val_map50,
        });
    }
    Ok(RunOutput {
        records,
        final_eval,
        ledger: state.ledger,
        detector: state.detector,
    })
}
