use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Group, Layer, LayerId, LayerSpec, Parameter};
use crate::autodiff::{ParamId, Primitive, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, Field};
use crate::schedule::FreezeSignal;

/// Layer specs per group plus the prediction grid geometry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Per-sample input shape `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub grid_size: usize,
    pub num_classes: usize,
    pub backbone: Vec<LayerSpec>,
    #[serde(default)]
    pub neck: Option<Vec<LayerSpec>>,
    pub head: Vec<LayerSpec>,
}

impl ArchConfig {
    /// Conv backbone, flatten/dense neck, dense head over a 4x4 grid.
    pub fn desk(num_classes: usize) -> Self {
        let grid_size = 4;
        Self {
            input_shape: vec![3, 32, 32],
            grid_size,
            num_classes,
            backbone: vec![
                LayerSpec::Conv2d {
                    in_channels: 3,
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d {
                    kernel: 2,
                    stride: None,
                },
                LayerSpec::Conv2d {
                    in_channels: 8,
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                },
                LayerSpec::Relu,
            ],
            neck: Some(vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 16 * 7 * 7,
                    outputs: 64,
                },
                LayerSpec::Relu,
            ]),
            head: vec![LayerSpec::Dense {
                inputs: 64,
                outputs: grid_size * grid_size * (5 + num_classes),
            }],
        }
    }

    /// Values per grid cell: objectness, class logits, four box offsets.
    pub fn cell_width(&self) -> usize {
        1 + self.num_classes + 4
    }
}

/// Backbone / optional neck / head composition.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    config: ArchConfig,
    layers: Vec<Layer>,
    params: Vec<Parameter>,
}

/// Forward output, shape `[batch, S, S, 1 + C + 4]`.
#[derive(Debug, Clone)]
pub struct PredictionGrid {
    pub tensor: Tensor,
    pub grid_size: usize,
    pub num_classes: usize,
}

impl PredictionGrid {
    pub fn batch(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn cell_width(&self) -> usize {
        1 + self.num_classes + 4
    }

    /// Raw values of cell `(row, col)` in image `b`.
    pub fn cell(&self, b: usize, row: usize, col: usize) -> &[f64] {
        let w = self.cell_width();
        let start = ((b * self.grid_size + row) * self.grid_size + col) * w;
        &self.tensor.values()[start..start + w]
    }
}

fn label(group: Group, index: usize, spec: &LayerSpec) -> String {
    format!("{group}[{index}] ({spec})")
}

impl Detector {
    pub fn build(config: &ArchConfig, init_seed: u64) -> Result<Self> {
        if config.input_shape.len() != 3 || config.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "arch.input_shape must be [c, h, w] with positive entries, got {:?}",
                config.input_shape
            )));
        }
        if config.grid_size == 0 || config.num_classes == 0 {
            return Err(Error::Config(
                "arch.grid_size and arch.num_classes must be >= 1".into(),
            ));
        }
        if config.backbone.is_empty() || config.head.is_empty() {
            return Err(Error::Config(
                "backbone and head need at least one layer".into(),
            ));
        }

        let mut layers = Vec::new();
        let mut params = Vec::new();
        let mut shape = config.input_shape.clone();
        let mut upstream = "input".to_string();

        let groups = [
            (Group::Backbone, Some(&config.backbone)),
            (Group::Neck, config.neck.as_ref()),
            (Group::Head, Some(&config.head)),
        ];
        for (group, specs) in groups {
            for (index, spec) in specs.into_iter().flatten().enumerate() {
                let here = label(group, index, spec);
                let out = spec.output_shape(&shape).map_err(|msg| Error::ShapeChain {
                    upstream: upstream.clone(),
                    downstream: here.clone(),
                    output: shape.clone(),
                    msg,
                })?;
                let id = LayerId(layers.len() as u32);
                let mut layer_params = Vec::new();
                let mut init = rng::stream(init_seed, u64::from(id.0), Field::LayerInit);
                for (name, pshape) in spec.parameter_shapes() {
                    let n: usize = pshape.iter().product();
                    let values = match (name, spec.fans()) {
                        ("weight", Some((fan_in, fan_out))) => {
                            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                            (0..n).map(|_| init.gen_range(-a..=a)).collect()
                        }
                        _ => vec![0.0; n],
                    };
                    let pid = ParamId(params.len() as u32);
                    params.push(Parameter {
                        id: pid,
                        layer: id,
                        name: name.to_string(),
                        shape: pshape,
                        values,
                    });
                    layer_params.push(pid);
                }
                layers.push(Layer {
                    id,
                    group,
                    spec: spec.clone(),
                    input_shape: shape.clone(),
                    params: layer_params,
                });
                shape = out;
                upstream = here;
            }
        }

        let expected = config.grid_size * config.grid_size * config.cell_width();
        if shape != [expected] {
            return Err(Error::ShapeChain {
                upstream,
                downstream: format!(
                    "prediction grid {0}x{0}x{1}",
                    config.grid_size,
                    config.cell_width()
                ),
                output: shape,
                msg: format!("head must emit [{expected}]"),
            });
        }

        Ok(Self {
            config: config.clone(),
            layers,
            params,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter(&self, id: ParamId) -> Option<&Parameter> {
        self.params.get(id.0 as usize)
    }

    pub fn group_of(&self, id: ParamId) -> Option<Group> {
        let p = self.parameter(id)?;
        Some(self.layers[p.layer.0 as usize].group)
    }

    pub fn has_neck(&self) -> bool {
        self.layers.iter().any(|l| l.group == Group::Neck)
    }

    /// Partition of all parameter ids by group, in build order. Every group
    /// key is present; an absent neck maps to an empty list.
    pub fn parameter_groups(&self) -> BTreeMap<Group, Vec<ParamId>> {
        let mut groups: BTreeMap<Group, Vec<ParamId>> =
            Group::ALL.iter().map(|&g| (g, Vec::new())).collect();
        for layer in &self.layers {
            groups
                .get_mut(&layer.group)
                .expect("all groups present")
                .extend(&layer.params);
        }
        groups
    }

    /// 64-bit FNV-1a digest over the bit patterns of a group's parameters.
    pub fn checksum(&self, group: Group) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for layer in self.layers.iter().filter(|l| l.group == group) {
            for &pid in &layer.params {
                for v in &self.params[pid.0 as usize].values {
                    for byte in v.to_bits().to_le_bytes() {
                        h ^= u64::from(byte);
                        h = h.wrapping_mul(0x0000_0100_0000_01b3);
                    }
                }
            }
        }
        h
    }

    /// Runs backbone, then neck and head. With `FreezeSignal::Frozen` the
    /// backbone output is detached, so no gradient reaches backbone
    /// parameters; the frozen backbone is also evaluated without recording
    /// tape nodes, which yields the same values.
    pub fn forward(
        &self,
        batch: &Tensor,
        freeze: FreezeSignal,
        tape: &mut Tape,
    ) -> Result<PredictionGrid> {
        self.run(batch, freeze, tape, true)
    }

    /// Forward pass with every parameter bound as a constant; records nothing.
    pub fn predict(&self, batch: &Tensor) -> Result<PredictionGrid> {
        self.run(batch, FreezeSignal::Frozen, &mut Tape::new(), false)
    }

    fn run(
        &self,
        batch: &Tensor,
        freeze: FreezeSignal,
        tape: &mut Tape,
        train_rest: bool,
    ) -> Result<PredictionGrid> {
        if batch.shape().len() != 4 || batch.shape()[1..] != self.config.input_shape[..] {
            return Err(Error::InvalidShape {
                op: "detector_forward",
                msg: format!(
                    "batch shape {:?} does not match input [n, {:?}]",
                    batch.shape(),
                    self.config.input_shape
                ),
            });
        }
        let mut x = batch.clone();
        for layer in self.layers.iter().filter(|l| l.group == Group::Backbone) {
            x = self.apply_layer(layer, &x, tape, !freeze.is_frozen())?;
        }
        if freeze.is_frozen() {
            x = x.detach();
        }
        for layer in self.layers.iter().filter(|l| l.group != Group::Backbone) {
            x = self.apply_layer(layer, &x, tape, train_rest)?;
        }
        let s = self.config.grid_size;
        let n = x.shape()[0];
        let grid = tape.apply(
            Primitive::Reshape {
                shape: vec![n, s, s, self.config.cell_width()],
            },
            &[&x],
        )?;
        Ok(PredictionGrid {
            tensor: grid,
            grid_size: s,
            num_classes: self.config.num_classes,
        })
    }

    fn bind(&self, id: ParamId, tape: &mut Tape, trainable: bool) -> Result<Tensor> {
        let p = &self.params[id.0 as usize];
        if trainable {
            tape.param(id, &p.shape, &p.values)
        } else {
            Tensor::new(p.shape.clone(), p.values.clone())
        }
    }

    fn apply_layer(
        &self,
        layer: &Layer,
        x: &Tensor,
        tape: &mut Tape,
        trainable: bool,
    ) -> Result<Tensor> {
        match &layer.spec {
            LayerSpec::Dense { .. } => {
                let w = self.bind(layer.params[0], tape, trainable)?;
                let b = self.bind(layer.params[1], tape, trainable)?;
                let y = tape.apply(Primitive::Matmul, &[x, &w])?;
                tape.apply(Primitive::Add, &[&y, &b])
            }
            LayerSpec::Conv2d { stride, .. } => {
                let w = self.bind(layer.params[0], tape, trainable)?;
                let b = self.bind(layer.params[1], tape, trainable)?;
                tape.apply(Primitive::Conv2d { stride: *stride }, &[x, &w, &b])
            }
            LayerSpec::Relu => tape.apply(Primitive::Relu, &[x]),
            LayerSpec::MaxPool2d { kernel, .. } => tape.apply(
                Primitive::MaxPool2d {
                    kernel: *kernel,
                    stride: layer.spec.pool_stride(),
                },
                &[x],
            ),
            LayerSpec::Flatten => tape.apply(Primitive::Flatten, &[x]),
        }
    }

    /// Replaces parameter values from `(layer, name, shape, values)` entries.
    /// Every parameter must be covered exactly once with a matching shape.
    pub fn load_parameters(
        &mut self,
        entries: &[super::checkpoint::CheckpointEntry],
    ) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                entries.len()
            )));
        }
        for (p, e) in self.params.iter_mut().zip(entries) {
            if p.layer != e.layer || p.name != e.name || p.shape != e.shape {
                return Err(Error::Checkpoint(format!(
                    "entry layer {} `{}` {:?} does not match parameter layer {} `{}` {:?}",
                    e.layer.0, e.name, e.shape, p.layer.0, p.name, p.shape
                )));
            }
            p.values.clone_from(&e.values);
        }
        Ok(())
    }
}
