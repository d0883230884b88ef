use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_out_dim, ParamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Backbone,
    Neck,
    Head,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Backbone, Group::Neck, Group::Head];

    pub fn name(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Neck => "neck",
            Group::Head => "head",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerId(pub u32);

/// Hyperparameters of one layer. Shapes here are per sample (no batch axis).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d {
        kernel: usize,
        #[serde(default)]
        stride: Option<usize>,
    },
    Flatten,
}

fn one() -> usize {
    1
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense {inputs}->{outputs}"),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => write!(
                f,
                "conv2d {in_channels}->{out_channels} k{kernel} s{stride}"
            ),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool2d { kernel, .. } => {
                write!(f, "maxpool2d k{kernel} s{}", self.pool_stride())
            }
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

impl LayerSpec {
    pub(crate) fn pool_stride(&self) -> usize {
        match self {
            LayerSpec::MaxPool2d { kernel, stride } => stride.unwrap_or(*kernel),
            _ => 1,
        }
    }

    /// Per-sample output shape, or a description of why `input` is unusable.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match self {
            LayerSpec::Dense { inputs, outputs } => {
                if *inputs == 0 || *outputs == 0 {
                    return Err("dense sizes must be >= 1".into());
                }
                if input != [*inputs] {
                    return Err(format!("expects input [{inputs}], got {input:?}"));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                if *kernel == 0 || *stride == 0 || *out_channels == 0 {
                    return Err("kernel, stride and channels must be >= 1".into());
                }
                if input.len() != 3 || input[0] != *in_channels {
                    return Err(format!(
                        "expects input [{in_channels}, h, w], got {input:?}"
                    ));
                }
                match (
                    conv_out_dim(input[1], *kernel, *stride),
                    conv_out_dim(input[2], *kernel, *stride),
                ) {
                    (Some(h), Some(w)) => Ok(vec![*out_channels, h, w]),
                    _ => Err(format!("kernel {kernel} larger than input {input:?}")),
                }
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2d { kernel, .. } => {
                let stride = self.pool_stride();
                if *kernel == 0 || stride == 0 {
                    return Err("kernel and stride must be >= 1".into());
                }
                if input.len() != 3 {
                    return Err(format!("expects input [c, h, w], got {input:?}"));
                }
                match (
                    conv_out_dim(input[1], *kernel, stride),
                    conv_out_dim(input[2], *kernel, stride),
                ) {
                    (Some(h), Some(w)) => Ok(vec![input[0], h, w]),
                    _ => Err(format!("kernel {kernel} larger than input {input:?}")),
                }
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// `(name, shape)` of each trainable parameter.
    pub(crate) fn parameter_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            LayerSpec::Dense { inputs, outputs } => vec![
                ("weight", vec![*inputs, *outputs]),
                ("bias", vec![*outputs]),
            ],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                (
                    "weight",
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                ),
                ("bias", vec![*out_channels]),
            ],
            _ => Vec::new(),
        }
    }

    /// `(fan_in, fan_out)` of the weight, for layers that have one.
    pub(crate) fn fans(&self) -> Option<(usize, usize)> {
        match self {
            LayerSpec::Dense { inputs, outputs } => Some((*inputs, *outputs)),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                in_channels * kernel * kernel,
                out_channels * kernel * kernel,
            )),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub id: LayerId,
    pub group: Group,
    pub spec: LayerSpec,
    /// Per-sample input shape resolved at build time.
    pub input_shape: Vec<usize>,
    pub params: Vec<ParamId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub id: ParamId,
    pub layer: LayerId,
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}
