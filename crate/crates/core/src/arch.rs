//! Declarative model descriptions, as written by `search` and read by `train`.
//!
//! A description is a stack of same-padded stride-1 convolutions followed by
//! fully connected layers; the last FC layer produces the class logits. The
//! activation follows every convolution and every FC layer but the last.
//! When a layer carries a [`QuantSpec`], both its stored weights and its
//! activations use that fixed-point format (the output logits stay in full
//! precision).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, Network, Padding};
use crate::quant::QuantSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub filter: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcSpec {
    pub units: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    /// Per-example input shape `[C, H, W]`.
    pub input_shape: [usize; 3],
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub conv: Vec<ConvSpec>,
    pub fc: Vec<FcSpec>,
    /// Search tokens this architecture was decoded from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<usize>>,
}

impl ArchitectureSpec {
    pub fn classes(&self) -> Option<usize> {
        self.fc.last().map(|f| f.units)
    }

    pub fn build(&self) -> Result<Network> {
        if self.fc.is_empty() {
            return Err(Error::InvalidArgument(
                "architecture needs at least one FC layer".into(),
            ));
        }
        let act = match self.activation {
            Activation::Relu => Layer::Relu,
            Activation::Sigmoid => Layer::Sigmoid,
        };
        let mut layers = Vec::new();
        let mut channels = self.input_shape[0];
        for (i, c) in self.conv.iter().enumerate() {
            if c.filter % 2 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "conv{i}: same padding needs an odd filter size, got {}",
                    c.filter
                )));
            }
            layers.push(Layer::Conv2d {
                name: format!("conv{i}"),
                in_channels: channels,
                out_channels: c.channels,
                kernel: c.filter,
                padding: Padding::Same,
                quant: c.quant,
            });
            layers.push(act.clone());
            if let Some(q) = c.quant {
                layers.push(Layer::Quantize { spec: q });
            }
            channels = c.channels;
        }
        layers.push(Layer::Flatten);
        let mut features = if self.conv.is_empty() {
            self.input_shape.iter().product()
        } else {
            channels * self.input_shape[1] * self.input_shape[2]
        };
        for (i, f) in self.fc.iter().enumerate() {
            layers.push(Layer::Dense {
                name: format!("fc{i}"),
                in_features: features,
                out_features: f.units,
                quant: f.quant,
            });
            if i + 1 < self.fc.len() {
                layers.push(act.clone());
                if let Some(q) = f.quant {
                    layers.push(Layer::Quantize { spec: q });
                }
            }
            features = f.units;
        }
        Network::new(self.input_shape.to_vec(), layers)
    }

    /// Two-layer perceptron: `hidden` units, then `classes` logits.
    pub fn mlp(input_shape: [usize; 3], hidden: usize, classes: usize, activation: Activation) -> Self {
        ArchitectureSpec {
            input_shape,
            activation,
            conv: Vec::new(),
            fc: vec![
                FcSpec {
                    units: hidden,
                    quant: None,
                },
                FcSpec {
                    units: classes,
                    quant: None,
                },
            ],
            tokens: None,
        }
    }

    /// A small unquantized CNN: two 3x3 convolutions and a linear classifier.
    pub fn small_cnn(input_shape: [usize; 3], channels: usize, classes: usize) -> Self {
        ArchitectureSpec {
            input_shape,
            activation: Activation::Relu,
            conv: vec![
                ConvSpec {
                    channels,
                    filter: 3,
                    quant: None,
                },
                ConvSpec {
                    channels,
                    filter: 3,
                    quant: None,
                },
            ],
            fc: vec![FcSpec {
                units: classes,
                quant: None,
            }],
            tokens: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
