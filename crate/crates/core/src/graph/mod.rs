//! Layered feed-forward networks with exact reverse-mode gradients.
//!
//! Activations flow between layers as `[batch × features]` matrices;
//! convolutional layers read each row as a `[channels, height, width]`
//! image. A model is an ordered list of [`LayerSpec`]s ending in a loss.

mod arch;
mod check;
mod conv;
mod forward;
mod perturb;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use arch::{init_params, mlp, oracle_mlp, res_mlp, surrogate_cnn, Perturbations};
pub use check::{check_gradients, check_gradients_with, max_relative_error};
pub use forward::{backward, forward, forward_probe, forward_replay, Tape};
pub use perturb::{apply_perturbation, survival_probability, survival_schedule, Mask, Masks};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Dense {
        input: usize,
        output: usize,
        bias: bool,
    },
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
        stride: usize,
    },
    Relu,
    GlobalAvgPool {
        channels: usize,
        height: usize,
        width: usize,
    },
    ResidualBlock {
        branch: Vec<LayerSpec>,
    },
    Dropout,
    /// Dense layer whose weight entries are dropped.
    Dropconnect {
        input: usize,
        output: usize,
        bias: bool,
    },
    SoftmaxCeLoss,
    MseLoss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Drop probability for DROPOUT / DROPCONNECT.
    pub perturb: Option<f64>,
    /// Branch survival probability for RESIDUAL_BLOCK.
    pub survival: Option<f64>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            perturb: None,
            survival: None,
        }
    }

    pub fn dense(name: impl Into<String>, input: usize, output: usize) -> Self {
        Self::new(
            name,
            LayerKind::Dense {
                input,
                output,
                bias: true,
            },
        )
    }

    pub fn relu(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::Relu)
    }

    pub fn dropout(name: impl Into<String>, p: f64) -> Self {
        Self::new(name, LayerKind::Dropout).with_perturb(p)
    }

    pub fn with_perturb(mut self, p: f64) -> Self {
        self.perturb = Some(p);
        self
    }

    pub fn with_survival(mut self, s: f64) -> Self {
        self.survival = Some(s);
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn is_loss(&self) -> bool {
        matches!(self.kind, LayerKind::SoftmaxCeLoss | LayerKind::MseLoss)
    }

    fn has_weights(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Dense { .. } | LayerKind::Dropconnect { .. } | LayerKind::Conv3x3 { .. }
        )
    }

    /// Output width for a given input width, validating the chain.
    fn out_dim(&self, in_dim: usize) -> Result<usize> {
        let mismatch = |want: usize| {
            invalid(format!(
                "layer `{}` expects input width {want}, got {in_dim}",
                self.name
            ))
        };
        for (what, p) in [("perturb", self.perturb), ("survival", self.survival)] {
            if let Some(p) = p {
                if !(0.0..=1.0).contains(&p) {
                    return Err(invalid(format!(
                        "layer `{}`: {what} probability {p} outside [0, 1]",
                        self.name
                    )));
                }
            }
        }
        match &self.kind {
            LayerKind::Dense { input, output, .. } | LayerKind::Dropconnect { input, output, .. } => {
                if *input != in_dim {
                    return Err(mismatch(*input));
                }
                if *output == 0 {
                    return Err(invalid(format!("layer `{}` has zero outputs", self.name)));
                }
                Ok(*output)
            }
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
                height,
                width,
                stride,
            } => {
                let want = in_channels * height * width;
                if want != in_dim {
                    return Err(mismatch(want));
                }
                if !(*stride == 1 || *stride == 2) {
                    return Err(invalid(format!(
                        "layer `{}`: stride must be 1 or 2, got {stride}",
                        self.name
                    )));
                }
                let (ho, wo) = conv::out_hw(*height, *width, *stride);
                Ok(out_channels * ho * wo)
            }
            LayerKind::GlobalAvgPool {
                channels,
                height,
                width,
            } => {
                if channels * height * width != in_dim {
                    return Err(mismatch(channels * height * width));
                }
                Ok(*channels)
            }
            LayerKind::ResidualBlock { branch } => {
                let mut d = in_dim;
                for l in branch {
                    if l.is_loss() {
                        return Err(invalid(format!("loss `{}` inside a residual branch", l.name)));
                    }
                    d = l.out_dim(d)?;
                }
                if d != in_dim {
                    return Err(invalid(format!(
                        "residual block `{}` maps width {in_dim} to {d}",
                        self.name
                    )));
                }
                Ok(in_dim)
            }
            LayerKind::Relu | LayerKind::Dropout => Ok(in_dim),
            LayerKind::SoftmaxCeLoss | LayerKind::MseLoss => Ok(in_dim),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossKind {
    SoftmaxCe,
    Mse,
}

/// A validated layer list: dims chain from `input_dim`, layer names are
/// unique, exactly one loss sits at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_dim: usize,
    layers: Vec<LayerSpec>,
    output_dim: usize,
    head: usize,
}

fn collect_names<'a>(layers: &'a [LayerSpec], out: &mut Vec<&'a str>) {
    for l in layers {
        out.push(&l.name);
        if let LayerKind::ResidualBlock { branch } = &l.kind {
            collect_names(branch, out);
        }
    }
}

impl Model {
    pub fn new(input_dim: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let (loss, body) = layers.split_last().ok_or_else(|| invalid("model has no layers"))?;
        if !loss.is_loss() {
            return Err(invalid("the last layer must be a loss"));
        }
        let mut names = Vec::new();
        collect_names(&layers, &mut names);
        let mut sorted = names.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(invalid(format!("duplicate layer name `{}`", w[0])));
        }
        let mut d = input_dim;
        for l in body {
            if l.is_loss() {
                return Err(invalid(format!("loss `{}` before the end of the model", l.name)));
            }
            d = l.out_dim(d)?;
        }
        let head = body
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::Dense { .. } | LayerKind::Dropconnect { .. }))
            .ok_or_else(|| invalid("model has no dense head"))?;
        if matches!(loss.kind, LayerKind::SoftmaxCeLoss) && d < 2 {
            return Err(invalid("softmax cross-entropy needs at least two classes"));
        }
        Ok(Self {
            input_dim,
            layers,
            output_dim: d,
            head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn body(&self) -> &[LayerSpec] {
        &self.layers[..self.layers.len() - 1]
    }

    pub fn loss(&self) -> LossKind {
        match self.layers.last().map(|l| &l.kind) {
            Some(LayerKind::MseLoss) => LossKind::Mse,
            _ => LossKind::SoftmaxCe,
        }
    }

    /// The final dense layer; its parameters form the FC group.
    pub fn head(&self) -> &LayerSpec {
        &self.layers[self.head]
    }

    /// Parameter names and shapes in store order (head last).
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, bool)> {
        let mut out = Vec::new();
        fn walk(layers: &[LayerSpec], head: Option<&str>, out: &mut Vec<(String, Vec<usize>, bool)>) {
            for l in layers {
                if !l.has_weights() {
                    if let LayerKind::ResidualBlock { branch } = &l.kind {
                        walk(branch, None, out);
                    }
                    continue;
                }
                let is_head = head == Some(l.name.as_str());
                match &l.kind {
                    LayerKind::Dense { input, output, bias } | LayerKind::Dropconnect { input, output, bias } => {
                        out.push((l.weight_name(), vec![*input, *output], is_head));
                        if *bias {
                            out.push((l.bias_name(), vec![*output], is_head));
                        }
                    }
                    LayerKind::Conv3x3 {
                        in_channels,
                        out_channels,
                        ..
                    } => {
                        out.push((l.weight_name(), vec![*out_channels, *in_channels, 3, 3], false));
                        out.push((l.bias_name(), vec![*out_channels], false));
                    }
                    _ => unreachable!(),
                }
            }
        }
        walk(self.body(), Some(&self.head().name), &mut out);
        // Keep the head contiguous at the end.
        out.sort_by_key(|(_, _, h)| *h);
        out
    }
}
