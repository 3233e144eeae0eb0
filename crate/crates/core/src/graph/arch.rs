//! Stock architectures and parameter initialization.

use super::perturb::survival_schedule;
use super::{LayerKind, LayerSpec, LossKind, Model};
use crate::error::Result;
use crate::params::{ParamStore, Role};
use crate::rng::Rng;
use crate::tensor::{gaussian_init, Tensor};

/// Optional perturbation layers inserted by the builders.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Perturbations {
    /// Dropout on the features entering the head.
    pub dropout_fc: Option<f64>,
    /// Dropout after every hidden block's activation.
    pub dropout_hidden: Option<f64>,
    /// Replace the head with a DropConnect layer.
    pub dropconnect_fc: Option<f64>,
    /// Linear survival schedule on residual blocks.
    pub stochastic_depth: bool,
}

fn loss_layer(loss: LossKind) -> LayerSpec {
    match loss {
        LossKind::SoftmaxCe => LayerSpec::new("loss", LayerKind::SoftmaxCeLoss),
        LossKind::Mse => LayerSpec::new("loss", LayerKind::MseLoss),
    }
}

fn push_head(layers: &mut Vec<LayerSpec>, input: usize, output: usize, bias: bool, pert: &Perturbations) {
    if let Some(p) = pert.dropout_fc {
        layers.push(LayerSpec::dropout("drop_fc", p));
    }
    let head = match pert.dropconnect_fc {
        Some(p) => LayerSpec::new("head", LayerKind::Dropconnect { input, output, bias }).with_perturb(p),
        None => LayerSpec::new("head", LayerKind::Dense { input, output, bias }),
    };
    layers.push(head);
}

/// `input → [dense, relu]* → head → loss`.
pub fn mlp(input: usize, hidden: &[usize], output: usize, loss: LossKind, pert: &Perturbations) -> Result<Model> {
    let mut layers = Vec::new();
    let mut d = input;
    for (i, &h) in hidden.iter().enumerate() {
        layers.push(LayerSpec::dense(format!("fc{}", i + 1), d, h));
        layers.push(LayerSpec::relu(format!("relu{}", i + 1)));
        if let Some(p) = pert.dropout_hidden {
            layers.push(LayerSpec::dropout(format!("drop{}", i + 1), p));
        }
        d = h;
    }
    push_head(&mut layers, d, output, true, pert);
    layers.push(loss_layer(loss));
    Model::new(input, layers)
}

/// Bias-free two-layer regression net `Woutᵀ ReLU(Whiddenᵀ x)`, the shape
/// of the teacher oracles.
pub fn oracle_mlp(input: usize, hidden: usize) -> Result<Model> {
    Model::new(
        input,
        vec![
            LayerSpec::new(
                "hidden",
                LayerKind::Dense {
                    input,
                    output: hidden,
                    bias: false,
                },
            ),
            LayerSpec::relu("relu"),
            LayerSpec::new(
                "head",
                LayerKind::Dense {
                    input: hidden,
                    output: 1,
                    bias: false,
                },
            ),
            loss_layer(LossKind::Mse),
        ],
    )
}

/// Dense stem followed by `blocks` residual blocks of two dense layers.
pub fn res_mlp(
    input: usize,
    width: usize,
    blocks: usize,
    output: usize,
    loss: LossKind,
    pert: &Perturbations,
) -> Result<Model> {
    let survival = survival_schedule(blocks);
    let mut layers = vec![LayerSpec::dense("stem", input, width), LayerSpec::relu("stem_relu")];
    for (b, s) in survival.iter().enumerate() {
        let name = format!("block{}", b + 1);
        let mut block = LayerSpec::new(
            name.clone(),
            LayerKind::ResidualBlock {
                branch: vec![
                    LayerSpec::dense(format!("{name}.fc1"), width, width),
                    LayerSpec::relu(format!("{name}.relu1")),
                    LayerSpec::dense(format!("{name}.fc2"), width, width),
                ],
            },
        );
        if pert.stochastic_depth {
            block = block.with_survival(*s);
        }
        layers.push(block);
        layers.push(LayerSpec::relu(format!("{name}.relu")));
        if let Some(p) = pert.dropout_hidden {
            layers.push(LayerSpec::dropout(format!("{name}.drop"), p));
        }
    }
    push_head(&mut layers, width, output, true, pert);
    layers.push(loss_layer(loss));
    Model::new(input, layers)
}

/// ResNet-like surrogate: one residual block per stage, stride 2 from the
/// second stage on, global average pooling and a dense head.
///
/// Stage `s` has a downsampling conv `stage{s}.down` and a block whose last
/// 3×3 conv is `stage{s}.block.conv2`.
pub fn surrogate_cnn(
    channels: usize,
    height: usize,
    width: usize,
    widths: &[usize],
    classes: usize,
    pert: &Perturbations,
) -> Result<Model> {
    let survival = survival_schedule(widths.len());
    let mut layers = Vec::new();
    let (mut c, mut h, mut w) = (channels, height, width);
    for (i, &out) in widths.iter().enumerate() {
        let s = i + 1;
        let stride = if i == 0 { 1 } else { 2 };
        layers.push(LayerSpec::new(
            format!("stage{s}.down"),
            LayerKind::Conv3x3 {
                in_channels: c,
                out_channels: out,
                height: h,
                width: w,
                stride,
            },
        ));
        layers.push(LayerSpec::relu(format!("stage{s}.down_relu")));
        let (ho, wo) = super::conv::out_hw(h, w, stride);
        let conv = |name: &str| {
            LayerSpec::new(
                format!("stage{s}.block.{name}"),
                LayerKind::Conv3x3 {
                    in_channels: out,
                    out_channels: out,
                    height: ho,
                    width: wo,
                    stride: 1,
                },
            )
        };
        let mut block = LayerSpec::new(
            format!("stage{s}.block"),
            LayerKind::ResidualBlock {
                branch: vec![
                    conv("conv1"),
                    LayerSpec::relu(format!("stage{s}.block.relu1")),
                    conv("conv2"),
                ],
            },
        );
        if pert.stochastic_depth {
            block = block.with_survival(survival[i]);
        }
        layers.push(block);
        layers.push(LayerSpec::relu(format!("stage{s}.relu")));
        if let Some(p) = pert.dropout_hidden {
            layers.push(LayerSpec::dropout(format!("stage{s}.drop"), p));
        }
        (c, h, w) = (out, ho, wo);
    }
    layers.push(LayerSpec::new(
        "pool",
        LayerKind::GlobalAvgPool {
            channels: c,
            height: h,
            width: w,
        },
    ));
    push_head(&mut layers, c, classes, true, pert);
    layers.push(loss_layer(LossKind::SoftmaxCe));
    Model::new(channels * height * width, layers)
}

/// He-normal backbone weights, zero biases, `N(0, head_std²)` head weights.
pub fn init_params(model: &Model, rng: &mut Rng, head_std: f64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, shape, is_head) in model.param_shapes() {
        let role = if is_head { Role::Fc } else { Role::Backbone };
        let value = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else if is_head {
            gaussian_init(&shape, 0.0, head_std, rng)?
        } else {
            let fan_in = if shape.len() == 4 { shape[1] * 9 } else { shape[0] };
            gaussian_init(&shape, 0.0, (2.0 / fan_in as f64).sqrt(), rng)?
        };
        store.push(name, role, value)?;
    }
    Ok(store)
}
