use super::conv::{self, ConvGeom};
use super::perturb::{draw_gate, draw_multipliers, drop_probability, survival, Mask, Masks};
use super::{LayerKind, LayerSpec, Mode, Model};
use crate::error::{contract, invalid, Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::rng::Rng;
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};

enum MaskSource<'r> {
    Draw(&'r mut Rng),
    Replay(std::slice::Iter<'r, Mask>),
    /// Deterministic expectation semantics (EVAL and gradient probes).
    Expectation,
}

impl MaskSource<'_> {
    fn multipliers(&mut self, len: usize, p: f64, who: &str) -> Result<Option<Vec<f64>>> {
        match self {
            MaskSource::Draw(rng) => Ok(Some(draw_multipliers(len, p, rng))),
            MaskSource::Replay(it) => match it.next() {
                Some(Mask::Multipliers(m)) if m.len() == len => Ok(Some(m.clone())),
                _ => Err(contract(format!("replayed masks do not fit layer `{who}`"))),
            },
            MaskSource::Expectation => Ok(None),
        }
    }

    /// Branch scale for a residual block.
    fn gate(&mut self, s: f64, who: &str) -> Result<(f64, Option<bool>)> {
        match self {
            MaskSource::Draw(rng) => {
                let active = draw_gate(s, rng);
                Ok((if active { 1.0 } else { 0.0 }, Some(active)))
            }
            MaskSource::Replay(it) => match it.next() {
                Some(Mask::Gate { active }) => Ok((if *active { 1.0 } else { 0.0 }, Some(*active))),
                _ => Err(contract(format!("replayed masks do not fit block `{who}`"))),
            },
            MaskSource::Expectation => Ok((s, None)),
        }
    }
}

enum Record {
    Dense {
        input: Tensor,
        weight: usize,
        bias: Option<usize>,
        mask: Option<Vec<f64>>,
    },
    Conv {
        geom: ConvGeom,
        cols: Vec<f64>,
        weight: usize,
        bias: usize,
    },
    Relu {
        active: Vec<bool>,
    },
    Pool {
        channels: usize,
        area: usize,
    },
    Residual {
        branch: Vec<Record>,
        scale: f64,
    },
    Dropout {
        mask: Option<Vec<f64>>,
    },
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape<'a> {
    model: &'a Model,
    params: &'a ParamStore,
    trainable: bool,
    batch: Tensor,
    records: Vec<Record>,
    loss_grad: Tensor,
    masks: Masks,
    first_nonfinite: Option<String>,
}

impl Tape<'_> {
    /// Masks drawn during the forward pass, in draw order.
    pub fn masks(&self) -> &Masks {
        &self.masks
    }

    pub fn batch(&self) -> &Tensor {
        &self.batch
    }

    pub fn batch_size(&self) -> usize {
        self.batch.rows()
    }

    /// Name of the first layer whose output contained NaN or infinity.
    pub fn first_nonfinite_layer(&self) -> Option<&str> {
        self.first_nonfinite.as_deref()
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}

struct Ctx<'r> {
    source: MaskSource<'r>,
    record: bool,
    drawn: Vec<Mask>,
    first_nonfinite: Option<String>,
}

fn param_index(params: &ParamStore, name: &str) -> Result<usize> {
    params
        .index_of(name)
        .ok_or_else(|| invalid(format!("missing parameter `{name}`")))
}

fn check_param_shape(params: &ParamStore, idx: usize, shape: &[usize]) -> Result<()> {
    let got = params.value(idx).shape();
    if got != shape {
        return Err(Error::Shape {
            op: "parameter",
            left: got.to_vec(),
            right: shape.to_vec(),
        });
    }
    Ok(())
}

fn run_layers(
    layers: &[LayerSpec],
    params: &ParamStore,
    mut x: Tensor,
    ctx: &mut Ctx<'_>,
    records: &mut Vec<Record>,
) -> Result<Tensor> {
    let n = x.rows();
    for layer in layers {
        let y = match &layer.kind {
            LayerKind::Dense { input, output, bias } | LayerKind::Dropconnect { input, output, bias } => {
                let w = param_index(params, &layer.weight_name())?;
                check_param_shape(params, w, &[*input, *output])?;
                let b = if *bias {
                    let b = param_index(params, &layer.bias_name())?;
                    check_param_shape(params, b, &[*output])?;
                    Some(b)
                } else {
                    None
                };
                let weight = params.value(w).data();
                let mask = if matches!(layer.kind, LayerKind::Dropconnect { .. }) {
                    let p = drop_probability(layer)?;
                    let m = ctx.source.multipliers(weight.len(), p, &layer.name)?;
                    if let Some(m) = &m {
                        ctx.drawn.push(Mask::Multipliers(m.clone()));
                    }
                    m
                } else {
                    None
                };
                let mut out = match &mask {
                    Some(m) => {
                        let eff: Vec<f64> = weight.iter().zip(m).map(|(w, k)| w * k).collect();
                        matmul_raw(x.data(), &eff, n, *input, *output)
                    }
                    None => matmul_raw(x.data(), weight, n, *input, *output),
                };
                if let Some(b) = b {
                    let bias = params.value(b).data();
                    for row in out.chunks_mut(*output) {
                        for (o, bv) in row.iter_mut().zip(bias) {
                            *o += bv;
                        }
                    }
                }
                if ctx.record {
                    records.push(Record::Dense {
                        input: x,
                        weight: w,
                        bias: b,
                        mask,
                    });
                }
                Tensor::from_parts(vec![n, *output], out)
            }
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
                height,
                width,
                stride,
            } => {
                let geom = ConvGeom {
                    cin: *in_channels,
                    cout: *out_channels,
                    h: *height,
                    w: *width,
                    stride: *stride,
                };
                let w = param_index(params, &layer.weight_name())?;
                check_param_shape(params, w, &[*out_channels, *in_channels, 3, 3])?;
                let b = param_index(params, &layer.bias_name())?;
                check_param_shape(params, b, &[*out_channels])?;
                let (out, cols) = conv::forward(x.data(), n, params.value(w).data(), params.value(b).data(), &geom);
                if ctx.record {
                    records.push(Record::Conv {
                        geom,
                        cols,
                        weight: w,
                        bias: b,
                    });
                }
                let width_out = out.len() / n.max(1);
                Tensor::from_parts(vec![n, width_out], out)
            }
            LayerKind::Relu => {
                let y = x.map(|v| if v > 0.0 { v } else { 0.0 });
                if ctx.record {
                    records.push(Record::Relu {
                        active: x.data().iter().map(|&v| v > 0.0).collect(),
                    });
                }
                y
            }
            LayerKind::GlobalAvgPool {
                channels,
                height,
                width,
            } => {
                let area = height * width;
                let mut out = vec![0.0; n * channels];
                for (b, row) in x.data().chunks(channels * area).enumerate() {
                    for c in 0..*channels {
                        out[b * channels + c] = row[c * area..(c + 1) * area].iter().sum::<f64>() / area as f64;
                    }
                }
                if ctx.record {
                    records.push(Record::Pool {
                        channels: *channels,
                        area,
                    });
                }
                Tensor::from_parts(vec![n, *channels], out)
            }
            LayerKind::Dropout => {
                let p = drop_probability(layer)?;
                let mask = ctx.source.multipliers(x.len(), p, &layer.name)?;
                let y = match &mask {
                    Some(m) => {
                        ctx.drawn.push(Mask::Multipliers(m.clone()));
                        let data = x.data().iter().zip(m).map(|(v, k)| v * k).collect();
                        Tensor::from_parts(x.shape().to_vec(), data)
                    }
                    None => x,
                };
                if ctx.record {
                    records.push(Record::Dropout { mask });
                }
                y
            }
            LayerKind::ResidualBlock { branch } => {
                let s = survival(layer)?;
                let (scale, gate) = ctx.source.gate(s, &layer.name)?;
                if let Some(active) = gate {
                    ctx.drawn.push(Mask::Gate { active });
                }
                let mut inner = Vec::new();
                let y = if scale != 0.0 {
                    let b = run_layers(branch, params, x.clone(), ctx, &mut inner)?;
                    let mut y = x;
                    y.add_scaled(scale, &b)?;
                    y
                } else {
                    x
                };
                if ctx.record {
                    records.push(Record::Residual { branch: inner, scale });
                }
                y
            }
            LayerKind::SoftmaxCeLoss | LayerKind::MseLoss => {
                return Err(invalid(format!("loss `{}` inside the body", layer.name)));
            }
        };
        if ctx.first_nonfinite.is_none() && !y.all_finite() {
            ctx.first_nonfinite = Some(layer.name.clone());
        }
        x = y;
    }
    Ok(x)
}

fn class_index(label: f64, classes: usize) -> Result<usize> {
    if label.fract() != 0.0 || label < 0.0 || label >= classes as f64 {
        return Err(invalid(format!("label {label} outside class range [0, {classes})")));
    }
    Ok(label as usize)
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub(crate) fn softmax_ce(logits: &Tensor, labels: &Tensor) -> Result<(f64, Tensor)> {
    let n = logits.rows();
    let c = logits.cols();
    if labels.len() != n {
        return Err(invalid(format!("{} labels for a batch of {n}", labels.len())));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * c];
    for i in 0..n {
        let y = class_index(labels.data()[i], c)?;
        let z = logits.row(i);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - z[y];
        let g = &mut grad[i * c..(i + 1) * c];
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = (z[j] - lse).exp() / n as f64;
        }
        g[y] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, Tensor::from_parts(vec![n, c], grad)))
}

/// Mean squared error over all output elements and its gradient.
pub(crate) fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if target.len() != pred.len() {
        return Err(Error::Shape {
            op: "mse",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let m = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / m
        })
        .collect();
    Ok((loss / m, Tensor::from_parts(pred.shape().to_vec(), grad)))
}

fn run<'a>(
    model: &'a Model,
    params: &'a ParamStore,
    batch: &Tensor,
    labels: &Tensor,
    source: MaskSource<'_>,
    record: bool,
) -> Result<(f64, Tensor, Tape<'a>)> {
    if batch.shape().len() != 2 || batch.cols() != model.input_dim() {
        return Err(invalid(format!(
            "batch shape {:?} does not match model input width {}",
            batch.shape(),
            model.input_dim()
        )));
    }
    if labels.is_empty() || labels.rows() != batch.rows() {
        return Err(invalid(format!(
            "batch has {} rows but labels have leading dimension {}",
            batch.rows(),
            labels.shape().first().copied().unwrap_or(0)
        )));
    }
    let mut ctx = Ctx {
        source,
        record,
        drawn: Vec::new(),
        first_nonfinite: None,
    };
    let mut records = Vec::new();
    let outputs = run_layers(model.body(), params, batch.clone(), &mut ctx, &mut records)?;
    let (loss, loss_grad) = match model.loss() {
        super::LossKind::SoftmaxCe => softmax_ce(&outputs, labels)?,
        super::LossKind::Mse => mse(&outputs, labels)?,
    };
    if ctx.first_nonfinite.is_none() && !loss.is_finite() {
        ctx.first_nonfinite = Some(model.layers().last().unwrap().name.clone());
    }
    let tape = Tape {
        model,
        params,
        trainable: record,
        batch: batch.clone(),
        records,
        loss_grad,
        masks: Masks(ctx.drawn),
        first_nonfinite: ctx.first_nonfinite,
    };
    Ok((loss, outputs, tape))
}

/// Forward pass. Returns the mean batch loss, the pre-loss outputs and the
/// tape. TRAIN draws fresh masks from `rng`; EVAL draws nothing, applies
/// expectation scaling and yields a tape that cannot be differentiated.
pub fn forward<'a>(
    model: &'a Model,
    params: &'a ParamStore,
    batch: &Tensor,
    labels: &Tensor,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(f64, Tensor, Tape<'a>)> {
    match mode {
        Mode::Train => run(model, params, batch, labels, MaskSource::Draw(rng), true),
        Mode::Eval => run(model, params, batch, labels, MaskSource::Expectation, false),
    }
}

/// Train-mode forward that reuses previously drawn masks.
pub fn forward_replay<'a>(
    model: &'a Model,
    params: &'a ParamStore,
    batch: &Tensor,
    labels: &Tensor,
    masks: &Masks,
) -> Result<(f64, Tensor, Tape<'a>)> {
    let out = run(model, params, batch, labels, MaskSource::Replay(masks.0.iter()), true)?;
    if out.2.masks.len() != masks.len() {
        return Err(contract("replayed masks were not all consumed"));
    }
    Ok(out)
}

/// Deterministic forward (no masks, expectation scaling) whose tape can be
/// differentiated. Used for gradient-norm probes.
pub fn forward_probe<'a>(
    model: &'a Model,
    params: &'a ParamStore,
    batch: &Tensor,
    labels: &Tensor,
) -> Result<(f64, Tensor, Tape<'a>)> {
    run(model, params, batch, labels, MaskSource::Expectation, true)
}

fn add_into(grads: &mut Gradients, idx: usize, data: &[f64], scale: f64) {
    for (g, d) in grads.value_mut(idx).data_mut().iter_mut().zip(data) {
        *g += scale * d;
    }
}

fn back_layers(
    records: &[Record],
    params: &ParamStore,
    mut d: Tensor,
    grads: &mut Gradients,
    scale: f64,
    need_input_grad: bool,
) -> Tensor {
    for (pos, rec) in records.iter().enumerate().rev() {
        let need_dx = need_input_grad || pos > 0;
        let n = d.rows();
        d = match rec {
            Record::Dense {
                input,
                weight,
                bias,
                mask,
            } => {
                let (k, m) = (input.cols(), d.cols());
                let dw = matmul_tn_raw(input.data(), d.data(), n, k, m);
                match mask {
                    Some(mk) => {
                        let masked: Vec<f64> = dw.iter().zip(mk).map(|(g, k)| g * k).collect();
                        add_into(grads, *weight, &masked, scale);
                    }
                    None => add_into(grads, *weight, &dw, scale),
                }
                if let Some(b) = bias {
                    let mut db = vec![0.0; m];
                    for row in d.data().chunks(m) {
                        for (s, v) in db.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    add_into(grads, *b, &db, scale);
                }
                if need_dx {
                    let w = params.value(*weight).data();
                    let dx = match mask {
                        Some(mk) => {
                            let eff: Vec<f64> = w.iter().zip(mk).map(|(w, k)| w * k).collect();
                            matmul_nt_raw(d.data(), &eff, n, m, k)
                        }
                        None => matmul_nt_raw(d.data(), w, n, m, k),
                    };
                    Tensor::from_parts(vec![n, k], dx)
                } else {
                    d
                }
            }
            Record::Conv {
                geom,
                cols,
                weight,
                bias,
            } => {
                let g = conv::backward(d.data(), n, cols, params.value(*weight).data(), geom, need_dx);
                add_into(grads, *weight, &g.dweight, scale);
                add_into(grads, *bias, &g.dbias, scale);
                if need_dx {
                    let w = geom.cin * geom.h * geom.w;
                    Tensor::from_parts(vec![n, w], g.dx)
                } else {
                    d
                }
            }
            Record::Relu { active } => {
                let data = d
                    .data()
                    .iter()
                    .zip(active)
                    .map(|(g, &a)| if a { *g } else { 0.0 })
                    .collect();
                Tensor::from_parts(d.shape().to_vec(), data)
            }
            Record::Pool { channels, area } => {
                let mut dx = vec![0.0; n * channels * area];
                for b in 0..n {
                    for c in 0..*channels {
                        let g = d.data()[b * channels + c] / *area as f64;
                        let base = b * channels * area + c * area;
                        dx[base..base + area].iter_mut().for_each(|v| *v = g);
                    }
                }
                Tensor::from_parts(vec![n, channels * area], dx)
            }
            Record::Dropout { mask } => match mask {
                Some(m) => {
                    let data = d.data().iter().zip(m).map(|(g, k)| g * k).collect();
                    Tensor::from_parts(d.shape().to_vec(), data)
                }
                None => d,
            },
            Record::Residual { branch, scale: s } => {
                if *s == 0.0 || branch.is_empty() {
                    d
                } else {
                    let db = back_layers(branch, params, d.scale(*s), grads, scale, true);
                    let mut dx = d;
                    // identity path plus branch path
                    for (a, b) in dx.data_mut().iter_mut().zip(db.data()) {
                        *a += b;
                    }
                    dx
                }
            }
        };
    }
    d
}

/// Gradient of the mean batch loss w.r.t. every parameter. Parameters the
/// forward pass did not read (skipped branches) get zero gradients.
pub fn backward(tape: &Tape<'_>) -> Result<Gradients> {
    if !tape.trainable {
        return Err(contract("backward called on an EVAL-mode tape"));
    }
    let mut grads = Gradients::zeros_like(tape.params);
    back_layers(
        &tape.records,
        tape.params,
        tape.loss_grad.clone(),
        &mut grads,
        1.0,
        false,
    );
    Ok(grads)
}
