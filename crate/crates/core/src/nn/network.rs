use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::loss::{cross_entropy_loss, LossValue};
use super::ParamMap;
use crate::error::{Error, Result};
use crate::quant::{quantize_tensor, quantize_value, QuantSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding of `kernel / 2`; odd kernels keep the spatial size.
    Same,
    Valid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
        /// Fixed-point format of this layer's stored weights.
        quant: Option<QuantSpec>,
    },
    Dense {
        name: String,
        in_features: usize,
        out_features: usize,
        quant: Option<QuantSpec>,
    },
    Relu,
    Sigmoid,
    Flatten,
    /// Activation quantization; the backward pass is straight-through.
    Quantize {
        spec: QuantSpec,
    },
}

impl Layer {
    pub fn describe(&self) -> String {
        match self {
            Layer::Conv2d { name, .. } => format!("conv2d `{name}`"),
            Layer::Dense { name, .. } => format!("dense `{name}`"),
            Layer::Relu => "relu".into(),
            Layer::Sigmoid => "sigmoid".into(),
            Layer::Flatten => "flatten".into(),
            Layer::Quantize { .. } => "quantize".into(),
        }
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            Layer::Conv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                (
                    format!("{name}.weight"),
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                ),
                (format!("{name}.bias"), vec![*out_channels]),
            ],
            Layer::Dense {
                name,
                in_features,
                out_features,
                ..
            } => vec![
                (format!("{name}.weight"), vec![*out_features, *in_features]),
                (format!("{name}.bias"), vec![*out_features]),
            ],
            _ => Vec::new(),
        }
    }

    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
                ..
            } => {
                let [c, h, w] = *input else {
                    return Err(format!("expects [C, H, W] input, got {input:?}"));
                };
                if c != *in_channels {
                    return Err(format!("expects {in_channels} input channels, got {c}"));
                }
                if *kernel == 0 {
                    return Err("kernel size must be positive".into());
                }
                let pad = match padding {
                    Padding::Same if kernel % 2 == 1 => kernel / 2,
                    Padding::Same => return Err(format!("same padding needs an odd kernel, got {kernel}")),
                    Padding::Valid => 0,
                };
                if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                    return Err(format!("kernel {kernel} larger than padded input {h}x{w}"));
                }
                Ok(vec![*out_channels, h + 2 * pad + 1 - kernel, w + 2 * pad + 1 - kernel])
            }
            Layer::Dense {
                in_features,
                out_features,
                ..
            } => match *input {
                [n] if n == *in_features => Ok(vec![*out_features]),
                _ => Err(format!("expects [{in_features}] input, got {input:?}")),
            },
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Relu | Layer::Sigmoid | Layer::Quantize { .. } => Ok(input.to_vec()),
        }
    }

    fn weight_quant(&self) -> Option<(&str, QuantSpec)> {
        match self {
            Layer::Conv2d {
                name, quant: Some(q), ..
            }
            | Layer::Dense {
                name, quant: Some(q), ..
            } => Some((name, *q)),
            _ => None,
        }
    }
}

/// A sequential network: layer list plus the per-example input shape.
/// Parameters live outside, in a [`ParamMap`], so one network can be run
/// against trained, quantized or perturbed weights alike.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkDesc", into = "NetworkDesc")]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// Per-example output shape of every layer.
    shapes: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct NetworkDesc {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl TryFrom<NetworkDesc> for Network {
    type Error = Error;

    fn try_from(d: NetworkDesc) -> Result<Self> {
        Network::new(d.input_shape, d.layers)
    }
}

impl From<Network> for NetworkDesc {
    fn from(n: Network) -> Self {
        NetworkDesc {
            input_shape: n.input_shape,
            layers: n.layers,
        }
    }
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Activations recorded by [`Network::forward_tape`], consumed by
/// [`Network::backward`].
#[derive(Debug)]
pub struct Tape {
    id: u64,
    batch: usize,
    /// Input of every layer, batch axis first.
    inputs: Vec<Tensor>,
    logits: Tensor,
    params: ParamMap,
}

impl Tape {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn cross_entropy(&self, labels: &[usize]) -> Result<LossValue> {
        let mut loss = cross_entropy_loss(&self.logits, labels)?;
        loss.tape_id = Some(self.id);
        Ok(loss)
    }
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("invalid input shape {input_shape:?}")));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut names = std::collections::BTreeSet::new();
        let mut cur = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            cur = layer
                .output_shape(&cur)
                .map_err(|m| Error::Shape(format!("layer {i} ({}): {m}", layer.describe())))?;
            for (pname, _) in layer.param_shapes() {
                if !names.insert(pname.clone()) {
                    return Err(Error::InvalidArgument(format!("duplicate parameter name `{pname}`")));
                }
            }
            shapes.push(cur.clone());
        }
        if cur.len() != 1 {
            return Err(Error::Shape(format!(
                "network must end in a class vector, final shape is {cur:?}"
            )));
        }
        Ok(Network {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().map_or(self.input_shape[0], |s| s[0])
    }

    /// `(name, shape)` of every trainable tensor, in layer order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers.iter().flat_map(Layer::param_shapes).collect()
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init_params(&self, seed: u64) -> ParamMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamMap::new();
        for layer in &self.layers {
            let (fan_in, fan_out) = match layer {
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (in_channels * kernel * kernel, out_channels * kernel * kernel),
                Layer::Dense {
                    in_features,
                    out_features,
                    ..
                } => (*in_features, *out_features),
                _ => continue,
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            for (name, shape) in layer.param_shapes() {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
                    Tensor::new(shape, data).expect("shape from layer")
                };
                params.insert(name, t);
            }
        }
        params
    }

    /// Parameters as the hardware stores them: layers with a weight
    /// [`QuantSpec`] get their tensors quantized, others are copied.
    pub fn effective_params(&self, params: &ParamMap) -> ParamMap {
        let mut out = params.clone();
        for (layer, q) in self.layers.iter().filter_map(Layer::weight_quant) {
            for suffix in ["weight", "bias"] {
                if let Some(t) = out.get_mut(&format!("{layer}.{suffix}")) {
                    *t = quantize_tensor(t, q);
                }
            }
        }
        out
    }

    pub fn has_quantization(&self) -> bool {
        self.layers
            .iter()
            .any(|l| l.weight_quant().is_some() || matches!(l, Layer::Quantize { .. }))
    }

    pub fn check_params(&self, params: &ParamMap) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, shape) in layer.param_shapes() {
                match params.get(&name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::Shape(format!(
                            "layer {i} ({}): parameter `{name}` has shape {:?}, expected {shape:?}",
                            layer.describe(),
                            t.shape()
                        )))
                    }
                    None => {
                        return Err(Error::Shape(format!(
                            "layer {i} ({}): missing parameter `{name}`",
                            layer.describe()
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    /// Returns `(batch, batched)` for an input tensor, or a shape error.
    fn batch_of(&self, input: &Tensor) -> Result<(usize, bool)> {
        let s = input.shape();
        if s == self.input_shape.as_slice() {
            Ok((1, false))
        } else if s.len() == self.input_shape.len() + 1 && s[1..] == self.input_shape[..] {
            Ok((s[0], true))
        } else {
            Err(Error::Shape(format!(
                "input {s:?} does not match network input {:?} (optionally batched)",
                self.input_shape
            )))
        }
    }

    /// Pre-softmax logits. A single example yields `[C]`, a batch `[N, C]`.
    /// The parameters are used exactly as given.
    pub fn forward(&self, params: &ParamMap, input: &Tensor) -> Result<Tensor> {
        let (batch, batched) = self.batch_of(input)?;
        self.check_params(params)?;
        let mut cur = input.data().to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let in_shape = if i == 0 { &self.input_shape } else { &self.shapes[i - 1] };
            cur = self.layer_forward(i, layer, in_shape, batch, &cur, params);
        }
        let classes = self.classes();
        let shape = if batched { vec![batch, classes] } else { vec![classes] };
        Tensor::new(shape, cur)
    }

    /// Forward pass over a batch that records what [`Network::backward`] needs.
    pub fn forward_tape(&self, params: &ParamMap, input: &Tensor) -> Result<Tape> {
        let (batch, batched) = self.batch_of(input)?;
        self.check_params(params)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = if batched {
            input.clone()
        } else {
            let mut s = vec![1];
            s.extend_from_slice(input.shape());
            input.clone().reshape(s)?
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let in_shape = if i == 0 { &self.input_shape } else { &self.shapes[i - 1] };
            let out = self.layer_forward(i, layer, in_shape, batch, cur.data(), params);
            let mut shape = vec![batch];
            shape.extend_from_slice(&self.shapes[i]);
            inputs.push(cur);
            cur = Tensor::new(shape, out)?;
        }
        Ok(Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            batch,
            inputs,
            logits: cur,
            params: params.clone(),
        })
    }

    fn layer_forward(
        &self,
        index: usize,
        layer: &Layer,
        in_shape: &[usize],
        batch: usize,
        x: &[f32],
        params: &ParamMap,
    ) -> Vec<f32> {
        let out_len = batch * self.shapes[index].iter().product::<usize>();
        match layer {
            Layer::Conv2d { name, .. } => {
                let g = conv_geom(layer, in_shape);
                let w = params.get(&format!("{name}.weight")).expect("checked");
                let b = params.get(&format!("{name}.bias")).expect("checked");
                let mut out = vec![0f32; out_len];
                kernels::conv2d_forward(&g, batch, x, w.data(), b.data(), &mut out);
                out
            }
            Layer::Dense {
                name,
                in_features,
                out_features,
                ..
            } => {
                let w = params.get(&format!("{name}.weight")).expect("checked");
                let b = params.get(&format!("{name}.bias")).expect("checked");
                let mut out = vec![0f32; out_len];
                kernels::dense_forward(batch, *in_features, *out_features, x, w.data(), b.data(), &mut out);
                out
            }
            Layer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            Layer::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Layer::Flatten => x.to_vec(),
            Layer::Quantize { spec } => x.iter().map(|&v| quantize_value(v, *spec)).collect(),
        }
    }

    /// Reverse-mode pass. `loss` must have been computed from `tape` via
    /// [`Tape::cross_entropy`]. Returns one gradient per parameter.
    pub fn backward(&self, tape: &Tape, loss: &LossValue) -> Result<ParamMap> {
        self.backward_with_input_grad(tape, loss).map(|(g, _)| g)
    }

    /// Like [`Network::backward`], additionally returning the gradient with
    /// respect to the network input.
    pub fn backward_with_input_grad(&self, tape: &Tape, loss: &LossValue) -> Result<(ParamMap, Tensor)> {
        if loss.tape_id != Some(tape.id) {
            return Err(Error::BackwardWithoutForward);
        }
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::Shape("tape was recorded on a different network".into()));
        }
        let batch = tape.batch;
        let mut grads = ParamMap::new();
        let mut g = loss.d_logits.data().to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.inputs[i];
            let in_shape = if i == 0 { &self.input_shape } else { &self.shapes[i - 1] };
            g = match layer {
                Layer::Conv2d { name, .. } => {
                    let geom = conv_geom(layer, in_shape);
                    let w = tape.params.require(&format!("{name}.weight"))?;
                    let (dx, dw, db) = kernels::conv2d_backward(&geom, batch, x.data(), w.data(), &g);
                    grads.insert(format!("{name}.weight"), Tensor::new(w.shape().to_vec(), dw)?);
                    grads.insert(format!("{name}.bias"), Tensor::from_vec(db)?);
                    dx
                }
                Layer::Dense {
                    name,
                    in_features,
                    out_features,
                    ..
                } => {
                    let w = tape.params.require(&format!("{name}.weight"))?;
                    let (dx, dw, db) =
                        kernels::dense_backward(batch, *in_features, *out_features, x.data(), w.data(), &g);
                    grads.insert(format!("{name}.weight"), Tensor::new(w.shape().to_vec(), dw)?);
                    grads.insert(format!("{name}.bias"), Tensor::from_vec(db)?);
                    dx
                }
                Layer::Relu => g
                    .iter()
                    .zip(x.data())
                    .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                    .collect(),
                Layer::Sigmoid => g
                    .iter()
                    .zip(x.data())
                    .map(|(&d, &v)| {
                        let s = sigmoid(v) as f64;
                        (d as f64 * s * (1.0 - s)) as f32
                    })
                    .collect(),
                Layer::Flatten | Layer::Quantize { .. } => g,
            };
        }
        let dx = Tensor::new(tape.inputs[0].shape().to_vec(), g)?;
        Ok((grads, dx))
    }
}

fn conv_geom(layer: &Layer, in_shape: &[usize]) -> ConvGeom {
    let Layer::Conv2d {
        out_channels,
        kernel,
        padding,
        ..
    } = layer
    else {
        unreachable!("conv_geom on non-conv layer")
    };
    ConvGeom {
        in_channels: in_shape[0],
        height: in_shape[1],
        width: in_shape[2],
        out_channels: *out_channels,
        kernel: *kernel,
        pad: match padding {
            Padding::Same => kernel / 2,
            Padding::Valid => 0,
        },
    }
}

fn sigmoid(v: f32) -> f32 {
    (1.0 / (1.0 + (-(v as f64)).exp())) as f32
}

/// `p <- p - lr * g` for every parameter.
pub fn sgd_step(params: &mut ParamMap, grads: &ParamMap, lr: f32) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and >= 0, got {lr}"
        )));
    }
    params.check_same_layout(grads)?;
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("layout checked");
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

/// A network together with its (full-precision) parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub params: ParamMap,
}

impl Model {
    pub fn new(net: Network, params: ParamMap) -> Result<Self> {
        net.check_params(&params)?;
        Ok(Model { net, params })
    }

    pub fn init(net: Network, seed: u64) -> Self {
        let params = net.init_params(seed);
        Model { net, params }
    }

    /// Forward through the weights as deployed (quantized where configured).
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.net.forward(&self.net.effective_params(&self.params), input)
    }
}
