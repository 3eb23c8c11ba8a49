//! Layer-by-layer classifier description, parameter containers, forward
//! traces, input-space gradients and SGD training.
//!
//! A network is a fixed vocabulary of layers ending in exactly one softmax.
//! At least one convolution and one max-pool are required so that feature
//! response maps have both ReLU gates and pooling switches to work with.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward, conv2d_forward, cross_entropy, dense_backward, dense_forward,
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, softmax, PoolSwitches, Tensor,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One layer of the fixed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        units: usize,
    },
    Softmax,
}

/// Validated architecture: input shape, class count and ordered layers.
///
/// Construction checks that shapes chain consistently, that softmax appears
/// exactly once as the terminal layer, and that the net contains at least one
/// convolution and one max-pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    input: [usize; 3],
    classes: usize,
    layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input: [usize; 3], classes: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        if input.contains(&0) {
            return Err(Error::UnsupportedArchitecture(format!(
                "input extents must be positive, got {input:?}"
            )));
        }
        if classes < 2 {
            return Err(Error::UnsupportedArchitecture(
                "need at least 2 classes".into(),
            ));
        }
        let spec = NetworkSpec {
            input,
            classes,
            layers,
        };
        spec.layer_shapes()?;
        Ok(spec)
    }

    /// The architecture used by every desk-scale experiment:
    /// 1×28×28 → conv(8,3×3,s1,p1) → relu → pool(2,2) → conv(16,3×3,s1,p1)
    /// → relu → pool(2,2) → flatten → dense(10) → softmax.
    pub fn reference() -> Self {
        NetworkSpec::new(
            [1, 28, 28],
            10,
            vec![
                LayerSpec::Conv {
                    filters: 8,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool {
                    window: 2,
                    stride: 2,
                },
                LayerSpec::Conv {
                    filters: 16,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool {
                    window: 2,
                    stride: 2,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 10 },
                LayerSpec::Softmax,
            ],
        )
        .expect("reference architecture is valid")
    }

    pub fn input(&self) -> [usize; 3] {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Output shape of every layer in order, validating the whole chain.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut conv_seen = false;
        let mut pool_seen = false;
        let mut softmax_seen = false;
        let mut shape: Vec<usize> = self.input.to_vec();
        let mut shapes = Vec::with_capacity(self.layers.len());

        for (i, layer) in self.layers.iter().enumerate() {
            if softmax_seen {
                return Err(Error::UnsupportedArchitecture(format!(
                    "layer {i}: softmax must be the terminal layer"
                )));
            }
            shape = match *layer {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    conv_seen = true;
                    let [_, h, w] = rank3(&shape, i, "conv")?;
                    if filters == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::UnsupportedArchitecture(format!(
                            "layer {i}: conv extents must be positive"
                        )));
                    }
                    let oh = conv_extent(h, kernel, stride, padding, i)?;
                    let ow = conv_extent(w, kernel, stride, padding, i)?;
                    vec![filters, oh, ow]
                }
                LayerSpec::Relu => shape,
                LayerSpec::MaxPool { window, stride } => {
                    pool_seen = true;
                    let [c, h, w] = rank3(&shape, i, "maxpool")?;
                    if window == 0 || stride == 0 || window > h || window > w {
                        return Err(Error::UnsupportedArchitecture(format!(
                            "layer {i}: maxpool window {window} does not fit input {h}x{w}"
                        )));
                    }
                    vec![c, (h - window) / stride + 1, (w - window) / stride + 1]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Dense { units } => {
                    if shape.len() != 1 {
                        return Err(Error::UnsupportedArchitecture(format!(
                            "layer {i}: dense requires a flattened rank-1 input, got {shape:?}"
                        )));
                    }
                    if units == 0 {
                        return Err(Error::UnsupportedArchitecture(format!(
                            "layer {i}: dense units must be positive"
                        )));
                    }
                    vec![units]
                }
                LayerSpec::Softmax => {
                    softmax_seen = true;
                    if shape.len() != 1 {
                        return Err(Error::UnsupportedArchitecture(format!(
                            "layer {i}: softmax requires a rank-1 input, got {shape:?}"
                        )));
                    }
                    shape
                }
            };
            shapes.push(shape.clone());
        }

        if !softmax_seen {
            return Err(Error::UnsupportedArchitecture(
                "network must end in softmax".into(),
            ));
        }
        if !conv_seen || !pool_seen {
            return Err(Error::UnsupportedArchitecture(
                "network needs at least one conv and one maxpool layer".into(),
            ));
        }
        if shape != [self.classes] {
            return Err(Error::UnsupportedArchitecture(format!(
                "final layer produces {shape:?}, expected [{}]",
                self.classes
            )));
        }
        Ok(shapes)
    }

    /// Index of the last convolution layer.
    pub fn last_conv_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Conv { .. }))
    }

    /// Stable one-line-per-layer rendering, embedded in weight files.
    pub fn to_canonical_text(&self) -> String {
        let mut out = format!(
            "input {}x{}x{}\nclasses {}\n",
            self.input[0], self.input[1], self.input[2], self.classes
        );
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => out.push_str(&format!(
                    "conv filters={filters} kernel={kernel} stride={stride} padding={padding}\n"
                )),
                LayerSpec::Relu => out.push_str("relu\n"),
                LayerSpec::MaxPool { window, stride } => {
                    out.push_str(&format!("maxpool window={window} stride={stride}\n"))
                }
                LayerSpec::Flatten => out.push_str("flatten\n"),
                LayerSpec::Dense { units } => out.push_str(&format!("dense units={units}\n")),
                LayerSpec::Softmax => out.push_str("softmax\n"),
            }
        }
        out
    }

    /// Inverse of [`to_canonical_text`](Self::to_canonical_text).
    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let bad = |line: &str, why: &str| {
            Error::UnsupportedArchitecture(format!("cannot parse layer line {line:?}: {why}"))
        };
        let mut input: Option<[usize; 3]> = None;
        let mut classes: Option<usize> = None;
        let mut layers = Vec::new();

        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut words = line.split_whitespace();
            let head = words.next().unwrap();
            let rest: Vec<&str> = words.collect();
            match head {
                "input" => {
                    let extents: Vec<usize> = rest
                        .first()
                        .ok_or_else(|| bad(line, "missing extents"))?
                        .split('x')
                        .map(|p| p.parse().map_err(|_| bad(line, "non-numeric extent")))
                        .collect::<Result<_>>()?;
                    if extents.len() != 3 {
                        return Err(bad(line, "expected CxHxW"));
                    }
                    input = Some([extents[0], extents[1], extents[2]]);
                }
                "classes" => {
                    classes = Some(
                        rest.first()
                            .ok_or_else(|| bad(line, "missing count"))?
                            .parse()
                            .map_err(|_| bad(line, "non-numeric count"))?,
                    );
                }
                "conv" => {
                    let f = key_value(&rest, "filters").ok_or_else(|| bad(line, "filters"))?;
                    let k = key_value(&rest, "kernel").ok_or_else(|| bad(line, "kernel"))?;
                    let s = key_value(&rest, "stride").ok_or_else(|| bad(line, "stride"))?;
                    let p = key_value(&rest, "padding").ok_or_else(|| bad(line, "padding"))?;
                    layers.push(LayerSpec::Conv {
                        filters: f,
                        kernel: k,
                        stride: s,
                        padding: p,
                    });
                }
                "relu" => layers.push(LayerSpec::Relu),
                "maxpool" => {
                    let w = key_value(&rest, "window").ok_or_else(|| bad(line, "window"))?;
                    let s = key_value(&rest, "stride").ok_or_else(|| bad(line, "stride"))?;
                    layers.push(LayerSpec::MaxPool {
                        window: w,
                        stride: s,
                    });
                }
                "flatten" => layers.push(LayerSpec::Flatten),
                "dense" => {
                    let u = key_value(&rest, "units").ok_or_else(|| bad(line, "units"))?;
                    layers.push(LayerSpec::Dense { units: u });
                }
                "softmax" => layers.push(LayerSpec::Softmax),
                other => return Err(bad(line, &format!("unknown layer {other:?}"))),
            }
        }

        let input =
            input.ok_or_else(|| Error::UnsupportedArchitecture("missing input line".into()))?;
        let classes =
            classes.ok_or_else(|| Error::UnsupportedArchitecture("missing classes line".into()))?;
        NetworkSpec::new(input, classes, layers)
    }
}

fn key_value(words: &[&str], key: &str) -> Option<usize> {
    words.iter().find_map(|w| {
        let (k, v) = w.split_once('=')?;
        (k == key).then(|| v.parse().ok()).flatten()
    })
}

fn rank3(shape: &[usize], layer: usize, kind: &str) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        other => Err(Error::UnsupportedArchitecture(format!(
            "layer {layer}: {kind} requires a rank-3 input, got {other:?}"
        ))),
    }
}

fn conv_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    layer: usize,
) -> Result<usize> {
    let padded = input + 2 * padding;
    if kernel > padded {
        return Err(Error::UnsupportedArchitecture(format!(
            "layer {layer}: kernel {kernel} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Kernels/weights and biases of one learnable layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv { kernels: Tensor, bias: Tensor },
    Dense { weights: Tensor, bias: Tensor },
}

/// Learned weights aligned with a [`NetworkSpec`]'s layer list; entries are
/// `None` for parameter-free layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    items: Vec<Option<LayerParams>>,
}

impl Parameters {
    /// Uniform init in ±sqrt(6/(fan_in+fan_out)), biases zero.
    pub fn init(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::build(
            spec,
            |fan_in, fan_out, len, rng| {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
            },
            rng,
        )
    }

    /// All-zero parameters of the right shapes.
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Self::build(spec, |_, _, len, _| vec![0.0; len], &mut rng)
    }

    fn build(
        spec: &NetworkSpec,
        mut fill: impl FnMut(usize, usize, usize, &mut ChaCha8Rng) -> Vec<f32>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let shapes = spec.layer_shapes()?;
        let mut items = Vec::with_capacity(spec.layers().len());
        let mut in_shape: Vec<usize> = spec.input().to_vec();
        for (layer, out_shape) in spec.layers().iter().zip(&shapes) {
            items.push(match *layer {
                LayerSpec::Conv {
                    filters, kernel, ..
                } => {
                    let channels = in_shape[0];
                    let fan_in = channels * kernel * kernel;
                    let fan_out = filters * kernel * kernel;
                    let len = filters * channels * kernel * kernel;
                    Some(LayerParams::Conv {
                        kernels: Tensor::new(
                            vec![filters, channels, kernel, kernel],
                            fill(fan_in, fan_out, len, rng),
                        )?,
                        bias: Tensor::zeros(vec![filters]),
                    })
                }
                LayerSpec::Dense { units } => {
                    let inputs = in_shape[0];
                    Some(LayerParams::Dense {
                        weights: Tensor::new(
                            vec![units, inputs],
                            fill(inputs, units, units * inputs, rng),
                        )?,
                        bias: Tensor::zeros(vec![units]),
                    })
                }
                _ => None,
            });
            in_shape = out_shape.clone();
        }
        Ok(Parameters { items })
    }

    pub fn layer(&self, index: usize) -> Option<&LayerParams> {
        self.items.get(index).and_then(|p| p.as_ref())
    }

    pub fn layer_mut(&mut self, index: usize) -> Option<&mut LayerParams> {
        self.items.get_mut(index).and_then(|p| p.as_mut())
    }

    /// Named tensors in layer order, for persistence.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, item) in self.items.iter().enumerate() {
            match item {
                Some(LayerParams::Conv { kernels, bias }) => {
                    out.push((format!("layer{i}.kernels"), kernels));
                    out.push((format!("layer{i}.bias"), bias));
                }
                Some(LayerParams::Dense { weights, bias }) => {
                    out.push((format!("layer{i}.weights"), weights));
                    out.push((format!("layer{i}.bias"), bias));
                }
                None => {}
            }
        }
        out
    }

    /// Rebuild from named tensors, validating against the spec's shapes.
    pub fn from_named_tensors(spec: &NetworkSpec, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut params = Parameters::zeros(spec)?;
        let lookup = |name: &str| -> Result<&Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| {
                    Error::UnsupportedArchitecture(format!("weight file missing tensor {name:?}"))
                })
        };
        for (i, item) in params.items.iter_mut().enumerate() {
            match item {
                Some(LayerParams::Conv { kernels, bias }) => {
                    assign(kernels, lookup(&format!("layer{i}.kernels"))?)?;
                    assign(bias, lookup(&format!("layer{i}.bias"))?)?;
                }
                Some(LayerParams::Dense { weights, bias }) => {
                    assign(weights, lookup(&format!("layer{i}.weights"))?)?;
                    assign(bias, lookup(&format!("layer{i}.bias"))?)?;
                }
                None => {}
            }
        }
        Ok(params)
    }

    pub fn all_finite(&self) -> bool {
        self.items.iter().flatten().all(|p| match p {
            LayerParams::Conv { kernels, bias } => kernels.all_finite() && bias.all_finite(),
            LayerParams::Dense { weights, bias } => weights.all_finite() && bias.all_finite(),
        })
    }
}

fn assign(slot: &mut Tensor, value: &Tensor) -> Result<()> {
    if slot.shape() != value.shape() {
        return Err(Error::shape(
            "load weights",
            format!("{:?}", slot.shape()),
            format!("{:?}", value.shape()),
        ));
    }
    *slot = value.clone();
    Ok(())
}

/// Everything recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    pub logits: Tensor,
    pub probabilities: Tensor,
}

/// Input, output and pool switches of a single layer.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub input: Tensor,
    pub output: Tensor,
    pub switches: Option<PoolSwitches>,
}

/// SGD hyperparameters; the seed drives init and per-epoch shuffling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f32,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 6,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            lr_decay_every: 2,
            lr_decay_factor: 0.5,
            seed: 42,
        }
    }
}

/// Loss/accuracy record for one training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f32,
    pub heldout_accuracy: f32,
    pub learning_rate: f32,
}

/// A spec paired with parameters: the trainable classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: NetworkSpec,
    params: Parameters,
}

impl Model {
    pub fn new(spec: NetworkSpec, params: Parameters) -> Result<Self> {
        let expected = Parameters::zeros(&spec)?;
        if expected.items.len() != params.items.len() {
            return Err(Error::UnsupportedArchitecture(
                "parameter list does not match layer list".into(),
            ));
        }
        for (slot, given) in expected.items.iter().zip(&params.items) {
            let ok = match (slot, given) {
                (None, None) => true,
                (
                    Some(LayerParams::Conv {
                        kernels: a,
                        bias: ab,
                    }),
                    Some(LayerParams::Conv {
                        kernels: b,
                        bias: bb,
                    }),
                ) => a.shape() == b.shape() && ab.shape() == bb.shape(),
                (
                    Some(LayerParams::Dense {
                        weights: a,
                        bias: ab,
                    }),
                    Some(LayerParams::Dense {
                        weights: b,
                        bias: bb,
                    }),
                ) => a.shape() == b.shape() && ab.shape() == bb.shape(),
                _ => false,
            };
            if !ok {
                return Err(Error::UnsupportedArchitecture(
                    "parameter shapes do not match the network spec".into(),
                ));
            }
        }
        if !params.all_finite() {
            return Err(Error::Numeric(
                "parameters contain non-finite values".into(),
            ));
        }
        Ok(Model { spec, params })
    }

    /// Fresh model with seeded uniform init.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Parameters::init(&spec, &mut rng)?;
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    /// Full forward pass retaining every intermediate tensor.
    pub fn forward(&self, image: &Tensor) -> Result<ForwardTrace> {
        if image.shape() != self.spec.input() {
            return Err(Error::shape(
                "forward",
                format!("{:?}", self.spec.input()),
                format!("{:?}", image.shape()),
            ));
        }
        if image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(
                "image pixels must lie in [0,1]".into(),
            ));
        }

        let mut layers = Vec::with_capacity(self.spec.layers().len());
        let mut current = image.clone();
        for (i, layer) in self.spec.layers().iter().enumerate() {
            let mut switches = None;
            let output = match *layer {
                LayerSpec::Conv {
                    stride, padding, ..
                } => {
                    let Some(LayerParams::Conv { kernels, bias }) = self.params.layer(i) else {
                        return Err(Error::UnsupportedArchitecture(format!(
                            "layer {i}: missing conv parameters"
                        )));
                    };
                    conv2d_forward(&current, kernels, bias, stride, padding)?
                }
                LayerSpec::Relu => relu_forward(&current),
                LayerSpec::MaxPool { window, stride } => {
                    let (out, sw) = maxpool_forward(&current, window, stride)?;
                    switches = Some(sw);
                    out
                }
                LayerSpec::Flatten => current.reshape(vec![current.len()])?,
                LayerSpec::Dense { .. } => {
                    let Some(LayerParams::Dense { weights, bias }) = self.params.layer(i) else {
                        return Err(Error::UnsupportedArchitecture(format!(
                            "layer {i}: missing dense parameters"
                        )));
                    };
                    dense_forward(&current, weights, bias)?
                }
                LayerSpec::Softmax => softmax(&current)?,
            };
            if !output.all_finite() {
                return Err(Error::Numeric(format!(
                    "layer {i} ({layer:?}) produced non-finite activations"
                )));
            }
            layers.push(LayerTrace {
                input: current,
                output: output.clone(),
                switches,
            });
            current = output;
        }

        let logits = layers[layers.len() - 1].input.clone();
        Ok(ForwardTrace {
            layers,
            logits,
            probabilities: current,
        })
    }

    /// Class probabilities for an image.
    pub fn probabilities(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.forward(image)?.probabilities)
    }

    /// Predicted class and its confidence.
    pub fn predict(&self, image: &Tensor) -> Result<(usize, f32)> {
        let probs = self.probabilities(image)?;
        let label = probs.argmax();
        Ok((label, probs.data()[label]))
    }

    /// Gradient of the cross-entropy loss at `label` w.r.t. every pixel.
    pub fn input_gradient(&self, image: &Tensor, label: usize) -> Result<Tensor> {
        let trace = self.forward(image)?;
        if label >= self.spec.classes() {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                self.spec.classes()
            )));
        }
        let mut seed = trace.probabilities.clone();
        seed.data_mut()[label] -= 1.0;
        self.backward_to_input(&trace, seed)
    }

    /// Gradient of raw logit `class_k` w.r.t. every pixel.
    pub fn logit_gradient(&self, image: &Tensor, class_k: usize) -> Result<Tensor> {
        let trace = self.forward(image)?;
        self.logit_gradient_from_trace(&trace, class_k)
    }

    /// As [`logit_gradient`](Self::logit_gradient) but reusing a trace.
    pub fn logit_gradient_from_trace(
        &self,
        trace: &ForwardTrace,
        class_k: usize,
    ) -> Result<Tensor> {
        if class_k >= self.spec.classes() {
            return Err(Error::InvalidArgument(format!(
                "class {class_k} out of range for {} classes",
                self.spec.classes()
            )));
        }
        let mut seed = Tensor::zeros(vec![self.spec.classes()]);
        seed.data_mut()[class_k] = 1.0;
        self.backward_to_input(trace, seed)
    }

    /// Gradient of the softmax probability at `label` w.r.t. every pixel.
    pub fn confidence_gradient(&self, image: &Tensor, label: usize) -> Result<Tensor> {
        let trace = self.forward(image)?;
        if label >= self.spec.classes() {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                self.spec.classes()
            )));
        }
        // d p_l / d z_k = p_l (1[k==l] - p_k)
        let p = trace.probabilities.data();
        let pl = p[label];
        let seed: Vec<f32> = p
            .iter()
            .enumerate()
            .map(|(k, &pk)| pl * (if k == label { 1.0 } else { 0.0 } - pk))
            .collect();
        let seed = Tensor::new(vec![self.spec.classes()], seed)?;
        self.backward_to_input(&trace, seed)
    }

    /// Backward walk from a gradient seed at the logits down to the input.
    fn backward_to_input(&self, trace: &ForwardTrace, seed: Tensor) -> Result<Tensor> {
        let mut grad = seed;
        for (i, layer) in self.spec.layers().iter().enumerate().rev() {
            let lt = &trace.layers[i];
            grad = match *layer {
                LayerSpec::Softmax => grad,
                LayerSpec::Dense { .. } => {
                    let Some(LayerParams::Dense { weights, .. }) = self.params.layer(i) else {
                        unreachable!("validated at construction");
                    };
                    dense_backward(&grad, &lt.input, weights)?.0
                }
                LayerSpec::Flatten => grad.reshape(lt.input.shape().to_vec())?,
                LayerSpec::MaxPool { .. } => {
                    let switches = lt.switches.as_ref().expect("pool layer has switches");
                    maxpool_backward(&grad, switches, lt.input.shape())?
                }
                LayerSpec::Relu => relu_backward(&grad, &lt.input)?,
                LayerSpec::Conv {
                    stride, padding, ..
                } => {
                    let Some(LayerParams::Conv { kernels, .. }) = self.params.layer(i) else {
                        unreachable!("validated at construction");
                    };
                    conv2d_backward(&grad, &lt.input, kernels, stride, padding)?.0
                }
            };
        }
        Ok(grad)
    }

    /// Loss and parameter gradients for one labelled sample.
    fn backward_params(
        &self,
        trace: &ForwardTrace,
        label: usize,
    ) -> Result<(f32, Vec<Option<LayerParams>>)> {
        let loss = cross_entropy(&trace.probabilities, label)?;
        let mut grad = trace.probabilities.clone();
        grad.data_mut()[label] -= 1.0;

        let mut grads: Vec<Option<LayerParams>> = vec![None; self.spec.layers().len()];
        for (i, layer) in self.spec.layers().iter().enumerate().rev() {
            let lt = &trace.layers[i];
            grad = match *layer {
                LayerSpec::Softmax => grad,
                LayerSpec::Dense { .. } => {
                    let Some(LayerParams::Dense { weights, .. }) = self.params.layer(i) else {
                        unreachable!("validated at construction");
                    };
                    let (gi, gw, gb) = dense_backward(&grad, &lt.input, weights)?;
                    grads[i] = Some(LayerParams::Dense {
                        weights: gw,
                        bias: gb,
                    });
                    gi
                }
                LayerSpec::Flatten => grad.reshape(lt.input.shape().to_vec())?,
                LayerSpec::MaxPool { .. } => {
                    let switches = lt.switches.as_ref().expect("pool layer has switches");
                    maxpool_backward(&grad, switches, lt.input.shape())?
                }
                LayerSpec::Relu => relu_backward(&grad, &lt.input)?,
                LayerSpec::Conv {
                    stride, padding, ..
                } => {
                    let Some(LayerParams::Conv { kernels, .. }) = self.params.layer(i) else {
                        unreachable!("validated at construction");
                    };
                    let (gi, gk, gb) = conv2d_backward(&grad, &lt.input, kernels, stride, padding)?;
                    grads[i] = Some(LayerParams::Conv {
                        kernels: gk,
                        bias: gb,
                    });
                    gi
                }
            };
        }
        Ok((loss, grads))
    }

    /// Trains a fresh model with momentum SGD. Deterministic per schedule
    /// seed; one metrics row per epoch.
    pub fn train(
        spec: NetworkSpec,
        train_set: &Dataset,
        heldout: &Dataset,
        schedule: &TrainSchedule,
    ) -> Result<(Model, Vec<EpochMetrics>)> {
        if train_set.is_empty() {
            return Err(Error::InvalidArgument("training dataset is empty".into()));
        }
        if schedule.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        let mut model = Model {
            spec: spec.clone(),
            params: Parameters::init(&spec, &mut rng)?,
        };
        let mut velocity = Parameters::zeros(&spec)?;
        let mut metrics = Vec::with_capacity(schedule.epochs);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut lr = schedule.learning_rate;

        for epoch in 1..=schedule.epochs {
            if epoch > 1
                && schedule.lr_decay_every > 0
                && (epoch - 1) % schedule.lr_decay_every == 0
            {
                lr *= schedule.lr_decay_factor;
            }
            shuffle(&mut order, &mut rng);

            let mut loss_sum = 0.0f64;
            for batch in order.chunks(schedule.batch_size) {
                let mut batch_grads: Vec<Option<LayerParams>> = vec![None; spec.layers().len()];
                for &idx in batch {
                    let image = train_set.image(idx);
                    let label = train_set.label(idx);
                    let trace = model.forward(image)?;
                    let (loss, grads) = model.backward_params(&trace, label)?;
                    if !loss.is_finite() {
                        return Err(Error::Numeric(format!(
                            "training diverged at epoch {epoch} (non-finite loss)"
                        )));
                    }
                    loss_sum += f64::from(loss);
                    accumulate(&mut batch_grads, grads)?;
                }
                let scale = 1.0 / batch.len() as f32;
                step(
                    &mut model.params,
                    &mut velocity,
                    &batch_grads,
                    lr,
                    schedule.momentum,
                    scale,
                )?;
            }

            if !model.params.all_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch} (non-finite parameters)"
                )));
            }

            let mut correct = 0usize;
            for i in 0..heldout.len() {
                if model.predict(heldout.image(i))?.0 == heldout.label(i) {
                    correct += 1;
                }
            }
            metrics.push(EpochMetrics {
                epoch,
                mean_loss: (loss_sum / train_set.len() as f64) as f32,
                heldout_accuracy: if heldout.is_empty() {
                    0.0
                } else {
                    correct as f32 / heldout.len() as f32
                },
                learning_rate: lr,
            });
        }

        Ok((model, metrics))
    }
}

/// Fisher-Yates with explicitly pinned semantics so shuffles are stable
/// across library versions.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

fn accumulate(into: &mut [Option<LayerParams>], from: Vec<Option<LayerParams>>) -> Result<()> {
    for (slot, grad) in into.iter_mut().zip(from) {
        match (slot.as_mut(), grad) {
            (None, Some(g)) => *slot = Some(g),
            (
                Some(LayerParams::Conv { kernels, bias }),
                Some(LayerParams::Conv {
                    kernels: gk,
                    bias: gb,
                }),
            ) => {
                *kernels = kernels.add(&gk)?;
                *bias = bias.add(&gb)?;
            }
            (
                Some(LayerParams::Dense { weights, bias }),
                Some(LayerParams::Dense {
                    weights: gw,
                    bias: gb,
                }),
            ) => {
                *weights = weights.add(&gw)?;
                *bias = bias.add(&gb)?;
            }
            (_, None) => {}
            _ => return Err(Error::Numeric("gradient layout mismatch".into())),
        }
    }
    Ok(())
}

/// v <- momentum·v + mean_grad; θ <- θ − lr·v, per learnable tensor.
fn step(
    params: &mut Parameters,
    velocity: &mut Parameters,
    batch_grads: &[Option<LayerParams>],
    lr: f32,
    momentum: f32,
    scale: f32,
) -> Result<()> {
    for ((p, v), g) in params
        .items
        .iter_mut()
        .zip(velocity.items.iter_mut())
        .zip(batch_grads)
    {
        let pairs: Vec<(&mut Tensor, &mut Tensor, &Tensor)> = match (p, v, g) {
            (
                Some(LayerParams::Conv { kernels, bias }),
                Some(LayerParams::Conv {
                    kernels: vk,
                    bias: vb,
                }),
                Some(LayerParams::Conv {
                    kernels: gk,
                    bias: gb,
                }),
            ) => {
                vec![(kernels, vk, gk), (bias, vb, gb)]
            }
            (
                Some(LayerParams::Dense { weights, bias }),
                Some(LayerParams::Dense {
                    weights: vw,
                    bias: vb,
                }),
                Some(LayerParams::Dense {
                    weights: gw,
                    bias: gb,
                }),
            ) => {
                vec![(weights, vw, gw), (bias, vb, gb)]
            }
            (_, _, None) => continue,
            _ => return Err(Error::Numeric("velocity layout mismatch".into())),
        };
        for (theta, vel, grad) in pairs {
            for ((t, v), &g) in theta
                .data_mut()
                .iter_mut()
                .zip(vel.data_mut())
                .zip(grad.data())
            {
                *v = momentum * *v + g * scale;
                *t -= lr * *v;
            }
        }
    }
    Ok(())
}
