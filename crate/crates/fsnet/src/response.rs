//! Guided backpropagation of the deepest convolutional activations down to
//! the input, plus conversion of the signed result to a normalized
//! grayscale map.
//!
//! The backward seed is the post-ReLU activation tensor of the final conv
//! layer. On the way down every ReLU zeroes the signal where the forward
//! input was non-positive or the backward signal itself is non-positive;
//! pooling layers route through their recorded argmax switches. Layers above
//! the final conv (dense, softmax) are never traversed.

use crate::error::{Error, Result};
use crate::network::{LayerParams, LayerSpec, Model};
use crate::tensor::{conv2d_backward, maxpool_backward, Tensor};

/// Signed per-channel response of the input, same shape as the image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureResponse {
    map: Tensor,
}

impl FeatureResponse {
    pub fn map(&self) -> &Tensor {
        &self.map
    }

    pub fn into_map(self) -> Tensor {
        self.map
    }
}

/// Channel-averaged magnitude of a response, max-normalized into [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayscaleMap {
    map: Tensor,
}

impl GrayscaleMap {
    pub fn map(&self) -> &Tensor {
        &self.map
    }

    pub fn into_map(self) -> Tensor {
        self.map
    }

    /// Wraps a rank-2 tensor without renormalizing. Test fixtures only.
    #[cfg(any(test, feature = "testkit"))]
    pub fn from_raw(map: Tensor) -> Self {
        assert_eq!(map.shape().len(), 2);
        GrayscaleMap { map }
    }
}

/// How a ReLU treats the backward signal on the way down.
#[derive(Clone, Copy, PartialEq)]
enum ReluRule {
    /// Zero where forward input <= 0 or backward signal <= 0.
    Guided,
    /// Zero only where forward input <= 0. Reachable from tests only.
    #[cfg_attr(not(test), allow(dead_code))]
    Plain,
}

pub fn guided_backprop(model: &Model, image: &Tensor) -> Result<FeatureResponse> {
    backprop_response(model, image, ReluRule::Guided)
}

/// Same walk without the backward-signal gate. Exists to measure what the
/// guidance contributes; not part of the public surface.
#[cfg(test)]
pub(crate) fn plain_backprop(model: &Model, image: &Tensor) -> Result<FeatureResponse> {
    backprop_response(model, image, ReluRule::Plain)
}

fn backprop_response(model: &Model, image: &Tensor, rule: ReluRule) -> Result<FeatureResponse> {
    let last_conv = model.spec().last_conv_index().ok_or_else(|| {
        Error::UnsupportedArchitecture(
            "feature response needs at least one convolutional layer".into(),
        )
    })?;
    let trace = model.forward(image)?;
    let layers = model.spec().layers();

    // seed with the post-ReLU activations of the final conv layer
    let seed_index = if matches!(layers.get(last_conv + 1), Some(LayerSpec::Relu)) {
        last_conv + 1
    } else {
        last_conv
    };
    let mut grad = trace.layers[seed_index].output.clone();

    for index in (0..=seed_index).rev() {
        let layer_trace = &trace.layers[index];
        grad = match &layers[index] {
            LayerSpec::Conv {
                stride, padding, ..
            } => {
                let Some(LayerParams::Conv { kernels, .. }) = model.params().layer(index) else {
                    return Err(Error::InvalidArgument(format!(
                        "layer {index} has no convolution parameters"
                    )));
                };
                let (grad_input, _, _) =
                    conv2d_backward(&grad, &layer_trace.input, kernels, *stride, *padding)?;
                grad_input
            }
            LayerSpec::Relu => gate_relu(&grad, &layer_trace.input, rule)?,
            LayerSpec::MaxPool { .. } => {
                let switches = layer_trace.switches.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!("layer {index} recorded no pool switches"))
                })?;
                maxpool_backward(&grad, switches, layer_trace.input.shape())?
            }
            LayerSpec::Flatten => grad.reshape(layer_trace.input.shape().to_vec())?,
            LayerSpec::Dense { .. } | LayerSpec::Softmax => {
                return Err(Error::UnsupportedArchitecture(format!(
                    "layer {index} sits below the final conv but is not spatial"
                )))
            }
        };
    }

    if !grad.all_finite() {
        return Err(Error::Numeric("feature response is not finite".into()));
    }
    Ok(FeatureResponse { map: grad })
}

fn gate_relu(grad: &Tensor, forward_input: &Tensor, rule: ReluRule) -> Result<Tensor> {
    if grad.shape() != forward_input.shape() {
        return Err(Error::shape(
            "guided relu",
            format!("{:?}", forward_input.shape()),
            format!("{:?}", grad.shape()),
        ));
    }
    let data = grad
        .data()
        .iter()
        .zip(forward_input.data())
        .map(|(&g, &x)| {
            let forward_open = x > 0.0;
            let backward_open = match rule {
                ReluRule::Guided => g > 0.0,
                ReluRule::Plain => true,
            };
            if forward_open && backward_open {
                g
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(grad.shape().to_vec(), data)
}

/// Mean absolute value over channels, then division by the maximum. An
/// identically zero response stays zero.
pub fn to_grayscale(response: &FeatureResponse) -> Result<GrayscaleMap> {
    let [channels, height, width] = match response.map.shape() {
        [c, h, w] => [*c, *h, *w],
        other => {
            return Err(Error::shape(
                "to_grayscale",
                "rank-3 response",
                format!("{other:?}"),
            ))
        }
    };
    let data = response.map.data();
    let mut gray = vec![0.0f32; height * width];
    for (pixel, g) in gray.iter_mut().enumerate() {
        let mut sum = 0.0f32;
        for c in 0..channels {
            sum += data[c * height * width + pixel].abs();
        }
        *g = sum / channels as f32;
    }
    let max = gray.iter().fold(0.0f32, |m, &v| m.max(v));
    if max > 0.0 {
        for g in &mut gray {
            *g /= max;
        }
    }
    Ok(GrayscaleMap {
        map: Tensor::new(vec![height, width], gray)?,
    })
}
