//! Dense tensors and the forward/backward kernels for the fixed layer
//! vocabulary: convolution, ReLU, max-pooling, dense, softmax and
//! cross-entropy.
//!
//! All public operations are pure functions of their inputs. Convolution is
//! plain cross-correlation (no kernel flip); max-pool ties are broken by the
//! lowest flat index so recorded switches are deterministic.

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f32` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor from a shape and matching data buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{expected} elements for shape {shape:?}"),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Index of the largest element; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn l2_norm(&self) -> f32 {
        (self
            .data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>())
        .sqrt() as f32
    }

    pub fn linf_norm(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise a - b.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "Tensor::sub",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Elementwise a + b.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "Tensor::add",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Every element clamped into [lo, hi].
    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
        }
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Per-output-cell argmax positions recorded by a max-pool forward pass.
///
/// Each entry is the flat index into the pooled input tensor, always inside
/// the window that produced the corresponding output cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolSwitches {
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub index: Vec<usize>,
}

fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if kernel > padded {
        return Err(Error::shape(
            "conv2d",
            format!("kernel extent <= padded input ({padded})"),
            format!("{kernel}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// 2D cross-correlation of a [C,H,W] input with [F,C,kh,kw] kernels.
///
/// Output extent is `(H + 2·padding − kh)/stride + 1` per spatial axis.
pub fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (c_in, in_h, in_w) = expect_rank3("conv2d_forward input", input)?;
    let (filters, kc, k_h, k_w) = expect_rank4("conv2d_forward kernels", kernels)?;
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    if kc != c_in {
        return Err(Error::shape(
            "conv2d_forward",
            format!("kernel channels {c_in}"),
            format!("{kc}"),
        ));
    }
    if bias.shape() != [filters] {
        return Err(Error::shape(
            "conv2d_forward bias",
            format!("[{filters}]"),
            format!("{:?}", bias.shape()),
        ));
    }
    let out_h = conv_out_extent(in_h, k_h, stride, padding)?;
    let out_w = conv_out_extent(in_w, k_w, stride, padding)?;

    let mut out = vec![0.0f32; filters * out_h * out_w];
    let x = input.data();
    let k = kernels.data();
    let b = bias.data();
    let out_hw = out_h * out_w;

    for f in 0..filters {
        let out_f = &mut out[f * out_hw..(f + 1) * out_hw];
        out_f.fill(b[f]);
        for c in 0..c_in {
            let in_c = &x[c * in_h * in_w..(c + 1) * in_h * in_w];
            for kh in 0..k_h {
                for kw in 0..k_w {
                    let w = k[((f * c_in + c) * k_h + kh) * k_w + kw];
                    for oh in 0..out_h {
                        let ih = (oh * stride + kh) as isize - padding as isize;
                        if ih < 0 || ih >= in_h as isize {
                            continue;
                        }
                        let in_row = &in_c[ih as usize * in_w..(ih as usize + 1) * in_w];
                        let out_row = &mut out_f[oh * out_w..(oh + 1) * out_w];
                        for (ow, o) in out_row.iter_mut().enumerate() {
                            let iw = (ow * stride + kw) as isize - padding as isize;
                            if iw >= 0 && iw < in_w as isize {
                                *o += w * in_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    Tensor::new(vec![filters, out_h, out_w], out)
}

/// Gradients of the sum-weighted convolution output w.r.t. input, kernels
/// and bias.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c_in, in_h, in_w) = expect_rank3("conv2d_backward input", input)?;
    let (filters, kc, k_h, k_w) = expect_rank4("conv2d_backward kernels", kernels)?;
    if kc != c_in {
        return Err(Error::shape(
            "conv2d_backward",
            format!("kernel channels {c_in}"),
            format!("{kc}"),
        ));
    }
    let out_h = conv_out_extent(in_h, k_h, stride, padding)?;
    let out_w = conv_out_extent(in_w, k_w, stride, padding)?;
    if grad_out.shape() != [filters, out_h, out_w] {
        return Err(Error::shape(
            "conv2d_backward grad_out",
            format!("[{filters}, {out_h}, {out_w}]"),
            format!("{:?}", grad_out.shape()),
        ));
    }

    let g = grad_out.data();
    let x = input.data();
    let k = kernels.data();
    let mut grad_in = vec![0.0f32; c_in * in_h * in_w];
    let mut grad_k = vec![0.0f32; filters * c_in * k_h * k_w];
    let mut grad_b = vec![0.0f32; filters];
    let out_hw = out_h * out_w;

    for f in 0..filters {
        let g_f = &g[f * out_hw..(f + 1) * out_hw];
        grad_b[f] = g_f.iter().sum();
        for c in 0..c_in {
            let in_c = &x[c * in_h * in_w..(c + 1) * in_h * in_w];
            let gin_c = &mut grad_in[c * in_h * in_w..(c + 1) * in_h * in_w];
            for kh in 0..k_h {
                for kw in 0..k_w {
                    let kidx = ((f * c_in + c) * k_h + kh) * k_w + kw;
                    let w = k[kidx];
                    let mut acc = 0.0f32;
                    for oh in 0..out_h {
                        let ih = (oh * stride + kh) as isize - padding as isize;
                        if ih < 0 || ih >= in_h as isize {
                            continue;
                        }
                        let in_row = &in_c[ih as usize * in_w..(ih as usize + 1) * in_w];
                        let gin_row = &mut gin_c[ih as usize * in_w..(ih as usize + 1) * in_w];
                        let g_row = &g_f[oh * out_w..(oh + 1) * out_w];
                        for (ow, &go) in g_row.iter().enumerate() {
                            let iw = (ow * stride + kw) as isize - padding as isize;
                            if iw >= 0 && iw < in_w as isize {
                                acc += go * in_row[iw as usize];
                                gin_row[iw as usize] += go * w;
                            }
                        }
                    }
                    grad_k[kidx] = acc;
                }
            }
        }
    }

    Ok((
        Tensor::new(vec![c_in, in_h, in_w], grad_in)?,
        Tensor::new(vec![filters, c_in, k_h, k_w], grad_k)?,
        Tensor::new(vec![filters], grad_b)?,
    ))
}

/// y = max(x, 0), elementwise.
pub fn relu_forward(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Routes `grad_out` through where the forward input was strictly positive.
pub fn relu_backward(grad_out: &Tensor, x: &Tensor) -> Result<Tensor> {
    if grad_out.shape != x.shape {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?}", x.shape),
            format!("{:?}", grad_out.shape),
        ));
    }
    let data = grad_out
        .data
        .iter()
        .zip(&x.data)
        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Max-pool over square windows; records the argmax position per output cell.
///
/// Ties are broken by the lowest flat index.
pub fn maxpool_forward(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, PoolSwitches)> {
    let (channels, in_h, in_w) = expect_rank3("maxpool_forward", x)?;
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "maxpool window and stride must be >= 1".into(),
        ));
    }
    if window > in_h || window > in_w {
        return Err(Error::shape(
            "maxpool_forward",
            format!("window <= input extents [{in_h}, {in_w}]"),
            format!("{window}"),
        ));
    }
    let out_h = (in_h - window) / stride + 1;
    let out_w = (in_w - window) / stride + 1;

    let mut out = Vec::with_capacity(channels * out_h * out_w);
    let mut index = Vec::with_capacity(channels * out_h * out_w);
    let d = x.data();
    for c in 0..channels {
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut best_idx = (c * in_h + oh * stride) * in_w + ow * stride;
                let mut best = d[best_idx];
                for wh in 0..window {
                    for ww in 0..window {
                        let idx = (c * in_h + oh * stride + wh) * in_w + ow * stride + ww;
                        if d[idx] > best {
                            best = d[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                index.push(best_idx);
            }
        }
    }

    let output_shape = vec![channels, out_h, out_w];
    Ok((
        Tensor::new(output_shape.clone(), out)?,
        PoolSwitches {
            input_shape: x.shape().to_vec(),
            output_shape,
            index,
        },
    ))
}

/// Routes each `grad_out` cell to its recorded input position, summing
/// collisions from overlapping windows.
pub fn maxpool_backward(
    grad_out: &Tensor,
    switches: &PoolSwitches,
    input_shape: &[usize],
) -> Result<Tensor> {
    if grad_out.shape() != switches.output_shape.as_slice() {
        return Err(Error::shape(
            "maxpool_backward grad_out",
            format!("{:?}", switches.output_shape),
            format!("{:?}", grad_out.shape()),
        ));
    }
    if input_shape != switches.input_shape.as_slice() {
        return Err(Error::shape(
            "maxpool_backward input_shape",
            format!("{:?}", switches.input_shape),
            format!("{input_shape:?}"),
        ));
    }
    let mut grad_in = vec![0.0f32; input_shape.iter().product()];
    for (&idx, &g) in switches.index.iter().zip(grad_out.data()) {
        grad_in[idx] += g;
    }
    Tensor::new(input_shape.to_vec(), grad_in)
}

/// y = W·x + b for weights [units, inputs].
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = match input.shape() {
        [n] => *n,
        other => {
            return Err(Error::shape(
                "dense_forward input",
                "rank-1",
                format!("{other:?}"),
            ));
        }
    };
    let (units, wn) = match weights.shape() {
        [u, n] => (*u, *n),
        other => {
            return Err(Error::shape(
                "dense_forward weights",
                "rank-2",
                format!("{other:?}"),
            ));
        }
    };
    if wn != n || bias.shape() != [units] {
        return Err(Error::shape(
            "dense_forward",
            format!("weights [*, {n}], bias [{units}]"),
            format!("weights {:?}, bias {:?}", weights.shape(), bias.shape()),
        ));
    }
    let x = input.data();
    let w = weights.data();
    let mut out = bias.data().to_vec();
    for (u, o) in out.iter_mut().enumerate() {
        let row = &w[u * n..(u + 1) * n];
        let mut acc = 0.0f32;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o += acc;
    }
    Tensor::new(vec![units], out)
}

/// Gradients of the sum-weighted dense output w.r.t. input, weights and bias.
pub fn dense_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (units, n) = match weights.shape() {
        [u, n] => (*u, *n),
        other => {
            return Err(Error::shape(
                "dense_backward weights",
                "rank-2",
                format!("{other:?}"),
            ));
        }
    };
    if grad_out.shape() != [units] || input.shape() != [n] {
        return Err(Error::shape(
            "dense_backward",
            format!("grad_out [{units}], input [{n}]"),
            format!("grad_out {:?}, input {:?}", grad_out.shape(), input.shape()),
        ));
    }
    let g = grad_out.data();
    let x = input.data();
    let w = weights.data();
    let mut grad_in = vec![0.0f32; n];
    let mut grad_w = vec![0.0f32; units * n];
    for u in 0..units {
        let gu = g[u];
        let w_row = &w[u * n..(u + 1) * n];
        let gw_row = &mut grad_w[u * n..(u + 1) * n];
        for i in 0..n {
            grad_in[i] += gu * w_row[i];
            gw_row[i] = gu * x[i];
        }
    }
    Ok((
        Tensor::new(vec![n], grad_in)?,
        Tensor::new(vec![units, n], grad_w)?,
        Tensor::new(vec![units], g.to_vec())?,
    ))
}

/// Numerically stable softmax over a rank-1 logit vector.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 1 {
        return Err(Error::shape(
            "softmax",
            "rank-1",
            format!("{:?}", logits.shape()),
        ));
    }
    let max = logits
        .data()
        .iter()
        .fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut out: Vec<f32> = logits.data().iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Cross-entropy loss -ln p_label, floored to stay finite.
pub fn cross_entropy(probs: &Tensor, label: usize) -> Result<f32> {
    if label >= probs.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    Ok(-(probs.data()[label].max(f32::MIN_POSITIVE)).ln())
}

/// Gradient of cross-entropy at `label` w.r.t. the logits: probs - onehot.
pub fn loss_gradient(logits: &Tensor, label: usize) -> Result<Tensor> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let mut probs = softmax(logits)?;
    probs.data_mut()[label] -= 1.0;
    Ok(probs)
}

fn expect_rank3(context: &str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::shape(
            context,
            "rank-3 [C,H,W]",
            format!("{other:?}"),
        )),
    }
}

fn expect_rank4(context: &str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [f, c, h, w] => Ok((*f, *c, *h, *w)),
        other => Err(Error::shape(
            context,
            "rank-4 [F,C,kh,kw]",
            format!("{other:?}"),
        )),
    }
}
