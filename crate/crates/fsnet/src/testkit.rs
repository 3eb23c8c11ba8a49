//! Independent 64-bit reference implementations used only by tests.
//!
//! Everything here is deliberately written as naive loops, separate from the
//! production kernels, so the two codebases can disagree when one is wrong.
//! Enabled via the `testkit` feature.

use crate::network::{LayerParams, LayerSpec, Model, NetworkSpec};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// ReLU sign pattern and pool argmax choices of one forward pass. Two
/// evaluations with equal signatures saw the same linear region, so central
/// differences across them are valid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KinkSignature {
    pub relu_gates: Vec<Vec<bool>>,
    pub pool_choices: Vec<Vec<usize>>,
}

/// Result of the 64-bit reference forward pass.
pub struct ReferenceForward {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub signature: KinkSignature,
}

/// Naive f64 forward pass over the model's own weights.
pub fn reference_forward(model: &Model, pixels: &[f64]) -> ReferenceForward {
    let spec = model.spec();
    let mut shape: Vec<usize> = spec.input().to_vec();
    let mut act: Vec<f64> = pixels.to_vec();
    let mut relu_gates = Vec::new();
    let mut pool_choices = Vec::new();
    let mut logits = Vec::new();

    for (i, layer) in spec.layers().iter().enumerate() {
        match *layer {
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
                padding,
            } => {
                let (kernels, bias) = conv_params(model, i);
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                let mut out = vec![0.0f64; filters * oh * ow];
                for f in 0..filters {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut acc = bias[f];
                            for cc in 0..c {
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let iy = (y * stride + ky) as isize - padding as isize;
                                        let ix = (x * stride + kx) as isize - padding as isize;
                                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize
                                        {
                                            let iv = act[(cc * h + iy as usize) * w + ix as usize];
                                            let kv =
                                                kernels[((f * c + cc) * kernel + ky) * kernel + kx];
                                            acc += iv * kv;
                                        }
                                    }
                                }
                            }
                            out[(f * oh + y) * ow + x] = acc;
                        }
                    }
                }
                act = out;
                shape = vec![filters, oh, ow];
            }
            LayerSpec::Relu => {
                relu_gates.push(act.iter().map(|&v| v > 0.0).collect());
                act = act.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            }
            LayerSpec::MaxPool { window, stride } => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let oh = (h - window) / stride + 1;
                let ow = (w - window) / stride + 1;
                let mut out = vec![0.0f64; c * oh * ow];
                let mut choices = Vec::with_capacity(c * oh * ow);
                for cc in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut best_idx = (cc * h + y * stride) * w + x * stride;
                            let mut best = act[best_idx];
                            for wy in 0..window {
                                for wx in 0..window {
                                    let idx = (cc * h + y * stride + wy) * w + x * stride + wx;
                                    if act[idx] > best {
                                        best = act[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            out[(cc * oh + y) * ow + x] = best;
                            choices.push(best_idx);
                        }
                    }
                }
                act = out;
                shape = vec![c, oh, ow];
                pool_choices.push(choices);
            }
            LayerSpec::Flatten => {
                shape = vec![act.len()];
            }
            LayerSpec::Dense { units } => {
                let (weights, bias) = dense_params(model, i);
                let n = shape[0];
                let mut out = vec![0.0f64; units];
                for (u, o) in out.iter_mut().enumerate() {
                    let mut acc = bias[u];
                    for j in 0..n {
                        acc += weights[u * n + j] * act[j];
                    }
                    *o = acc;
                }
                act = out;
                shape = vec![units];
            }
            LayerSpec::Softmax => {
                logits = act.clone();
                let max = act.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = act.iter().map(|&v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                act = exps.iter().map(|&e| e / sum).collect();
            }
        }
    }

    ReferenceForward {
        logits,
        probabilities: act,
        signature: KinkSignature {
            relu_gates,
            pool_choices,
        },
    }
}

fn conv_params(model: &Model, layer: usize) -> (Vec<f64>, Vec<f64>) {
    match model.params().layer(layer) {
        Some(LayerParams::Conv { kernels, bias }) => (
            kernels.data().iter().map(|&v| f64::from(v)).collect(),
            bias.data().iter().map(|&v| f64::from(v)).collect(),
        ),
        _ => panic!("layer {layer} is not a conv layer"),
    }
}

fn dense_params(model: &Model, layer: usize) -> (Vec<f64>, Vec<f64>) {
    match model.params().layer(layer) {
        Some(LayerParams::Dense { weights, bias }) => (
            weights.data().iter().map(|&v| f64::from(v)).collect(),
            bias.data().iter().map(|&v| f64::from(v)).collect(),
        ),
        _ => panic!("layer {layer} is not a dense layer"),
    }
}

/// Cross-entropy loss of the reference forward pass.
pub fn reference_loss(model: &Model, pixels: &[f64], label: usize) -> (f64, KinkSignature) {
    let r = reference_forward(model, pixels);
    (
        -r.probabilities[label].max(f64::MIN_POSITIVE).ln(),
        r.signature,
    )
}

/// Raw logit of the reference forward pass.
pub fn reference_logit(model: &Model, pixels: &[f64], class_k: usize) -> (f64, KinkSignature) {
    let r = reference_forward(model, pixels);
    (r.logits[class_k], r.signature)
}

/// Central finite difference of `f` at `x`, one coordinate at a time.
/// Returns the derivative and whether the two evaluations stayed in the
/// same linear region.
pub fn central_differences(
    mut f: impl FnMut(&[f64]) -> (f64, KinkSignature),
    x: &[f64],
    h: f64,
) -> Vec<(f64, bool)> {
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let (up, sig_up) = f(&probe);
        probe[i] = x[i] - h;
        let (down, sig_down) = f(&probe);
        probe[i] = x[i];
        out.push(((up - down) / (2.0 * h), sig_up == sig_down));
    }
    out
}

/// Relative agreement check with an absolute escape for near-zero values:
/// |a−b| ≤ rel·max(|a|,|b|) or |a−b| ≤ abs.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    let diff = (a - b).abs();
    diff <= abs || diff <= rel * a.abs().max(b.abs())
}

/// Naive six-nested-loop convolution in f64.
pub fn conv2d_oracle(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (f_n, _, kh, kw) = (
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    );
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0f64; f_n * oh * ow];
    for f in 0..f_n {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = f64::from(bias.data()[f]);
                for cc in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (y * stride + ky) as isize - padding as isize;
                            let ix = (x * stride + kx) as isize - padding as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                acc += f64::from(
                                    input.data()[(cc * h + iy as usize) * w + ix as usize],
                                ) * f64::from(
                                    kernels.data()[((f * c + cc) * kh + ky) * kw + kx],
                                );
                            }
                        }
                    }
                }
                out[(f * oh + y) * ow + x] = acc;
            }
        }
    }
    out
}

/// A random miniature network (input ≤ 1×8×8), its seeded model, and a
/// random in-range image, for finite-difference sweeps.
pub fn random_mini_net(seed: u64) -> (Model, Tensor, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = rng.gen_range(5..=8usize);
    let filters = rng.gen_range(2..=4usize);
    let kernel = rng.gen_range(2..=3usize);
    let padding = rng.gen_range(0..=1usize);
    let conv_out = side + 2 * padding - kernel + 1;
    let pool_window = 2.min(conv_out);
    let pool_stride = rng.gen_range(1..=2usize);
    let classes = rng.gen_range(2..=4usize);

    let spec = NetworkSpec::new(
        [1, side, side],
        classes,
        vec![
            LayerSpec::Conv {
                filters,
                kernel,
                stride: 1,
                padding,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool {
                window: pool_window,
                stride: pool_stride,
            },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: classes },
            LayerSpec::Softmax,
        ],
    )
    .expect("mini net spec is valid");

    let model = Model::init(spec, rng.gen()).expect("mini net init");
    let pixels: Vec<f32> = (0..side * side)
        .map(|_| rng.gen_range(0.05..0.95))
        .collect();
    let image = Tensor::new(vec![1, side, side], pixels).expect("mini net image");
    let label = rng.gen_range(0..classes);
    (model, image, label)
}

/// One disagreeing coordinate of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdFailure {
    pub coordinate: usize,
    pub analytic: f64,
    pub estimate: f64,
}

/// Outcome of sweeping central differences across every input coordinate.
#[derive(Debug, Clone)]
pub struct FdCheck {
    pub checked: usize,
    pub excluded: usize,
    pub failures: Vec<FdFailure>,
}

impl FdCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn sweep_against_reference(
    analytic: &[f32],
    f: impl FnMut(&[f64]) -> (f64, KinkSignature),
    pixels: &[f64],
    h: f64,
    rel: f64,
    abs: f64,
) -> FdCheck {
    let fd = central_differences(f, pixels, h);
    let mut check = FdCheck {
        checked: 0,
        excluded: 0,
        failures: Vec::new(),
    };
    for (i, (&a, &(est, stable))) in analytic.iter().zip(&fd).enumerate() {
        if !stable {
            check.excluded += 1;
            continue;
        }
        check.checked += 1;
        if !close(f64::from(a), est, rel, abs) {
            check.failures.push(FdFailure {
                coordinate: i,
                analytic: f64::from(a),
                estimate: est,
            });
        }
    }
    check
}

/// Compares the model's loss gradient against central differences of the
/// f64 reference loss, excluding pixels whose probes crossed a kink.
pub fn check_input_gradient_fd(
    model: &Model,
    image: &Tensor,
    label: usize,
    h: f64,
    rel: f64,
    abs: f64,
) -> FdCheck {
    let analytic = model
        .input_gradient(image, label)
        .expect("analytic input gradient");
    let pixels: Vec<f64> = image.data().iter().map(|&v| f64::from(v)).collect();
    sweep_against_reference(
        analytic.data(),
        |x| reference_loss(model, x, label),
        &pixels,
        h,
        rel,
        abs,
    )
}

/// As [`check_input_gradient_fd`] but for a raw logit.
pub fn check_logit_gradient_fd(
    model: &Model,
    image: &Tensor,
    class_k: usize,
    h: f64,
    rel: f64,
    abs: f64,
) -> FdCheck {
    let analytic = model
        .logit_gradient(image, class_k)
        .expect("analytic logit gradient");
    let pixels: Vec<f64> = image.data().iter().map(|&v| f64::from(v)).collect();
    sweep_against_reference(
        analytic.data(),
        |x| reference_logit(model, x, class_k),
        &pixels,
        h,
        rel,
        abs,
    )
}

/// Direct-summation local entropy of one flat P×P patch, histogram mode:
/// quantize into `bins` uniform cells over [0,1], h = count/P², then
/// −Σ h·log₂ h.
pub fn entropy_oracle_histogram(patch: &[f64], bins: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    for &v in patch {
        let mut b = (v * bins as f64).floor() as usize;
        if b >= bins {
            b = bins - 1;
        }
        counts[b] += 1;
    }
    let total = patch.len() as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let h = c as f64 / total;
            h * h.log2()
        })
        .sum::<f64>()
}

/// Co-occurrence-mode oracle: normalized counts of horizontally adjacent
/// quantized-level pairs.
pub fn entropy_oracle_cooccurrence(patch: &[f64], side: usize, bins: usize) -> f64 {
    let quant = |v: f64| -> usize {
        let b = (v * bins as f64).floor() as usize;
        b.min(bins - 1)
    };
    let mut counts = std::collections::HashMap::new();
    for r in 0..side {
        for c in 0..side - 1 {
            let pair = (quant(patch[r * side + c]), quant(patch[r * side + c + 1]));
            *counts.entry(pair).or_insert(0usize) += 1;
        }
    }
    let total = (side * (side - 1)) as f64;
    -counts
        .values()
        .map(|&c| {
            let h = c as f64 / total;
            h * h.log2()
        })
        .sum::<f64>()
}

/// Spatial-mode oracle: pixel mass distribution h(i,j) = pixel/Σ, entropy 0
/// for an all-zero patch.
pub fn entropy_oracle_spatial(patch: &[f64]) -> f64 {
    let sum: f64 = patch.iter().sum();
    if sum == 0.0 {
        return 0.0;
    }
    -patch
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let h = v / sum;
            h * h.log2()
        })
        .sum::<f64>()
}

/// Mann-Whitney pair-counting AUC: fraction of (adversarial, clean) pairs
/// with adversarial > clean, ties counted half.
pub fn auc_oracle(clean: &[f64], adversarial: &[f64]) -> f64 {
    let mut favorable = 0.0f64;
    for &a in adversarial {
        for &c in clean {
            if a > c {
                favorable += 1.0;
            } else if a == c {
                favorable += 0.5;
            }
        }
    }
    favorable / (clean.len() as f64 * adversarial.len() as f64)
}

/// Recounts the empirical false positive rate of a threshold over clean
/// scores under the strict `score > τ` convention.
pub fn fpr_at_threshold(clean: &[f64], tau: f64) -> f64 {
    clean.iter().filter(|&&s| s > tau).count() as f64 / clean.len() as f64
}
