//! The five perturbation procedures, under one contract: given an image the
//! model classifies as `label`, produce a perturbation η with
//! adversarial = clip(original + η, 0, 1) and, on success, a changed
//! prediction. Every result carries honest bookkeeping: confidences before
//! and after, η norms, iteration and model-call counts.
//!
//! Images the model already misclassifies are returned as trivial successes
//! with η = 0 and `pre_misclassified` set, so callers can exclude them from
//! attack statistics.

mod boundary;
mod deepfool;
mod fgsm;
mod gradient;
mod one_pixel;

pub use boundary::{boundary_attack, BoundaryConfig};
pub use deepfool::{deepfool, DeepFoolConfig};
pub use fgsm::fgsm;
pub use gradient::{gradient_attack, gradient_attack_unnormalized};
pub use one_pixel::{one_pixel_attack, OnePixelConfig};

use crate::error::Result;
use crate::network::{ForwardTrace, Model};
use crate::tensor::Tensor;
use std::sync::atomic::{AtomicU64, Ordering};

/// Everything one attack invocation produced.
#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Attack identifier as used in configs and CSVs.
    pub attack: &'static str,
    pub original: Tensor,
    /// η, stored as adversarial − original, so
    /// clip(original + η) == adversarial exactly.
    pub perturbation: Tensor,
    pub adversarial: Tensor,
    /// True when the adversarial image's prediction differs from `label`.
    pub success: bool,
    /// Ground-truth class under attack.
    pub label: usize,
    pub predicted_after: usize,
    /// Ground-truth class probability on the original image.
    pub confidence_before: f32,
    /// Ground-truth class probability on the adversarial image.
    pub confidence_after: f32,
    /// Probability of the post-attack predicted class.
    pub target_confidence_after: f32,
    pub l2_norm: f32,
    pub linf_norm: f32,
    pub iterations: usize,
    pub forward_calls: u64,
    pub gradient_calls: u64,
    /// The model got the original wrong already; η is zero and the result
    /// counts as a trivial success outside attack statistics.
    pub pre_misclassified: bool,
    /// Attack-specific progress log: best ground-truth probability per
    /// generation (one-pixel), accepted distances (boundary); empty
    /// elsewhere.
    pub trajectory: Vec<f32>,
}

/// Counts model evaluations on behalf of one attack invocation.
///
/// A gradient call is one backward pass including its forward; plain
/// forward passes count separately. Atomics keep the wrapper shareable with
/// parallel fitness evaluation.
pub(crate) struct Instrumented<'a> {
    model: &'a Model,
    forwards: AtomicU64,
    gradients: AtomicU64,
}

impl<'a> Instrumented<'a> {
    pub fn new(model: &'a Model) -> Self {
        Instrumented {
            model,
            forwards: AtomicU64::new(0),
            gradients: AtomicU64::new(0),
        }
    }

    pub fn probabilities(&self, image: &Tensor) -> Result<Tensor> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        self.model.probabilities(image)
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardTrace> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        self.model.forward(image)
    }

    pub fn input_gradient(&self, image: &Tensor, label: usize) -> Result<Tensor> {
        self.gradients.fetch_add(1, Ordering::Relaxed);
        self.model.input_gradient(image, label)
    }

    pub fn confidence_gradient(&self, image: &Tensor, label: usize) -> Result<Tensor> {
        self.gradients.fetch_add(1, Ordering::Relaxed);
        self.model.confidence_gradient(image, label)
    }

    pub fn logit_gradient_from_trace(
        &self,
        trace: &ForwardTrace,
        class_k: usize,
    ) -> Result<Tensor> {
        self.gradients.fetch_add(1, Ordering::Relaxed);
        self.model.logit_gradient_from_trace(trace, class_k)
    }

    pub fn counts(&self) -> (u64, u64) {
        (
            self.forwards.load(Ordering::Relaxed),
            self.gradients.load(Ordering::Relaxed),
        )
    }
}

/// Checks the original prediction; returns the trivial result when the model
/// is already wrong, otherwise the ground-truth confidence to attack from.
pub(crate) enum Precheck {
    AlreadyWrong(Box<AttackResult>),
    CorrectWith(f32),
}

pub(crate) fn precheck(
    attack: &'static str,
    inst: &Instrumented,
    image: &Tensor,
    label: usize,
) -> Result<Precheck> {
    let probs = inst.probabilities(image)?;
    let predicted = probs.argmax();
    let confidence = probs.data()[label];
    if predicted != label {
        let (forward_calls, gradient_calls) = inst.counts();
        return Ok(Precheck::AlreadyWrong(Box::new(AttackResult {
            attack,
            original: image.clone(),
            perturbation: Tensor::zeros(image.shape().to_vec()),
            adversarial: image.clone(),
            success: true,
            label,
            predicted_after: predicted,
            confidence_before: confidence,
            confidence_after: confidence,
            target_confidence_after: probs.data()[predicted],
            l2_norm: 0.0,
            linf_norm: 0.0,
            iterations: 0,
            forward_calls,
            gradient_calls,
            pre_misclassified: true,
            trajectory: Vec::new(),
        })));
    }
    Ok(Precheck::CorrectWith(confidence))
}

/// Shared epilogue: derive η from the clipped adversarial image, re-predict,
/// and assemble the result.
#[allow(clippy::too_many_arguments)]
pub(crate) fn finish(
    attack: &'static str,
    inst: &Instrumented,
    original: &Tensor,
    adversarial: Tensor,
    label: usize,
    confidence_before: f32,
    iterations: usize,
    trajectory: Vec<f32>,
) -> Result<AttackResult> {
    let probs = inst.probabilities(&adversarial)?;
    let predicted_after = probs.argmax();
    let perturbation = adversarial.sub(original)?;
    let (forward_calls, gradient_calls) = inst.counts();
    Ok(AttackResult {
        attack,
        original: original.clone(),
        l2_norm: perturbation.l2_norm(),
        linf_norm: perturbation.linf_norm(),
        perturbation,
        success: predicted_after != label,
        label,
        predicted_after,
        confidence_before,
        confidence_after: probs.data()[label],
        target_confidence_after: probs.data()[predicted_after],
        adversarial,
        iterations,
        forward_calls,
        gradient_calls,
        pre_misclassified: false,
        trajectory,
    })
}
