//! Iterative minimal-perturbation attack that linearizes the decision
//! boundaries around the current iterate.
//!
//! Each round compares the ground-truth logit against every candidate class,
//! picks the class whose linearized boundary is closest, and steps just past
//! that hyperplane. The accumulated step is inflated by a small overshoot so
//! the final point lands on the adversarial side.

use super::{finish, precheck, AttackResult, Instrumented, Precheck};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Boundary-linearization loop parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeepFoolConfig {
    pub max_iterations: usize,
    /// Relative inflation of the accumulated step, e.g. 0.02 for 2%.
    pub overshoot: f32,
    /// When set, only this many of the highest-scoring classes on the clean
    /// input (the ground truth excluded) are considered as targets.
    pub candidate_classes: Option<usize>,
}

impl Default for DeepFoolConfig {
    fn default() -> Self {
        DeepFoolConfig {
            max_iterations: 50,
            overshoot: 0.02,
            candidate_classes: None,
        }
    }
}

const MIN_BOUNDARY_NORM: f64 = 1e-12;

/// Additive slack on |f| when stepping. An iterate can land exactly on a
/// boundary (a logit tie, where argmax still returns the label); with a
/// step proportional to |f| alone the loop would freeze there.
const TIE_NUDGE: f64 = 1e-4;

pub fn deepfool(
    model: &Model,
    image: &Tensor,
    label: usize,
    config: &DeepFoolConfig,
) -> Result<AttackResult> {
    if config.max_iterations == 0 {
        return Err(Error::InvalidArgument("max_iterations must be >= 1".into()));
    }
    if !(config.overshoot >= 0.0 && config.overshoot.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "overshoot must be finite and non-negative, got {}",
            config.overshoot
        )));
    }

    let inst = Instrumented::new(model);
    let confidence_before = match precheck("deepfool", &inst, image, label)? {
        Precheck::AlreadyWrong(result) => return Ok(*result),
        Precheck::CorrectWith(c) => c,
    };

    let candidates = candidate_set(&inst, image, label, config.candidate_classes)?;

    let mut total = Tensor::zeros(image.shape().to_vec());
    let mut iterations = 0;
    let mut trajectory = Vec::new();

    while iterations < config.max_iterations {
        let iterate = perturbed(image, &total, config.overshoot);
        let trace = inst.forward(&iterate)?;
        if trace.logits.argmax() != label {
            break;
        }

        let grad_label = inst.logit_gradient_from_trace(&trace, label)?;
        let mut closest: Option<(f64, f64, Tensor)> = None;
        for &k in &candidates {
            let w = inst
                .logit_gradient_from_trace(&trace, k)?
                .sub(&grad_label)?;
            let f = f64::from(trace.logits.data()[k]) - f64::from(trace.logits.data()[label]);
            let norm = f64::from(w.l2_norm());
            if norm < MIN_BOUNDARY_NORM {
                continue;
            }
            let distance = f.abs() / norm;
            let better = match &closest {
                None => true,
                Some((best, _, _)) => distance < *best,
            };
            if better {
                closest = Some((distance, f, w));
            }
        }
        let (distance, f, w) = closest.ok_or_else(|| {
            Error::DegenerateGeometry(
                "every candidate boundary direction has a vanishing gradient".into(),
            )
        })?;

        // step just past the linearized boundary: ((|f| + nudge) / ||w||^2) * w
        let norm_sq = f64::from(w.l2_norm()) * f64::from(w.l2_norm());
        let scale = ((f.abs() + TIE_NUDGE) / norm_sq) as f32;
        for (t, &wi) in total.data_mut().iter_mut().zip(w.data()) {
            *t += scale * wi;
        }
        trajectory.push(distance as f32);
        iterations += 1;
    }

    let adversarial = perturbed(image, &total, config.overshoot);
    finish(
        "deepfool",
        &inst,
        image,
        adversarial,
        label,
        confidence_before,
        iterations,
        trajectory,
    )
}

/// Classes the search may target. With no restriction this is every class
/// except the ground truth; otherwise the `limit` highest clean logits.
fn candidate_set(
    inst: &Instrumented,
    image: &Tensor,
    label: usize,
    limit: Option<usize>,
) -> Result<Vec<usize>> {
    let trace = inst.forward(image)?;
    let logits = trace.logits.data();
    let mut others: Vec<usize> = (0..logits.len()).filter(|&k| k != label).collect();
    others.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    if let Some(limit) = limit {
        if limit == 0 {
            return Err(Error::InvalidArgument(
                "candidate_classes must be >= 1 when set".into(),
            ));
        }
        others.truncate(limit);
    }
    if others.is_empty() {
        return Err(Error::InvalidArgument(
            "the network has no class to move toward".into(),
        ));
    }
    Ok(others)
}

/// clip(original + (1 + overshoot) * total, 0, 1)
fn perturbed(image: &Tensor, total: &Tensor, overshoot: f32) -> Tensor {
    let mut out = image.clone();
    for (o, &t) in out.data_mut().iter_mut().zip(total.data()) {
        *o = (*o + (1.0 + overshoot) * t).clamp(0.0, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::test_support::{correctly_classified, linear_model, misclassified};

    /// For a linear two-class model the first step lands exactly on the
    /// decision boundary, so the closed-form step is an oracle.
    #[test]
    fn linear_model_gets_the_closed_form_step() {
        let model = linear_model([1, 1, 2], &[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0]);
        let image = Tensor::new(vec![1, 1, 2], vec![0.8, 0.2]).unwrap();
        let config = DeepFoolConfig {
            overshoot: 0.02,
            ..DeepFoolConfig::default()
        };
        let r = deepfool(&model, &image, 0, &config).unwrap();
        assert!(r.success);
        assert_eq!(r.iterations, 1);

        // boundary x0 = x1 at distance 0.6/sqrt(2);
        // step = ((0.6 + nudge) / 2) * (-1, +1)
        let step = ((0.6 + TIE_NUDGE) / 2.0) as f32;
        let expected = [0.8 - 1.02 * step, 0.2 + 1.02 * step];
        for (got, want) in r.adversarial.data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-6, "got {got}, want {want}");
        }
        assert!((r.trajectory[0] - 0.6 / 2f32.sqrt()).abs() < 1e-5);
    }

    /// Starting exactly on the boundary (a logit tie resolved in the
    /// label's favor) must not freeze the loop at step size zero.
    #[test]
    fn exact_logit_tie_still_crosses() {
        let model = linear_model([1, 1, 2], &[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0]);
        let image = Tensor::new(vec![1, 1, 2], vec![0.5, 0.5]).unwrap();
        let r = deepfool(&model, &image, 0, &DeepFoolConfig::default()).unwrap();
        assert!(r.success, "tie should be crossed by the minimum step");
        assert_eq!(r.predicted_after, 1);
        assert!(r.l2_norm > 0.0);
    }

    #[test]
    fn duplicate_logits_are_reported_as_degenerate() {
        let model = linear_model([1, 1, 2], &[vec![0.0, 0.0], vec![0.0, 0.0]], &[0.5, 0.0]);
        let image = Tensor::new(vec![1, 1, 2], vec![0.3, 0.4]).unwrap();
        let err = deepfool(&model, &image, 0, &DeepFoolConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateGeometry(_)));
    }

    #[test]
    fn succeeds_with_a_small_perturbation_on_a_trained_model() {
        let (model, image, label) = correctly_classified();
        let r = deepfool(model, &image, label, &DeepFoolConfig::default()).unwrap();
        assert!(r.success, "deepfool should cross a nearby boundary");
        assert_ne!(r.predicted_after, label);
        assert!(r.iterations >= 1);
        assert!(r.gradient_calls >= 2, "label and candidate gradients");
        assert!(r.l2_norm > 0.0);
    }

    #[test]
    fn already_misclassified_inputs_short_circuit() {
        let Some((model, image, label)) = misclassified() else {
            return;
        };
        let r = deepfool(model, &image, label, &DeepFoolConfig::default()).unwrap();
        assert!(r.success && r.pre_misclassified);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.l2_norm, 0.0);
    }

    #[test]
    fn candidate_restriction_still_finds_the_runner_up() {
        let (model, image, label) = correctly_classified();
        let config = DeepFoolConfig {
            candidate_classes: Some(1),
            ..DeepFoolConfig::default()
        };
        let r = deepfool(model, &image, label, &config).unwrap();
        assert!(r.iterations <= DeepFoolConfig::default().max_iterations);
        if r.success {
            assert_ne!(r.predicted_after, label);
        }
    }

    #[test]
    fn zero_max_iterations_is_rejected() {
        let (model, image, label) = correctly_classified();
        let config = DeepFoolConfig {
            max_iterations: 0,
            ..DeepFoolConfig::default()
        };
        assert!(deepfool(model, &image, label, &config).is_err());
    }
}
