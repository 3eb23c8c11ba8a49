//! Fast gradient sign method: a single step of ε in the elementwise sign
//! direction of the loss gradient, then clipping to [0,1].

use super::{finish, precheck, AttackResult, Instrumented, Precheck};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::Tensor;

/// Runs FGSM with max-norm budget `epsilon` ∈ [0,1]. Uses exactly one
/// gradient call. `epsilon` = 0 is allowed and produces the null
/// perturbation (success false on correctly classified inputs).
pub fn fgsm(model: &Model, image: &Tensor, label: usize, epsilon: f32) -> Result<AttackResult> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in [0,1], got {epsilon}"
        )));
    }
    let inst = Instrumented::new(model);
    let confidence_before = match precheck("fgsm", &inst, image, label)? {
        Precheck::AlreadyWrong(result) => return Ok(*result),
        Precheck::CorrectWith(c) => c,
    };

    let gradient = inst.input_gradient(image, label)?;
    if epsilon > 0.0 && gradient.data().iter().all(|&g| g == 0.0) {
        return Err(Error::DegenerateGradient(
            "loss gradient is zero everywhere, the sign step has no direction".into(),
        ));
    }

    // sign(0) := 0, so untouched pixels stay untouched
    let step: Vec<f32> = gradient
        .data()
        .iter()
        .map(|&g| {
            if g > 0.0 {
                epsilon
            } else if g < 0.0 {
                -epsilon
            } else {
                0.0
            }
        })
        .collect();
    let step = Tensor::new(image.shape().to_vec(), step)?;
    let adversarial = image.add(&step)?.clamp(0.0, 1.0);

    finish(
        "fgsm",
        &inst,
        image,
        adversarial,
        label,
        confidence_before,
        1,
        Vec::new(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::test_support::{correctly_classified, linear_model, misclassified};

    #[test]
    fn saturated_positive_gradient_moves_every_pixel_up() {
        // logits = (1, Σx): for Σx < 1 the model predicts class 0, while
        // the label-0 loss gradient per pixel is p₁·(w₁−w₀) = p₁ > 0, so
        // every interior pixel moves by +ε.
        let model = linear_model([1, 2, 2], &[vec![0.0; 4], vec![1.0; 4]], &[1.0, 0.0]);
        let image = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.1, 0.15]).unwrap();
        let r = fgsm(&model, &image, 0, 0.1).unwrap();
        for &d in r.perturbation.data() {
            assert!((d - 0.1).abs() < 1e-6, "delta {d}");
        }
        assert_eq!(r.gradient_calls, 1);
    }

    #[test]
    fn epsilon_zero_gives_null_perturbation_and_no_success() {
        let (model, image, label) = correctly_classified();
        let r = fgsm(model, &image, label, 0.0).unwrap();
        assert!(!r.success);
        assert!(r.perturbation.data().iter().all(|&d| d == 0.0));
        assert_eq!(r.l2_norm, 0.0);
    }

    #[test]
    fn epsilon_out_of_range_is_rejected() {
        let (model, image, label) = correctly_classified();
        assert!(matches!(
            fgsm(model, &image, label, -0.1),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            fgsm(model, &image, label, 1.5),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn zero_gradient_everywhere_is_a_degenerate_error() {
        let model = linear_model([1, 2, 2], &[vec![0.0; 4], vec![0.0; 4]], &[0.0, 0.0]);
        let image = Tensor::new(vec![1, 2, 2], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        assert!(matches!(
            fgsm(&model, &image, 0, 0.1),
            Err(Error::DegenerateGradient(_))
        ));
    }

    #[test]
    fn attack_invariants_hold_on_a_trained_model() {
        let (model, image, label) = correctly_classified();
        let r = fgsm(model, &image, label, 0.1).unwrap();
        // adversarial == clip(original + η) exactly
        let rebuilt = r.original.add(&r.perturbation).unwrap().clamp(0.0, 1.0);
        assert_eq!(rebuilt.data(), r.adversarial.data());
        assert!((r.perturbation.l2_norm() - r.l2_norm).abs() < 1e-6);
        assert!((r.perturbation.linf_norm() - r.linf_norm).abs() < 1e-6);
        assert!(r.linf_norm <= 0.1 + 1e-6);
        let (pred, _) = model.predict(&r.adversarial).unwrap();
        assert_eq!(r.success, pred != label);
        assert_eq!(r.predicted_after, pred);
    }

    #[test]
    fn misclassified_input_short_circuits() {
        let Some((model, image, label)) = misclassified() else {
            return;
        };
        let r = fgsm(model, &image, label, 0.1).unwrap();
        assert!(r.pre_misclassified);
        assert!(r.success);
        assert_eq!(r.iterations, 0);
        assert!(r.perturbation.data().iter().all(|&d| d == 0.0));
        assert_eq!(r.gradient_calls, 0);
    }
}
