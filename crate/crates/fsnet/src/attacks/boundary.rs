//! Decision-based random walk that starts from an adversarial point and
//! shrinks its distance to the original image.
//!
//! Each proposal perturbs orthogonally on the sphere around the original,
//! then contracts toward it; a proposal is kept only while the point stays
//! adversarial and no farther than the current iterate. Only class decisions
//! are consumed, never gradients.

use super::{finish, precheck, AttackResult, Instrumented, Precheck};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Random-walk parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundaryConfig {
    pub max_steps: usize,
    /// Initial orthogonal step size, relative to the current distance.
    pub delta_init: f32,
    /// Initial contraction toward the original, as a fraction of distance.
    pub epsilon_init: f32,
    /// Multiplicative factor for step-size adaptation.
    pub adaptation: f32,
    /// Rejection-sampling budget for the initial adversarial point.
    pub init_tries: usize,
    pub seed: u64,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig {
            max_steps: 1000,
            delta_init: 0.1,
            epsilon_init: 0.1,
            adaptation: 1.5,
            init_tries: 100,
            seed: 0,
        }
    }
}

const ADAPT_EVERY: usize = 10;

pub fn boundary_attack(
    model: &Model,
    image: &Tensor,
    label: usize,
    config: &BoundaryConfig,
) -> Result<AttackResult> {
    if config.max_steps == 0 || config.init_tries == 0 {
        return Err(Error::InvalidArgument(
            "max_steps and init_tries must be >= 1".into(),
        ));
    }
    if !(config.adaptation > 1.0 && config.adaptation.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "adaptation factor must exceed 1, got {}",
            config.adaptation
        )));
    }
    for (name, v) in [
        ("delta_init", config.delta_init),
        ("epsilon_init", config.epsilon_init),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{name} must be positive, got {v}"
            )));
        }
    }

    let inst = Instrumented::new(model);
    let confidence_before = match precheck("boundary", &inst, image, label)? {
        Precheck::AlreadyWrong(result) => return Ok(*result),
        Precheck::CorrectWith(c) => c,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut current = initial_adversarial(&inst, image, label, config.init_tries, &mut rng)?;
    let mut distance = l2_between(&current, image);

    let mut delta = f64::from(config.delta_init);
    let mut epsilon = f64::from(config.epsilon_init);
    let mut trajectory = vec![distance as f32];
    let mut accepted_recently = 0usize;
    let mut iterations = 0;

    while iterations < config.max_steps {
        iterations += 1;

        let candidate = propose(image, &current, distance, delta, epsilon, &mut rng);
        let candidate_distance = l2_between(&candidate, image);
        let adversarial =
            inst.probabilities(&candidate)?.argmax() != label && candidate_distance <= distance;
        if adversarial {
            current = candidate;
            distance = candidate_distance;
            trajectory.push(distance as f32);
            accepted_recently += 1;
        }

        // steer the acceptance rate toward one half
        if iterations % ADAPT_EVERY == 0 {
            let rate = accepted_recently as f64 / ADAPT_EVERY as f64;
            let factor = f64::from(config.adaptation);
            if rate > 0.5 {
                delta *= factor;
                epsilon = (epsilon * factor).min(0.95);
            } else if rate < 0.5 {
                delta /= factor;
                epsilon /= factor;
            }
            accepted_recently = 0;
        }
    }

    finish(
        "boundary",
        &inst,
        image,
        current,
        label,
        confidence_before,
        iterations,
        trajectory,
    )
}

/// Rejection-samples uniform images until one is classified differently from
/// the ground truth.
fn initial_adversarial(
    inst: &Instrumented,
    image: &Tensor,
    label: usize,
    tries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    for _ in 0..tries {
        let candidate = Tensor::new(
            image.shape().to_vec(),
            (0..image.len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )?;
        if inst.probabilities(&candidate)?.argmax() != label {
            return Ok(candidate);
        }
    }
    Err(Error::Initialization(format!(
        "no adversarial starting point in {tries} uniform samples"
    )))
}

/// One random-walk proposal: orthogonal move on the sphere around the
/// original, then contraction toward it, then box clipping.
fn propose(
    original: &Tensor,
    current: &Tensor,
    distance: f64,
    delta: f64,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let n = original.len();
    let mut eta: Vec<f64> = (0..n).map(|_| gaussian(rng)).collect();

    // unit vector from the original toward the current iterate
    let direction: Vec<f64> = current
        .data()
        .iter()
        .zip(original.data())
        .map(|(&c, &o)| (f64::from(c) - f64::from(o)) / distance)
        .collect();

    let along: f64 = eta.iter().zip(&direction).map(|(e, d)| e * d).sum();
    for (e, d) in eta.iter_mut().zip(&direction) {
        *e -= along * d;
    }
    let eta_norm = eta.iter().map(|e| e * e).sum::<f64>().sqrt();
    if eta_norm > 0.0 {
        let target = delta * distance;
        for e in &mut eta {
            *e *= target / eta_norm;
        }
    }

    // sphere projection keeps the distance, contraction shrinks it
    let moved: Vec<f64> = current
        .data()
        .iter()
        .zip(&eta)
        .zip(original.data())
        .map(|((&c, e), &o)| f64::from(c) + e - f64::from(o))
        .collect();
    let moved_norm = moved.iter().map(|m| m * m).sum::<f64>().sqrt();
    let rescale = if moved_norm > 0.0 {
        distance / moved_norm
    } else {
        0.0
    };

    let data: Vec<f32> = moved
        .iter()
        .zip(original.data())
        .map(|(&m, &o)| {
            let projected = f64::from(o) + (1.0 - epsilon) * rescale * m;
            (projected as f32).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(original.shape().to_vec(), data).expect("shape is preserved")
}

fn l2_between(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Standard normal draw via the Box-Muller transform, using only the uniform
/// source so that runs are reproducible across platforms.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::test_support::{linear_model, trained_model};

    /// A correctly classified image whose label differs from what the model
    /// calls uniform noise, so rejection sampling can initialize.
    fn attackable() -> (&'static Model, Tensor, usize) {
        let (model, data) = trained_model();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let noise = Tensor::new(
            vec![1, 28, 28],
            (0..28 * 28).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let noise_class = model.predict(&noise).unwrap().0;
        for i in 0..data.len() {
            let image = data.image(i);
            let label = data.label(i);
            if label != noise_class && model.predict(image).unwrap().0 == label {
                return (model, image.clone(), label);
            }
        }
        panic!("no attackable image in the corpus");
    }

    fn quick_config(seed: u64) -> BoundaryConfig {
        BoundaryConfig {
            max_steps: 80,
            seed,
            ..BoundaryConfig::default()
        }
    }

    #[test]
    fn accepted_distances_never_increase() {
        let (model, image, label) = attackable();
        let r = boundary_attack(model, &image, label, &quick_config(5)).unwrap();
        assert!(r.trajectory.len() >= 2, "no step was ever accepted");
        for pair in r.trajectory.windows(2) {
            assert!(
                pair[1] <= pair[0],
                "distance rose from {} to {}",
                pair[0],
                pair[1]
            );
        }
        if r.success {
            assert_ne!(model.predict(&r.adversarial).unwrap().0, label);
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_walk_bit_for_bit() {
        let (model, image, label) = attackable();
        let a = boundary_attack(model, &image, label, &quick_config(11)).unwrap();
        let b = boundary_attack(model, &image, label, &quick_config(11)).unwrap();
        assert_eq!(a.adversarial.data(), b.adversarial.data());
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.forward_calls, b.forward_calls);
    }

    #[test]
    fn consumes_no_gradients() {
        let (model, image, label) = attackable();
        let r = boundary_attack(model, &image, label, &quick_config(7)).unwrap();
        assert_eq!(r.gradient_calls, 0);
        assert!(r.forward_calls > 0);
    }

    #[test]
    fn constant_classifier_cannot_be_initialized() {
        // logits are (1, 0) regardless of input, so no noise image is ever
        // classified away from label 0
        let model = linear_model([1, 2, 2], &[vec![0.0; 4], vec![0.0; 4]], &[1.0, 0.0]);
        let image = Tensor::new(vec![1, 2, 2], vec![0.5; 4]).unwrap();
        let err = boundary_attack(&model, &image, 0, &BoundaryConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Initialization(_)));
    }

    #[test]
    fn nonsense_configs_are_rejected() {
        let (model, image, label) = attackable();
        for config in [
            BoundaryConfig {
                max_steps: 0,
                ..BoundaryConfig::default()
            },
            BoundaryConfig {
                adaptation: 1.0,
                ..BoundaryConfig::default()
            },
            BoundaryConfig {
                delta_init: 0.0,
                ..BoundaryConfig::default()
            },
            BoundaryConfig {
                epsilon_init: -0.5,
                ..BoundaryConfig::default()
            },
        ] {
            assert!(boundary_attack(model, &image, label, &config).is_err());
        }
    }
}
