//! Few-pixel black-box attack searched with differential evolution
//! (DE/rand/1, greedy parent-vs-child selection, no crossover).
//!
//! A candidate encodes, per modified pixel, (row, col, one value per
//! channel). Fitness is the ground-truth class probability of the patched
//! image; the search stops early once it drops below 5%.

use super::{finish, precheck, AttackResult, Instrumented, Precheck};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Differential-evolution search parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnePixelConfig {
    /// Number of pixel positions a candidate may modify.
    pub pixels: usize,
    /// Population size NP.
    pub population: usize,
    /// Mutation factor F of DE/rand/1.
    pub mutation: f32,
    /// Generation budget G.
    pub generations: usize,
    pub seed: u64,
}

impl Default for OnePixelConfig {
    fn default() -> Self {
        OnePixelConfig {
            pixels: 1,
            population: 200,
            mutation: 0.5,
            generations: 100,
            seed: 0,
        }
    }
}

const STOP_BELOW: f32 = 0.05;

pub fn one_pixel_attack(
    model: &Model,
    image: &Tensor,
    label: usize,
    config: &OnePixelConfig,
) -> Result<AttackResult> {
    if config.pixels == 0 || config.generations == 0 {
        return Err(Error::InvalidArgument(
            "pixels and generations must be >= 1".into(),
        ));
    }
    if config.population < 4 {
        return Err(Error::InvalidArgument(
            "DE/rand/1 needs a population of at least 4".into(),
        ));
    }
    if !(config.mutation > 0.0 && config.mutation.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "mutation factor must be positive, got {}",
            config.mutation
        )));
    }

    let inst = Instrumented::new(model);
    let confidence_before = match precheck("one_pixel", &inst, image, label)? {
        Precheck::AlreadyWrong(result) => return Ok(*result),
        Precheck::CorrectWith(c) => c,
    };

    let [channels, height, width] = {
        let s = image.shape();
        [s[0], s[1], s[2]]
    };
    let genes = config.pixels * (2 + channels);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut population: Vec<Vec<f32>> = (0..config.population)
        .map(|_| {
            let mut g = Vec::with_capacity(genes);
            for _ in 0..config.pixels {
                g.push(rng.gen_range(0.0..height as f32));
                g.push(rng.gen_range(0.0..width as f32));
                for _ in 0..channels {
                    g.push(rng.gen_range(0.0..1.0));
                }
            }
            g
        })
        .collect();

    let evaluate = |candidates: &[Vec<f32>]| -> Result<Vec<f32>> {
        candidates
            .par_iter()
            .map(|genome| {
                let patched = apply(image, genome, config.pixels, channels, height, width);
                Ok(inst.probabilities(&patched)?.data()[label])
            })
            .collect()
    };

    let mut fitness = evaluate(&population)?;
    let mut best = best_of(&population, &fitness);
    let mut trajectory = vec![best.1];
    let mut iterations = 0;

    while iterations < config.generations && best.1 >= STOP_BELOW {
        iterations += 1;
        let children: Vec<Vec<f32>> = (0..config.population)
            .map(|i| {
                let (a, b, c) = pick_three(&mut rng, config.population, i);
                let mut child: Vec<f32> = population[a]
                    .iter()
                    .zip(&population[b])
                    .zip(&population[c])
                    .map(|((&base, &donor), &other)| base + config.mutation * (donor - other))
                    .collect();
                normalize(&mut child, config.pixels, channels, height, width);
                child
            })
            .collect();
        let child_fitness = evaluate(&children)?;

        for (i, (child, fit)) in children.into_iter().zip(child_fitness).enumerate() {
            // greedy selection: offspring compete with their parent
            if fit < fitness[i] {
                population[i] = child;
                fitness[i] = fit;
            }
        }
        best = best_of(&population, &fitness);
        trajectory.push(best.1);
    }

    let adversarial = apply(image, &best.0, config.pixels, channels, height, width);
    finish(
        "one_pixel",
        &inst,
        image,
        adversarial,
        label,
        confidence_before,
        iterations,
        trajectory,
    )
}

/// Lowest-index best candidate, so ties resolve deterministically.
fn best_of(population: &[Vec<f32>], fitness: &[f32]) -> (Vec<f32>, f32) {
    let mut idx = 0;
    for i in 1..fitness.len() {
        if fitness[i] < fitness[idx] {
            idx = i;
        }
    }
    (population[idx].clone(), fitness[idx])
}

/// Three distinct population indices, all different from `exclude`.
fn pick_three(rng: &mut ChaCha8Rng, population: usize, exclude: usize) -> (usize, usize, usize) {
    let mut pick = |taken: &[usize]| loop {
        let i = rng.gen_range(0..population);
        if i != exclude && !taken.contains(&i) {
            return i;
        }
    };
    let a = pick(&[]);
    let b = pick(&[a]);
    let c = pick(&[a, b]);
    (a, b, c)
}

/// Wraps position genes modulo the image extents and clips value genes to
/// [0,1], keeping every candidate applicable.
fn normalize(genome: &mut [f32], pixels: usize, channels: usize, height: usize, width: usize) {
    let stride = 2 + channels;
    for p in 0..pixels {
        let g = &mut genome[p * stride..(p + 1) * stride];
        g[0] = wrap(g[0], height);
        g[1] = wrap(g[1], width);
        for v in &mut g[2..] {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

fn wrap(gene: f32, extent: usize) -> f32 {
    let e = extent as f32;
    let mut v = gene % e;
    if v < 0.0 {
        v += e;
    }
    v
}

/// Builds the patched image: each encoded pixel position gets its encoded
/// channel values.
fn apply(
    image: &Tensor,
    genome: &[f32],
    pixels: usize,
    channels: usize,
    height: usize,
    width: usize,
) -> Tensor {
    let mut out = image.clone();
    let stride = 2 + channels;
    for p in 0..pixels {
        let g = &genome[p * stride..(p + 1) * stride];
        let row = (wrap(g[0], height).floor() as usize).min(height - 1);
        let col = (wrap(g[1], width).floor() as usize).min(width - 1);
        for c in 0..channels {
            out.data_mut()[(c * height + row) * width + col] = g[2 + c].clamp(0.0, 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::test_support::correctly_classified;

    fn quick_config(seed: u64) -> OnePixelConfig {
        OnePixelConfig {
            population: 12,
            generations: 6,
            seed,
            ..OnePixelConfig::default()
        }
    }

    #[test]
    fn perturbation_touches_at_most_the_budgeted_pixels() {
        let (model, image, label) = correctly_classified();
        let r = one_pixel_attack(model, &image, label, &quick_config(3)).unwrap();
        let side = 28;
        let mut touched = std::collections::HashSet::new();
        for (i, &d) in r.perturbation.data().iter().enumerate() {
            if d != 0.0 {
                touched.insert((i / side, i % side));
            }
        }
        assert!(touched.len() <= 1, "touched {touched:?}");
        assert_eq!(r.gradient_calls, 0);
    }

    #[test]
    fn fixed_seed_reproduces_the_result_bit_for_bit() {
        let (model, image, label) = correctly_classified();
        let a = one_pixel_attack(model, &image, label, &quick_config(17)).unwrap();
        let b = one_pixel_attack(model, &image, label, &quick_config(17)).unwrap();
        assert_eq!(a.adversarial.data(), b.adversarial.data());
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.forward_calls, b.forward_calls);
        assert_eq!(a.success, b.success);
    }

    #[test]
    fn best_fitness_never_increases_across_generations() {
        let (model, image, label) = correctly_classified();
        let r = one_pixel_attack(model, &image, label, &quick_config(29)).unwrap();
        for pair in r.trajectory.windows(2) {
            assert!(
                pair[1] <= pair[0],
                "best fitness rose from {} to {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let (model, image, label) = correctly_classified();
        let bad = OnePixelConfig {
            population: 3,
            ..OnePixelConfig::default()
        };
        assert!(one_pixel_attack(model, &image, label, &bad).is_err());
        let bad = OnePixelConfig {
            pixels: 0,
            ..OnePixelConfig::default()
        };
        assert!(one_pixel_attack(model, &image, label, &bad).is_err());
    }

    #[test]
    fn multi_pixel_budget_is_respected() {
        let (model, image, label) = correctly_classified();
        let config = OnePixelConfig {
            pixels: 3,
            ..quick_config(7)
        };
        let r = one_pixel_attack(model, &image, label, &config).unwrap();
        let side = 28;
        let touched: std::collections::HashSet<usize> = r
            .perturbation
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &d)| d != 0.0)
            .map(|(i, _)| i % (side * side))
            .collect();
        assert!(touched.len() <= 3, "{} pixels touched", touched.len());
    }
}
