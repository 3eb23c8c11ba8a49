//! Flags adversarial inputs by the texture of their grayscale feature
//! response: the map is scanned with a small sliding patch, each patch gets a
//! local entropy value, and the mean entropy is compared against a
//! calibrated threshold.

use crate::error::{Error, Result};
use crate::response::GrayscaleMap;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// How the in-patch distribution behind the entropy sum is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyMode {
    /// First-order histogram of quantized gray levels.
    Histogram,
    /// Second-order histogram of horizontally adjacent level pairs.
    Cooccurrence,
    /// The patch itself, normalized to unit mass.
    Spatial,
}

/// Patch scan and threshold parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Side length of the square patch.
    pub patch: usize,
    pub stride: usize,
    pub mode: EntropyMode,
    /// Quantization bins for the histogram and cooccurrence modes.
    pub bins: usize,
    /// Scores strictly above this are called attacked. The uncalibrated
    /// default is minus infinity (everything flagged), which JSON cannot
    /// express as a number, so it travels as null.
    #[serde(with = "tau_as_nullable")]
    pub tau: f64,
}

/// JSON has no infinity literal: a non-finite tau serializes as null, and
/// null parses back to minus infinity.
mod tau_as_nullable {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        tau: &f64,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        if tau.is_finite() {
            serializer.serialize_f64(*tau)
        } else {
            serializer.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(deserializer)?.unwrap_or(f64::NEG_INFINITY))
    }
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            patch: 3,
            stride: 1,
            mode: EntropyMode::Histogram,
            bins: 32,
            tau: f64::NEG_INFINITY,
        }
    }
}

impl DetectorConfig {
    fn validate(&self) -> Result<()> {
        if self.patch < 2 {
            return Err(Error::InvalidArgument(format!(
                "patch side must be >= 2, got {}",
                self.patch
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if !(2..=256).contains(&self.bins) {
            return Err(Error::InvalidArgument(format!(
                "bins must lie in [2, 256], got {}",
                self.bins
            )));
        }
        Ok(())
    }
}

/// One local entropy value per patch anchor, laid out as a rank-2 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    values: Tensor,
}

impl EntropyMap {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn patches(&self) -> usize {
        self.values.len()
    }
}

/// Whether a score crossed the detection threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Attacked,
    Clean,
}

/// Mean patch entropy together with the verdict it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionScore {
    pub mean_entropy: f64,
    pub patches: usize,
    pub verdict: Verdict,
    pub tau: f64,
}

pub fn local_spatial_entropy(gray: &GrayscaleMap, config: &DetectorConfig) -> Result<EntropyMap> {
    config.validate()?;
    let [height, width] = match gray.map().shape() {
        [h, w] => [*h, *w],
        other => {
            return Err(Error::shape(
                "local_spatial_entropy",
                "rank-2 grayscale map",
                format!("{other:?}"),
            ))
        }
    };
    if config.patch > height || config.patch > width {
        return Err(Error::InvalidArgument(format!(
            "patch {0}x{0} does not fit a {height}x{width} map",
            config.patch
        )));
    }

    let rows = (height - config.patch) / config.stride + 1;
    let cols = (width - config.patch) / config.stride + 1;
    let data = gray.map().data();
    let mut patch = vec![0.0f64; config.patch * config.patch];
    let mut values = Vec::with_capacity(rows * cols);

    for pr in 0..rows {
        for pc in 0..cols {
            let top = pr * config.stride;
            let left = pc * config.stride;
            for dr in 0..config.patch {
                for dc in 0..config.patch {
                    let v = data[(top + dr) * width + (left + dc)];
                    patch[dr * config.patch + dc] = f64::from(v).clamp(0.0, 1.0);
                }
            }
            values.push(patch_entropy(&patch, config));
        }
    }
    Ok(EntropyMap {
        values: Tensor::new(vec![rows, cols], values)?,
    })
}

/// Entropy of one patch, clamped into the mode's attainable range so that
/// the f32 downcast cannot poke above it.
fn patch_entropy(patch: &[f64], config: &DetectorConfig) -> f32 {
    let side = config.patch;
    let s = match config.mode {
        EntropyMode::Histogram => histogram_entropy(patch, config.bins),
        EntropyMode::Cooccurrence => cooccurrence_entropy(patch, side, config.bins),
        EntropyMode::Spatial => spatial_entropy(patch),
    };
    let bound = match config.mode {
        EntropyMode::Histogram => (config.bins.min(side * side) as f64).log2(),
        EntropyMode::Cooccurrence => ((config.bins * config.bins)
            .min(side * side.saturating_sub(1))
            .max(1) as f64)
            .log2(),
        EntropyMode::Spatial => ((side * side) as f64).log2(),
    };
    let clamped = s.clamp(0.0, bound) as f32;
    if f64::from(clamped) > bound {
        f32::from_bits(clamped.to_bits() - 1)
    } else {
        clamped
    }
}

fn quantize(v: f64, bins: usize) -> usize {
    ((v * bins as f64).floor() as usize).min(bins - 1)
}

fn histogram_entropy(patch: &[f64], bins: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    for &v in patch {
        counts[quantize(v, bins)] += 1;
    }
    entropy_of_counts(&counts, patch.len() as f64)
}

fn cooccurrence_entropy(patch: &[f64], side: usize, bins: usize) -> f64 {
    let mut counts = std::collections::HashMap::new();
    for r in 0..side {
        for c in 0..side - 1 {
            let pair = (
                quantize(patch[r * side + c], bins),
                quantize(patch[r * side + c + 1], bins),
            );
            *counts.entry(pair).or_insert(0usize) += 1;
        }
    }
    let total = (side * (side - 1)) as f64;
    let mut s = 0.0;
    for &n in counts.values() {
        let h = n as f64 / total;
        s -= h * h.log2();
    }
    s
}

fn spatial_entropy(patch: &[f64]) -> f64 {
    let sum: f64 = patch.iter().sum();
    if sum == 0.0 {
        return 0.0;
    }
    let mut s = 0.0;
    for &v in patch {
        let h = v / sum;
        if h > 0.0 {
            s -= h * h.log2();
        }
    }
    s
}

fn entropy_of_counts(counts: &[usize], total: f64) -> f64 {
    let mut s = 0.0;
    for &n in counts {
        if n > 0 {
            let h = n as f64 / total;
            s -= h * h.log2();
        }
    }
    s
}

pub fn average_entropy(map: &EntropyMap) -> Result<f64> {
    if map.patches() == 0 {
        return Err(Error::InvalidArgument(
            "entropy map holds no patches".into(),
        ));
    }
    let sum: f64 = map.values.data().iter().map(|&v| f64::from(v)).sum();
    Ok(sum / map.patches() as f64)
}

/// Strictly-greater threshold rule; a score exactly at τ counts as clean.
pub fn decide(score: f64, tau: f64) -> Verdict {
    if score > tau {
        Verdict::Attacked
    } else {
        Verdict::Clean
    }
}

/// Full pipeline on one grayscale map: patch entropies, their mean, and the
/// thresholded verdict.
pub fn detect(gray: &GrayscaleMap, config: &DetectorConfig) -> Result<DetectionScore> {
    let map = local_spatial_entropy(gray, config)?;
    let mean_entropy = average_entropy(&map)?;
    Ok(DetectionScore {
        mean_entropy,
        patches: map.patches(),
        verdict: decide(mean_entropy, config.tau),
        tau: config.tau,
    })
}

/// Smallest clean score with at most `target_fpr`·N clean scores strictly
/// above it, i.e. the (1 − target_fpr) empirical quantile.
pub fn calibrate_threshold(clean_scores: &[f64], target_fpr: f64) -> Result<f64> {
    if clean_scores.is_empty() {
        return Err(Error::InvalidArgument(
            "calibration needs at least one clean score".into(),
        ));
    }
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target FPR must lie in (0, 1), got {target_fpr}"
        )));
    }
    if clean_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("clean scores must be finite".into()));
    }
    let mut sorted = clean_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let allowed = (target_fpr * sorted.len() as f64 + 1e-9).floor() as usize;
    Ok(sorted[allowed.min(sorted.len() - 1)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::{
        entropy_oracle_cooccurrence, entropy_oracle_histogram, entropy_oracle_spatial,
        fpr_at_threshold,
    };
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gray(height: usize, width: usize, data: Vec<f32>) -> GrayscaleMap {
        GrayscaleMap::from_raw(Tensor::new(vec![height, width], data).unwrap())
    }

    fn random_gray(height: usize, width: usize, seed: u64) -> GrayscaleMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gray(
            height,
            width,
            (0..height * width)
                .map(|_| rng.gen_range(0.0..=1.0))
                .collect(),
        )
    }

    #[test]
    fn config_json_round_trips_with_unset_tau_as_null() {
        let config = DetectorConfig::default();
        let text = serde_json::to_string(&config).unwrap();
        assert!(text.contains("\"tau\":null"), "{text}");
        let back: DetectorConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, config);

        let calibrated: DetectorConfig = serde_json::from_str(r#"{"tau":2.5}"#).unwrap();
        assert_eq!(calibrated.tau, 2.5);
    }

    #[test]
    fn constant_map_scores_zero_entropy() {
        let g = gray(5, 5, vec![0.4; 25]);
        let map = local_spatial_entropy(&g, &DetectorConfig::default()).unwrap();
        assert_eq!(map.patches(), 9);
        assert!(map.values().data().iter().all(|&s| s == 0.0));
        assert_eq!(average_entropy(&map).unwrap(), 0.0);
    }

    #[test]
    fn nine_distinct_bins_hit_log2_of_nine() {
        // values (3k + 0.5)/32 land in bins 0,3,6,...,24: nine distinct bins
        let data: Vec<f32> = (0..9).map(|k| (3 * k) as f32 / 32.0 + 0.5 / 32.0).collect();
        let g = gray(3, 3, data);
        let map = local_spatial_entropy(&g, &DetectorConfig::default()).unwrap();
        assert_eq!(map.patches(), 1);
        let s = f64::from(map.values().data()[0]);
        assert!((s - 9f64.log2()).abs() < 1e-6, "got {s}");
    }

    #[test]
    fn histogram_mode_matches_the_direct_oracle() {
        let g = random_gray(9, 7, 21);
        let config = DetectorConfig {
            stride: 2,
            ..DetectorConfig::default()
        };
        let map = local_spatial_entropy(&g, &config).unwrap();
        assert_eq!(map.values().shape(), &[4, 3]);
        let data = g.map().data();
        let mut k = 0;
        for pr in 0..4 {
            for pc in 0..3 {
                let mut patch = Vec::new();
                for dr in 0..3 {
                    for dc in 0..3 {
                        patch.push(f64::from(data[(pr * 2 + dr) * 7 + (pc * 2 + dc)]));
                    }
                }
                let want = entropy_oracle_histogram(&patch, 32);
                let got = f64::from(map.values().data()[k]);
                assert!(
                    (got - want).abs() < 1e-6,
                    "patch {k}: got {got}, want {want}"
                );
                k += 1;
            }
        }
    }

    #[test]
    fn cooccurrence_mode_matches_the_pair_oracle() {
        let g = random_gray(6, 6, 33);
        let config = DetectorConfig {
            mode: EntropyMode::Cooccurrence,
            bins: 8,
            ..DetectorConfig::default()
        };
        let map = local_spatial_entropy(&g, &config).unwrap();
        let data = g.map().data();
        let mut k = 0;
        for pr in 0..4 {
            for pc in 0..4 {
                let mut patch = Vec::new();
                for dr in 0..3 {
                    for dc in 0..3 {
                        patch.push(f64::from(data[(pr + dr) * 6 + (pc + dc)]));
                    }
                }
                let want = entropy_oracle_cooccurrence(&patch, 3, 8);
                let got = f64::from(map.values().data()[k]);
                assert!((got - want).abs() < 1e-6, "patch {k}");
                k += 1;
            }
        }
    }

    #[test]
    fn spatial_mode_matches_the_mass_oracle_and_zero_patches_score_zero() {
        let mut data = vec![0.0f32; 36];
        for (i, v) in data.iter_mut().enumerate().skip(18) {
            *v = (i as f32) / 36.0;
        }
        let g = gray(6, 6, data);
        let config = DetectorConfig {
            mode: EntropyMode::Spatial,
            ..DetectorConfig::default()
        };
        let map = local_spatial_entropy(&g, &config).unwrap();
        let raw = g.map().data();
        let mut k = 0;
        for pr in 0..4 {
            for pc in 0..4 {
                let mut patch = Vec::new();
                for dr in 0..3 {
                    for dc in 0..3 {
                        patch.push(f64::from(raw[(pr + dr) * 6 + (pc + dc)]));
                    }
                }
                let want = entropy_oracle_spatial(&patch);
                let got = f64::from(map.values().data()[k]);
                assert!((got - want).abs() < 1e-6, "patch {k}");
                k += 1;
            }
        }
        // the top-left patch is all zeros
        assert_eq!(map.values().data()[0], 0.0);
    }

    #[test]
    fn patch_bigger_than_the_map_is_rejected() {
        let g = gray(2, 2, vec![0.1; 4]);
        let err = local_spatial_entropy(&g, &DetectorConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn nonsense_configs_are_rejected() {
        let g = random_gray(5, 5, 1);
        for config in [
            DetectorConfig {
                patch: 1,
                ..DetectorConfig::default()
            },
            DetectorConfig {
                stride: 0,
                ..DetectorConfig::default()
            },
            DetectorConfig {
                bins: 1,
                ..DetectorConfig::default()
            },
            DetectorConfig {
                bins: 257,
                ..DetectorConfig::default()
            },
        ] {
            assert!(local_spatial_entropy(&g, &config).is_err());
        }
    }

    #[test]
    fn average_is_the_plain_mean() {
        let g = random_gray(8, 8, 5);
        let map = local_spatial_entropy(&g, &DetectorConfig::default()).unwrap();
        let sum: f64 = map.values().data().iter().map(|&v| f64::from(v)).sum();
        let mean = average_entropy(&map).unwrap();
        assert!((mean - sum / map.patches() as f64).abs() < 1e-9);
    }

    #[test]
    fn noise_scores_above_flatness() {
        let noisy = average_entropy(
            &local_spatial_entropy(&random_gray(10, 10, 9), &DetectorConfig::default()).unwrap(),
        )
        .unwrap();
        let flat = average_entropy(
            &local_spatial_entropy(&gray(10, 10, vec![0.7; 100]), &DetectorConfig::default())
                .unwrap(),
        )
        .unwrap();
        assert!(noisy > flat);
        assert_eq!(flat, 0.0);
    }

    #[test]
    fn boundary_score_counts_as_clean() {
        assert_eq!(decide(1.5, 1.5), Verdict::Clean);
        assert_eq!(decide(1.5 + 1e-12, 1.5), Verdict::Attacked);
        assert_eq!(decide(0.0, f64::NEG_INFINITY), Verdict::Attacked);
    }

    #[test]
    fn calibration_reproduces_the_exact_quantile() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        let tau = calibrate_threshold(&scores, 0.10).unwrap();
        assert_eq!(tau, 90.0);
        assert_eq!(fpr_at_threshold(&scores, tau), 0.10);
    }

    #[test]
    fn tiny_fpr_returns_the_maximum_score() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        let tau = calibrate_threshold(&scores, 0.005).unwrap();
        assert_eq!(tau, 100.0);
        assert_eq!(fpr_at_threshold(&scores, tau), 0.0);
    }

    #[test]
    fn calibration_rejects_bad_inputs() {
        assert!(calibrate_threshold(&[], 0.1).is_err());
        assert!(calibrate_threshold(&[1.0], 0.0).is_err());
        assert!(calibrate_threshold(&[1.0], 1.0).is_err());
        assert!(calibrate_threshold(&[f64::NAN], 0.1).is_err());
    }

    #[test]
    fn detect_reports_a_consistent_score() {
        let g = random_gray(12, 12, 2);
        let config = DetectorConfig {
            tau: 0.5,
            ..DetectorConfig::default()
        };
        let score = detect(&g, &config).unwrap();
        assert_eq!(score.patches, 100);
        assert_eq!(score.verdict, decide(score.mean_entropy, 0.5));
        assert_eq!(score.tau, 0.5);
    }

    proptest! {
        /// Histogram entropy only sees the multiset of values, never their
        /// arrangement inside the patch.
        #[test]
        fn histogram_entropy_is_permutation_invariant(
            values in proptest::collection::vec(0.0f32..=1.0, 9),
            swap in proptest::collection::vec((0usize..9, 0usize..9), 0..12),
        ) {
            let mut permuted = values.clone();
            for (a, b) in swap {
                permuted.swap(a, b);
            }
            let config = DetectorConfig::default();
            let a = local_spatial_entropy(&gray(3, 3, values), &config).unwrap();
            let b = local_spatial_entropy(&gray(3, 3, permuted), &config).unwrap();
            prop_assert_eq!(a.values().data(), b.values().data());
        }

        /// Raising the threshold can only turn attacked verdicts clean.
        #[test]
        fn verdicts_are_monotone_in_the_threshold(
            score in -10.0f64..10.0,
            low in -10.0f64..10.0,
            high in -10.0f64..10.0,
        ) {
            let (low, high) = if low <= high { (low, high) } else { (high, low) };
            if decide(score, high) == Verdict::Attacked {
                prop_assert_eq!(decide(score, low), Verdict::Attacked);
            }
        }

        /// Calibrated thresholds respect the target rate on the scores that
        /// produced them.
        #[test]
        fn calibrated_fpr_never_exceeds_the_target(
            scores in proptest::collection::vec(-5.0f64..5.0, 1..60),
            fpr in 0.01f64..0.99,
        ) {
            let tau = calibrate_threshold(&scores, fpr).unwrap();
            prop_assert!(fpr_at_threshold(&scores, tau) <= fpr + 1e-12);
        }

        /// Patch entropies stay inside the histogram-mode bound.
        #[test]
        fn histogram_entropy_respects_its_bound(seed in 0u64..500) {
            let g = random_gray(7, 7, seed);
            let config = DetectorConfig { bins: 4, ..DetectorConfig::default() };
            let map = local_spatial_entropy(&g, &config).unwrap();
            let bound = 4f64.log2();
            for &s in map.values().data() {
                prop_assert!(f64::from(s) >= 0.0);
                prop_assert!(f64::from(s) <= bound);
            }
        }
    }
}
