//! Experiment loop and reporting: runs attacks over a dataset, scores every
//! clean and adversarial image with the entropy detector, and aggregates
//! ROC curves, AUC and per-attack summary rows.

use crate::attacks::{
    boundary_attack, deepfool, fgsm, gradient_attack, gradient_attack_unnormalized,
    one_pixel_attack, AttackResult, BoundaryConfig, DeepFoolConfig, OnePixelConfig,
};
use crate::data::Dataset;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::response::{guided_backprop, to_grayscale};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One configured attack. The `seed` fields inside stochastic configs are
/// ignored by the experiment loop, which derives one seed per (image,
/// attack) pair from the experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum AttackSpec {
    Fgsm {
        epsilon: f32,
    },
    Gradient {
        step: f32,
        #[serde(default)]
        raw: bool,
    },
    OnePixel(OnePixelConfig),
    #[serde(rename = "deepfool")]
    DeepFool(DeepFoolConfig),
    Boundary(BoundaryConfig),
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Fgsm { .. } => "fgsm",
            AttackSpec::Gradient { .. } => "gradient",
            AttackSpec::OnePixel(_) => "one_pixel",
            AttackSpec::DeepFool(_) => "deepfool",
            AttackSpec::Boundary(_) => "boundary",
        }
    }

    /// Runs the attack with the per-sample seed substituted into stochastic
    /// configs.
    pub fn run(
        &self,
        model: &Model,
        image: &Tensor,
        label: usize,
        seed: u64,
    ) -> Result<AttackResult> {
        match self {
            AttackSpec::Fgsm { epsilon } => fgsm(model, image, label, *epsilon),
            AttackSpec::Gradient { step, raw } => {
                if *raw {
                    gradient_attack_unnormalized(model, image, label, *step)
                } else {
                    gradient_attack(model, image, label, *step)
                }
            }
            AttackSpec::OnePixel(config) => {
                let config = OnePixelConfig {
                    seed,
                    ..config.clone()
                };
                one_pixel_attack(model, image, label, &config)
            }
            AttackSpec::DeepFool(config) => deepfool(model, image, label, config),
            AttackSpec::Boundary(config) => {
                let config = BoundaryConfig {
                    seed,
                    ..config.clone()
                };
                boundary_attack(model, image, label, &config)
            }
        }
    }
}

/// One row of the experiment: either the clean evaluation of an image
/// (attack == None) or one attack on it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub image_id: usize,
    pub true_label: usize,
    /// None marks the clean row of the image.
    pub attack: Option<String>,
    pub predicted_clean: usize,
    pub correctly_classified: bool,
    /// Mean local entropy of the clean image's feature response.
    pub clean_score: Option<f64>,
    pub success: Option<bool>,
    pub pre_misclassified: bool,
    pub predicted_after: Option<usize>,
    pub confidence_after: Option<f32>,
    pub target_confidence_after: Option<f32>,
    pub l2_norm: Option<f32>,
    pub linf_norm: Option<f32>,
    pub iterations: Option<usize>,
    pub forward_calls: Option<u64>,
    pub gradient_calls: Option<u64>,
    /// Present exactly when the attack succeeded.
    pub adversarial_score: Option<f64>,
    pub error: Option<String>,
}

/// Point on a ROC curve; `threshold` sweeps from +inf down to -inf.
#[derive(Debug, Clone, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Table-style aggregate of one attack across the experiment. Detection
/// fields are absent when the attack never succeeded.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSummary {
    pub attack: String,
    pub attempted: usize,
    pub succeeded: usize,
    pub errored: usize,
    pub success_rate: f64,
    pub mean_confidence_after: Option<f64>,
    pub mean_target_confidence_after: Option<f64>,
    pub detection_at_1pct: Option<f64>,
    pub detection_at_5pct: Option<f64>,
    pub detection_at_10pct: Option<f64>,
    pub auc: Option<f64>,
}

/// Mean entropy of the guided-backprop response of one image.
pub fn entropy_score(model: &Model, image: &Tensor, detector: &DetectorConfig) -> Result<f64> {
    let response = guided_backprop(model, image)?;
    let gray = to_grayscale(&response)?;
    crate::detector::detect(&gray, detector).map(|s| s.mean_entropy)
}

/// Seed of one (image, attack) row: a SplitMix64 finalizer over the
/// experiment seed and the row coordinates. Exposed so callers can re-run a
/// single attack from an outcomes row and reproduce it exactly.
pub fn sample_seed(base: u64, image_id: u64, attack_index: u64) -> u64 {
    let mut z = base
        ^ image_id.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ attack_index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Attacks every correctly-classified image with every configured attack and
/// scores all clean and successful adversarial images with the detector.
/// Images run in parallel; the returned rows are ordered by image, clean row
/// first, then attacks in configuration order.
pub fn run_experiment(
    model: &Model,
    data: &Dataset,
    attacks: &[AttackSpec],
    detector: &DetectorConfig,
    seed: u64,
) -> Result<Vec<SampleOutcome>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("the dataset slice is empty".into()));
    }

    let per_image: Vec<Vec<SampleOutcome>> = (0..data.len())
        .into_par_iter()
        .map(|i| evaluate_image(model, data, i, attacks, detector, seed))
        .collect::<Result<_>>()?;
    let outcomes: Vec<SampleOutcome> = per_image.into_iter().flatten().collect();

    let errored = outcomes.iter().filter(|o| o.error.is_some()).count();
    if 2 * errored > outcomes.len() {
        return Err(Error::Aborted(format!(
            "{errored} of {} rows failed",
            outcomes.len()
        )));
    }
    Ok(outcomes)
}

fn evaluate_image(
    model: &Model,
    data: &Dataset,
    image_id: usize,
    attacks: &[AttackSpec],
    detector: &DetectorConfig,
    seed: u64,
) -> Result<Vec<SampleOutcome>> {
    let image = data.image(image_id);
    let label = data.label(image_id);
    let (predicted_clean, _) = model.predict(image)?;
    let correctly_classified = predicted_clean == label;

    let blank = SampleOutcome {
        image_id,
        true_label: label,
        attack: None,
        predicted_clean,
        correctly_classified,
        clean_score: None,
        success: None,
        pre_misclassified: false,
        predicted_after: None,
        confidence_after: None,
        target_confidence_after: None,
        l2_norm: None,
        linf_norm: None,
        iterations: None,
        forward_calls: None,
        gradient_calls: None,
        adversarial_score: None,
        error: None,
    };

    let mut clean_row = blank.clone();
    match entropy_score(model, image, detector) {
        Ok(s) => clean_row.clean_score = Some(s),
        Err(e) => clean_row.error = Some(e.to_string()),
    }
    let clean_score = clean_row.clean_score;
    let mut rows = vec![clean_row];

    if !correctly_classified {
        return Ok(rows);
    }

    for (attack_index, spec) in attacks.iter().enumerate() {
        let mut row = blank.clone();
        row.attack = Some(spec.name().to_string());
        row.clean_score = clean_score;
        let row_seed = sample_seed(seed, image_id as u64, attack_index as u64);
        match spec.run(model, image, label, row_seed) {
            Ok(result) => {
                row.success = Some(result.success);
                row.pre_misclassified = result.pre_misclassified;
                row.predicted_after = Some(result.predicted_after);
                row.confidence_after = Some(result.confidence_after);
                row.target_confidence_after = Some(result.target_confidence_after);
                row.l2_norm = Some(result.l2_norm);
                row.linf_norm = Some(result.linf_norm);
                row.iterations = Some(result.iterations);
                row.forward_calls = Some(result.forward_calls);
                row.gradient_calls = Some(result.gradient_calls);
                if result.success {
                    match entropy_score(model, &result.adversarial, detector) {
                        Ok(s) => row.adversarial_score = Some(s),
                        Err(e) => {
                            row.adversarial_score = None;
                            row.error = Some(e.to_string());
                        }
                    }
                }
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        rows.push(row);
    }
    Ok(rows)
}

/// ROC of adversarial (positive) against clean (negative) scores under the
/// strict `score > threshold` convention, thresholds swept over the union of
/// both sets plus infinite sentinels. AUC is the trapezoidal area, which
/// equals pair counting with ties at half weight.
pub fn roc(clean: &[f64], adversarial: &[f64]) -> Result<RocCurve> {
    if clean.is_empty() || adversarial.is_empty() {
        return Err(Error::InvalidArgument(
            "roc needs at least one score on each side".into(),
        ));
    }
    if clean.iter().chain(adversarial).any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }

    let mut clean_sorted = clean.to_vec();
    clean_sorted.sort_by(f64::total_cmp);
    let mut adv_sorted = adversarial.to_vec();
    adv_sorted.sort_by(f64::total_cmp);

    let mut thresholds: Vec<f64> = clean.iter().chain(adversarial).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    let above = |sorted: &[f64], t: f64| -> f64 {
        let below_or_equal = sorted.partition_point(|&s| s <= t);
        (sorted.len() - below_or_equal) as f64 / sorted.len() as f64
    };

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    for t in thresholds {
        points.push(RocPoint {
            threshold: t,
            fpr: above(&clean_sorted, t),
            tpr: above(&adv_sorted, t),
        });
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });

    let mut auc = 0.0;
    for pair in points.windows(2) {
        auc += (pair[1].fpr - pair[0].fpr) * (pair[1].tpr + pair[0].tpr) / 2.0;
    }
    Ok(RocCurve { points, auc })
}

/// TPR at the largest achievable FPR not exceeding the requested one.
pub fn detection_rate_at_fpr(curve: &RocCurve, fpr: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.fpr <= fpr)
        .map(|p| p.tpr)
        .fold(0.0, f64::max)
}

/// (clean, adversarial) detector scores of one attack's successful rows,
/// the pairing `summarize` feeds into `roc`. Pre-misclassified rows and
/// rows missing either score are excluded.
pub fn paired_scores(outcomes: &[SampleOutcome], attack: &str) -> (Vec<f64>, Vec<f64>) {
    outcomes
        .iter()
        .filter(|o| {
            o.attack.as_deref() == Some(attack) && !o.pre_misclassified && o.success == Some(true)
        })
        .filter_map(|o| match (o.clean_score, o.adversarial_score) {
            (Some(c), Some(a)) => Some((c, a)),
            _ => None,
        })
        .unzip()
}

/// One summary row per attack, in order of first appearance. ROC statistics
/// pair each successful adversarial score with the clean scores of the same
/// images.
pub fn summarize(outcomes: &[SampleOutcome]) -> Vec<AttackSummary> {
    let mut order: Vec<&str> = Vec::new();
    for row in outcomes {
        if let Some(name) = row.attack.as_deref() {
            if !order.contains(&name) {
                order.push(name);
            }
        }
    }

    order
        .into_iter()
        .map(|name| {
            let rows: Vec<&SampleOutcome> = outcomes
                .iter()
                .filter(|o| o.attack.as_deref() == Some(name) && !o.pre_misclassified)
                .collect();
            let attempted = rows.len();
            let succeeded = rows.iter().filter(|o| o.success == Some(true)).count();
            let errored = rows.iter().filter(|o| o.error.is_some()).count();

            let successes: Vec<&&SampleOutcome> =
                rows.iter().filter(|o| o.success == Some(true)).collect();
            let mean_of = |pick: fn(&SampleOutcome) -> Option<f32>| -> Option<f64> {
                if successes.is_empty() {
                    return None;
                }
                let sum: f64 = successes
                    .iter()
                    .filter_map(|o| pick(o).map(f64::from))
                    .sum();
                Some(sum / successes.len() as f64)
            };

            let (clean, adv) = paired_scores(outcomes, name);
            let curve = if clean.is_empty() {
                None
            } else {
                roc(&clean, &adv).ok()
            };

            AttackSummary {
                attack: name.to_string(),
                attempted,
                succeeded,
                errored,
                success_rate: if attempted == 0 {
                    0.0
                } else {
                    succeeded as f64 / attempted as f64
                },
                mean_confidence_after: mean_of(|o| o.confidence_after),
                mean_target_confidence_after: mean_of(|o| o.target_confidence_after),
                detection_at_1pct: curve.as_ref().map(|c| detection_rate_at_fpr(c, 0.01)),
                detection_at_5pct: curve.as_ref().map(|c| detection_rate_at_fpr(c, 0.05)),
                detection_at_10pct: curve.as_ref().map(|c| detection_rate_at_fpr(c, 0.10)),
                auc: curve.as_ref().map(|c| c.auc),
            }
        })
        .collect()
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

/// Header-first CSV with one clean row per image and one row per (image,
/// attack). Floats use shortest round-trip formatting, so regenerated files
/// are byte-identical.
pub fn outcomes_csv(outcomes: &[SampleOutcome]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "image_id",
        "true_label",
        "attack",
        "predicted_clean",
        "correctly_classified",
        "clean_score",
        "success",
        "pre_misclassified",
        "predicted_after",
        "confidence_after",
        "target_confidence_after",
        "l2_norm",
        "linf_norm",
        "iterations",
        "forward_calls",
        "gradient_calls",
        "adversarial_score",
        "error",
    ])
    .map_err(csv_error)?;
    for o in outcomes {
        w.write_record([
            o.image_id.to_string(),
            o.true_label.to_string(),
            o.attack.clone().unwrap_or_else(|| "clean".to_string()),
            o.predicted_clean.to_string(),
            o.correctly_classified.to_string(),
            opt(&o.clean_score),
            opt(&o.success),
            o.pre_misclassified.to_string(),
            opt(&o.predicted_after),
            opt(&o.confidence_after),
            opt(&o.target_confidence_after),
            opt(&o.l2_norm),
            opt(&o.linf_norm),
            opt(&o.iterations),
            opt(&o.forward_calls),
            opt(&o.gradient_calls),
            opt(&o.adversarial_score),
            o.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_error)?;
    }
    finish_csv(w)
}

/// Inverse of `outcomes_csv`; summaries regenerated from the parsed rows
/// match the originals.
pub fn parse_outcomes_csv(text: &str) -> Result<Vec<SampleOutcome>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let mut outcomes = Vec::new();
    for (index, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_error(index, e.to_string()))?;
        if record.len() != 18 {
            return Err(parse_error(
                index,
                format!("expected 18 fields, got {}", record.len()),
            ));
        }
        let field = |i: usize| record.get(i).unwrap_or_default();
        let parse_req = |i: usize, what: &str| -> Result<u64> {
            field(i)
                .parse::<u64>()
                .map_err(|_| parse_error(index, format!("bad {what}: {:?}", field(i))))
        };
        let attack = match field(2) {
            "clean" => None,
            other => Some(other.to_string()),
        };
        outcomes.push(SampleOutcome {
            image_id: parse_req(0, "image_id")? as usize,
            true_label: parse_req(1, "true_label")? as usize,
            attack,
            predicted_clean: parse_req(3, "predicted_clean")? as usize,
            correctly_classified: parse_bool(field(4), index)?,
            clean_score: parse_opt(field(5), index)?,
            success: match field(6) {
                "" => None,
                other => Some(parse_bool(other, index)?),
            },
            pre_misclassified: parse_bool(field(7), index)?,
            predicted_after: parse_opt::<usize>(field(8), index)?,
            confidence_after: parse_opt(field(9), index)?,
            target_confidence_after: parse_opt(field(10), index)?,
            l2_norm: parse_opt(field(11), index)?,
            linf_norm: parse_opt(field(12), index)?,
            iterations: parse_opt(field(13), index)?,
            forward_calls: parse_opt(field(14), index)?,
            gradient_calls: parse_opt(field(15), index)?,
            adversarial_score: parse_opt(field(16), index)?,
            error: match field(17) {
                "" => None,
                other => Some(other.to_string()),
            },
        });
    }
    Ok(outcomes)
}

fn parse_bool(s: &str, row: usize) -> Result<bool> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(parse_error(row, format!("bad boolean: {other:?}"))),
    }
}

fn parse_opt<T: std::str::FromStr>(s: &str, row: usize) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<T>()
        .map(Some)
        .map_err(|_| parse_error(row, format!("bad value: {s:?}")))
}

fn parse_error(row: usize, message: String) -> Error {
    Error::Format {
        offset: row as u64,
        message,
    }
}

/// Summary rows as CSV, mirroring `AttackSummary`.
pub fn summary_csv(summaries: &[AttackSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "attack",
        "attempted",
        "succeeded",
        "errored",
        "success_rate",
        "mean_confidence_after",
        "mean_target_confidence_after",
        "detection_at_1pct",
        "detection_at_5pct",
        "detection_at_10pct",
        "auc",
    ])
    .map_err(csv_error)?;
    for s in summaries {
        w.write_record([
            s.attack.clone(),
            s.attempted.to_string(),
            s.succeeded.to_string(),
            s.errored.to_string(),
            s.success_rate.to_string(),
            opt(&s.mean_confidence_after),
            opt(&s.mean_target_confidence_after),
            opt(&s.detection_at_1pct),
            opt(&s.detection_at_5pct),
            opt(&s.detection_at_10pct),
            opt(&s.auc),
        ])
        .map_err(csv_error)?;
    }
    finish_csv(w)
}

/// Fixed-width text rendering of the summary rows.
pub fn summary_table(summaries: &[AttackSummary]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>9} {:>9} {:>7} {:>8} {:>10} {:>10} {:>8} {:>8} {:>8} {:>7}\n",
        "attack",
        "attempted",
        "succeeded",
        "errored",
        "success",
        "conf_true",
        "conf_targ",
        "det@1%",
        "det@5%",
        "det@10%",
        "auc"
    ));
    let fmt3 = |v: &Option<f64>| match v {
        Some(x) => format!("{x:.3}"),
        None => "-".to_string(),
    };
    for s in summaries {
        out.push_str(&format!(
            "{:<10} {:>9} {:>9} {:>7} {:>8.3} {:>10} {:>10} {:>8} {:>8} {:>8} {:>7}\n",
            s.attack,
            s.attempted,
            s.succeeded,
            s.errored,
            s.success_rate,
            fmt3(&s.mean_confidence_after),
            fmt3(&s.mean_target_confidence_after),
            fmt3(&s.detection_at_1pct),
            fmt3(&s.detection_at_5pct),
            fmt3(&s.detection_at_10pct),
            fmt3(&s.auc),
        ));
    }
    out
}

/// Clean and adversarial score histograms over 64 shared bins; the bin edges
/// are part of the file.
pub fn histogram_csv(outcomes: &[SampleOutcome]) -> Result<String> {
    const BINS: usize = 64;
    let clean: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.attack.is_none())
        .filter_map(|o| o.clean_score)
        .collect();
    let adversarial: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| o.adversarial_score)
        .collect();

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin", "low", "high", "clean_count", "adversarial_count"])
        .map_err(csv_error)?;

    let all: Vec<f64> = clean.iter().chain(&adversarial).copied().collect();
    if !all.is_empty() {
        let min = all.iter().copied().fold(f64::INFINITY, f64::min);
        let max = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if max > min {
            (max - min) / BINS as f64
        } else {
            1.0
        };
        let bin_of = |s: f64| -> usize { (((s - min) / width).floor() as usize).min(BINS - 1) };
        let mut clean_counts = [0usize; BINS];
        let mut adv_counts = [0usize; BINS];
        for &s in &clean {
            clean_counts[bin_of(s)] += 1;
        }
        for &s in &adversarial {
            adv_counts[bin_of(s)] += 1;
        }
        for b in 0..BINS {
            w.write_record([
                b.to_string(),
                (min + b as f64 * width).to_string(),
                (min + (b + 1) as f64 * width).to_string(),
                clean_counts[b].to_string(),
                adv_counts[b].to_string(),
            ])
            .map_err(csv_error)?;
        }
    }
    finish_csv(w)
}

/// ROC points as CSV (threshold, fpr, tpr) plus the AUC in a trailing row.
pub fn roc_csv(curve: &RocCurve) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["threshold", "fpr", "tpr"])
        .map_err(csv_error)?;
    for p in &curve.points {
        w.write_record([
            p.threshold.to_string(),
            p.fpr.to_string(),
            p.tpr.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.write_record(["auc", &curve.auc.to_string(), ""])
        .map_err(csv_error)?;
    finish_csv(w)
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv rendering failed: {e}"))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv rendering failed: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(format!("csv not utf-8: {e}")))
}
