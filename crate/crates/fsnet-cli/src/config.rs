//! The experiment configuration document and its plumbing: JSON loading,
//! dotted-path `--set` overrides, the FS_SEED fallback, and preflight path
//! checks that turn missing inputs into field-named config errors.

use crate::Failure;
use fsnet::{
    AttackSpec, BoundaryConfig, DeepFoolConfig, DetectorConfig, OnePixelConfig, TrainSchedule,
};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::{Path, PathBuf};

/// Everything a run needs. One master `seed` drives synthetic data,
/// training and the per-sample attack seeds, so a config file pins the
/// whole experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; FS_SEED is consulted when absent.
    pub seed: Option<u64>,
    /// Weights file: written by `train`, read by everything else.
    pub weights: PathBuf,
    /// Destination for CSVs, reports and image dumps.
    pub output_dir: PathBuf,
    /// Images drawn sequentially from the held-out tail by attack/eval.
    pub sample_count: usize,
    pub dataset: DatasetSpec,
    pub train: TrainSection,
    pub attacks: Vec<AttackSpec>,
    pub detector: DetectorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: None,
            weights: PathBuf::from("out/model.fsnt"),
            output_dir: PathBuf::from("out"),
            sample_count: 200,
            dataset: DatasetSpec::Synth { count: 2500 },
            train: TrainSection::default(),
            attacks: vec![
                AttackSpec::Fgsm { epsilon: 0.1 },
                AttackSpec::Gradient {
                    step: 0.5,
                    raw: false,
                },
                AttackSpec::OnePixel(OnePixelConfig {
                    population: 64,
                    generations: 30,
                    ..OnePixelConfig::default()
                }),
                AttackSpec::DeepFool(DeepFoolConfig::default()),
                AttackSpec::Boundary(BoundaryConfig::default()),
            ],
            detector: DetectorConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Errors (exit 2, naming the field) when a configured input file is
    /// missing. Which files are inputs depends on the command, so callers
    /// pass the relevant checks.
    pub fn require_dataset_paths(&self) -> Result<(), Failure> {
        if let DatasetSpec::Idx { images, labels } = &self.dataset {
            require_file("dataset.images", images)?;
            require_file("dataset.labels", labels)?;
        }
        Ok(())
    }

    pub fn require_weights(&self) -> Result<(), Failure> {
        require_file("weights", &self.weights)
    }

    /// Attack names must be unique: summaries and image dumps are keyed by
    /// name.
    pub fn require_distinct_attacks(&self) -> Result<(), Failure> {
        for (i, spec) in self.attacks.iter().enumerate() {
            if self.attacks[..i].iter().any(|s| s.name() == spec.name()) {
                return Err(Failure::config(format!(
                    "attacks: duplicate entry '{}'; configure each attack at most once",
                    spec.name()
                )));
            }
        }
        Ok(())
    }

    /// Master seed: the config field, else FS_SEED.
    pub fn resolve_seed(&self) -> Result<u64, Failure> {
        if let Some(seed) = self.seed {
            return Ok(seed);
        }
        match std::env::var("FS_SEED") {
            Ok(text) => text.trim().parse().map_err(|_| {
                Failure::config(format!("FS_SEED '{text}' is not an unsigned integer"))
            }),
            Err(_) => Err(Failure::config(
                "no seed: set `seed` in the config, pass --set seed=N, or export FS_SEED",
            )),
        }
    }
}

/// Where the images come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Deterministic synthetic shapes, generated from the master seed.
    Synth { count: usize },
    /// An IDX image/label file pair, e.g. the MNIST files.
    Idx { images: PathBuf, labels: PathBuf },
}

/// Training hyperparameters plus the train/held-out split. Mirrors the
/// library schedule, with the seed optional so the master seed can stand in.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f32,
    /// Weight-init and shuffle seed; the master seed when absent.
    pub seed: Option<u64>,
    /// Tail fraction of the dataset reserved for validation; `attack` and
    /// `eval` sample from the same tail, so they never see training images.
    pub heldout_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let schedule = TrainSchedule::default();
        TrainSection {
            epochs: schedule.epochs,
            batch_size: schedule.batch_size,
            learning_rate: schedule.learning_rate,
            momentum: schedule.momentum,
            lr_decay_every: schedule.lr_decay_every,
            lr_decay_factor: schedule.lr_decay_factor,
            seed: None,
            heldout_fraction: 0.2,
        }
    }
}

impl TrainSection {
    pub fn schedule(&self, master_seed: u64) -> TrainSchedule {
        TrainSchedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            lr_decay_every: self.lr_decay_every,
            lr_decay_factor: self.lr_decay_factor,
            seed: self.seed.unwrap_or(master_seed),
        }
    }
}

/// Reads the config file (or starts from defaults), applies `--set`
/// overrides in order, and deserializes the result.
pub fn load(path: Option<&Path>, sets: &[String]) -> Result<ExperimentConfig, Failure> {
    let mut doc: Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::config(format!("config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::config(format!("config {}: {e}", p.display())))?
        }
        None => serde_json::to_value(ExperimentConfig::default())
            .expect("the default config serializes"),
    };
    for set in sets {
        apply_set(&mut doc, set)?;
    }
    serde_json::from_value(doc).map_err(|e| Failure::config(format!("config: {e}")))
}

pub fn render(config: &ExperimentConfig) -> Result<String, Failure> {
    serde_json::to_string_pretty(config).map_err(|e| Failure::config(format!("config: {e}")))
}

/// One `KEY=VALUE` override. The key is a dotted path; numeric segments
/// index arrays, other segments are object keys (created when missing).
/// The value is parsed as JSON, falling back to a plain string, so
/// `seed=7`, `detector.mode=spatial` and `attacks=[...]` all work.
fn apply_set(doc: &mut Value, spec: &str) -> Result<(), Failure> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("--set {spec}: expected KEY=VALUE")))?;
    if path.is_empty() {
        return Err(Failure::config(format!("--set {spec}: empty key")));
    }
    let new = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));

    let segments: Vec<&str> = path.split('.').collect();
    let (parents, leaf) = segments.split_at(segments.len() - 1);
    let mut cursor = doc;
    for seg in parents {
        cursor = descend(cursor, seg, path)?;
    }
    match cursor {
        Value::Array(items) => {
            let index = array_index(leaf[0], items.len(), path)?;
            items[index] = new;
        }
        Value::Object(map) => {
            map.insert(leaf[0].to_string(), new);
        }
        _ => {
            return Err(Failure::config(format!(
                "--set {path}: '{}' would overwrite inside a scalar",
                leaf[0]
            )));
        }
    }
    Ok(())
}

fn descend<'a>(cursor: &'a mut Value, seg: &str, path: &str) -> Result<&'a mut Value, Failure> {
    match cursor {
        Value::Array(items) => {
            let index = array_index(seg, items.len(), path)?;
            Ok(&mut items[index])
        }
        Value::Object(map) => Ok(map
            .entry(seg.to_string())
            .or_insert_with(|| Value::Object(Map::new()))),
        _ => Err(Failure::config(format!(
            "--set {path}: '{seg}' descends into a scalar"
        ))),
    }
}

fn array_index(seg: &str, len: usize, path: &str) -> Result<usize, Failure> {
    let index: usize = seg
        .parse()
        .map_err(|_| Failure::config(format!("--set {path}: '{seg}' is not an array index")))?;
    if index >= len {
        return Err(Failure::config(format!(
            "--set {path}: index {index} is out of bounds (array of {len})"
        )));
    }
    Ok(index)
}

fn require_file(field: &str, path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::config(format!(
            "{field}: {} does not exist",
            path.display()
        )))
    }
}
