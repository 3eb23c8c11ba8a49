//! The subcommand bodies. Every command resolves its inputs through the
//! config, delegates the real work to the library, and writes files under
//! `output_dir`. All of them are deterministic given config + seed.

use crate::config::{DatasetSpec, ExperimentConfig};
use crate::Failure;
use fsnet::{
    guided_backprop, histogram_csv, load_idx, load_netpbm, load_weights, local_spatial_entropy,
    outcomes_csv, paired_scores, parse_outcomes_csv, roc, roc_csv, run_experiment, sample_seed,
    save_pgm, save_ppm, save_weights, summarize, summary_csv, summary_table, synth_shapes,
    to_grayscale, Dataset, Model, NetworkSpec, SampleOutcome, Tensor, Verdict,
};
use std::path::Path;

pub fn train(config: &ExperimentConfig) -> Result<u8, Failure> {
    config.require_dataset_paths()?;
    let seed = config.resolve_seed()?;
    let data = materialize(config, seed)?;
    let (train_set, heldout) = split(&data, config.train.heldout_fraction)?;
    let schedule = config.train.schedule(seed);

    let (model, metrics) = Model::train(NetworkSpec::reference(), &train_set, &heldout, &schedule)?;

    if let Some(parent) = config.weights.parent() {
        create_dir(parent)?;
    }
    save_weights(&model, &config.weights)?;
    create_dir(&config.output_dir)?;

    let mut csv = String::from("epoch,mean_loss,heldout_accuracy,learning_rate\n");
    for m in &metrics {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            m.epoch, m.mean_loss, m.heldout_accuracy, m.learning_rate
        ));
        println!(
            "epoch {}: loss {:.4}, held-out accuracy {:.4}, lr {}",
            m.epoch, m.mean_loss, m.heldout_accuracy, m.learning_rate
        );
    }
    let metrics_path = config.output_dir.join("train_metrics.csv");
    write_text(&metrics_path, &csv)?;

    println!(
        "trained on {} images, validated on {}; wrote {} and {}",
        train_set.len(),
        heldout.len(),
        config.weights.display(),
        metrics_path.display()
    );
    Ok(0)
}

pub fn attack(config: &ExperimentConfig, dump_images: bool) -> Result<u8, Failure> {
    let (model, eval_set, seed) = load_pipeline(config)?;
    let outcomes = run_experiment(&model, &eval_set, &config.attacks, &config.detector, seed)?;

    create_dir(&config.output_dir)?;
    let outcomes_path = config.output_dir.join("outcomes.csv");
    write_text(&outcomes_path, &outcomes_csv(&outcomes)?)?;
    println!(
        "wrote {} ({} rows)",
        outcomes_path.display(),
        outcomes.len()
    );

    for s in summarize(&outcomes) {
        println!(
            "{}: {}/{} succeeded, {} errored",
            s.attack, s.succeeded, s.attempted, s.errored
        );
    }

    if dump_images {
        dump_triplets(config, &model, &eval_set, seed)?;
    }
    Ok(0)
}

pub fn featmap(
    config: &ExperimentConfig,
    image: &Path,
    out_dir: Option<&Path>,
) -> Result<u8, Failure> {
    config.require_weights()?;
    require_file("--image", image)?;
    let out = out_dir.unwrap_or(&config.output_dir);
    create_dir(out)?;

    let model = load_weights(&config.weights)?;
    let input = load_netpbm(image)?;
    let gray = to_grayscale(&guided_backprop(&model, &input)?)?;
    let entropy = local_spatial_entropy(&gray, &config.detector)?;

    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image");
    let response_path = out.join(format!("{stem}_response.pgm"));
    save_pgm(gray.map(), &response_path)?;

    // Entropy rescaled by the universal bound log2(P^2), so all modes map
    // onto the same 0..255 ramp.
    let patch = config.detector.patch;
    let bound = ((patch * patch) as f64).log2();
    let scaled: Vec<f32> = entropy
        .values()
        .data()
        .iter()
        .map(|&v| (f64::from(v) / bound).clamp(0.0, 1.0) as f32)
        .collect();
    let entropy_map = Tensor::new(entropy.values().shape().to_vec(), scaled)?;
    let entropy_path = out.join(format!("{stem}_entropy.pgm"));
    save_pgm(&entropy_map, &entropy_path)?;

    println!(
        "wrote {} and {}",
        response_path.display(),
        entropy_path.display()
    );
    Ok(0)
}

pub fn detect(config: &ExperimentConfig, image: &Path, tau: Option<f64>) -> Result<u8, Failure> {
    config.require_weights()?;
    require_file("--image", image)?;

    let model = load_weights(&config.weights)?;
    let input = load_netpbm(image)?;
    let gray = to_grayscale(&guided_backprop(&model, &input)?)?;
    let mut detector = config.detector.clone();
    if let Some(tau) = tau {
        detector.tau = tau;
    }
    let score = fsnet::detect(&gray, &detector)?;

    let verdict = match score.verdict {
        Verdict::Attacked => "attacked",
        Verdict::Clean => "clean",
    };
    println!("{verdict} score={} tau={}", score.mean_entropy, score.tau);
    Ok(match score.verdict {
        Verdict::Attacked => 1,
        Verdict::Clean => 0,
    })
}

pub fn eval(config: &ExperimentConfig) -> Result<u8, Failure> {
    let (model, eval_set, seed) = load_pipeline(config)?;
    let outcomes = run_experiment(&model, &eval_set, &config.attacks, &config.detector, seed)?;

    create_dir(&config.output_dir)?;
    let outcomes_path = config.output_dir.join("outcomes.csv");
    write_text(&outcomes_path, &outcomes_csv(&outcomes)?)?;
    println!("wrote {}", outcomes_path.display());

    write_reports(&outcomes, &config.output_dir)?;
    print!("{}", summary_table(&summarize(&outcomes)));
    Ok(0)
}

pub fn report(config: &ExperimentConfig, outcomes_path: &Path) -> Result<u8, Failure> {
    require_file("--outcomes", outcomes_path)?;
    let text = std::fs::read_to_string(outcomes_path).map_err(fsnet::Error::from)?;
    let outcomes = parse_outcomes_csv(&text)?;

    create_dir(&config.output_dir)?;
    write_reports(&outcomes, &config.output_dir)?;
    print!("{}", summary_table(&summarize(&outcomes)));
    Ok(0)
}

/// Summary CSV and table, score histogram, and one ROC file per attack
/// that produced scored successes. Pure functions of the outcome rows, so
/// `report` reproduces `eval` output byte for byte.
fn write_reports(outcomes: &[SampleOutcome], dir: &Path) -> Result<(), Failure> {
    let summaries = summarize(outcomes);
    let files = [
        ("summary.csv", summary_csv(&summaries)?),
        ("summary.txt", summary_table(&summaries)),
        ("histogram.csv", histogram_csv(outcomes)?),
    ];
    for (name, text) in files {
        let path = dir.join(name);
        write_text(&path, &text)?;
        println!("wrote {}", path.display());
    }

    for summary in &summaries {
        if summary.auc.is_none() {
            continue;
        }
        let (clean, adversarial) = paired_scores(outcomes, &summary.attack);
        let curve = roc(&clean, &adversarial)?;
        let path = dir.join(format!("roc_{}.csv", summary.attack));
        write_text(&path, &roc_csv(&curve)?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Weights + evaluation slice + seed: the shared front half of attack/eval.
fn load_pipeline(config: &ExperimentConfig) -> Result<(Model, Dataset, u64), Failure> {
    config.require_weights()?;
    config.require_dataset_paths()?;
    config.require_distinct_attacks()?;
    let seed = config.resolve_seed()?;

    let model = load_weights(&config.weights)?;
    let data = materialize(config, seed)?;
    let (_, tail) = split(&data, config.train.heldout_fraction)?;

    if config.sample_count == 0 {
        return Err(Failure::config("sample_count must be >= 1"));
    }
    if config.sample_count > tail.len() {
        return Err(Failure::config(format!(
            "sample_count {} exceeds the held-out tail ({} of {} images); \
             raise the dataset size or lower sample_count",
            config.sample_count,
            tail.len(),
            data.len()
        )));
    }
    let eval_set = tail.slice(0, config.sample_count)?;
    Ok((model, eval_set, seed))
}

/// Re-runs every successful attack with its outcome-row seed and saves the
/// original, the perturbation on a mid-gray scale, and the adversarial
/// image.
fn dump_triplets(
    config: &ExperimentConfig,
    model: &Model,
    eval_set: &Dataset,
    seed: u64,
) -> Result<(), Failure> {
    let dir = config.output_dir.join("images");
    create_dir(&dir)?;

    let mut written = 0usize;
    for id in 0..eval_set.len() {
        let image = eval_set.image(id);
        let label = eval_set.label(id);
        if model.predict(image)?.0 != label {
            continue;
        }
        for (attack_index, spec) in config.attacks.iter().enumerate() {
            let row_seed = sample_seed(seed, id as u64, attack_index as u64);
            let result = match spec.run(model, image, label, row_seed) {
                Ok(result) => result,
                // already recorded as an error row in the outcomes CSV
                Err(_) => continue,
            };
            if !result.success || result.pre_misclassified {
                continue;
            }
            let base = format!("img{id:04}_{}", spec.name());
            save_image(&result.original, &dir.join(format!("{base}_original.pgm")))?;
            save_image(
                &difference_image(&result.perturbation)?,
                &dir.join(format!("{base}_difference.pgm")),
            )?;
            save_image(
                &result.adversarial,
                &dir.join(format!("{base}_adversarial.pgm")),
            )?;
            written += 3;
        }
    }
    println!("wrote {written} image files under {}", dir.display());
    Ok(())
}

/// Maps a perturbation onto [0,1] with zero at exact mid-gray (pixel value
/// 128) and the largest magnitude at full black/white.
fn difference_image(eta: &Tensor) -> Result<Tensor, Failure> {
    let max = eta.data().iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    let data: Vec<f32> = eta
        .data()
        .iter()
        .map(|&v| {
            if max == 0.0 {
                0.5
            } else {
                0.5 + v / (2.0 * max)
            }
        })
        .collect();
    Ok(Tensor::new(eta.shape().to_vec(), data)?)
}

fn save_image(tensor: &Tensor, path: &Path) -> Result<(), Failure> {
    match tensor.shape() {
        [3, _, _] => Ok(save_ppm(tensor, path)?),
        _ => Ok(save_pgm(tensor, path)?),
    }
}

fn materialize(config: &ExperimentConfig, seed: u64) -> Result<Dataset, Failure> {
    match &config.dataset {
        DatasetSpec::Synth { count } => Ok(synth_shapes(*count, seed)?),
        DatasetSpec::Idx { images, labels } => Ok(load_idx(images, labels)?),
    }
}

/// Head/tail split by `heldout_fraction`, both sides nonempty.
fn split(data: &Dataset, fraction: f64) -> Result<(Dataset, Dataset), Failure> {
    if !(fraction.is_finite() && fraction > 0.0 && fraction < 1.0) {
        return Err(Failure::config(format!(
            "train.heldout_fraction must be inside (0,1), got {fraction}"
        )));
    }
    if data.len() < 2 {
        return Err(Failure::config(format!(
            "dataset of {} images cannot be split for validation",
            data.len()
        )));
    }
    let heldout = ((data.len() as f64) * fraction)
        .round()
        .clamp(1.0, (data.len() - 1) as f64) as usize;
    let head = data.slice(0, data.len() - heldout)?;
    let tail = data.slice(data.len() - heldout, heldout)?;
    Ok((head, tail))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure::from(fsnet::Error::from(e)))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::from(fsnet::Error::from(e)))
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
