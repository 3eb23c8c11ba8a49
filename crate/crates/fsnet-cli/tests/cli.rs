//! Black-box tests of the `fsnet` binary: exit codes, file layout, row
//! accounting, and the cross-command consistency promises (report equals
//! eval, detect matches the harness scoring, FS_SEED fallback).
//!
//! One small world (a config, a trained model, one eval run) is built once
//! and shared read-only; commands that mutate state write somewhere fresh.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use fsnet::testkit::auc_oracle;
use fsnet::{
    entropy_score, load_netpbm, load_weights, paired_scores, parse_outcomes_csv, save_pgm,
    summarize, synth_shapes, DetectorConfig, Tensor,
};

const SEED: u64 = 11;
const EPOCHS: usize = 5;
const SAMPLES: usize = 8;

struct World {
    /// Owns every path below; dropped only at process exit.
    _dir: tempfile::TempDir,
    config: PathBuf,
    weights: PathBuf,
    out_eval: PathBuf,
    /// Output of `attack --dump-images`: outcomes.csv plus images/.
    out_dump: PathBuf,
    sample_pgm: PathBuf,
    constant_pgm: PathBuf,
    /// Attack names in config order.
    attacks: Vec<String>,
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fsnet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn the CLI")
}

fn check(args: &[&str]) -> Output {
    let output = run(args);
    assert!(
        output.status.success(),
        "fsnet {args:?} failed with {:?}:\n{}",
        output.status.code(),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

fn world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path();

        let defaults = check(&["config", "--print-defaults"]);
        let mut config: serde_json::Value =
            serde_json::from_slice(&defaults.stdout).expect("default config parses");
        config["seed"] = SEED.into();
        config["weights"] = root.join("model.fsnt").to_str().expect("utf8").into();
        config["output_dir"] = root.join("out_train").to_str().expect("utf8").into();
        config["sample_count"] = SAMPLES.into();
        config["dataset"]["count"] = 600.into();
        config["train"]["epochs"] = EPOCHS.into();
        // a 480-image corpus needs small batches to converge this quickly
        config["train"]["batch_size"] = 16.into();
        let roster = config["attacks"].as_array().expect("attack list").clone();
        let kept: Vec<serde_json::Value> = roster
            .into_iter()
            .filter(|a| matches!(a["name"].as_str(), Some("fgsm") | Some("deepfool")))
            .collect();
        let attacks = kept
            .iter()
            .map(|a| a["name"].as_str().expect("name").to_string())
            .collect();
        config["attacks"] = kept.into();

        let config_path = root.join("experiment.json");
        std::fs::write(
            &config_path,
            serde_json::to_vec_pretty(&config).expect("render"),
        )
        .expect("write config");
        let config_arg = config_path.to_str().expect("utf8");

        check(&["--config", config_arg, "train"]);
        let out_eval = root.join("out_eval");
        let eval_out = format!("output_dir={}", out_eval.to_str().expect("utf8"));
        check(&["--config", config_arg, "--set", &eval_out, "eval"]);
        let out_dump = root.join("out_dump");
        let dump_out = format!("output_dir={}", out_dump.to_str().expect("utf8"));
        check(&[
            "--config",
            config_arg,
            "--set",
            &dump_out,
            "attack",
            "--dump-images",
        ]);

        let shapes = synth_shapes(300, SEED).expect("synthetic images");
        let sample_pgm = root.join("sample.pgm");
        save_pgm(shapes.image(240), &sample_pgm).expect("sample image");
        let constant_pgm = root.join("constant.pgm");
        let flat = Tensor::new(vec![1, 28, 28], vec![0.6; 28 * 28]).expect("flat image");
        save_pgm(&flat, &constant_pgm).expect("constant image");

        let weights = root.join("model.fsnt");
        World {
            _dir: dir,
            config: config_path,
            weights,
            out_eval,
            out_dump,
            sample_pgm,
            constant_pgm,
            attacks,
        }
    })
}

fn config_arg() -> &'static str {
    world().config.to_str().expect("utf8")
}

fn csv_lines(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).expect("read csv");
    text.lines().map(str::to_owned).collect()
}

#[test]
fn print_defaults_emits_a_parseable_config_with_the_full_roster() {
    let output = check(&["config", "--print-defaults"]);
    let config: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("defaults parse as JSON");
    assert!(config["seed"].is_null(), "the seed has no default");
    let names: Vec<&str> = config["attacks"]
        .as_array()
        .expect("attack list")
        .iter()
        .map(|a| a["name"].as_str().expect("name"))
        .collect();
    assert_eq!(
        names,
        ["fgsm", "gradient", "one_pixel", "deepfool", "boundary"]
    );
}

#[test]
fn train_writes_loadable_weights_and_one_metrics_row_per_epoch() {
    let world = world();
    load_weights(&world.weights).expect("trained weights load and pass the checksum");

    let metrics = world
        .weights
        .parent()
        .expect("root")
        .join("out_train/train_metrics.csv");
    let lines = csv_lines(&metrics);
    assert_eq!(
        lines[0], "epoch,mean_loss,heldout_accuracy,learning_rate",
        "metrics header"
    );
    assert_eq!(lines.len(), 1 + EPOCHS, "one metrics row per epoch");
}

#[test]
fn missing_dataset_path_exits_2_and_names_the_field() {
    let output = run(&[
        "--config",
        config_arg(),
        "--set",
        r#"dataset={"kind":"idx","images":"/nonexistent/images","labels":"/nonexistent/labels"}"#,
        "train",
    ]);
    assert_eq!(code(&output), 2);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("dataset.images"),
        "the message must name the missing field, got: {stderr}"
    );
}

#[test]
fn usage_errors_exit_2() {
    let missing_config = run(&["--config", "/nonexistent/experiment.json", "eval"]);
    assert_eq!(code(&missing_config), 2, "unreadable config file");

    let unknown_key = run(&["--config", config_arg(), "--set", "sample_cout=5", "eval"]);
    assert_eq!(code(&unknown_key), 2, "unknown config key");

    let duplicate = run(&[
        "--config",
        config_arg(),
        "--set",
        r#"attacks=[{"name":"fgsm","epsilon":0.1},{"name":"fgsm","epsilon":0.2}]"#,
        "eval",
    ]);
    assert_eq!(code(&duplicate), 2, "duplicate attack names");

    let zero_jobs = run(&["--jobs", "0", "--config", config_arg(), "eval"]);
    assert_eq!(code(&zero_jobs), 2, "--jobs 0");
}

#[test]
fn config_prints_the_resolved_document_with_overrides_applied() {
    let output = check(&["--set", "seed=5", "config"]);
    let resolved: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("resolved config parses");
    assert_eq!(
        resolved["seed"], 5,
        "--set overrides show up in the rendering"
    );
}

#[test]
fn attack_emits_clean_plus_attack_rows_and_respects_the_dump_toggle() {
    let world = world();
    let out = world.config.parent().expect("root").join("out_attack");
    let set = format!("output_dir={}", out.to_str().expect("utf8"));
    check(&["--config", config_arg(), "--set", &set, "attack"]);

    let lines = csv_lines(&out.join("outcomes.csv"));
    let k = world.attacks.len();
    let clean_rows: Vec<&String> = lines[1..]
        .iter()
        .filter(|l| l.split(',').nth(2) == Some("clean"))
        .collect();
    assert_eq!(clean_rows.len(), SAMPLES, "one clean row per image");
    assert!(
        clean_rows
            .iter()
            .all(|l| l.split(',').nth(4) == Some("true")),
        "the world model must classify every sampled image correctly, or the \
         row accounting below does not apply"
    );
    assert_eq!(
        lines.len(),
        1 + SAMPLES * (k + 1),
        "header, one clean row per image, one row per (image, attack)"
    );
    assert!(
        !out.join("images").exists(),
        "no dumps without --dump-images"
    );

    let rerun_lines = {
        let again = world
            .config
            .parent()
            .expect("root")
            .join("out_attack_again");
        let set = format!("output_dir={}", again.to_str().expect("utf8"));
        check(&["--config", config_arg(), "--set", &set, "attack"]);
        csv_lines(&again.join("outcomes.csv"))
    };
    assert_eq!(lines, rerun_lines, "same seed twice gives identical rows");
}

#[test]
fn dump_images_writes_parseable_triplets_for_successful_attacks() {
    let world = world();
    let mut triplet_files: Vec<String> = std::fs::read_dir(world.out_dump.join("images"))
        .expect("dump dir")
        .map(|e| e.expect("entry").file_name().to_string_lossy().into_owned())
        .collect();
    triplet_files.sort();
    assert!(
        !triplet_files.is_empty(),
        "successful attacks must be dumped"
    );
    assert_eq!(triplet_files.len() % 3, 0, "dumps come as triplets");
    for name in &triplet_files {
        assert!(
            name.ends_with("_original.pgm")
                || name.ends_with("_difference.pgm")
                || name.ends_with("_adversarial.pgm"),
            "unexpected dump name {name}"
        );
    }
    let first = world.out_dump.join("images").join(&triplet_files[0]);
    load_netpbm(&first).expect("dumped images parse as netpbm");
}

#[test]
fn empty_attack_list_leaves_clean_scores_only() {
    let world = world();
    let out = world.config.parent().expect("root").join("out_noattack");
    let set = format!("output_dir={}", out.to_str().expect("utf8"));
    check(&[
        "--config",
        config_arg(),
        "--set",
        &set,
        "--set",
        "attacks=[]",
        "attack",
    ]);
    let lines = csv_lines(&out.join("outcomes.csv"));
    assert_eq!(lines.len(), 1 + SAMPLES, "clean rows only");
}

#[test]
fn detect_exit_code_follows_the_threshold() {
    let world = world();
    let image = world.sample_pgm.to_str().expect("utf8");

    let below_floor = run(&["--config", config_arg(), "detect", image, "--tau=-1"]);
    assert_eq!(
        code(&below_floor),
        1,
        "every score exceeds a negative threshold"
    );
    assert!(
        String::from_utf8_lossy(&below_floor.stdout).contains("attacked"),
        "verdict line names the attacked state"
    );

    let above_bound = run(&["--config", config_arg(), "detect", image, "--tau=100"]);
    assert_eq!(code(&above_bound), 0, "no score exceeds the entropy bound");
    assert!(
        String::from_utf8_lossy(&above_bound.stdout).contains("clean"),
        "verdict line names the clean state"
    );
}

#[test]
fn featmap_writes_parseable_maps_of_the_right_shapes() {
    let world = world();
    let out = world.config.parent().expect("root").join("featmaps");
    let out_arg = out.to_str().expect("utf8");
    check(&[
        "--config",
        config_arg(),
        "featmap",
        world.sample_pgm.to_str().expect("utf8"),
        "--out-dir",
        out_arg,
    ]);
    load_netpbm(&out.join("sample_response.pgm")).expect("response map parses");
    load_netpbm(&out.join("sample_entropy.pgm")).expect("entropy map parses");

    check(&[
        "--config",
        config_arg(),
        "featmap",
        world.constant_pgm.to_str().expect("utf8"),
        "--out-dir",
        out_arg,
    ]);
    // pool-switch routing leaves a lattice in the response of even a flat
    // image, so the maps are legitimate PGMs rather than all-zero planes
    let response = load_netpbm(&out.join("constant_response.pgm")).expect("response map");
    assert_eq!(
        response.shape(),
        &[1, 28, 28],
        "response covers the input plane"
    );
    let entropy = load_netpbm(&out.join("constant_entropy.pgm")).expect("entropy map");
    assert_eq!(
        entropy.shape(),
        &[1, 26, 26],
        "one entropy cell per 3x3 patch"
    );
}

/// Parses the score out of a detect verdict line and returns it with the
/// exit code.
fn detect_score(image: &Path) -> (f64, i32) {
    let output = run(&[
        "--config",
        config_arg(),
        "detect",
        image.to_str().expect("utf8"),
        "--tau=100",
    ]);
    let stdout = String::from_utf8_lossy(&output.stdout);
    let score = stdout
        .split_whitespace()
        .find_map(|field| field.strip_prefix("score="))
        .expect("verdict line carries score=")
        .parse()
        .expect("score parses");
    (score, code(&output))
}

#[test]
fn detect_agrees_with_the_library_and_flags_the_broader_adversarial_response() {
    let world = world();
    let outcomes = parse_outcomes_csv(
        &std::fs::read_to_string(world.out_dump.join("outcomes.csv")).expect("dump outcomes"),
    )
    .expect("outcomes parse");

    // curate the dumped pair with the widest clean-to-adversarial score gap
    let row = outcomes
        .iter()
        .filter(|o| o.success == Some(true))
        .filter_map(|o| {
            let gap = o.adversarial_score? - o.clean_score?;
            Some((o, gap))
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one scored success")
        .0;
    let attack = row.attack.as_deref().expect("attack rows carry a name");
    let images = world.out_dump.join("images");
    let original = images.join(format!("img{:04}_{attack}_original.pgm", row.image_id));
    let adversarial = images.join(format!("img{:04}_{attack}_adversarial.pgm", row.image_id));

    let (clean_score, clean_code) = detect_score(&original);
    let (adv_score, adv_code) = detect_score(&adversarial);
    assert_eq!((clean_code, adv_code), (0, 0), "both below tau 100");
    assert!(
        adv_score > clean_score,
        "curated adversarial image must out-score its original: {adv_score} vs {clean_score}"
    );

    // the same pixels scored through the library give the same number
    let model = load_weights(&world.weights).expect("world weights");
    let image = load_netpbm(&original).expect("dumped original");
    let lib_score = entropy_score(&model, &image, &DetectorConfig::default()).expect("lib score");
    assert_eq!(
        clean_score, lib_score,
        "CLI and library scoring must agree exactly on identical pixels"
    );
}

#[test]
fn report_reproduces_eval_summaries_byte_identically() {
    let world = world();
    let out = world.config.parent().expect("root").join("out_report");
    let set = format!("output_dir={}", out.to_str().expect("utf8"));
    let outcomes = world.out_eval.join("outcomes.csv");
    check(&[
        "--config",
        config_arg(),
        "--set",
        &set,
        "report",
        outcomes.to_str().expect("utf8"),
    ]);

    let mut compared = 0;
    for entry in std::fs::read_dir(&out).expect("report dir") {
        let entry = entry.expect("entry");
        let name = entry.file_name().to_string_lossy().into_owned();
        let from_eval = std::fs::read(world.out_eval.join(&name))
            .unwrap_or_else(|_| panic!("eval run is missing {name}"));
        assert_eq!(
            std::fs::read(entry.path()).expect("report file"),
            from_eval,
            "{name} differs between report and eval"
        );
        compared += 1;
    }
    assert!(
        compared >= 4,
        "summary CSV, text table, histogram and ROC expected"
    );
}

#[test]
fn roc_csv_spans_the_unit_square_and_auc_matches_pair_counting() {
    let world = world();
    let lines = csv_lines(&world.out_eval.join("roc_deepfool.csv"));
    assert_eq!(lines[0], "threshold,fpr,tpr");
    let points: Vec<&String> = lines[1..]
        .iter()
        .filter(|l| !l.starts_with("auc,"))
        .collect();
    let corner = |line: &str| -> (f64, f64) {
        let mut cells = line.split(',').skip(1);
        let fpr = cells.next().expect("fpr").parse().expect("fpr number");
        let tpr = cells.next().expect("tpr").parse().expect("tpr number");
        (fpr, tpr)
    };
    assert_eq!(corner(points.first().expect("first point")), (0.0, 0.0));
    assert_eq!(corner(points.last().expect("last point")), (1.0, 1.0));

    let outcomes = parse_outcomes_csv(
        &std::fs::read_to_string(world.out_eval.join("outcomes.csv")).expect("csv"),
    )
    .expect("outcomes parse");
    for summary in summarize(&outcomes) {
        let (clean, adv) = paired_scores(&outcomes, &summary.attack);
        if let Some(auc) = summary.auc {
            assert!(
                (auc - auc_oracle(&clean, &adv)).abs() <= 1e-9,
                "{}: summary AUC {auc} disagrees with pair counting",
                summary.attack
            );
        } else {
            assert!(adv.is_empty(), "AUC may be absent only without successes");
        }
    }
}

#[test]
fn fs_seed_env_substitutes_for_the_config_seed() {
    let world = world();
    let root = world.config.parent().expect("root");

    let mut config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&world.config).expect("config"))
            .expect("config parses");
    config["seed"] = serde_json::Value::Null;
    config["output_dir"] = root.join("out_env").to_str().expect("utf8").into();
    let unseeded = root.join("unseeded.json");
    std::fs::write(
        &unseeded,
        serde_json::to_vec_pretty(&config).expect("render"),
    )
    .expect("write config");
    let unseeded_arg = unseeded.to_str().expect("utf8");

    let without_seed = run(&["--config", unseeded_arg, "eval"]);
    assert_eq!(code(&without_seed), 2, "no seed anywhere is a config error");

    let output = bin()
        .args(["--config", unseeded_arg, "eval"])
        .env("FS_SEED", SEED.to_string())
        .output()
        .expect("spawn the CLI");
    assert!(
        output.status.success(),
        "FS_SEED fallback failed:\n{}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert_eq!(
        std::fs::read(root.join("out_env/outcomes.csv")).expect("env outcomes"),
        std::fs::read(world.out_eval.join("outcomes.csv")).expect("eval outcomes"),
        "FS_SEED must reproduce the config-seeded run"
    );
}
