//! End-to-end tests of the `voxscene` binary. Every subcommand's observable
//! output — stdout statistics, written files, exit codes — is compared
//! against the library operations the command wraps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

use voxscene::cloud::{remap_labels, MapTarget};
use voxscene::eval::{format_report, metrics, report_csv, ConfusionMatrix};
use voxscene::nn::load_checkpoint;
use voxscene::ply::DEFAULT_LABEL_PROPERTY;
use voxscene::spatial::{covered_area, grid_subsample, DEFAULT_COVERAGE_PIXEL};
use voxscene::synthetic::three_class_scene;
use voxscene::{
    classify_cloud, load_ply, save_ply, ClassifyConfig, Label, LabelMapping, LabeledCloud, Model,
};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxscene"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("stdout is UTF-8")
}

/// The token following `key` in `text`, up to the next whitespace.
fn field<'a>(text: &'a str, key: &str) -> &'a str {
    let start = text
        .find(key)
        .unwrap_or_else(|| panic!("{key:?} not found in {text:?}"))
        + key.len();
    text[start..].split_whitespace().next().unwrap_or("")
}

fn save_scene(dir: &Path, name: &str, seed: u64, per_class: usize) -> (PathBuf, LabeledCloud) {
    let scene = three_class_scene(seed, per_class);
    let path = dir.join(name);
    save_ply(&scene, &path, true).unwrap();
    (path, scene)
}

/// A fast training fixture: reduced network, two coarse scales, tiny epoch.
/// Dotted keys exercise the flat config schema.
fn write_train_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "reduced": true,
        "grid_n": 8,
        "scales": [0.2, 0.4],
        "n_per_class": 6,
        "batch_size": 4,
        "epochs": 3,
        "seed": 11,
        "workers": 0,
        "augment.enabled": false,
        "optimizer.lr": 0.005,
    });
    let path = dir.join("train.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn history_rows(dir: &Path) -> Vec<(usize, f64, f64)> {
    let text = fs::read_to_string(dir.join("history.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,mean_loss,balanced_accuracy"));
    lines
        .map(|line| {
            let mut it = line.split(',');
            (
                it.next().unwrap().parse().unwrap(),
                it.next().unwrap().parse().unwrap(),
                it.next().unwrap().parse().unwrap(),
            )
        })
        .collect()
}

#[test]
fn prepare_matches_library() {
    let tmp = TempDir::new().unwrap();
    let (input, scene) = save_scene(tmp.path(), "scene.ply", 7, 200);
    let out_dir = tmp.path().join("prep");
    let stdout = run_ok(&[
        "prepare",
        input.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--cell",
        "0.07",
    ]);

    let sub = grid_subsample(&scene, 0.07).unwrap();
    assert_eq!(field(&stdout, "points_before="), "600");
    assert_eq!(field(&stdout, "points_after="), sub.cloud.len().to_string());
    let area = covered_area(&sub.cloud, DEFAULT_COVERAGE_PIXEL).unwrap();
    assert!(stdout.contains(&format!("area_m2={area:.2}")));

    let written = load_ply(out_dir.join("scene.ply"), Some(DEFAULT_LABEL_PROPERTY)).unwrap();
    assert_eq!(written.points(), sub.cloud.points());
    assert_eq!(written.labels(), sub.cloud.labels());
}

#[test]
fn prepare_applies_mapping() {
    let tmp = TempDir::new().unwrap();
    let (input, scene) = save_scene(tmp.path(), "scene.ply", 13, 150);
    let mapping_path = tmp.path().join("coarse.json");
    fs::write(&mapping_path, r#"{"0": 1, "1": 0, "2": "drop"}"#).unwrap();
    let out_dir = tmp.path().join("prep");
    let stdout = run_ok(&[
        "prepare",
        input.to_str().unwrap(),
        "--mapping",
        mapping_path.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--cell",
        "0.05",
    ]);

    let mapping = LabelMapping::from_json(&fs::read_to_string(&mapping_path).unwrap()).unwrap();
    let sub = grid_subsample(&remap_labels(&scene, &mapping).unwrap(), 0.05).unwrap();
    assert_eq!(field(&stdout, "points_before="), "450");
    assert_eq!(field(&stdout, "points_after="), sub.cloud.len().to_string());

    let written = load_ply(out_dir.join("scene.ply"), Some(DEFAULT_LABEL_PROPERTY)).unwrap();
    assert_eq!(written.points(), sub.cloud.points());
    assert_eq!(written.labels(), sub.cloud.labels());
    assert!(written.labels().unwrap().iter().all(|&l| l < 2));
}

#[test]
fn shipped_mapping_covers_all_sources() {
    let path =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/paris_lille_coarse9.json");
    let mapping = LabelMapping::from_json(&fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(mapping.num_targets(), 9);
    assert_eq!(mapping.entries().len(), 50);
    for source in 0..50u32 {
        let target = mapping.get(source).expect("every raw id is mapped");
        if source == 0 {
            assert_eq!(target, MapTarget::Drop);
        } else {
            assert!(matches!(target, MapTarget::Class(_)));
        }
    }
}

#[test]
fn train_reruns_reproduce_the_history() {
    let tmp = TempDir::new().unwrap();
    let (input, _) = save_scene(tmp.path(), "scene.ply", 3, 80);
    let cfg = write_train_config(tmp.path());
    let ckpt_a = tmp.path().join("ckpt_a");
    let ckpt_b = tmp.path().join("ckpt_b");

    let stdout = run_ok(&[
        "train",
        input.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint-dir",
        ckpt_a.to_str().unwrap(),
    ]);
    let history_a = fs::read_to_string(ckpt_a.join("history.csv")).unwrap();
    assert_eq!(history_rows(&ckpt_a).len(), 3);
    assert!(ckpt_a.join("last/metadata.json").is_file());

    // The final stdout line repeats the last history row verbatim.
    let mut parts = history_a.lines().last().unwrap().split(',');
    let expected = format!(
        "epoch={} mean_loss={} balanced_accuracy={}",
        parts.next().unwrap(),
        parts.next().unwrap(),
        parts.next().unwrap()
    );
    assert_eq!(stdout.lines().last(), Some(expected.as_str()));

    run_ok(&[
        "train",
        input.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint-dir",
        ckpt_b.to_str().unwrap(),
    ]);
    let history_b = fs::read_to_string(ckpt_b.join("history.csv")).unwrap();
    assert_eq!(history_a, history_b);
}

#[test]
fn resume_matches_the_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let (input, _) = save_scene(tmp.path(), "scene.ply", 3, 80);
    let cfg = write_train_config(tmp.path());
    let full = tmp.path().join("full");
    let split = tmp.path().join("split");

    run_ok(&[
        "train",
        input.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint-dir",
        full.to_str().unwrap(),
    ]);

    // Flags override the file: the config asks for 3 epochs, the flag stops
    // the first leg after 2.
    run_ok(&[
        "train",
        input.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint-dir",
        split.to_str().unwrap(),
        "--epochs",
        "2",
    ]);
    assert_eq!(history_rows(&split).len(), 2);

    run_ok(&[
        "train",
        input.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint-dir",
        split.to_str().unwrap(),
        "--resume",
    ]);
    let full_rows = history_rows(&full);
    let split_rows = history_rows(&split);
    assert_eq!(split_rows.len(), 3);
    assert_eq!(split_rows[2].0, full_rows[2].0);
    assert!((split_rows[2].1 - full_rows[2].1).abs() <= 1e-6);
    assert!((split_rows[2].2 - full_rows[2].2).abs() <= 1e-6);
}

#[test]
fn classify_matches_the_library() {
    let tmp = TempDir::new().unwrap();
    let (input, scene) = save_scene(tmp.path(), "scene.ply", 21, 80);
    let cfg = write_train_config(tmp.path());
    let ckpt = tmp.path().join("ckpt");
    run_ok(&[
        "train",
        input.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint-dir",
        ckpt.to_str().unwrap(),
        "--epochs",
        "1",
    ]);

    let last = ckpt.join("last");
    let output = tmp.path().join("labeled.ply");
    let stdout = run_ok(&[
        "classify",
        "--checkpoint",
        last.to_str().unwrap(),
        input.to_str().unwrap(),
        output.to_str().unwrap(),
        "--cell",
        "0.1",
        "--batch-size",
        "16",
    ]);
    assert!(stdout.contains("240 points labeled"));

    let predicted = load_ply(&output, Some(DEFAULT_LABEL_PROPERTY)).unwrap();
    assert_eq!(predicted.len(), scene.len());
    assert_eq!(predicted.points(), scene.points());
    assert!(predicted.labels().unwrap().iter().all(|&l| l < 3));

    let (meta, store) = load_checkpoint(&last).unwrap();
    let mut model = Model::<f32>::build(&meta.spec, 0).unwrap();
    model.import(&store).unwrap();
    let unlabeled = load_ply(&input, None).unwrap();
    let classify_cfg = ClassifyConfig {
        cell: 0.1,
        batch_size: 16,
        workers: 0,
    };
    let labels = classify_cloud(&model, &unlabeled, &classify_cfg).unwrap();
    assert_eq!(predicted.labels().unwrap(), labels.as_slice());
}

#[test]
fn evaluate_matches_the_library() {
    let tmp = TempDir::new().unwrap();
    let (truth_path, scene) = save_scene(tmp.path(), "truth.ply", 5, 60);
    // Rotate every seventh label so the matrix has off-diagonal mass.
    let labels: Vec<Label> = scene
        .labels()
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, &l)| if i % 7 == 0 { (l + 1) % 3 } else { l })
        .collect();
    let pred = LabeledCloud::with_labels(scene.points().to_vec(), labels).unwrap();
    let pred_path = tmp.path().join("pred.ply");
    save_ply(&pred, &pred_path, true).unwrap();

    let stdout = run_ok(&[
        "evaluate",
        pred_path.to_str().unwrap(),
        truth_path.to_str().unwrap(),
    ]);
    let (table, csv) = stdout.split_once("\n\n").expect("table, blank line, CSV");

    let truth = load_ply(&truth_path, Some(DEFAULT_LABEL_PROPERTY)).unwrap();
    let predicted = load_ply(&pred_path, Some(DEFAULT_LABEL_PROPERTY)).unwrap();
    let classes = predicted.num_classes().max(truth.num_classes());
    let cm = ConfusionMatrix::from_labels(
        truth.labels().unwrap(),
        predicted.labels().unwrap(),
        classes,
    )
    .unwrap();
    let report = metrics(&cm);
    let names: Vec<String> = (0..classes)
        .map(|c| {
            truth
                .class_table()
                .get(&(c as Label))
                .cloned()
                .unwrap_or_else(|| format!("class_{c}"))
        })
        .collect();
    assert_eq!(format!("{table}\n"), format_report(&report, &names));
    assert_eq!(csv, report_csv(&report, &names));
}

#[test]
fn evaluate_identical_files_scores_ones() {
    let tmp = TempDir::new().unwrap();
    let (truth_path, _) = save_scene(tmp.path(), "truth.ply", 5, 40);
    let stdout = run_ok(&[
        "evaluate",
        truth_path.to_str().unwrap(),
        truth_path.to_str().unwrap(),
    ]);
    let (_, csv) = stdout.split_once("\n\n").unwrap();
    // Per-class rows sit between the header and the `mean` row; their
    // precision, recall, f1 and iou columns must all be exactly 1.
    let mut class_rows = 0;
    for line in csv.lines().skip(1).take_while(|l| !l.starts_with("mean,")) {
        let cols: Vec<&str> = line.split(',').collect();
        for v in &cols[2..6] {
            assert_eq!(v.parse::<f64>().unwrap(), 1.0, "column {v:?} in {line:?}");
        }
        class_rows += 1;
    }
    assert_eq!(class_rows, 3);
}

#[test]
fn evaluate_rejects_mismatched_counts() {
    let tmp = TempDir::new().unwrap();
    let (a, _) = save_scene(tmp.path(), "a.ply", 1, 20);
    let (b, _) = save_scene(tmp.path(), "b.ply", 1, 10);
    let out = run(&["evaluate", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));
}

#[test]
fn area_counts_distinct_pixels() {
    let tmp = TempDir::new().unwrap();
    let cloud = LabeledCloud::unlabeled(vec![
        [0.05, 0.05, 0.0],
        [0.15, 0.05, 0.5],
        [0.95, 0.95, 1.0],
        [0.96, 0.94, 2.0],
    ])
    .unwrap();
    let path = tmp.path().join("patch.ply");
    save_ply(&cloud, &path, true).unwrap();
    // Three distinct 0.1 m pixels; the fourth point repeats one of them.
    let stdout = run_ok(&["area", path.to_str().unwrap()]);
    assert_eq!(stdout.trim(), "area_m2=0.03");
}

#[test]
fn errors_exit_nonzero() {
    let tmp = TempDir::new().unwrap();

    let absent = tmp.path().join("absent.ply");
    let out = run(&["area", absent.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"epochz": 3}"#).unwrap();
    let out = run(&[
        "area",
        "--config",
        cfg.to_str().unwrap(),
        absent.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));

    let out = run(&["train", absent.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}
