//! End-to-end runs of the `idslab` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use tempfile::TempDir;

fn idslab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idslab")).args(args).output().unwrap()
}

struct Case {
    dir: TempDir,
    config: PathBuf,
}

impl Case {
    fn new(body: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("config.json");
        fs::write(&config, body).unwrap();
        Case { dir, config }
    }

    fn run(&self, verb: &str, extra: &[&str]) -> Output {
        let out = self.dir.path().join("out");
        let mut args = vec![
            verb,
            "--config",
            self.config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend(extra);
        idslab(&args)
    }

    fn ok(&self, verb: &str, extra: &[&str]) -> PathBuf {
        let o = self.run(verb, extra);
        assert!(
            o.status.success(),
            "{verb} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        PathBuf::from(String::from_utf8(o.stdout).unwrap().trim())
    }
}

type Row = BTreeMap<String, String>;

fn rows(path: &Path) -> Vec<Row> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let h = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            h.iter()
                .zip(rec.unwrap().iter())
                .map(|(a, b)| (a.into(), b.into()))
                .collect()
        })
        .collect()
}

fn num(row: &Row, key: &str) -> f64 {
    row[key].parse().unwrap()
}

#[test]
fn unknown_key_is_a_config_error_with_location() {
    let case = Case::new("{\"schema\": 1,\n \"distill\": {\"stepz\": 3}}");
    let o = case.run("edit", &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stepz") && err.contains("line 2"), "{err}");
}

#[test]
fn unknown_key_in_train_section_is_rejected() {
    let case = Case::new(r#"{"schema": 1, "name": "default", "train": {"epochs": 3, "momentum": 0.9}}"#);
    assert_eq!(case.run("train", &[]).status.code(), Some(2));
}

#[test]
fn wrong_schema_and_bad_values_exit_2() {
    for body in [
        r#"{"schema": 2}"#,
        r#"{"schema": 1, "name": "default", "distill": {"lr": -1}}"#,
        r#"{"schema": 1, "name": "default", "tasks": {"cond_trg": 7}}"#,
        "not json",
    ] {
        assert_eq!(Case::new(body).run("edit", &[]).status.code(), Some(2), "{body}");
    }
}

#[test]
fn missing_config_exits_4() {
    let o = idslab(&["edit", "--config", "/nonexistent/config.json"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn unwritable_output_exits_4() {
    let case = Case::new(r#"{"schema": 1, "name": "default", "distill": {"steps": 1}}"#);
    let blocker = case.dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = idslab(&[
        "edit",
        "--config",
        case.config.to_str().unwrap(),
        "--out",
        blocker.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn runaway_step_size_exits_3_naming_the_task() {
    let case = Case::new(r#"{"schema": 1, "name": "default", "edit": {"methods": ["sds"]}, "distill": {"lr": 1e9}}"#);
    let o = case.run("edit", &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("task 0"));
}

#[test]
fn zero_step_dds_with_same_label_has_zero_identity_residual() {
    let case = Case::new(
        r#"{"schema": 1, "name": "default", "edit": {"methods": ["dds"]}, "distill": {"steps": 0},
            "tasks": {"cond_src": 0, "cond_trg": 0}}"#,
    );
    let dir = case.ok("edit", &[]);
    let r = rows(&dir.join("results.csv"));
    assert_eq!(r.len(), 1);
    assert_eq!(num(&r[0], "identity_residual"), 0.0);
    assert_eq!(num(&r[0], "mse_to_source"), 0.0);
}

#[test]
fn zero_step_dds_across_labels_reports_the_mode_gap() {
    let case = Case::new(r#"{"schema": 1, "name": "default", "edit": {"methods": ["dds"]}, "distill": {"steps": 0}}"#);
    let r = rows(&case.ok("edit", &[]).join("results.csv"));
    assert_eq!(num(&r[0], "mse_to_source"), 0.0);
    assert!((num(&r[0], "identity_residual") - 4.0).abs() < 1e-12);
}

#[test]
fn defaults_edit_runs_quickly() {
    let case = Case::new(r#"{"schema": 1, "name": "default", "edit": {"methods": ["ids"]}}"#);
    let start = Instant::now();
    let dir = case.ok("edit", &[]);
    assert!(start.elapsed() < Duration::from_secs(10));
    let r = rows(&dir.join("results.csv"));
    assert_eq!(r.len(), 1);
    assert_eq!(r[0]["method"], "ids");
    assert_eq!(r[0]["steps"], "200");
    assert!(num(&r[0], "final_grad_norm").is_finite());
}

#[test]
fn csv_uses_lf_and_17_significant_digits() {
    let case = Case::new(r#"{"schema": 1, "name": "default", "distill": {"steps": 5}}"#);
    let text = fs::read_to_string(case.ok("edit", &[]).join("results.csv")).unwrap();
    assert!(!text.contains('\r'));
    let first = text.lines().nth(1).unwrap();
    let mse = first.split(',').nth(4).unwrap();
    let mantissa = mse.split('e').next().unwrap().replace(['-', '.'], "");
    assert_eq!(mantissa.len(), 17, "{mse}");
}

#[test]
fn seed_override_changes_results() {
    let case = Case::new(r#"{"schema": 1, "name": "default", "distill": {"steps": 20}}"#);
    let a = fs::read(case.ok("edit", &[]).join("latents.csv")).unwrap();
    let b = fs::read(case.ok("edit", &["--seed", "77"]).join("latents.csv")).unwrap();
    assert_ne!(a, b);
    let cfg = fs::read_to_string(case.dir.path().join("out/default/edit/resolved-config.json")).unwrap();
    assert!(cfg.contains("\"seed\": 77"));
}

#[test]
fn inversion_emits_two_rows_per_seed_and_zero_step_is_exact() {
    let case = Case::new(r#"{"schema": 1, "name": "default", "distill": {"steps": 20}}"#);
    let r = rows(&case.ok("invert", &[]).join("results.csv"));
    assert_eq!(r.len(), 40);
    assert_eq!(r.iter().filter(|x| x["method"] == "ids").count(), 20);

    let zero = Case::new(r#"{"schema": 1, "name": "default", "distill": {"steps": 0}, "inversion": {"seeds": 3}}"#);
    for row in rows(&zero.ok("invert", &[]).join("results.csv")) {
        assert_eq!(num(&row, "reconstruction_mse"), 0.0);
    }
}

#[test]
fn sweep_has_both_variants_and_zero_distance_at_t0() {
    let case = Case::new(r#"{"schema": 1, "name": "default", "sweep": {"seeds": 4}}"#);
    let r = rows(&case.ok("sweep-posterior", &[]).join("results.csv"));
    assert_eq!(r.len(), 40);
    for row in &r {
        let (pre, zt, eps) = (
            num(row, "pre_distance"),
            num(row, "post_distance_zt_update"),
            num(row, "post_distance_eps_update"),
        );
        if num(row, "t") == 0.0 {
            assert!(pre < 1e-12 && zt < 1e-12 && eps < 1e-12);
        } else {
            assert!(zt <= pre && eps <= pre);
        }
    }
}

#[test]
fn ablation_zero_iteration_rows_equal_dds_and_cover_both_step_counts() {
    let case = Case::new(
        r#"{"schema": 1, "name": "default", "ablation": {"lambdas": [0.3, 1.0], "seeds": 2, "steps": [20, 40]}}"#,
    );
    let dir = case.ok("ablate", &[]);
    let r = rows(&dir.join("results.csv"));
    // 2 t-ranges x 2 step counts x 2 seeds x (dds + 2 lambdas x 3 N).
    assert_eq!(r.len(), 2 * 2 * 2 * 7);
    let metrics = |row: &Row| -> Vec<String> {
        [
            "mse_to_source",
            "identity_residual",
            "target_mode_distance",
            "final_grad_norm",
        ]
        .iter()
        .map(|k| row[*k].clone())
        .collect()
    };
    let key = |row: &Row| (row["seed"].clone(), row["t_min"].clone(), row["steps"].clone());
    let dds: BTreeMap<_, _> = r
        .iter()
        .filter(|x| x["method"] == "dds")
        .map(|x| (key(x), metrics(x)))
        .collect();
    let mut n0 = 0;
    for row in r.iter().filter(|x| x["method"] == "ids" && x["n_iters"] == "0") {
        assert_eq!(metrics(row), dds[&key(row)]);
        n0 += 1;
    }
    assert_eq!(n0, 2 * 2 * 2 * 2);
    for method in ["dds", "ids"] {
        assert!(r.iter().any(|x| x["method"] == method && x["steps"] == "40"));
    }
    assert!(r.iter().all(|x| x["status"] == "ok"));
    let trend = rows(&dir.join("lambda_trend.csv"));
    assert_eq!(trend.len(), 2 * 2 * 7);
    let timings: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("timings.json")).unwrap()).unwrap();
    assert_eq!(timings.as_array().unwrap().len(), 2 * 7);
}

#[test]
fn ablation_keeps_diverged_cells_and_exits_3() {
    let case = Case::new(
        r#"{"schema": 1, "name": "default", "ablation": {"lambdas": [1e4], "n_iters": [3], "seeds": 1, "steps": [5],
            "t_ranges": [[0.5, 0.95]]}}"#,
    );
    let o = case.run("ablate", &[]);
    assert_eq!(o.status.code(), Some(3));
    let r = rows(&case.dir.path().join("out/default/ablate/results.csv"));
    assert_eq!(r.len(), 2);
    assert_eq!(r[0]["status"], "ok");
    assert_eq!(r[1]["status"], "diverged");
    assert_eq!(r[1]["identity_residual"], "undefined");
}

#[test]
fn train_writes_loss_trace_and_zero_epochs_keeps_init() {
    let case = Case::new(r#"{"schema": 1, "name": "default", "train": {"epochs": 4, "per_label": 20, "hidden": [8]}}"#);
    let dir = case.ok("train", &[]);
    let r = rows(&dir.join("results.csv"));
    assert_eq!(
        r.iter()
            .map(|x| x["epoch"].parse::<usize>().unwrap())
            .collect::<Vec<_>>(),
        vec![0, 1, 2, 3]
    );
    assert_ne!(
        fs::read(dir.join("weights.json")).unwrap(),
        fs::read(dir.join("weights-init.json")).unwrap()
    );

    let zero = Case::new(r#"{"schema": 1, "name": "default", "train": {"epochs": 0, "per_label": 20, "hidden": [8]}}"#);
    let dir = zero.ok("train", &[]);
    assert_eq!(
        fs::read(dir.join("weights.json")).unwrap(),
        fs::read(dir.join("weights-init.json")).unwrap()
    );
    assert!(rows(&dir.join("results.csv")).is_empty());
}

#[test]
fn trained_backend_is_loaded_relative_to_the_config() {
    let case =
        Case::new(r#"{"schema": 1, "name": "default", "train": {"epochs": 5, "per_label": 30, "hidden": [16]}}"#);
    let weights = case.ok("train", &[]).join("weights.json");
    fs::copy(&weights, case.dir.path().join("mlp.json")).unwrap();
    fs::write(
        &case.config,
        r#"{"schema": 1, "name": "mlp", "backend": {"kind": "trained", "path": "mlp.json"},
            "edit": {"methods": ["dds"]}, "distill": {"steps": 10}}"#,
    )
    .unwrap();
    let r = rows(&case.ok("edit", &[]).join("results.csv"));
    assert!(num(&r[0], "mse_to_source") > 0.0);

    // A backend of the wrong dimension is a config error.
    fs::write(
        &case.config,
        r#"{"schema": 1, "name": "default", "world": {"kind": "vector", "modes": [[0, 0, 0], [1, 1, 1]], "sigmas": [0.3, 0.3]},
            "backend": {"kind": "trained", "path": "mlp.json"}}"#,
    )
    .unwrap();
    assert_eq!(case.run("edit", &[]).status.code(), Some(2));
}

#[test]
fn shape_world_writes_pgm_images() {
    let case = Case::new(
        r#"{"schema": 1, "name": "default", "world": {"kind": "shapes", "shapes": {"per_label": 3}}, "distill": {"steps": 10}}"#,
    );
    let dir = case.ok("edit", &[]);
    let images: Vec<_> = fs::read_dir(dir.join("images"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(images.len(), 5);
    for p in &images {
        let bytes = fs::read(p).unwrap();
        assert!(bytes.starts_with(b"P5\n16 16\n255\n"));
        assert_eq!(bytes.len(), 13 + 256);
    }
    let r = rows(&dir.join("results.csv"));
    for row in &r {
        for k in ["ssim", "iou", "background_psnr_db", "centroid_shift"] {
            assert_ne!(row[k], "", "{k}");
        }
        assert_eq!(row["target_mode_distance"], "");
    }
}
