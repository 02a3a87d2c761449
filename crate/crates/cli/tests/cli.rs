use std::path::Path;
use std::process::{Command, Output};

use attnxl::experiments::ExperimentConfig;

fn attnxl(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnxl"))
        .args(args)
        .env("ATTNXL_OUT", out_root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn attnxl")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut c = ExperimentConfig::shapes8();
    c.task.n_train = 48;
    c.task.n_test = 24;
    c.train.batch_size = 8;
    c.train.steps = 3;
    c.oracle.epochs = 1;
    c.oracle.channels = vec![4];
    let p = dir.join("exp.json");
    std::fs::write(&p, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    p
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = attnxl(&["gradcheck"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let checks = v.as_array().unwrap();
    assert!(checks.iter().any(|c| c["name"] == "encode_instances"));
    assert!(checks.iter().all(|c| c["passed"] == true));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();

    let o = attnxl(&["make-data", "--config", cfg], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    // default output location comes from the environment
    let data = dir.path().join("data");
    assert!(data.join("source_test.dagn").exists());

    let run = dir.path().join("run");
    let o = attnxl(
        &[
            "train",
            "--config",
            cfg,
            "--seed",
            "4",
            "--ablation",
            "no_sym",
            "--out",
            run.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(
        stderr(&o).contains("attnxl train"),
        "banner missing: {}",
        stderr(&o)
    );
    assert!(stderr(&o).contains("\"no_sym\""));
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let ckpt = run.join("last.dagn");

    let translated = dir.path().join("gen").join("fake.dagn");
    let o = attnxl(
        &[
            "translate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--input",
            data.join("source_test.dagn").to_str().unwrap(),
            "--out",
            translated.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let gen_dir = translated.parent().unwrap().to_str().unwrap();
    let o = attnxl(&["eval", "--config", cfg, "--samples", gen_dir], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let counts: u64 = v["modes"]["per_mode_counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_u64().unwrap())
        .sum();
    assert_eq!(counts, 24);
    let is = v["score"]["inception_score"].as_f64().unwrap();
    assert!((1.0 - 1e-9..=8.0 + 1e-9).contains(&is));

    let csv = dir.path().join("scatter.csv");
    let o = attnxl(
        &[
            "scatter",
            "--config",
            cfg,
            "--samples",
            gen_dir,
            "--out",
            csv.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,y,mode,source"));
    // 24 target test images plus 24 generated
    assert_eq!(lines.count(), 48);
}

#[test]
fn zero_steps_writes_init_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = attnxl(
        &["train", "--config", cfg.to_str().unwrap(), "--steps", "0"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("train");
    assert!(run.join("last.dagn").exists());
    assert_eq!(
        std::fs::read_to_string(run.join("metrics.jsonl")).unwrap(),
        ""
    );
}

#[test]
fn empty_sample_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let o = attnxl(
        &[
            "eval",
            "--config",
            cfg.to_str().unwrap(),
            "--samples",
            empty.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("empty batch"), "{}", stderr(&o));
}

#[test]
fn resuming_with_a_different_structure_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = small_config(dir.path());
    let run = dir.path().join("a");
    let o = attnxl(
        &[
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--steps",
            "0",
            "--out",
            run.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let mut c: ExperimentConfig =
        serde_json::from_str(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
    c.train.attention.n_regions = 2;
    let other = dir.path().join("other.json");
    std::fs::write(&other, serde_json::to_string(&c).unwrap()).unwrap();
    let o = attnxl(
        &[
            "train",
            "--config",
            other.to_str().unwrap(),
            "--resume",
            run.join("last.dagn").to_str().unwrap(),
            "--out",
            dir.path().join("b").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("config mismatch"), "{}", stderr(&o));
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = attnxl(&["train", "--no-such-flag"], dir.path());
    assert!(!o.status.success());
    let o = attnxl(&["train", "--config", "/nonexistent/cfg.json"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("reading config"), "{}", stderr(&o));
    let o = attnxl(&["train", "--ablation", "no_everything"], dir.path());
    assert!(!o.status.success());
}
