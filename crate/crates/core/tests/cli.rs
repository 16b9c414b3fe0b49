//! Command-line behaviour: exit codes, overwrite protection, output
//! locations and file formats.

use std::path::Path;
use std::process::{Command, Output};

use framedistill::synth::{dataset_digest, load_dataset};
use framedistill::train::metrics::read_csv;
use framedistill::train::TrainConfig;

const BIN: &str = env!("CARGO_BIN_EXE_framedistill");

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("FRAMEDISTILL_OUT")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SPEC: &str = r#"{"num_train": 64, "num_val": 24}"#;
const CONFIG: &str = r#"{
  "data": {"num_train": 64, "num_val": 24},
  "teacher": {"steps": 8, "batch_size": 8},
  "student": {"steps": 8, "batch_size": 8},
  "eval_every": 4,
  "checkpoint_every": 4,
  "output_dir": "runs"
}"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.json"), SPEC).unwrap();
    std::fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
    dir
}

#[test]
fn gen_data_writes_a_dataset_and_refuses_to_overwrite() {
    let dir = setup();
    let d = dir.path();
    let o = cli(d, &["gen-data", "--spec", "spec.json", "--out", "data"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let digest = dataset_digest(&d.join("data")).unwrap();
    assert!(stdout(&o).contains(&digest));
    let data = load_dataset(&d.join("data")).unwrap();
    assert_eq!((data.spec.frames, data.spec.keyframes), (32, 4));
    assert_eq!(data.val.len(), 24);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("data/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["dataset_digest"], digest.as_str());
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 3);

    let o = cli(d, &["gen-data", "--spec", "spec.json", "--out", "data"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    let o = cli(d, &["gen-data", "--spec", "spec.json", "--out", "data", "--force"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(dataset_digest(&d.join("data")).unwrap(), digest);
}

#[test]
fn invalid_spec_names_the_constraint() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.json"), r#"{"frames": 3, "keyframes": 4}"#).unwrap();
    let o = cli(dir.path(), &["gen-data", "--spec", "bad.json", "--out", "x"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("K must not exceed T"), "{}", stderr(&o));
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = setup();
    let o = Command::new(BIN)
        .args(["gen-data", "--spec", "spec.json"])
        .current_dir(dir.path())
        .env("FRAMEDISTILL_OUT", "from_env")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("from_env/manifest.json").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = setup();
    let d = dir.path();
    let o = cli(d, &["train", "--config", "cfg.json", "--stage", "student"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--teacher-ckpt"), "{}", stderr(&o));
    assert_eq!(code(&cli(d, &["train", "--stage", "sideways"])), 1);
    assert_eq!(code(&cli(d, &["bench", "--ckpt", "x", "--frames", "4,,8x"])), 1);
    assert_eq!(code(&cli(d, &["ablate", "--axis", "colour"])), 1);
    assert_eq!(code(&cli(d, &["frobnicate"])), 1);
    std::fs::write(d.join("zero.json"), r#"{"student": {"steps": 0}}"#).unwrap();
    let o = cli(d, &["train", "--config", "zero.json", "--stage", "teacher"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("student.steps"), "{}", stderr(&o));
    let o = cli(d, &["eval", "--ckpt", "missing.ckpt"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn default_config_is_printed_as_json() {
    let dir = setup();
    let o = cli(dir.path(), &["train", "--print-default-config"]);
    assert_eq!(code(&o), 0);
    assert_eq!(TrainConfig::from_json(&stdout(&o)).unwrap(), TrainConfig::default());
}

#[test]
fn gradcheck_reports_each_check() {
    let dir = setup();
    let o = cli(dir.path(), &["gradcheck", "--scope", "ops", "--instances", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("max rel err") && out.contains("all checks passed"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn two_stage_run_with_resume_eval_and_bench() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(code(&cli(d, &["gen-data", "--spec", "spec.json", "--out", "data"])), 0);
    let o = cli(d, &["train", "--config", "cfg.json", "--stage", "teacher", "--data", "data"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = cli(d, &["train", "--config", "cfg.json", "--stage", "teacher", "--data", "data"]);
    assert_eq!(code(&o), 1, "rerun without --force must refuse");

    let student = [
        "train", "--config", "cfg.json", "--stage", "student", "--data", "data",
        "--teacher-ckpt", "runs/teacher/checkpoint.ckpt",
    ];
    let o = cli(d, &student);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = d.join("runs/student");
    let csv = std::fs::read(s.join("metrics.csv")).unwrap();
    let jsonl = std::fs::read(s.join("metrics.jsonl")).unwrap();
    let ck = std::fs::read(s.join("checkpoint.ckpt")).unwrap();
    let rows = read_csv(&s.join("metrics.csv")).unwrap();
    assert_eq!(rows.iter().filter(|r| r.split == "train").count(), 8);
    assert_eq!(rows.iter().filter(|r| r.split == "val").count(), 2);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(s.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["dataset_digest"], dataset_digest(&d.join("data")).unwrap().as_str());
    assert_eq!(manifest["build_digest"].as_str().unwrap().len(), 64);
    let artifacts: Vec<&str> = manifest["artifacts"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    for f in ["metrics.csv", "metrics.jsonl", "checkpoint-step4.ckpt", "checkpoint.ckpt"] {
        assert!(artifacts.iter().any(|a| a.ends_with(f)), "{f} missing from {artifacts:?}");
    }

    // Forced rerun reproduces the files byte for byte.
    let mut forced = student.to_vec();
    forced.push("--force");
    assert_eq!(code(&cli(d, &forced)), 0);
    assert_eq!(std::fs::read(s.join("metrics.csv")).unwrap(), csv);
    assert_eq!(std::fs::read(s.join("checkpoint.ckpt")).unwrap(), ck);

    // Resume from the middle continues the same log.
    let o = cli(d, &[
        "train", "--config", "cfg.json", "--stage", "student", "--data", "data",
        "--resume", "runs/student/checkpoint-step4.ckpt",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(s.join("metrics.csv")).unwrap(), csv);
    assert_eq!(std::fs::read(s.join("metrics.jsonl")).unwrap(), jsonl);
    assert_eq!(std::fs::read(s.join("checkpoint.ckpt")).unwrap(), ck);

    // A changed config cannot resume.
    std::fs::write(d.join("cfg2.json"), CONFIG.replace("\"eval_every\": 4", "\"lambda_distill\": 0.5")).unwrap();
    let o = cli(d, &[
        "train", "--config", "cfg2.json", "--stage", "student", "--data", "data",
        "--resume", "runs/student/checkpoint-step4.ckpt",
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("digest mismatch"), "{}", stderr(&o));

    // Evaluation writes one selection line per validation sample.
    for mode in ["hard", "soft-tau"] {
        let o = cli(d, &["eval", "--ckpt", "runs/student/checkpoint.ckpt", "--data", "data", "--mode", mode]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let dump = std::fs::read_to_string(s.join("eval/hard/selections.jsonl")).unwrap();
    assert_eq!(dump.lines().count(), 24);
    let first: serde_json::Value = serde_json::from_str(dump.lines().next().unwrap()).unwrap();
    assert_eq!(first["selected"].as_array().unwrap().len(), 4);
    let o = cli(d, &["eval", "--ckpt", "runs/student/checkpoint.ckpt", "--data", "data"]);
    assert_eq!(code(&o), 1, "eval output exists");

    // A dataset with another T is rejected naming both values.
    std::fs::write(d.join("t16.json"), r#"{"num_train": 8, "num_val": 8, "frames": 16}"#).unwrap();
    assert_eq!(code(&cli(d, &["gen-data", "--spec", "t16.json", "--out", "d16"])), 0);
    let o = cli(d, &["eval", "--ckpt", "runs/student/checkpoint.ckpt", "--data", "d16", "--out", "e16"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("T=32") && err.contains("T=16"), "{err}");

    // Teacher evaluation works but has no selections.
    let o = cli(d, &["eval", "--ckpt", "runs/teacher/checkpoint.ckpt", "--data", "data"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));

    let o = cli(d, &[
        "bench", "--ckpt", "runs/student/checkpoint.ckpt", "--data", "data",
        "--frames", "4,32", "--warmup", "1", "--timed", "5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("speedup 4 vs 32 frames"));
    let table = std::fs::read_to_string(s.join("bench/latency.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    let o = cli(d, &["bench", "--ckpt", "runs/student/checkpoint.ckpt", "--frames", "4,64", "--force"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn ablation_shares_one_teacher() {
    let dir = setup();
    let d = dir.path();
    let o = cli(d, &["ablate", "--config", "cfg.json", "--axis", "decoder", "--seeds", "0,1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    for label in ["FC", "FC+LN", "FC+LN+GELU+FC", "shared teacher"] {
        assert!(out.contains(label), "{out}");
    }
    let csv = std::fs::read_to_string(d.join("runs/ablation/ablation_decoder.csv")).unwrap();
    let mut r = csv::Reader::from_reader(csv.as_bytes());
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 6);
    let digest_col = r.headers().unwrap().iter().position(|h| h == "teacher_digest").unwrap();
    assert!(rows.iter().all(|x| x[digest_col] == rows[0][digest_col]));
    assert!(d.join("runs/ablation/teacher.ckpt").exists());
}
