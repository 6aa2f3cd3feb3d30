//! End-to-end runs of the `udfa` binary on generated data.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use udfa::report::VolumeEvalReport;
use udfa_core::config::parse_config;

fn udfa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_udfa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn shipped_configs_parse_and_validate() {
    for name in ["synapse.toml", "acdc.toml", "tiny_synthetic.toml"] {
        let text = std::fs::read_to_string(repo_config(name)).unwrap();
        let mut cfg = parse_config(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        cfg.resolve();
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn prepare_train_evaluate_figures() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let out = dir.path().join("run");
    let o = udfa(&[
        "prepare-data",
        "--dataset",
        "synthetic",
        "--root",
        root.to_str().unwrap(),
        "--cases",
        "3",
        "--shape",
        "3,32,32",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(root.join("manifest.json").is_file());

    let cfg = repo_config("tiny_synthetic.toml");
    let sets = [
        format!("data_root={}", root.display()),
        format!("output_dir={}", out.display()),
        "max_iterations=4".to_owned(),
    ];
    let mut args = vec!["train", "--config", cfg.to_str().unwrap()];
    for s in &sets {
        args.extend(["--set", s.as_str()]);
    }
    let o = udfa(&args);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["resolved_config.toml", "train_log.csv", "checkpoints/last.safetensors", "checkpoints/last.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(out.join("eval/report.json").is_file());

    // standalone evaluation of the saved checkpoint, with an attention dump
    let stem = out.join("checkpoints/last");
    let eval_dir = dir.path().join("eval2");
    let attn = dir.path().join("attn.npz");
    let mut args = vec!["evaluate", "--config", cfg.to_str().unwrap()];
    for s in &sets {
        args.extend(["--set", s.as_str()]);
    }
    args.extend([
        "--checkpoint",
        stem.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
        "--attention-dump",
        attn.to_str().unwrap(),
    ]);
    let o = udfa(&args);
    assert!(o.status.success(), "{}", text(&o));
    assert!(attn.is_file());
    let report = VolumeEvalReport::read(&eval_dir.join("report.json")).unwrap();
    assert_eq!(report.class_names, ["class1", "class2"]);
    assert!(!report.cases.is_empty());

    let figs = dir.path().join("figs");
    let o = udfa(&[
        "figures",
        "--report",
        eval_dir.join("report.json").to_str().unwrap(),
        "--out",
        figs.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(figs.join("dsc_per_class.png").is_file());
    for case in &report.cases {
        assert!(figs.join(format!("overlay_{}.png", case.case_id)).is_file());
    }
}

#[test]
fn exit_codes_distinguish_config_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = udfa(&["train", "--set", "num_stages=5"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("L mod N != 0"));

    let empty = dir.path().join("nothing");
    std::fs::create_dir_all(&empty).unwrap();
    let root = format!("data_root={}", empty.display());
    let o = udfa(&["train", "--set", "dataset=synapse", "--set", &root]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    assert!(text(&o).contains("manifest not found"));
}

#[test]
fn structure_only_ablation_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo_config("tiny_synthetic.toml");
    let out = dir.path().join("abl");
    let o = udfa(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--grid",
        "n_lgfa=2,3,4",
        "--structure-only",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "Input Size,No. of LGFA,DSC,HD,class1,class2");
    assert_eq!(csv.lines().count(), 4);
    let table = std::fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert!(table.contains("L mod N"), "{table}");
}

#[test]
fn empty_report_draws_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let report = VolumeEvalReport::aggregate(udfa_core::DatasetKind::Synapse, 9, Vec::new());
    let p = report.write(dir.path()).unwrap();
    let figs = dir.path().join("figs");
    let o = udfa(&["figures", "--report", p.to_str().unwrap(), "--out", figs.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("nothing to draw"));
    assert!(!figs.exists());
}
