use std::path::Path;
use std::process::{Command, Output};

use morphkit::synthdata::gen_pair;
use morphkit::volume::save_labels;
use morphkit::LabelMap;

fn morphkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphkit")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_data(dir: &Path, seed: &str) -> Output {
    morphkit(&["gen-data", "--shape", "16,16,16", "--pairs", "2", "--seed", seed, "--out", s(dir)])
}

#[test]
fn gen_data_prints_manifest_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = gen_data(&a, "4");
    assert!(out.status.success());
    let printed = String::from_utf8(out.stdout).unwrap();
    assert!(Path::new(printed.trim()).is_file());
    assert!(gen_data(&b, "4").status.success());
    let raw = |d: &Path| std::fs::read(d.join("pair_001/moving_labels.raw")).unwrap();
    assert_eq!(raw(&a), raw(&b));
}

#[test]
fn bad_shape_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = morphkit(&["gen-data", "--shape", "16,20,16", "--pairs", "1", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(morphkit(&["train"]).status.code(), Some(1));
}

#[test]
fn missing_data_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = morphkit(&["train", "--data", s(&tmp.path().join("nope")), "--out", s(tmp.path()), "--preset", "tiny"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_lock_and_register_uses_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen_data(&data, "1").status.success());
    let config = tmp.path().join("cfg.json");
    std::fs::write(&config, r#"{"train": {"epochs": 5, "lr": 0.001}, "model": {"leb": {"lora_rank": 2}}}"#).unwrap();
    let run = tmp.path().join("run");
    let out = morphkit(&["train", "--data", s(&data), "--config", s(&config), "--preset", "tiny", "--epochs", "1", "--out", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("randomly initialized"));

    let lock: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("config.lock.json")).unwrap()).unwrap();
    assert_eq!(lock["preset"], "tiny");
    assert_eq!(lock["train"]["epochs"], 1);
    assert_eq!(lock["train"]["lr"], 0.001);
    assert_eq!(lock["model"]["leb"]["lora_rank"], 2);
    let history = std::fs::read_to_string(run.join("loss_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);

    let pair = data.join("pair_000");
    let reg = tmp.path().join("reg");
    let out = morphkit(&[
        "register",
        "--checkpoint",
        s(&run.join("checkpoint")),
        "--moving",
        s(&pair.join("moving.json")),
        "--fixed",
        s(&pair.join("fixed.json")),
        "--moving-labels",
        s(&pair.join("moving_labels.json")),
        "--fixed-labels",
        s(&pair.join("fixed_labels.json")),
        "--out",
        s(&reg),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["warped.json", "phi.json", "warped_labels.json", "metrics.csv"] {
        assert!(reg.join(f).is_file(), "{f}");
    }
    let metrics = std::fs::read_to_string(reg.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("pair_id,label,dice,hd95_mm,folding_pct"));
    assert!(metrics.lines().any(|l| l.starts_with("pair,summary")));
}

#[test]
fn eval_marks_missing_label_and_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let p = gen_pair([16; 3], 2, 1.0, 0).unwrap();
    let only_one = LabelMap::from_fn([16; 3], [1.0; 3], |z, y, x| u32::from(p.fixed_labels.at(z, y, x) == 1)).unwrap();
    save_labels(&p.fixed_labels, tmp.path().join("t.json")).unwrap();
    save_labels(&only_one, tmp.path().join("p.json")).unwrap();
    let out = morphkit(&["eval", "--pred-labels", s(&tmp.path().join("p.json")), "--target-labels", s(&tmp.path().join("t.json"))]);
    assert_eq!(out.status.code(), Some(0));
    let csv = String::from_utf8(out.stdout).unwrap();
    let row2 = csv.lines().find(|l| l.starts_with("pair,2,")).unwrap();
    assert!(row2.contains("error:missing_label"), "{row2}");
    let row1 = csv.lines().find(|l| l.starts_with("pair,1,")).unwrap();
    assert!(row1.starts_with("pair,1,1,0"), "{row1}");
}

#[test]
fn gradcheck_reports_groups_and_fault_exits_3() {
    let out = morphkit(&["gradcheck", "--n-params", "6"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for g in ["encoder", "lora", "flow_heads"] {
        assert!(text.lines().any(|l| l.starts_with(g)), "{g} missing:\n{text}");
    }
    assert!(text.contains("max_rel_err < 1e-3"));
    assert_eq!(morphkit(&["gradcheck", "--n-params", "6", "--inject-fault"]).status.code(), Some(3));
}

#[test]
fn malformed_sweep_spec_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    std::fs::write(&spec, r#"{"data": "d", "variants": ["full"], "layerpairs": [[0, 1]]}"#).unwrap();
    let out = morphkit(&["sweep", "--spec", s(&spec)]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("layerpairs"));
}
