use std::path::Path;
use std::process::{Command, Output};

use headfit::toolkit::io::read_json;
use headfit::toolkit::run::{FitRun, RunRecord};
use headfit::transfer::ControlManifest;

const SMALL: &str = r#"{
  "schedule": {"iters": 4, "field_warmup": 1},
  "gradcheck": {"samples_per_block": 32},
  "transfer": {"epochs": 2, "arch": {"encoder_hidden": [8], "geo_hidden": [8], "d_code": 4}}
}"#;

fn headfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_headfit")).args(args).env("HEADFIT_THREADS", "2").env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\nstderr: {}", out.status, String::from_utf8_lossy(&out.stderr));
}

fn synth(dir: &Path, seed: &str) {
    let cfg = dir.join("small.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.join(format!("data{seed}"));
    ok(&headfit(&[
        "synth", "--config", cfg.to_str().unwrap(), "--seed", seed, "--frames", "2", "--width", "48", "--height", "48", "--levels", "1", "--noiseless", "--out",
        out.to_str().unwrap(),
    ]));
}

fn fit(dir: &Path, seed: &str) {
    let cfg = dir.join("small.json");
    let data = dir.join(format!("data{seed}"));
    let out = dir.join(format!("fit{seed}"));
    ok(&headfit(&["fit", "--config", cfg.to_str().unwrap(), "--seed", seed, "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]));
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = d.join("small.json");
    let cfg = cfg.to_str().unwrap();
    synth(d, "7");
    synth(d, "8");
    assert!(d.join("data7/manifest.json").exists());
    assert!(d.join("data7/normal_0001.pfm").exists());
    fit(d, "7");
    fit(d, "8");
    let run: FitRun = read_json(&d.join("fit7/fit_report.json")).unwrap();
    assert_eq!(run.seed, 7);
    assert_eq!(run.report.iterations, 4);
    let rec: RunRecord = read_json(&d.join("fit7/run.json")).unwrap();
    assert_eq!(rec.config_hash, run.config_hash);

    let gc = d.join("gc.json");
    let out = headfit(&["gradcheck", "--config", cfg, "--data", d.join("data7").to_str().unwrap(), "--blocks", "psi,omega", "--out", gc.to_str().unwrap()]);
    ok(&out);
    assert!(gc.exists());

    let render = d.join("render");
    ok(&headfit(&[
        "render", "--data", d.join("data7").to_str().unwrap(), "--checkpoint", d.join("fit7/checkpoint.hhm").to_str().unwrap(), "--out", render.to_str().unwrap(),
    ]));
    assert!(render.join("depth_0001.pfm").exists() && render.join("posed_0000.obj").exists() && render.join("mask_0000.pgm").exists());

    let net = d.join("net");
    ok(&headfit(&[
        "transfer-train", "--config", cfg, "--fit", d.join("fit7").to_str().unwrap(), "--fit", d.join("fit8").to_str().unwrap(), "--out", net.to_str().unwrap(),
    ]));
    let net_file = net.join("net.hhm");
    assert!(net_file.exists());

    let applied = d.join("applied");
    ok(&headfit(&[
        "transfer-apply", "--net", net_file.to_str().unwrap(), "--target", d.join("fit7").to_str().unwrap(), "--driving", d.join("fit8").to_str().unwrap(), "--out",
        applied.to_str().unwrap(),
    ]));
    assert!(applied.join("posed_0001.obj").exists());

    let control = d.join("control");
    ok(&headfit(&[
        "export-control", "--net", net_file.to_str().unwrap(), "--target", d.join("fit7").to_str().unwrap(), "--driving", d.join("fit8").to_str().unwrap(), "--out",
        control.to_str().unwrap(),
    ]));
    let m: ControlManifest = read_json(&control.join("control.json")).unwrap();
    assert_eq!(m.frames.len(), 2);
    assert!(control.join(&m.reference).exists());
}

#[test]
fn same_seed_gives_identical_dataset() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), "3");
    synth(b.path(), "3");
    for f in ["manifest.json", "model.hhm", "landmarks.csv", "normal_0000.pfm", "depth_0001.pfm", "mask_0000.pgm", "gt_fields.hhm"] {
        let x = std::fs::read(a.path().join("data3").join(f)).unwrap();
        let y = std::fs::read(b.path().join("data3").join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let out = headfit(&["fit", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(headfit(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn invalid_inputs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"schedule": {"lr_fields": -1.0}}"#).unwrap();
    let out = headfit(&["synth", "--config", bad.to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = headfit(&["fit", "--data", tmp.path().join("missing").to_str().unwrap(), "--out", tmp.path().join("y").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_headfit"))
        .args(["synth", "--out", tmp.path().join("z").to_str().unwrap()])
        .env("HEADFIT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergent_fit_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "5");
    let cfg = d.join("wild.json");
    std::fs::write(&cfg, r#"{"schedule": {"iters": 30, "lr_psi": 1e6, "lr_omega": 1e6, "field_warmup": 0}}"#).unwrap();
    let out = headfit(&["fit", "--config", cfg.to_str().unwrap(), "--data", d.join("data5").to_str().unwrap(), "--out", d.join("f").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}
