use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn skysplat(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skysplat"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn small_bundle(dir: &Path) {
    let o = skysplat(&["synth", "--seed", "3", "--image-size", "64", "--out", "b"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn version_prints_build_id() {
    let o = skysplat(&["--version"], Path::new("."));
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.starts_with("skysplat ") && out.contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn one_view_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"views": [{"image": "a.png", "rpc": "a.rpc.json"}]}"#).unwrap();
    let o = skysplat(&["reconstruct", "--config", "c.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("views"), "{}", stderr(&o));
}

#[test]
fn missing_rpc_names_path() {
    let dir = tempfile::tempdir().unwrap();
    small_bundle(dir.path());
    let cfg = r#"{"views": [{"image": "view_0.png", "rpc": "missing.rpc.json"},
                            {"image": "view_1.png", "rpc": "view_1.rpc.json"}]}"#;
    std::fs::write(dir.path().join("b/c.json"), cfg).unwrap();
    let o = skysplat(&["reconstruct", "--config", "b/c.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.rpc.json"), "{}", stderr(&o));
}

#[test]
fn bad_stage_input_is_a_pipeline_error() {
    let dir = tempfile::tempdir().unwrap();
    small_bundle(dir.path());
    let grid = r#"{"origin": {"lat": 35.0, "lon": 139.0, "hei": 0.0}, "west": 0, "north": 0, "cell_size": 1, "rows": 0, "cols": 4}"#;
    let o = skysplat(&["reconstruct", "--config", "b/auto.json", "--dsm_grid", grid, "--m", "8"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("dsm"), "{}", stderr(&o));
}

#[test]
fn logs_are_level_stage_message() {
    let dir = tempfile::tempdir().unwrap();
    let o = skysplat(&["synth", "--seed", "1", "--image-size", "32", "--out", "b"], dir.path());
    assert!(o.status.success());
    let err = stderr(&o);
    let line = err.lines().next().unwrap();
    let parts: Vec<&str> = line.splitn(3, ' ').collect();
    assert_eq!(parts[..2], ["INFO", "synth"]);
}

#[test]
fn synth_then_reconstruct_seed7() {
    let dir = tempfile::tempdir().unwrap();
    let o = skysplat(&["synth", "--seed", "7", "--out", "s"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = skysplat(&["reconstruct", "--config", "s/auto.json"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("s/out");
    for f in ["dsm.skyr", "dsm.skyr.json", "points.txt", "height_0.skyr", "mask_2.skyr", "dsm_report.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let s = json(&out.join("summary.json"));
    assert_eq!(s["label"], "SkySplat");
    let (mae, spacing) = (s["mae"].as_f64().unwrap(), s["hypothesis_spacing"].as_f64().unwrap());
    assert!(mae <= 2.0 * spacing, "mae {mae} spacing {spacing}");
    let stages: Vec<&str> = s["timings"].as_array().unwrap().iter().map(|t| t["stage"].as_str().unwrap()).collect();
    assert!(stages.contains(&"heights") && stages.contains(&"aggregation"));
}

#[test]
fn deterministic_reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    small_bundle(dir.path());
    for (out, threads) in [("r1", "1"), ("r2", "2")] {
        let o = skysplat(
            &["--threads", threads, "reconstruct", "--config", "b/auto.json", "--output_dir", out, "--deterministic"],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["dsm.skyr", "points.txt", "height_1.skyr", "confidence_0.skyr", "dsm_report.json"] {
        let a = std::fs::read(dir.path().join("r1").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("r2").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn no_aggregation_label() {
    let dir = tempfile::tempdir().unwrap();
    small_bundle(dir.path());
    let o = skysplat(&["reconstruct", "--config", "b/auto.json", "--no-aggregation"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let s = json(&dir.path().join("b/out/summary.json"));
    assert_eq!(s["label"], "SkySplat w/o C.A.");
    assert_eq!(s["config"]["no_aggregation"], true);
}

#[test]
fn fit_render_eval_mask() {
    let dir = tempfile::tempdir().unwrap();
    small_bundle(dir.path());
    let b = dir.path().join("b");
    let o = skysplat(&["rpc", "fit-pinhole", "--rpc", "view_0.rpc.json", "--size", "64,64", "--out", "cam.json"], &b);
    assert!(o.status.success(), "{}", stderr(&o));
    let cam = json(&b.join("cam.json"));
    assert!(cam["mfe"].as_f64().unwrap() < 0.05);

    let o = skysplat(
        &["render", "--heights", "gt_height_0.skyr", "--rpc", "view_0.rpc.json", "--color", "view_0.png",
          "--camera", "cam.json", "--out", "r.skyr", "--save-gaussians", "g.skgs"],
        &b,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(b.join("g.skgs").exists());
    let o = skysplat(&["render", "--gaussians", "g.skgs", "--ortho-grid", "gt_dsm.skyr", "--out", "o.png"], &b);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = skysplat(&["eval", "--pred", "gt_dsm.skyr", "--gt", "gt_dsm.skyr"], &b);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["mae"], 0.0);

    let o = skysplat(
        &["eval", "--losses", "--rel-height", "gt_height_0.skyr", "--height", "gt_height_0.skyr",
          "--render", "r.skyr", "--image", "view_0.png"],
        &b,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let l: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((l["hei_corr"].as_f64().unwrap() - 1.0).abs() < 1e-9);

    let o = skysplat(&["mask", "--config", "auto.json", "--view", "1", "--m", "16"], &b);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(b.join("out/mask_1.skyr").exists() && !b.join("out/mask_0.skyr").exists());
}
