use std::path::Path;
use std::process::Command;

fn anomaly(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_anomaly"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn anomaly")
}

fn ok(args: &[&str]) -> String {
    let out = anomaly(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn rfgeom_table_lists_reference_layers() {
    let out = ok(&["rfgeom"]);
    let c2 = out.lines().find(|l| l.starts_with("C2")).unwrap();
    assert!(c2.contains("51x51") && c2.contains("-16"), "{c2}");
    let json = ok(&["rfgeom", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 6);
}

#[test]
fn end_to_end_on_small_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = d.join("spec.toml");
    std::fs::write(
        &spec,
        "height = 72\nwidth = 96\ntrain_videos = 1\nheldout_videos = 0\ntest_videos = 1\n\
         frames_per_video = 16\nanomaly_start = 8\nanomaly_frames = 6\n",
    )
    .unwrap();
    let data = d.join("data");
    ok(&["fixture", "--seed", "3", "--out", s(&data), "--spec", s(&spec)]);
    let weights = d.join("net.fcnw");
    ok(&["weights", "--out", s(&weights), "--seed", "1"]);

    let config = d.join("run.toml");
    std::fs::write(&config, "seed = 4\n[autoencoder]\nhidden = 8\nepochs = 2\nbatch_size = 64\n").unwrap();
    let bundle = d.join("model.fab");
    let report = d.join("train.json");
    ok(&[
        "train", "--config", s(&config), "--weights", s(&weights), "--data", s(&data.join("train")),
        "--out", s(&bundle), "--report", s(&report),
    ]);
    assert!(bundle.exists() && report.exists());

    let test_video = data.join("test/video_00");
    let pred = d.join("pred");
    ok(&["detect", "--bundle", s(&bundle), "--data", s(&test_video), "--out-dir", s(&pred)]);
    assert!(pred.join("detections.json").exists());
    assert_eq!(std::fs::read_to_string(pred.join("frames.jsonl")).unwrap().lines().count(), 16);

    let eval_out = d.join("eval.json");
    let text = ok(&[
        "eval", "--pred-dir", s(&pred), "--gt-dir", s(&data.join("test/video_00_gt")), "--out", s(&eval_out),
    ]);
    assert!(text.to_lowercase().contains("auc"), "{text}");
    assert!(eval_out.with_extension("csv").exists());
    ok(&[
        "eval", "--pred-dir", s(&pred), "--gt-dir", s(&data.join("test/video_00_gt")), "--level", "pixel",
        "--out", s(&d.join("pix.json")),
    ]);

    let bench = ok(&["bench", "--bundle", s(&bundle), "--data", s(&test_video)]);
    for label in ["Pre-processing", "Representation", "Classifying", "Total"] {
        assert!(bench.contains(label), "{bench}");
    }
}

#[test]
fn corrupt_bundle_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.fab");
    std::fs::write(&bad, b"XXXXnot a bundle").unwrap();
    let out = anomaly(&["detect", "--bundle", s(&bad), "--data", s(dir.path()), "--out-dir", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("E_MAGIC"));
}

#[test]
fn train_without_data_fails() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("n.fcnw");
    ok(&["weights", "--out", s(&w)]);
    let out = anomaly(&["train", "--weights", s(&w), "--out", s(&dir.path().join("m.fab"))]);
    assert!(!out.status.success());
}
