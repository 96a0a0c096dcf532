use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use midframe::augment::AugmentationManifest;
use midframe::flownet::{load_checkpoint, NetConfig};
use midframe::imaging::{load_frame, save_frame, Frame};
use midframe::warp::read_flow;

fn midframe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_midframe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn midframe")
}

fn ok(args: &[&str]) -> String {
    let out = midframe(args);
    assert!(
        out.status.success(),
        "midframe {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_constant(path: &Path, h: usize, w: usize, v: f32) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    save_frame(&Frame::constant(h, w, v).unwrap(), path).unwrap();
}

/// Writes a zero-head checkpoint of the tiny config and returns its path.
fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let net = dir.join("net.toml");
    fs::write(&net, toml::to_string(&NetConfig::uniform(2, 2)).unwrap()).unwrap();
    let ckpt = dir.join("tiny.ckpt");
    let stdout = ok(&["init", "--out", s(&ckpt), "--net", s(&net), "--seed", "3"]);
    assert!(stdout.contains("parameters"));
    ckpt
}

#[test]
fn interpolate_writes_frame_and_flows() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    write_constant(&a, 20, 24, 0.2);
    write_constant(&b, 20, 24, 0.6);
    let out = dir.path().join("mid.png");
    let flows = dir.path().join("flows");
    ok(&[
        "interpolate", "--in", s(&a), s(&b), "--t", "0.5", "--out", s(&out), "--ckpt", s(&ckpt), "--flow-dir",
        s(&flows),
    ]);
    let mid: Frame<f32> = load_frame(&out).unwrap();
    assert_eq!((mid.height(), mid.width()), (20, 24));
    let expected = midframe::imaging::to_byte(0.4f32) as f32 / 255.0;
    assert!(mid.pixels().iter().all(|&v| (v - expected).abs() < 1e-6));
    for name in ["flow_t0.flo", "flow_t1.flo"] {
        let f = read_flow(flows.join(name)).unwrap();
        assert_eq!((f.height(), f.width()), (20, 24));
        assert!(f.vectors.iter().all(|&v| v == 0.0));
    }
    assert!(flows.join("mask.png").is_file());
}

#[test]
fn augment_and_timing() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let frames = dir.path().join("frames");
    for i in 0..4 {
        write_constant(&frames.join(format!("{i:03}.png")), 12, 16, 0.25 * i as f32);
    }
    let out = dir.path().join("aug");
    let stdout = ok(&[
        "augment", "--frames", s(&frames), "--factor", "2", "--mask", "4:3", "--ckpt", s(&ckpt), "--out", s(&out),
        "--reconstruction-s", "100",
    ]);
    assert!(stdout.contains("inserted 3 frames"), "{stdout}");
    let manifest = AugmentationManifest::read(&out).unwrap();
    assert_eq!(manifest.rows.len(), 3);
    assert_eq!(manifest.merged.len(), 7);
    assert_eq!(manifest.header.factor, 2);
    assert!(out.join("timing.json").is_file());
    let timing: serde_json::Value = serde_json::from_str(&ok(&[
        "timing", "--manifest", s(&out), "--reconstruction-s", "100",
    ]))
    .unwrap();
    let expected = 1000.0 * manifest.header.total_wall_s / (manifest.header.total_wall_s + 100.0);
    assert!((timing["proportion_permille"].as_f64().unwrap() - expected).abs() < 1e-9);
}

#[test]
fn eval_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let data = dir.path().join("triplets");
    for clip in ["00001/0001", "00001/0002"] {
        for (i, v) in [(1, 0.2), (2, 0.4), (3, 0.6)] {
            write_constant(&data.join(format!("sequences/{clip}/im{i}.png")), 16, 16, v);
        }
    }
    let report = dir.path().join("report");
    let stdout = ok(&[
        "eval", "--dataset", s(&data), "--layout", "triplet", "--ckpt", s(&ckpt), "--report", s(&report),
    ]);
    assert!(stdout.starts_with("n 2"), "{stdout}");
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(summary["n"], 2);
}

#[test]
fn train_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        r#"
output = "run"
teacher = true

[net]
base = { stem_channels = 2, group_channels = 2, deconv_channels = [2, 2] }
refine = [
  { stem_channels = 2, group_channels = 2, deconv_channels = [2, 2] },
  { stem_channels = 2, group_channels = 2, deconv_channels = [2, 2] },
]

[train]
total_epochs = 2
steps_per_epoch = 2
batch_size = 2
warmup_steps = 1
teacher_cutoff_epochs = 1

[train.augment]
crop = 32

[data.synthetic]
triplets = 4
generator = { size = 32 }
"#,
    )
    .unwrap();
    let stdout = ok(&["train", "--config", s(&config)]);
    assert!(stdout.starts_with("step 3 epoch 1"), "{stdout}");
    let run = dir.path().join("run");
    let ckpt = load_checkpoint(run.join("epoch_0002.ckpt")).unwrap();
    assert_eq!(ckpt.epoch, 2);
    assert_eq!(ckpt.optimizer.unwrap().step, 4);
    assert!(run.join("config.toml").is_file());
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 4);
}

#[test]
fn benchmark_report() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let report = dir.path().join("bench.json");
    ok(&[
        "benchmark", "--ckpt", s(&ckpt), "--sizes", "64x32,48x48", "--repeats", "2", "--warmup", "0", "--report",
        s(&report),
    ]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let rows = v["results"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0]["width"].as_u64(), rows[0]["height"].as_u64()), (Some(64), Some(32)));
    assert_eq!(rows[1]["times_ms"].as_array().unwrap().len(), 2);
    assert_eq!(v["parameters"].as_u64().unwrap() as usize, midframe::flownet::count_parameters(&load_checkpoint(&ckpt).unwrap().weights));
}

#[test]
fn rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = midframe(&["eval", "--dataset", s(dir.path()), "--ckpt", s(&missing), "--report", "r"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
    let out = midframe(&["benchmark", "--ckpt", s(&missing), "--sizes", "64by32", "--report", "r"]);
    assert!(!out.status.success());
    let out = midframe(&["augment", "--frames", ".", "--factor", "2", "--mask", "16:9", "--ckpt", "x", "--out", "y"]);
    assert!(!out.status.success());
}
