use std::fs;

use ndarray::Array3;

use midframe::flownet::{load_checkpoint, save_checkpoint, Checkpoint, InitScheme, ModelWeights, NetConfig, OptimizerState};
use midframe::imaging::{load_frame, save_frame, to_byte, Frame};
use midframe::trainer::RunConfig;
use midframe::warp::{read_flow, write_flow, FlowField};

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let weights = ModelWeights::<f32>::init(&NetConfig::uniform(3, 2), InitScheme::RandomHeads { head_scale: 0.2 }, 11).unwrap();
    let mut ckpt = Checkpoint::new(weights, 5);
    let mut opt = OptimizerState::new(&ckpt.weights);
    opt.step = 17;
    opt.first_moment[0][0] = 0.25;
    ckpt.optimizer = Some(opt);
    ckpt.epoch = 3;
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.weights, ckpt.weights);
    assert_eq!(back.optimizer, ckpt.optimizer);
    assert_eq!((back.epoch, back.seed), (3, 5));

    let mut bytes = fs::read(&path).unwrap();
    bytes.push(0);
    fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn flow_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = Array3::from_shape_fn((2, 5, 7), |(c, y, x)| (c as f32 - 0.5) * (y * 7 + x) as f32 / 3.0);
    let flow = FlowField::new(v).unwrap();
    let path = dir.path().join("f.flo");
    write_flow(&flow, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 12 + 5 * 7 * 8);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 5);
    // first pixel's dy follows its dx
    assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), flow.vectors[[1, 0, 0]]);
    assert_eq!(read_flow(&path).unwrap(), flow);
    fs::write(&path, &bytes[..20]).unwrap();
    assert!(read_flow(&path).is_err());
}

#[test]
fn png_round_trip_quantizes_to_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let px = Array3::from_shape_fn((3, 4, 6), |(c, y, x)| (c * 24 + y * 6 + x) as f32 / 71.0);
    let frame = Frame::new(px.clone()).unwrap();
    let path = dir.path().join("f.png");
    save_frame(&frame, &path).unwrap();
    let back: Frame<f32> = load_frame(&path).unwrap();
    for (a, b) in px.iter().zip(back.pixels()) {
        assert_eq!(to_byte(*a), to_byte(*b));
        assert!((to_byte(*a) as f32 / 255.0 - *b).abs() < 1e-7);
    }
    assert!(load_frame::<f32>(dir.path().join("missing.png")).is_err());
}

#[test]
fn run_config_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(
        &path,
        "output = \"out\"\n[train]\ntotal_epochs = 3\n[data.fixed]\nroot = \"data\"\nlayout = \"triplet\"\n",
    )
    .unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.output, dir.path().join("out"));
    assert_eq!(cfg.data.fixed.as_ref().unwrap().root, dir.path().join("data"));
    assert_eq!(cfg.train.total_epochs, 3);
    assert_eq!(cfg.train.peak_lr, 3e-4);
    assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    assert!(RunConfig::from_toml("[train]\nwarmup_steps = 0\n").is_err());
}
