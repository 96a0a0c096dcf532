//! Desk-scale training on synthetic translating textures.
//!
//! `cargo run --release --example desk_train -- [width] [steps] [batch] [lr]`

use std::time::Instant;

use midframe::data::{AugmentConfig, TranslatingTextures};
use midframe::flownet::{interpolate, Checkpoint, InitScheme, ModelWeights, NetConfig};
use midframe::metrics::psnr;
use midframe::trainer::{train, TrainConfig, TrainData, TrainOptions};

fn main() -> midframe::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let width = arg(1, 16.0) as usize;
    let steps = arg(2, 200.0) as u64;
    let batch = arg(3, 8.0) as usize;
    let lr = arg(4, 1e-3);
    let gen = TranslatingTextures::default();
    let train_set = gen.generate::<f32>(500, 3, 0)?;
    let held_out = gen.generate::<f32>(50, 3, 1_000_000)?;
    let net = NetConfig::uniform(width, width);
    let weights = ModelWeights::init(&net, InitScheme::ZeroHeads, 0)?;
    println!("params {}", midframe::flownet::count_parameters(&weights));
    let blend: f64 = held_out
        .iter()
        .map(|s| psnr(&((s[0].pixels() + s[2].pixels()) * 0.5).view(), &s[1].pixels().view()).unwrap())
        .sum::<f64>()
        / held_out.len() as f64;
    println!("blend psnr {blend:.2}");
    let config = TrainConfig {
        total_epochs: 1,
        steps_per_epoch: Some(steps),
        batch_size: batch,
        peak_lr: lr,
        final_lr: lr / 100.0,
        warmup_steps: steps / 20 + 1,
        augment: AugmentConfig { crop: None, ..Default::default() },
        ..Default::default()
    };
    let start = Instant::now();
    let out = train(
        Checkpoint::new(weights, 0),
        TrainData { fixed: Some(Box::new(train_set)), arbitrary: None },
        &config,
        &TrainOptions { log_every: 25, ..Default::default() },
    )?;
    let secs = start.elapsed().as_secs_f64();
    for r in out.log.iter().step_by((steps as usize / 20).max(1)) {
        println!("step {:5} l1 {:.5} perc {:.5} total {:.5}", r.step, r.l1, r.perceptual, r.total);
    }
    let w = &out.checkpoint.weights;
    let p: f64 = held_out
        .iter()
        .map(|s| psnr(&interpolate(w, &s[0], &s[2], 0.5).unwrap().pixels().view(), &s[1].pixels().view()).unwrap())
        .sum::<f64>()
        / held_out.len() as f64;
    println!("held-out psnr {p:.2}  time {secs:.1}s ({:.3}s/step)", secs / steps as f64);
    Ok(())
}
