//! The training loop.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{clip_global_norm, lr_at_step, optimizer_step, StepOutcome, TrainConfig};
use crate::data::{BatchStream, SequenceSource};
use crate::error::{Error, Result};
use crate::flownet::{save_checkpoint, Checkpoint, OptimizerState, TrainingPass};
use crate::losses::{total_loss, FeatureExtractor, GradientPyramid, LossBreakdown, LossConfig, TeacherInputs, TeacherOracle};

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub teacher: f64,
    pub total: f64,
}

/// Fixed-timestep triplets and/or arbitrary-timestep septuplets; at least one is required.
#[derive(Default)]
pub struct TrainData {
    pub fixed: Option<Box<dyn SequenceSource<f32>>>,
    pub arbitrary: Option<Box<dyn SequenceSource<f32>>>,
}

pub struct TrainOptions<'a> {
    /// Receives `metrics.jsonl` and checkpoints; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    pub teacher: Option<&'a dyn TeacherOracle<f32>>,
    /// Perceptual feature extractor; the built-in gradient pyramid when unset.
    pub extractor: Option<&'a dyn FeatureExtractor<f32>>,
    /// Emit an info log line every this many steps (0 disables).
    pub log_every: u64,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self {
            out_dir: None,
            teacher: None,
            extractor: None,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
    pub saved: Vec<PathBuf>,
}

fn write_checkpoint(dir: &Option<PathBuf>, name: &str, ckpt: &Checkpoint, saved: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(dir) = dir {
        let path = dir.join(name);
        save_checkpoint(ckpt, &path)?;
        saved.push(path);
    }
    Ok(())
}

/// Trains from `initial` until `config.total_epochs`, resuming at `initial.epoch`.
/// The result is a deterministic function of the initial checkpoint, the data and the config.
pub fn train(initial: Checkpoint, data: TrainData, config: &TrainConfig, options: &TrainOptions<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    let mut ckpt = initial;
    let mut log = Vec::new();
    let mut saved = Vec::new();
    if ckpt.epoch >= config.total_epochs {
        return Ok(TrainOutcome { checkpoint: ckpt, log, saved });
    }
    let mut stream = BatchStream::new(
        data.fixed,
        data.arbitrary,
        config.batch_size,
        config.augment,
        config.seed.wrapping_add(ckpt.epoch),
    )?;
    let steps_per_epoch = config.steps_per_epoch.unwrap_or(stream.batches_per_epoch() as u64);
    let last_step = config.total_epochs * steps_per_epoch - 1;
    let loss_config = LossConfig {
        lambda: config.lambda,
        teacher_cutoff: config.teacher_cutoff(),
    };
    let default_extractor = GradientPyramid::default();
    let extractor = options.extractor.unwrap_or(&default_extractor);
    let mut optimizer = ckpt.optimizer.take().unwrap_or_else(|| OptimizerState::new(&ckpt.weights));
    let mut metrics = match &options.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            let file: File = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(file)))
        }
        None => None,
    };

    for epoch in ckpt.epoch..config.total_epochs {
        for s in 0..steps_per_epoch {
            let step = epoch * steps_per_epoch + s;
            let lr = lr_at_step(step, config, last_step)?;
            let batch = stream.next_batch()?;
            let n = batch.samples.len() as f64;
            let mut grads = ckpt.weights.zero_gradients();
            let mut sum = LossBreakdown::combine(0.0, 0.0, 0.0, config.lambda);
            for sample in &batch.samples {
                let (f0, f1, ft) = (sample.frame0.pixels(), sample.frame1.pixels(), sample.frame_t.pixels());
                let pass = TrainingPass::run(&ckpt.weights, &f0.view(), &f1.view(), sample.t as f32)?;
                let teacher = options.teacher.map(|oracle| TeacherInputs {
                    oracle,
                    frame0: f0.view(),
                    frame1: f1.view(),
                    t: sample.t as f32,
                });
                let eval = total_loss(
                    &pass.prediction().view(),
                    &ft.view(),
                    (&pass.flow_t0().view(), &pass.flow_t1().view()),
                    teacher,
                    epoch,
                    &loss_config,
                    extractor,
                )?;
                let (g0, g1) = match &eval.grad_flows {
                    Some((a, b)) => (Some(a.view()), Some(b.view())),
                    None => (None, None),
                };
                grads.add_assign(&pass.backward(&ckpt.weights, &eval.grad_prediction.view(), g0.as_ref(), g1.as_ref()));
                let b = eval.breakdown;
                sum = LossBreakdown::combine(sum.l1 + b.l1, sum.perceptual + b.perceptual, sum.teacher + b.teacher, config.lambda);
            }
            let loss = LossBreakdown::combine(sum.l1 / n, sum.perceptual / n, sum.teacher / n, config.lambda);
            if !loss.is_finite() {
                ckpt.optimizer = Some(optimizer);
                ckpt.epoch = epoch;
                write_checkpoint(&options.out_dir, "diverged.ckpt", &ckpt, &mut saved)?;
                return Err(Error::Diverged {
                    step,
                    message: format!("loss is not finite: {loss:?}"),
                });
            }
            grads.scale(1.0 / n as f32);
            if let Some(max) = config.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            if optimizer_step(&mut ckpt.weights, &grads, &mut optimizer, lr, config)? == StepOutcome::Skipped {
                log::warn!("step {step}: skipped update ({} so far)", optimizer.skipped);
            }
            let record = StepRecord {
                step,
                epoch,
                lr,
                l1: loss.l1,
                perceptual: loss.perceptual,
                teacher: loss.teacher,
                total: loss.total,
            };
            if let Some((path, w)) = &mut metrics {
                writeln!(w, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&*path, e))?;
            }
            if options.log_every > 0 && step % options.log_every == 0 {
                log::info!("step {step} epoch {epoch} lr {lr:.3e} loss {:.5}", loss.total);
            }
            log.push(record);
        }
        ckpt.epoch = epoch + 1;
        if let Some((path, w)) = &mut metrics {
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        if ckpt.epoch % config.checkpoint_every == 0 || ckpt.epoch == config.total_epochs {
            ckpt.optimizer = Some(optimizer.clone());
            write_checkpoint(&options.out_dir, &format!("epoch_{:04}.ckpt", ckpt.epoch), &ckpt, &mut saved)?;
        }
    }
    ckpt.optimizer = Some(optimizer);
    Ok(TrainOutcome { checkpoint: ckpt, log, saved })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AugmentConfig, TranslatingTextures};
    use crate::flownet::{load_checkpoint, InitScheme, ModelWeights, NetConfig};
    use crate::losses::BlockMatchingTeacher;

    fn data() -> TrainData {
        let gen = TranslatingTextures { size: 32, max_motion: 3.0, ..Default::default() };
        TrainData {
            fixed: Some(Box::new(gen.generate::<f32>(4, 3, 0).unwrap())),
            arbitrary: Some(Box::new(gen.generate::<f32>(2, 7, 100).unwrap())),
        }
    }

    fn config() -> TrainConfig {
        TrainConfig {
            total_epochs: 2,
            batch_size: 2,
            warmup_steps: 2,
            steps_per_epoch: Some(3),
            peak_lr: 1e-3,
            final_lr: 1e-5,
            augment: AugmentConfig { crop: None, ..Default::default() },
            ..Default::default()
        }
    }

    fn initial() -> Checkpoint {
        let w = ModelWeights::init(&NetConfig::uniform(2, 2), InitScheme::RandomHeads { head_scale: 0.1 }, 1).unwrap();
        Checkpoint::new(w, 1)
    }

    #[test]
    fn zero_epochs_returns_initial() {
        let c = TrainConfig { total_epochs: 0, ..config() };
        let out = train(initial(), data(), &c, &TrainOptions::default()).unwrap();
        assert_eq!(out.checkpoint, initial());
        assert!(out.log.is_empty());
    }

    #[test]
    fn deterministic_and_logged() {
        let dir = tempfile::tempdir().unwrap();
        let teacher = BlockMatchingTeacher::default();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            teacher: Some(&teacher),
            ..Default::default()
        };
        let a = train(initial(), data(), &config(), &opts).unwrap();
        let b = train(initial(), data(), &config(), &TrainOptions { teacher: Some(&teacher), ..Default::default() }).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.log.len(), 6);
        // cutoff = round(2/3 · 2) = 1: teacher active only in epoch 0
        assert!(a.log[..3].iter().all(|r| r.teacher > 0.0));
        assert!(a.log[3..].iter().all(|r| r.teacher == 0.0));
        let lines = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let parsed: Vec<StepRecord> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed, a.log);
        assert_eq!(a.saved.len(), 2);
        let last = load_checkpoint(&a.saved[1]).unwrap();
        assert_eq!(last, a.checkpoint);
        assert_eq!(last.optimizer.unwrap().step, 6);
    }

    #[test]
    fn resume_finishes_schedule() {
        let one = train(initial(), data(), &TrainConfig { total_epochs: 1, ..config() }, &TrainOptions::default()).unwrap();
        assert_eq!(one.checkpoint.epoch, 1);
        let two = train(one.checkpoint, data(), &config(), &TrainOptions::default()).unwrap();
        assert_eq!(two.log.first().unwrap().step, 3);
        assert_eq!(two.checkpoint.epoch, 2);
    }
}
