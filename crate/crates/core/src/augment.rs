//! Frame-rate augmentation of recordings for neural-rendering reconstruction.
//!
//! `augment_dataset` inserts `factor − 1` synthesized frames between every
//! adjacent pair of a frames directory and writes:
//!
//! * `<out>/inserted/p<pair>_<i>of<factor>.png` for each synthesized frame,
//! * `<out>/manifest.json`, the [`ManifestHeader`],
//! * `<out>/manifest.jsonl`, one [`ManifestRow`] per insertion in position order,
//! * `<out>/frames.txt`, originals and insertions merged in temporal order.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, Layout};
use crate::error::{ensure, Error, Result};
use crate::flownet::{interpolate, ModelWeights};
use crate::imaging::{load_frame, save_frame, CameraPose, Frame};
use crate::scalar::Real;

/// One synthesized frame: between source frames `pair` and `pair + 1`, at `t = index / factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Insertion {
    pub pair: usize,
    pub index: usize,
    pub t: f64,
}

/// Timesteps `i/factor`, `i = 1..factor−1`, for every adjacent pair, in temporal order.
pub fn plan_insertions(frame_count: usize, factor: usize) -> Result<Vec<Insertion>> {
    ensure!(frame_count >= 2, "need at least 2 frames, got {frame_count}");
    ensure!(factor >= 2, "factor must be at least 2, got {factor}");
    Ok((0..frame_count - 1)
        .flat_map(|pair| {
            (1..factor).map(move |index| Insertion {
                pair,
                index,
                t: index as f64 / factor as f64,
            })
        })
        .collect())
}

/// Frames after augmentation: `N + (N − 1)(factor − 1)`.
pub fn output_frame_count(frame_count: usize, factor: usize) -> usize {
    frame_count + frame_count.saturating_sub(1) * factor.saturating_sub(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "4:3")]
    FourByThree,
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MaskMode::None),
            "4:3" | "4x3" => Ok(MaskMode::FourByThree),
            other => Err(Error::Config(format!("unknown mask mode `{other}`"))),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::None => "none",
            MaskMode::FourByThree => "4:3",
        })
    }
}

/// `(top, left, height, width)` of the centered maximal 4:3 region.
pub fn aspect_region(height: usize, width: usize) -> (usize, usize, usize, usize) {
    if 3 * width > 4 * height {
        let w = 4 * height / 3;
        (0, (width - w) / 2, height, w)
    } else {
        let h = 3 * width / 4;
        ((height - h) / 2, 0, h, width)
    }
}

/// Zeroes every pixel outside the centered 4:3 region; `MaskMode::None` is the identity.
pub fn apply_aspect_mask<T: Real>(frame: &Frame<T>, mode: MaskMode) -> Frame<T> {
    match mode {
        MaskMode::None => frame.clone(),
        MaskMode::FourByThree => {
            let (top, left, h, w) = aspect_region(frame.height(), frame.width());
            let mut px = ndarray::Array3::zeros(frame.pixels().dim());
            let region = s![.., top..top + h, left..left + w];
            px.slice_mut(region).assign(&frame.pixels().slice(region));
            Frame::new(px)
                .expect("masking keeps values in range")
                .with_timestamp(frame.timestamp)
                .with_pose(frame.pose)
        }
    }
}

/// Linear translation and shortest-arc spherical rotation interpolation, `t ∈ [0, 1]`.
pub fn interpolate_pose(a: &CameraPose, b: &CameraPose, t: f64) -> Result<CameraPose> {
    ensure!((0.0..=1.0).contains(&t), "pose interpolation needs t in [0, 1], got {t}");
    let qa = CameraPose::new(a.translation, a.rotation)?.rotation;
    let mut qb = CameraPose::new(b.translation, b.rotation)?.rotation;
    if t == 0.0 {
        return Ok(*a);
    }
    if t == 1.0 {
        return Ok(*b);
    }
    let translation = [0, 1, 2].map(|i| a.translation[i] + t * (b.translation[i] - a.translation[i]));
    let mut dot: f64 = (0..4).map(|i| qa[i] * qb[i]).sum();
    if dot < 0.0 {
        qb = qb.map(|v| -v);
        dot = -dot;
    }
    let (wa, wb) = if dot > 0.9995 {
        (1.0 - t, t)
    } else {
        let theta = dot.min(1.0).acos();
        let sin = theta.sin();
        (((1.0 - t) * theta).sin() / sin, (t * theta).sin() / sin)
    };
    CameraPose::new(translation, [0, 1, 2, 3].map(|i| wa * qa[i] + wb * qb[i]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub factor: usize,
    pub mask_mode: MaskMode,
    pub model_checkpoint: String,
    pub source_frames: usize,
    pub inserted: usize,
    pub failed: usize,
    pub total_wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub source_frame_a: String,
    pub source_frame_b: String,
    pub t: f64,
    /// Relative to the output directory.
    pub output: String,
    pub timestamp: Option<f64>,
    pub pose: Option<CameraPose>,
    pub wall_ms: f64,
    /// Set when this insertion failed; no frame was written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationManifest {
    pub header: ManifestHeader,
    pub rows: Vec<ManifestRow>,
    /// Originals and insertions in temporal order.
    pub merged: Vec<String>,
}

impl AugmentationManifest {
    /// Copy with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut m = self.clone();
        m.header.total_wall_s = 0.0;
        m.rows.iter_mut().for_each(|r| r.wall_ms = 0.0);
        m
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let header = dir.join("manifest.json");
        fs::write(&header, serde_json::to_string_pretty(&self.header)?).map_err(|e| Error::io(&header, e))?;
        let mut lines = String::new();
        for row in &self.rows {
            lines.push_str(&serde_json::to_string(row)?);
            lines.push('\n');
        }
        let rows = dir.join("manifest.jsonl");
        fs::write(&rows, lines).map_err(|e| Error::io(&rows, e))?;
        let merged = dir.join("frames.txt");
        let mut text = self.merged.join("\n");
        text.push('\n');
        fs::write(&merged, text).map_err(|e| Error::io(&merged, e))
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let header = serde_json::from_str(&read("manifest.json")?)?;
        let rows = read("manifest.jsonl")?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        let merged = read("frames.txt")?.lines().map(String::from).collect();
        Ok(Self { header, rows, merged })
    }
}

pub struct AugmentRequest<'a> {
    pub input: &'a DatasetSpec,
    pub weights: &'a ModelWeights<f32>,
    pub checkpoint_id: String,
    pub factor: usize,
    pub mask: MaskMode,
    pub output: PathBuf,
    /// One pose per source frame; overrides poses from the directory's `manifest.json`.
    pub poses: Option<Vec<CameraPose>>,
}

fn output_name(ins: &Insertion, factor: usize) -> String {
    format!("inserted/p{:06}_{}of{}.png", ins.pair, ins.index, factor)
}

/// Synthesizes all planned insertions, writing frames and the manifest under `request.output`.
/// A failing pair marks its rows as failed and processing continues.
pub fn augment_dataset(request: &AugmentRequest<'_>) -> Result<AugmentationManifest> {
    let start = Instant::now();
    ensure!(request.input.layout == Layout::FramesDir, "augmentation needs a frames-dir dataset");
    let seq = request
        .input
        .sequences()?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Dataset("no frames".into()))?;
    let n = seq.frames.len();
    let poses: Option<Vec<CameraPose>> = match &request.poses {
        Some(p) => {
            ensure!(p.len() == n, "{} poses for {n} frames", p.len());
            Some(p.clone())
        }
        None => seq.poses.iter().copied().collect(),
    };
    let plan = plan_insertions(n, request.factor)?;
    let out_dir = &request.output;
    fs::create_dir_all(out_dir.join("inserted")).map_err(|e| Error::io(out_dir, e))?;
    let names: Vec<String> = seq.frames.iter().map(|p| p.display().to_string()).collect();

    let mut rows = Vec::with_capacity(plan.len());
    let mut merged = vec![names[0].clone()];
    let mut cache: Option<(usize, Result<(Frame<f32>, Frame<f32>)>)> = None;
    for ins in &plan {
        let t0 = Instant::now();
        if cache.as_ref().is_none_or(|(p, _)| *p != ins.pair) {
            let load = |i: usize| -> Result<Frame<f32>> { Ok(load_frame(&seq.frames[i])?.with_timestamp(seq.timestamps[i])) };
            cache = Some((ins.pair, load(ins.pair).and_then(|a| Ok((a, load(ins.pair + 1)?)))));
        }
        let output = output_name(ins, request.factor);
        let pose = match &poses {
            Some(p) => Some(interpolate_pose(&p[ins.pair], &p[ins.pair + 1], ins.t)?),
            None => None,
        };
        let pair = &cache.as_ref().expect("cached pair").1;
        let result = match pair {
            Ok((a, b)) => interpolate(request.weights, a, b, ins.t as f32).and_then(|f| {
                let f = apply_aspect_mask(&f, request.mask).with_pose(pose);
                save_frame(&f, out_dir.join(&output))?;
                Ok(f.timestamp)
            }),
            Err(e) => Err(Error::Dataset(e.to_string())),
        };
        let (timestamp, error) = match result {
            Ok(ts) => (ts, None),
            Err(e) => {
                log::warn!("insertion {} of pair {} failed: {e}", ins.index, ins.pair);
                (None, Some(e.to_string()))
            }
        };
        if error.is_none() {
            merged.push(out_dir.join(&output).display().to_string());
        }
        rows.push(ManifestRow {
            source_frame_a: names[ins.pair].clone(),
            source_frame_b: names[ins.pair + 1].clone(),
            t: ins.t,
            output,
            timestamp,
            pose,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            error,
        });
        if ins.index + 1 == request.factor {
            merged.push(names[ins.pair + 1].clone());
        }
    }
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    let mut manifest = AugmentationManifest {
        header: ManifestHeader {
            factor: request.factor,
            mask_mode: request.mask,
            model_checkpoint: request.checkpoint_id.clone(),
            source_frames: n,
            inserted: rows.len() - failed,
            failed,
            total_wall_s: 0.0,
        },
        rows,
        merged,
    };
    manifest.header.total_wall_s = start.elapsed().as_secs_f64();
    manifest.write(out_dir)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub augmentation_s: f64,
    pub reconstruction_s: f64,
    pub proportion_permille: f64,
}

impl TimingReport {
    pub fn new(augmentation_s: f64, reconstruction_s: f64) -> Result<Self> {
        ensure!(reconstruction_s > 0.0, "reconstruction time must be positive");
        ensure!(augmentation_s >= 0.0, "augmentation time must be non-negative");
        Ok(Self {
            augmentation_s,
            reconstruction_s,
            proportion_permille: 1000.0 * augmentation_s / (augmentation_s + reconstruction_s),
        })
    }
}

/// Share of the augmentation in the whole augmentation + reconstruction process, in permille.
pub fn timing_report(manifest: &AugmentationManifest, reconstruction_s: f64) -> Result<TimingReport> {
    TimingReport::new(manifest.header.total_wall_s, reconstruction_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flownet::{InitScheme, NetConfig};
    use std::f64::consts::FRAC_PI_4;

    #[test]
    fn insertion_plans() {
        let p = plan_insertions(10, 2).unwrap();
        assert_eq!(p.len(), 9);
        assert!(p.iter().all(|i| i.t == 0.5));
        assert_eq!(output_frame_count(10, 2), 19);
        let p = plan_insertions(6, 5).unwrap();
        assert_eq!(p.len(), 20);
        assert_eq!(p[..4].iter().map(|i| i.t).collect::<Vec<_>>(), [0.2, 0.4, 0.6, 0.8]);
        assert_eq!(plan_insertions(2, 2).unwrap(), [Insertion { pair: 0, index: 1, t: 0.5 }]);
        assert!(plan_insertions(5, 1).is_err());
        assert!(plan_insertions(1, 2).is_err());
    }

    #[test]
    fn count_formula_exhaustive() {
        for n in 2..=20 {
            for f in 2..=6 {
                assert_eq!(plan_insertions(n, f).unwrap().len() + n, output_frame_count(n, f));
                assert_eq!(output_frame_count(n, f), n + (n - 1) * (f - 1));
            }
        }
    }

    #[test]
    fn aspect_masks() {
        assert_eq!(aspect_region(900, 1600), (0, 200, 900, 1200));
        assert_eq!(aspect_region(300, 400), (0, 0, 300, 400));
        assert_eq!(aspect_region(400, 300), (87, 0, 225, 300));
        let f = Frame::<f64>::constant(9, 16, 0.5).unwrap();
        let m = apply_aspect_mask(&f, MaskMode::FourByThree);
        let (_, l, _, w) = aspect_region(9, 16);
        assert_eq!((l, w), (2, 12));
        assert_eq!(m.pixels()[[0, 4, 1]], 0.0);
        assert_eq!(m.pixels()[[0, 4, 2]], 0.5);
        assert_eq!(m.pixels()[[2, 4, 13]], 0.5);
        assert_eq!(m.pixels()[[2, 4, 14]], 0.0);
        assert_eq!(apply_aspect_mask(&m, MaskMode::FourByThree), m);
        assert_eq!(apply_aspect_mask(&f, MaskMode::None), f);
        let square43 = Frame::<f64>::constant(6, 8, 0.25).unwrap();
        assert_eq!(apply_aspect_mask(&square43, MaskMode::FourByThree), square43);
    }

    #[test]
    fn pose_examples() {
        let a = CameraPose::new([0.0; 3], [1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = CameraPose::new([2.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(interpolate_pose(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate_pose(&a, &b, 0.5).unwrap().translation, [1.0, 0.0, 0.0]);
        let z90 = CameraPose::new([0.0; 3], [FRAC_PI_4.cos(), 0.0, 0.0, FRAC_PI_4.sin()]).unwrap();
        let mid = interpolate_pose(&a, &z90, 0.5).unwrap();
        let h = std::f64::consts::PI / 8.0;
        let want = [h.cos(), 0.0, 0.0, h.sin()];
        for i in 0..4 {
            assert!((mid.rotation[i] - want[i]).abs() < 1e-12);
        }
        // the negated quaternion is the same rotation; the short arc is taken
        let neg = CameraPose { rotation: z90.rotation.map(|v| -v), ..z90 };
        let mid2 = interpolate_pose(&a, &neg, 0.5).unwrap();
        for i in 0..4 {
            assert!((mid2.rotation[i] - want[i]).abs() < 1e-12);
        }
        assert!(interpolate_pose(&a, &b, 1.5).is_err());
        let zero = CameraPose { translation: [0.0; 3], rotation: [0.0; 4] };
        assert!(interpolate_pose(&a, &zero, 0.5).is_err());
    }

    #[test]
    fn timing_examples() {
        let r = TimingReport::new(7.69, 13490.0 - 7.69).unwrap();
        assert!((r.proportion_permille - 0.57).abs() < 0.005, "{}", r.proportion_permille);
        assert_eq!(TimingReport::new(0.0, 10.0).unwrap().proportion_permille, 0.0);
        assert_eq!(TimingReport::new(5.0, 5.0).unwrap().proportion_permille, 500.0);
        assert!(TimingReport::new(1.0, 0.0).is_err());
    }

    fn zero_weights() -> ModelWeights<f32> {
        ModelWeights::init(&NetConfig::uniform(2, 2), InitScheme::ZeroHeads, 0).unwrap()
    }

    #[test]
    fn constant_pair_is_absorbed() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        fs::create_dir_all(&src).unwrap();
        for name in ["a.png", "b.png"] {
            save_frame(&Frame::<f32>::constant(12, 16, 0.6).unwrap(), src.join(name)).unwrap();
        }
        let spec = DatasetSpec::new(&src, Layout::FramesDir);
        let weights = zero_weights();
        let req = AugmentRequest {
            input: &spec,
            weights: &weights,
            checkpoint_id: "zero".into(),
            factor: 2,
            mask: MaskMode::None,
            output: dir.path().join("out"),
            poses: Some(vec![
                CameraPose::identity(),
                CameraPose::new([1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]).unwrap(),
            ]),
        };
        let m = augment_dataset(&req).unwrap();
        assert_eq!(m.rows.len(), 1);
        assert_eq!(m.merged.len(), 3);
        assert_eq!(m.rows[0].pose.unwrap().translation, [0.5, 0.0, 0.0]);
        let out = load_frame::<f32>(dir.path().join("out").join(&m.rows[0].output)).unwrap();
        let orig = load_frame::<f32>(src.join("a.png")).unwrap();
        assert_eq!(out.pixels(), orig.pixels());
        assert_eq!(AugmentationManifest::read(dir.path().join("out")).unwrap(), m);
        let again = augment_dataset(&req).unwrap();
        assert_eq!(again.without_timing(), m.without_timing());
    }

    #[test]
    fn unreadable_pair_is_marked_failed() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        fs::create_dir_all(&src).unwrap();
        save_frame(&Frame::<f32>::constant(8, 8, 0.2).unwrap(), src.join("a.png")).unwrap();
        fs::write(src.join("b.png"), b"not an image").unwrap();
        save_frame(&Frame::<f32>::constant(8, 8, 0.2).unwrap(), src.join("c.png")).unwrap();
        let spec = DatasetSpec::new(&src, Layout::FramesDir);
        let weights = zero_weights();
        let m = augment_dataset(&AugmentRequest {
            input: &spec,
            weights: &weights,
            checkpoint_id: "zero".into(),
            factor: 3,
            mask: MaskMode::FourByThree,
            output: dir.path().join("out"),
            poses: None,
        })
        .unwrap();
        assert_eq!(m.rows.len(), 4);
        assert_eq!(m.header.failed, 4);
        assert!(m.rows.iter().all(|r| r.error.is_some() && r.pose.is_none()));
        assert_eq!(m.merged.len(), 3);
    }
}
