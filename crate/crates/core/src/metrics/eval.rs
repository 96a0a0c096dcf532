//! Per-sample evaluation over triplet or frames-dir datasets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{interpolation_error, psnr, ssim, PerceptualMetric};
use crate::data::{DatasetSpec, Layout};
use crate::error::{Error, Result};
use crate::flownet::{interpolate, ModelWeights};
use crate::imaging::{load_frame, Frame};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub t: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub ie: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

/// Aggregates; infinite PSNR values are excluded from `psnr_mean` and counted in `psnr_infinite`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub dataset: String,
    pub checkpoint: String,
    pub n: usize,
    pub psnr_mean: Option<f64>,
    pub ssim_mean: f64,
    pub ie_mean: f64,
    pub psnr_infinite: usize,
    pub skipped: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra_means: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: EvalSummary,
}

pub struct EvalOptions<'a, T: Real> {
    pub extra_metrics: Vec<&'a dyn PerceptualMetric<T>>,
}

impl<T: Real> Default for EvalOptions<'_, T> {
    fn default() -> Self {
        Self { extra_metrics: Vec::new() }
    }
}

/// One evaluation item: inputs, target and timestep, still on disk.
struct Item {
    id: String,
    load: Box<dyn Fn() -> Result<[Frame<f32>; 3]>>,
}

fn items(dataset: &DatasetSpec) -> Result<Vec<Item>> {
    let seqs = dataset.sequences()?;
    let mut out = Vec::new();
    match dataset.layout {
        Layout::Triplet => {
            for seq in seqs {
                let s = seq.clone();
                out.push(Item {
                    id: seq.id,
                    load: Box::new(move || {
                        let [a, b, c]: [Frame<f32>; 3] = s.load()?.try_into().expect("three frames");
                        Ok([a, b, c])
                    }),
                });
            }
        }
        Layout::FramesDir => {
            for seq in seqs {
                for i in 0..seq.frames.len().saturating_sub(2) {
                    let paths = seq.frames[i..i + 3].to_vec();
                    let ts = seq.timestamps[i..i + 3].to_vec();
                    let name = paths[1].file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                    out.push(Item {
                        id: name,
                        load: Box::new(move || {
                            let load = |k: usize| -> Result<Frame<f32>> { Ok(load_frame(&paths[k])?.with_timestamp(ts[k])) };
                            Ok([load(0)?, load(1)?, load(2)?])
                        }),
                    });
                }
            }
        }
        Layout::Septuplet => {
            return Err(Error::Dataset("evaluation supports triplet and frames-dir layouts".into()));
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset("dataset has no evaluation samples".into()));
    }
    Ok(out)
}

/// Timestep of the middle frame: from timestamps when all three are known, else 0.5.
fn timestep(frames: &[Frame<f32>; 3]) -> f64 {
    match (frames[0].timestamp, frames[1].timestamp, frames[2].timestamp) {
        (Some(a), Some(m), Some(b)) if b != a => (m - a) / (b - a),
        _ => 0.5,
    }
}

/// Interpolates the middle frame of every sample and scores it. Unreadable
/// samples are logged and skipped.
pub fn evaluate(
    weights: &ModelWeights<f32>,
    checkpoint_id: &str,
    dataset: &DatasetSpec,
    options: &EvalOptions<'_, f32>,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    let mut skipped = 0;
    for item in items(dataset)? {
        let frames = match (item.load)() {
            Ok(f) => f,
            Err(e) => {
                log::warn!("skipping sample {}: {e}", item.id);
                skipped += 1;
                continue;
            }
        };
        let t = timestep(&frames);
        let pred = interpolate(weights, &frames[0], &frames[2], t as f32)?;
        let (p, g) = (pred.pixels().view(), frames[1].pixels().view());
        let mut extra = BTreeMap::new();
        for m in &options.extra_metrics {
            extra.insert(m.name().to_string(), m.distance(&p, &g)?);
        }
        rows.push(EvalRow {
            id: item.id,
            t,
            psnr: psnr(&p, &g)?,
            ssim: ssim(&p, &g)?,
            ie: interpolation_error(&p, &g)?,
            extra,
        });
    }
    if rows.is_empty() {
        return Err(Error::Dataset("no readable samples".into()));
    }
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    let summary = summarize(&rows, dataset.root.display().to_string(), checkpoint_id.to_string(), skipped);
    Ok(EvalReport { rows, summary })
}

fn summarize(rows: &[EvalRow], dataset: String, checkpoint: String, skipped: usize) -> EvalSummary {
    let n = rows.len();
    let finite: Vec<f64> = rows.iter().map(|r| r.psnr).filter(|p| p.is_finite()).collect();
    let mean = |it: &mut dyn Iterator<Item = f64>| it.sum::<f64>() / n as f64;
    let mut extra_means = BTreeMap::new();
    for key in rows[0].extra.keys() {
        extra_means.insert(key.clone(), mean(&mut rows.iter().filter_map(|r| r.extra.get(key).copied())));
    }
    EvalSummary {
        dataset,
        checkpoint,
        n,
        psnr_mean: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
        ssim_mean: mean(&mut rows.iter().map(|r| r.ssim)),
        ie_mean: mean(&mut rows.iter().map(|r| r.ie)),
        psnr_infinite: n - finite.len(),
        skipped,
        extra_means,
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let keys: Vec<&String> = self.rows.first().map(|r| r.extra.keys().collect()).unwrap_or_default();
        let mut out = String::from("id,t,psnr,ssim,ie");
        for k in &keys {
            out.push(',');
            out.push_str(&csv_field(k));
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{},{}", csv_field(&r.id), r.t, r.psnr, r.ssim, r.ie);
            for k in &keys {
                let _ = write!(out, ",{}", r.extra.get(*k).copied().unwrap_or(f64::NAN));
            }
            out.push('\n');
        }
        out
    }

    /// Writes `<path>.csv` (per-sample rows) and `<path>.json` (summary); returns both paths.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let path = path.as_ref();
        let csv = path.with_extension("csv");
        let json = path.with_extension("json");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        fs::write(&json, serde_json::to_string_pretty(&self.summary)?).map_err(|e| Error::io(&json, e))?;
        Ok((csv, json))
    }
}
