//! On-disk dataset layouts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_frame, CameraPose, Frame};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// `sequences/<clip>/im1.png .. im3.png`
    Triplet,
    /// `sequences/<clip>/im1.png .. im7.png`
    Septuplet,
    /// A flat directory of image files in lexicographic order.
    FramesDir,
}

impl Layout {
    /// Frames per sequence, or `None` for a frames directory (any count ≥ 2).
    pub fn sequence_len(self) -> Option<usize> {
        match self {
            Layout::Triplet => Some(3),
            Layout::Septuplet => Some(7),
            Layout::FramesDir => None,
        }
    }
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplet" => Ok(Layout::Triplet),
            "septuplet" => Ok(Layout::Septuplet),
            "frames" | "frames-dir" => Ok(Layout::FramesDir),
            other => Err(Error::Config(format!("unknown dataset layout `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub layout: Layout,
    /// Newline-separated clip paths relative to `root/sequences`.
    #[serde(default)]
    pub list_file: Option<PathBuf>,
}

/// Per-frame metadata entry of a frames-dir `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub file: String,
    #[serde(default)]
    pub timestamp: Option<f64>,
    #[serde(default)]
    pub pose: Option<CameraPose>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum ManifestFile {
    Wrapped { frames: Vec<FrameMeta> },
    Bare(Vec<FrameMeta>),
}

/// Paths and metadata of one sequence, resolved but not yet decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRef {
    pub id: String,
    pub frames: Vec<PathBuf>,
    pub timestamps: Vec<Option<f64>>,
    pub poses: Vec<Option<CameraPose>>,
}

impl SequenceRef {
    fn plain(id: String, frames: Vec<PathBuf>) -> Self {
        let n = frames.len();
        Self {
            id,
            frames,
            timestamps: vec![None; n],
            poses: vec![None; n],
        }
    }

    pub fn load<T: Real>(&self) -> Result<Vec<Frame<T>>> {
        self.frames
            .iter()
            .zip(&self.timestamps)
            .zip(&self.poses)
            .map(|((p, ts), pose)| Ok(load_frame(p)?.with_timestamp(*ts).with_pose(*pose)))
            .collect()
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, layout: Layout) -> Self {
        Self {
            root: root.into(),
            layout,
            list_file: None,
        }
    }

    pub fn with_list_file(mut self, list: impl Into<PathBuf>) -> Self {
        self.list_file = Some(list.into());
        self
    }

    /// Resolves every sequence, checking that each has the frame count the layout requires.
    pub fn sequences(&self) -> Result<Vec<SequenceRef>> {
        match self.layout.sequence_len() {
            Some(n) => self.clip_sequences(n),
            None => Ok(vec![self.frames_dir()?]),
        }
    }

    fn clip_sequences(&self, n: usize) -> Result<Vec<SequenceRef>> {
        let seq_root = self.root.join("sequences");
        let clips: Vec<String> = match &self.list_file {
            Some(list) => {
                let list = if list.is_absolute() { list.clone() } else { self.root.join(list) };
                fs::read_to_string(&list)
                    .map_err(|e| Error::io(&list, e))?
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect()
            }
            None => {
                let mut found = Vec::new();
                collect_clips(&seq_root, &seq_root, &mut found)?;
                found
            }
        };
        if clips.is_empty() {
            return Err(Error::Dataset(format!("no sequences under {}", seq_root.display())));
        }
        clips
            .into_iter()
            .map(|clip| {
                let dir = seq_root.join(&clip);
                let frames: Vec<PathBuf> = (1..=n).map(|i| dir.join(format!("im{i}.png"))).collect();
                if let Some(missing) = frames.iter().find(|p| !p.is_file()) {
                    return Err(Error::Dataset(format!(
                        "sequence {clip} needs {n} frames; missing {}",
                        missing.display()
                    )));
                }
                Ok(SequenceRef::plain(clip, frames))
            })
            .collect()
    }

    fn frames_dir(&self) -> Result<SequenceRef> {
        let frames: Vec<PathBuf> = read_dir_sorted(&self.root)?.into_iter().filter(|p| is_image(p)).collect();
        if frames.len() < 2 {
            return Err(Error::Dataset(format!(
                "{} holds {} image(s); at least 2 are required",
                self.root.display(),
                frames.len()
            )));
        }
        let id = self.root.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut seq = SequenceRef::plain(id, frames);
        let manifest = self.root.join("manifest.json");
        if manifest.is_file() {
            let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
            let entries = match serde_json::from_str(&text)? {
                ManifestFile::Wrapped { frames } | ManifestFile::Bare(frames) => frames,
            };
            for meta in entries {
                if let Some(i) = seq.frames.iter().position(|p| p.file_name().is_some_and(|f| f == meta.file.as_str())) {
                    seq.timestamps[i] = meta.timestamp;
                    seq.poses[i] = match meta.pose {
                        Some(p) => Some(CameraPose::new(p.translation, p.rotation)?),
                        None => None,
                    };
                }
            }
        }
        Ok(seq)
    }
}

fn collect_clips(base: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    if dir.join("im1.png").is_file() {
        let rel = dir.strip_prefix(base).unwrap_or(dir);
        out.push(rel.to_string_lossy().replace('\\', "/"));
        return Ok(());
    }
    if !dir.is_dir() {
        return Ok(());
    }
    for child in read_dir_sorted(dir)? {
        if child.is_dir() {
            collect_clips(base, &child, out)?;
        }
    }
    Ok(())
}

/// Reads camera poses, one per frame, from JSON lines or a JSON array.
pub fn load_poses(path: impl AsRef<Path>) -> Result<Vec<CameraPose>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<CameraPose> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text)?
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?
    };
    raw.into_iter().map(|p| CameraPose::new(p.translation, p.rotation)).collect()
}
