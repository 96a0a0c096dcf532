//! Training-run configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainData};
use crate::data::{DatasetSpec, DiskSource, Layout, TranslatingTextures};
use crate::error::{Error, Result};
use crate::flownet::{load_checkpoint, Checkpoint, InitScheme, ModelWeights, NetConfig};

/// Procedurally generated training sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticData {
    pub generator: TranslatingTextures,
    pub triplets: usize,
    pub septuplets: usize,
    pub seed: u64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self {
            generator: TranslatingTextures::default(),
            triplets: 500,
            septuplets: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Triplet dataset for fixed-timestep batches.
    pub fixed: Option<DatasetSpec>,
    /// Septuplet dataset for arbitrary-timestep batches.
    pub arbitrary: Option<DatasetSpec>,
    pub synthetic: Option<SyntheticData>,
}

/// Everything `train --config` needs, read from TOML:
///
/// ```toml
/// output = "runs/demo"
/// teacher = true
///
/// [net]
/// base = { stem_channels = 8, group_channels = 8, deconv_channels = [8, 8] }
///
/// [train]
/// total_epochs = 4
/// batch_size = 4
///
/// [data.synthetic]
/// triplets = 500
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub output: PathBuf,
    /// Resume from this checkpoint instead of initializing fresh weights.
    pub init_checkpoint: Option<PathBuf>,
    pub init_seed: u64,
    /// Distill from the block-matching teacher while the cutoff allows.
    pub teacher: bool,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output: PathBuf::from("run"),
            init_checkpoint: None,
            init_seed: 0,
            teacher: true,
            net: NetConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.net.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Reads a config; relative paths inside it resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.output);
        if let Some(p) = &mut cfg.init_checkpoint {
            fix(p);
        }
        for spec in [&mut cfg.data.fixed, &mut cfg.data.arbitrary].into_iter().flatten() {
            fix(&mut spec.root);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn initial_checkpoint(&self) -> Result<Checkpoint> {
        match &self.init_checkpoint {
            Some(p) => {
                let ckpt = load_checkpoint(p)?;
                if *ckpt.weights.config() != self.net {
                    return Err(Error::Config(format!("{} was trained with a different net config", p.display())));
                }
                Ok(ckpt)
            }
            None => Ok(Checkpoint::new(
                ModelWeights::init(&self.net, InitScheme::ZeroHeads, self.init_seed)?,
                self.train.seed,
            )),
        }
    }

    pub fn build_data(&self) -> Result<TrainData> {
        let mut data = TrainData::default();
        if let Some(syn) = &self.data.synthetic {
            if syn.triplets > 0 {
                data.fixed = Some(Box::new(syn.generator.generate::<f32>(syn.triplets, 3, syn.seed)?));
            }
            if syn.septuplets > 0 {
                let seed = syn.seed.wrapping_add(syn.triplets as u64);
                data.arbitrary = Some(Box::new(syn.generator.generate::<f32>(syn.septuplets, 7, seed)?));
            }
        }
        let disk = |spec: &DatasetSpec, layout: Layout| -> Result<DiskSource> {
            if spec.layout != layout {
                return Err(Error::Config(format!("expected a {layout:?} dataset at {}", spec.root.display())));
            }
            Ok(DiskSource(spec.sequences()?))
        };
        if let Some(spec) = &self.data.fixed {
            data.fixed = Some(Box::new(disk(spec, Layout::Triplet)?));
        }
        if let Some(spec) = &self.data.arbitrary {
            data.arbitrary = Some(Box::new(disk(spec, Layout::Septuplet)?));
        }
        if data.fixed.is_none() && data.arbitrary.is_none() {
            return Err(Error::Config("no training data configured".into()));
        }
        Ok(data)
    }
}
