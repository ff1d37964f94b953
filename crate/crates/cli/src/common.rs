//! Pieces shared by several commands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args as ClapArgs;
use range_al::al_loop::AlData;
use range_al::config::{manifest_data, synthetic_data, ExperimentConfig};
use range_al::dataset_io::{DatasetManifest, LabelMap};

/// Experiment configuration flags.
#[derive(ClapArgs, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Experiment configuration (TOML); unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the reduced desk-scale preset instead of the full-scale defaults.
    #[arg(long)]
    pub desk_scale: bool,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<ExperimentConfig> {
        load_config(self.config.as_deref(), self.desk_scale)
    }
}

pub fn load_config(path: Option<&Path>, desk_scale: bool) -> Result<ExperimentConfig> {
    let base = if desk_scale {
        ExperimentConfig::desk_scale()
    } else {
        ExperimentConfig::default()
    };
    match path {
        None => Ok(base),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::parse_over(&text, &base).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

/// Where pool and test images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    Manifest { manifest: PathBuf, label_map: PathBuf },
}

impl DataSource {
    pub fn new(manifest: Option<PathBuf>, label_map: Option<PathBuf>) -> Result<Self> {
        match (manifest, label_map) {
            (None, None) => Ok(Self::Synthetic),
            (Some(manifest), Some(label_map)) => Ok(Self::Manifest { manifest, label_map }),
            (Some(_), None) => bail!("a dataset manifest needs a label map"),
            (None, Some(_)) => bail!("a label map was given without a dataset manifest"),
        }
    }

    /// Pool and test images plus the class count.
    pub fn load(&self, cfg: &ExperimentConfig, seed: u64) -> Result<(AlData, usize)> {
        match self {
            Self::Synthetic => Ok((synthetic_data(cfg, seed)?, cfg.classes)),
            Self::Manifest { manifest, label_map } => {
                let m = DatasetManifest::load(manifest)?;
                let text =
                    fs::read_to_string(label_map).with_context(|| format!("reading {}", label_map.display()))?;
                let map = LabelMap::parse(&text)?;
                let (data, _) = manifest_data(cfg, &m, &map, seed)?;
                Ok((data, map.num_classes()))
            }
        }
    }
}

/// Dataset flags of commands that rebuild the experiment data.
#[derive(ClapArgs, Debug, Clone, Default)]
pub struct DataArgs {
    /// Dataset manifest (`scan labels` per line); synthetic scenes when unset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Label map of the dataset.
    #[arg(long)]
    pub label_map: Option<PathBuf>,
}

impl DataArgs {
    pub fn source(&self) -> Result<DataSource> {
        DataSource::new(self.dataset.clone(), self.label_map.clone())
    }
}

/// Seed from `RANGE_AL_SEED`, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var("RANGE_AL_SEED") {
        Ok(s) => Ok(Some(
            s.trim().parse().with_context(|| format!("RANGE_AL_SEED `{s}` is not an unsigned integer"))?,
        )),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => bail!("RANGE_AL_SEED: {e}"),
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
