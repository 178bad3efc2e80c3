//! Run manifest: everything needed to repeat a training run bit for bit.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gdcunet::data::{load_dataset, synth_set, LoadConfig, SamplePair, SynthConfig};
use gdcunet::{GdcUnetConfig, SafdHyper, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic { synth: SynthConfig, train_first_seed: u64, train_count: usize, test_first_seed: u64, test_count: usize },
    Directory { root: PathBuf, load: LoadConfig },
}

impl DataSource {
    pub fn load(&self) -> Result<(Vec<SamplePair>, Vec<SamplePair>)> {
        Ok(match self {
            DataSource::Synthetic { synth, train_first_seed, train_count, test_first_seed, test_count } => (
                synth_set(*train_first_seed, *train_count, synth)?,
                synth_set(*test_first_seed, *test_count, synth)?,
            ),
            DataSource::Directory { root, load } => load_dataset(root, load)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub epoch_log: PathBuf,
    pub manifest: PathBuf,
}

impl Artifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Artifacts {
            best_checkpoint: dir.join("best.gdcu"),
            final_checkpoint: dir.join("final.gdcu"),
            epoch_log: dir.join("epochs.csv"),
            manifest: dir.join("manifest.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub precision: Precision,
    pub model: GdcUnetConfig,
    /// Resolved operator hyperparameters of `model.safd_setting`, for reference.
    pub safd: SafdHyper,
    pub train: TrainConfig,
    pub data: DataSource,
    pub artifacts: Artifacts,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    pub fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&self.artifacts.manifest, text + "\n")
            .with_context(|| format!("writing manifest {}", self.artifacts.manifest.display()))
    }
}
