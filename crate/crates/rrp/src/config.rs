//! One JSON document configuring every command.

use std::fs;
use std::path::{Path, PathBuf};

use rrp_core::data::{synth_scene, Sample, SceneConfig};
use rrp_core::labeling::LabelConfig;
use rrp_core::model::{Model, ModelConfig};
use rrp_core::rram::RramConfig;
use rrp_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::annotations::load_dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Scenes written by `synth`.
    pub n_images: usize,
    /// Synthetic training scenes when no training directory is given.
    pub n_train: usize,
    /// Synthetic test scenes when no test directory is given.
    pub n_test: usize,
    /// Scene index of the first synthetic test image.
    pub test_offset: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_images: 8,
            n_train: 200,
            n_test: 50,
            test_offset: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset directory with `annotations.jsonl`; synthetic when absent.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    pub r_values: Vec<usize>,
    pub gcn_layers: Vec<usize>,
    /// Overrides `train.epochs` for every ablation run.
    pub epochs: Option<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            r_values: vec![4, 8, 16, 32],
            gcn_layers: vec![0, 1, 2, 3],
            epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training and initialization seed; copied into `train.seed` on resolve.
    pub seed: Option<u64>,
    pub scene: SceneConfig,
    pub label: LabelConfig,
    pub model: ModelConfig,
    pub rram: RramConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies command-line overrides and makes the seed explicit.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed.or(self.seed) {
            self.train.seed = s;
        }
        self.seed = Some(self.train.seed);
        if let Some(o) = out {
            self.paths.out = o;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        self.model()?;
        Ok(())
    }

    pub fn model(&self) -> Result<Model> {
        Ok(Model::new(
            self.model.clone(),
            self.train.rram_enabled.then(|| self.rram.clone()),
            self.label.clone(),
        )?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved config as `config.json` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        fs::write(&path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn synth_samples(&self, first: u64, n: usize) -> Result<Vec<Sample>> {
        (first..first + n as u64)
            .map(|i| {
                let (img, ann) = synth_scene(&self.scene, i)?;
                Ok(Sample::new(img, ann)?)
            })
            .collect()
    }

    pub fn train_set(&self) -> Result<Vec<Sample>> {
        match &self.paths.train {
            Some(dir) => load_dataset(dir),
            None => self.synth_samples(0, self.data.n_train),
        }
    }

    pub fn test_set(&self) -> Result<Vec<Sample>> {
        match &self.paths.test {
            Some(dir) => load_dataset(dir),
            None => self.synth_samples(self.data.test_offset, self.data.n_test),
        }
    }
}
