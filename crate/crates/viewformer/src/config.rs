//! Run configuration, stored as pretty-printed JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use viewformer_core::codebook::CodebookConfig;
use viewformer_core::model::ModelConfig;
use viewformer_core::optim::AdamConfig;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Total scenes, train and test together.
    pub scenes: usize,
    pub test_scenes: usize,
    pub views: usize,
    pub image_size: usize,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scenes: 2000,
            test_scenes: 200,
            views: 10,
            image_size: 32,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    /// Final learning rate as a fraction of `lr`.
    pub lr_floor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            steps: 1000,
            batch: 16,
            lr: 3e-4,
            warmup: 50,
            lr_floor: 0.1,
        }
    }
}

impl Schedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        viewformer_core::optim::cosine_lr(self.lr, step, self.steps, self.warmup, self.lr_floor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub context_sizes: Vec<usize>,
    /// Limit on evaluated test episodes; `None` uses all of them.
    pub episodes: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            context_sizes: vec![1, 2, 3, 5],
            episodes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub ns: Vec<usize>,
    pub k: usize,
    pub d_m: usize,
    pub heads: usize,
    pub n_min: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            ns: vec![4, 8, 16, 32],
            k: 4,
            d_m: 128,
            heads: 4,
            n_min: 2,
            repeats: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub data: DataConfig,
    pub codebook: CodebookConfig,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub codebook_training: Schedule,
    pub transformer_training: Schedule,
    /// False trains the image task alone ("no-loc").
    pub localization: bool,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: PathBuf::from("data"),
            out: PathBuf::from("run"),
            data: DataConfig::default(),
            codebook: CodebookConfig::default(),
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            codebook_training: Schedule {
                steps: 3000,
                lr: 3e-4,
                warmup: 100,
                ..Schedule::default()
            },
            transformer_training: Schedule {
                steps: 2000,
                lr: 1e-4,
                warmup: 100,
                ..Schedule::default()
            },
            localization: true,
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text + "\n").map_err(Error::io(path))
    }

    pub fn validate(&self) -> Result<()> {
        self.codebook.validate()?;
        self.model.validate()?;
        let d = &self.data;
        if d.test_scenes >= d.scenes {
            return Err(Error::Config(format!(
                "{} test scenes leave no training scenes out of {}",
                d.test_scenes, d.scenes
            )));
        }
        if d.image_size != self.codebook.image_size {
            return Err(Error::Config(format!(
                "dataset image size {} differs from codebook image size {}",
                d.image_size, self.codebook.image_size
            )));
        }
        if self.codebook.k != self.model.k || self.codebook.n_lat != self.model.n_lat {
            return Err(Error::Config("codebook and model disagree on k or n_lat".into()));
        }
        if d.views < self.model.n {
            return Err(Error::Config(format!(
                "episodes have {} views, model needs {}",
                d.views, self.model.n
            )));
        }
        for &c in &self.eval.context_sizes {
            if c == 0 || c >= self.model.n || c >= d.views {
                return Err(Error::Config(format!("context size {c} outside 1..{}", self.model.n)));
            }
        }
        if self.codebook_training.batch == 0 || self.transformer_training.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn tokens_dir(&self) -> PathBuf {
        self.out.join("tokens")
    }

    pub fn codebook_path(&self) -> PathBuf {
        self.out.join("codebook.ckpt")
    }

    pub fn transformer_path(&self) -> PathBuf {
        self.out.join("transformer.ckpt")
    }
}
