//! The run configuration: one JSON document with a section per stage.
//! Command-line flags are applied on top of the file, which is applied on
//! top of the defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::FilterCriteria;
use crate::error::{Error, Result};
use crate::inference::PredictConfig;
use crate::models::{Head, ModelConfig, Variant};
use crate::spectrogram::SpectrogramConfig;
use crate::trainer::TrainConfig;
use crate::util::{read_json, stable_hash};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of `*.wav` files with same-stem `*.txt` annotations.
    pub dataset_dir: PathBuf,
    /// Root for every artifact a run writes.
    pub work_dir: PathBuf,
    /// Train / validation / test fractions.
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
    pub filter: FilterCriteria,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("data"),
            work_dir: PathBuf::from("work"),
            split_ratios: [0.7, 0.2, 0.1],
            split_seed: 42,
            filter: FilterCriteria::default(),
        }
    }
}

/// Optional edits to a head's default architecture.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchOverrides {
    pub conv_filters: Option<Vec<usize>>,
    pub dense_units: Option<Vec<usize>>,
    pub kernel: Option<[usize; 2]>,
    pub padding: Option<usize>,
    pub pool: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub variant: Variant,
    pub classifier: ArchOverrides,
    pub regressor: ArchOverrides,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self { variant: Variant::Default, classifier: ArchOverrides::default(), regressor: ArchOverrides::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub thresholds: Vec<f64>,
    pub overlaps: Vec<usize>,
    pub vote_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.9, 0.75, 0.5],
            overlaps: vec![1, 5, 10, 25],
            vote_fractions: vec![0.05, 0.1, 0.2, 0.4],
            seeds: vec![42, 43, 44, 45, 46],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub spectrogram: SpectrogramConfig,
    pub models: ModelsConfig,
    pub train: TrainConfig,
    pub predict: PredictConfig,
    pub sweep: SweepConfig,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
    pub vote_fraction: Option<f64>,
    pub overlap: Option<usize>,
    pub work_dir: Option<PathBuf>,
    pub dataset_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults, then `path` if given, then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.train.seed = s;
        }
        if let Some(t) = o.threshold {
            self.predict.threshold = t;
        }
        if let Some(v) = o.vote_fraction {
            self.predict.vote_fraction = v;
        }
        if let Some(n) = o.overlap {
            self.predict.overlap = n;
        }
        if let Some(d) = &o.work_dir {
            self.data.work_dir = d.clone();
        }
        if let Some(d) = &o.dataset_dir {
            self.data.dataset_dir = d.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.predict.validate()?;
        let sum: f64 = self.data.split_ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.data.split_ratios.iter().any(|r| *r < 0.0) {
            return Err(Error::InvalidConfig(format!("split ratios {:?} must be non-negative and sum to 1", self.data.split_ratios)));
        }
        let s = &self.sweep;
        if s.thresholds.is_empty() || s.overlaps.is_empty() || s.vote_fractions.is_empty() || s.seeds.is_empty() {
            return Err(Error::InvalidConfig("sweep grid axes and seeds must be non-empty".into()));
        }
        for head in [Head::Classifier, Head::Regressor] {
            self.model_config(head).validate()?;
        }
        Ok(())
    }

    /// Hash of the configuration without its directory paths, embedded in
    /// run outputs so moving a work directory keeps its artifacts valid.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.data.dataset_dir = PathBuf::new();
        c.data.work_dir = PathBuf::new();
        stable_hash(&c)
    }

    pub fn window_bins(&self) -> usize {
        self.spectrogram.window_bins(self.predict.window_s)
    }

    pub fn model_config(&self, head: Head) -> ModelConfig {
        let mut m = ModelConfig::for_head(head, [self.window_bins(), self.spectrogram.n_mels]);
        let o = match head {
            Head::Classifier => &self.models.classifier,
            Head::Regressor => &self.models.regressor,
        };
        if let Some(v) = &o.conv_filters {
            m.conv_filters = v.clone();
        }
        if let Some(v) = &o.dense_units {
            m.dense_units = v.clone();
        }
        if let Some(k) = o.kernel {
            m.kernel = k;
        }
        if let Some(p) = o.padding {
            m.padding = p;
        }
        if let Some(p) = o.pool {
            m.pool = p;
        }
        m.dropout_p = self.train.dropout_p;
        m.variant(self.models.variant)
    }
}
