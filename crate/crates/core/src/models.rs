//! The two detector CNNs and their architecture variants.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{load_network, save_network, LayerSpec, Network, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// One sigmoid unit: probability that the window holds a sound.
    Classifier,
    /// Two units: offset in [-0.5, 0.5] and scale in (0, 1).
    Regressor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `[time rows, mel bins]` of one window.
    pub input_shape: [usize; 2],
    pub conv_filters: Vec<usize>,
    pub kernel: [usize; 2],
    #[serde(default = "default_padding")]
    pub padding: usize,
    pub pool: [usize; 2],
    pub dense_units: Vec<usize>,
    pub head: Head,
    pub dropout_p: f32,
}

fn default_padding() -> usize {
    1
}

/// Named architecture variants; each is a plain [`ModelConfig`] edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Default,
    Bigger,
    Smaller,
    IncreasedCnnLayers,
}

impl ModelConfig {
    pub fn classifier(input_shape: [usize; 2]) -> Self {
        Self {
            input_shape,
            conv_filters: vec![8, 16, 16],
            kernel: [3, 3],
            padding: 1,
            pool: [2, 2],
            dense_units: vec![256, 256],
            head: Head::Classifier,
            dropout_p: 0.2,
        }
    }

    pub fn regressor(input_shape: [usize; 2]) -> Self {
        Self { dense_units: vec![512, 512], head: Head::Regressor, ..Self::classifier(input_shape) }
    }

    pub fn for_head(head: Head, input_shape: [usize; 2]) -> Self {
        match head {
            Head::Classifier => Self::classifier(input_shape),
            Head::Regressor => Self::regressor(input_shape),
        }
    }

    pub fn variant(mut self, variant: Variant) -> Self {
        match variant {
            Variant::Default => {}
            Variant::Bigger => {
                self.conv_filters.iter_mut().for_each(|f| *f *= 2);
                self.dense_units.iter_mut().for_each(|u| *u *= 2);
            }
            Variant::Smaller => {
                self.conv_filters.iter_mut().for_each(|f| *f = (*f / 2).max(1));
                self.dense_units.iter_mut().for_each(|u| *u = (*u / 2).max(1));
            }
            Variant::IncreasedCnnLayers => {
                let last = *self.conv_filters.last().unwrap_or(&16);
                self.conv_filters.push(last * 2);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_filters.is_empty() || self.dense_units.is_empty() {
            return Err(Error::InvalidConfig("conv_filters and dense_units must be non-empty".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        let (mut h, mut w) = (self.input_shape[0], self.input_shape[1]);
        for (i, _) in self.conv_filters.iter().enumerate() {
            h = (h + 2 * self.padding).saturating_sub(self.kernel[0] - 1);
            w = (w + 2 * self.padding).saturating_sub(self.kernel[1] - 1);
            if h < self.pool[0] || w < self.pool[1] {
                return Err(Error::InvalidConfig(format!(
                    "conv block {i} leaves {h}x{w}, smaller than the {}x{} pool",
                    self.pool[0], self.pool[1]
                )));
            }
            h /= self.pool[0];
            w /= self.pool[1];
        }
        Ok(())
    }

    /// The layer stack this config describes.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for &filters in &self.conv_filters {
            specs.push(LayerSpec::Conv2d { filters, kernel: self.kernel, stride: 1, padding: self.padding });
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::Maxpool2d { pool: self.pool, floor: true });
        }
        specs.push(LayerSpec::Flatten);
        for &units in &self.dense_units {
            specs.push(LayerSpec::Dense { units });
            specs.push(LayerSpec::Relu);
            if self.dropout_p > 0.0 {
                specs.push(LayerSpec::Dropout { p: self.dropout_p });
            }
        }
        match self.head {
            Head::Classifier => {
                specs.push(LayerSpec::Dense { units: 1 });
                specs.push(LayerSpec::Sigmoid);
            }
            Head::Regressor => {
                specs.push(LayerSpec::Dense { units: 2 });
                specs.push(LayerSpec::IntervalHead);
            }
        }
        specs
    }
}

/// A network together with the configs that produced it.
#[derive(Debug, Clone)]
pub struct Model {
    pub network: Network,
    pub config: ModelConfig,
    /// Hash of the spectrogram config of the training data.
    pub spectrogram_hash: String,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    model: ModelConfig,
}

pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    Network::new(&[1, cfg.input_shape[0], cfg.input_shape[1]], &cfg.layers(), seed)
        .map_err(|e| Error::InvalidConfig(format!("model does not fit its input: {e}")))
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64, spectrogram_hash: &str) -> Result<Self> {
        Ok(Self { network: build_model(cfg, seed)?, config: cfg.clone(), spectrogram_hash: spectrogram_hash.to_string() })
    }

    pub fn window_bins(&self) -> usize {
        self.config.input_shape[0]
    }

    pub fn param_count(&self) -> usize {
        self.network.param_count()
    }

    /// Eval-mode outputs for `n` windows packed row-major; one value per
    /// window for the classifier, `(offset, scale)` pairs for the regressor.
    pub fn predict(&self, windows: &[f32], n: usize) -> Result<Vec<f32>> {
        let [h, w] = self.config.input_shape;
        let x = Tensor::new(vec![n, 1, h, w], windows.to_vec())?;
        Ok(self.network.predict(&x)?.data)
    }

    /// A warning when the model was trained on a different spectrogram config.
    pub fn compatibility_warning(&self, current_hash: &str) -> Option<String> {
        (self.spectrogram_hash != current_hash).then(|| {
            format!(
                "model was trained on spectrogram config {} but the current config is {current_hash}",
                self.spectrogram_hash
            )
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(ModelMeta { model: self.config.clone() }).expect("model config serializes");
        save_network(path, &self.network, &self.spectrogram_hash, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (network, header) = load_network(path)?;
        let meta: ModelMeta = serde_json::from_value(header.meta)
            .map_err(|e| Error::CorruptModel(format!("{}: bad model description: {e}", path.display())))?;
        if network.specs() != meta.model.layers() {
            return Err(Error::CorruptModel(format!("{}: layer stack disagrees with model config", path.display())));
        }
        Ok(Self { network, config: meta.model, spectrogram_hash: header.config_hash })
    }

    /// Loads and logs a warning on a spectrogram-config mismatch.
    pub fn load_checked(path: &Path, current_hash: &str) -> Result<(Self, Option<String>)> {
        let model = Self::load(path)?;
        let warning = model.compatibility_warning(current_hash);
        if let Some(w) = &warning {
            warn!("{}: {w}", path.display());
        }
        Ok((model, warning))
    }
}
