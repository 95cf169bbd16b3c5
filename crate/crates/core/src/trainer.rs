//! Training loops for the classifier and the regressor.
//!
//! Every source of randomness is a ChaCha8 stream derived from the config
//! seed, and batches are processed sequentially, so a `(seed, config)` pair
//! always yields the same checkpoint bytes.

use std::path::Path;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment_gaussian, RecordingData, WindowSample, WindowSampler};
use crate::error::{Error, Result};
use crate::models::{Head, Model, ModelConfig};
use crate::nn::{interval_iou, regression_loss, weighted_bce, Adam, AdamConfig, Mode, Network, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub dropout_p: f32,
    pub weight_decay: f64,
    /// Multiplier on the positive-class BCE term.
    pub w_pos: f64,
    /// Upper bound of the per-window Gaussian noise sigma.
    pub gauss_std_max: f64,
    pub seed: u64,
    /// Positive:negative sampling ratio for the classifier.
    pub pos_neg_ratio: (u32, u32),
    /// Weight of the offset term in the regression loss.
    pub alpha: f64,
    /// Weight of the scale term in the regression loss.
    pub beta: f64,
    /// Size of the fixed validation window set.
    pub valid_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 256,
            steps_per_epoch: 100,
            lr: 1e-4,
            dropout_p: 0.2,
            weight_decay: 1e-4,
            w_pos: 3.0,
            gauss_std_max: 0.15,
            seed: 42,
            pos_neg_ratio: (1, 3),
            alpha: 1.0,
            beta: 1.0,
            valid_windows: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidHyperparameter(m));
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.valid_windows == 0 {
            return bad("batch_size, steps_per_epoch and valid_windows must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.w_pos > 0.0) {
            return bad(format!("lr {} and w_pos {} must be positive", self.lr, self.w_pos));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.weight_decay < 0.0 || self.gauss_std_max < 0.0 || self.alpha < 0.0 || self.beta < 0.0 {
            return bad("weight_decay, gauss_std_max, alpha and beta must be non-negative".into());
        }
        if self.pos_neg_ratio.0 == 0 {
            return bad("the sampling ratio needs a positive share".into());
        }
        Ok(())
    }

    fn adam(&self) -> Result<Adam> {
        Adam::new(AdamConfig { lr: self.lr as f32, weight_decay: self.weight_decay as f32, ..Default::default() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Accuracy at 0.5 for the classifier, mean IoU for the regressor.
    pub valid_metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were returned.
    pub best_epoch: Option<usize>,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "valid_loss", "valid_metric"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                format!("{:.8}", r.train_loss),
                format!("{:.8}", r.valid_loss),
                format!("{:.8}", r.valid_metric),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Independent random streams of one training run.
struct Streams {
    sampler: ChaCha8Rng,
    augment: ChaCha8Rng,
    dropout: ChaCha8Rng,
    valid: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64, head: Head) -> Self {
        let base = if head == Head::Classifier { 1 } else { 11 };
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(base + k);
            r
        };
        Self { sampler: stream(0), augment: stream(1), dropout: stream(2), valid: stream(3) }
    }
}

fn stack(windows: &[&WindowSample]) -> Tensor {
    let (rows, mels) = (windows[0].rows, windows[0].n_mels);
    let mut data = Vec::with_capacity(windows.len() * rows * mels);
    for w in windows {
        data.extend_from_slice(&w.values);
    }
    Tensor { shape: vec![windows.len(), 1, rows, mels], data }
}

fn labels(windows: &[&WindowSample]) -> Vec<f32> {
    windows.iter().map(|w| if w.positive { 1.0 } else { 0.0 }).collect()
}

fn targets(windows: &[&WindowSample]) -> Vec<f32> {
    windows
        .iter()
        .flat_map(|w| {
            let (o, s) = w.target.expect("regressor windows are positive");
            [o, s]
        })
        .collect()
}

/// Loss and output gradient of one batch.
fn batch_loss(head: Head, out: &[f32], windows: &[&WindowSample], cfg: &TrainConfig) -> (f64, Vec<f32>) {
    match head {
        Head::Classifier => weighted_bce(out, &labels(windows), cfg.w_pos),
        Head::Regressor => regression_loss(out, &targets(windows), cfg.alpha, cfg.beta),
    }
}

/// One optimisation step; returns the batch loss before the update.
fn step(
    net: &mut Network,
    adam: &mut Adam,
    head: Head,
    windows: &[&WindowSample],
    cfg: &TrainConfig,
    dropout: &mut ChaCha8Rng,
) -> Result<f64> {
    let x = stack(windows);
    net.zero_grad();
    let out = net.forward(&x, Mode::Train, dropout)?;
    let (loss, grad) = batch_loss(head, &out.data, windows, cfg);
    if !loss.is_finite() {
        return Ok(loss);
    }
    net.backward_params(&Tensor { shape: out.shape, data: grad })?;
    adam.step(net.params_mut())?;
    Ok(loss)
}

/// Eval-mode loss and metric over a fixed window set.
pub fn evaluate_windows(net: &Network, head: Head, windows: &[WindowSample], cfg: &TrainConfig) -> Result<(f64, f64)> {
    let (mut loss_sum, mut metric_sum) = (0.0, 0.0);
    for chunk in windows.chunks(256) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let out = net.predict(&stack(&refs))?;
        let (loss, _) = batch_loss(head, &out.data, &refs, cfg);
        loss_sum += loss * chunk.len() as f64;
        metric_sum += match head {
            Head::Classifier => {
                refs.iter().zip(&out.data).filter(|(w, p)| (**p >= 0.5) == w.positive).count() as f64
            }
            Head::Regressor => refs
                .iter()
                .zip(out.data.chunks(2))
                .map(|(w, o)| {
                    let (to, ts) = w.target.expect("regressor windows are positive");
                    interval_iou((o[0] as f64, o[1] as f64), (to as f64, ts as f64))
                })
                .sum(),
        };
    }
    let n = windows.len().max(1) as f64;
    Ok((loss_sum / n, metric_sum / n))
}

fn draw_windows(sampler: &mut WindowSampler, n: usize, positives_only: bool) -> Vec<WindowSample> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = sampler.next().expect("sampler is infinite");
        if !positives_only || w.positive {
            out.push(w);
        }
    }
    out
}

pub fn train_classifier(
    train: &[RecordingData],
    valid: &[RecordingData],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    spectrogram_hash: &str,
) -> Result<(Model, History)> {
    train_head(Head::Classifier, train, valid, model_cfg, cfg, spectrogram_hash)
}

pub fn train_regressor(
    train: &[RecordingData],
    valid: &[RecordingData],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    spectrogram_hash: &str,
) -> Result<(Model, History)> {
    train_head(Head::Regressor, train, valid, model_cfg, cfg, spectrogram_hash)
}

fn train_head(
    head: Head,
    train: &[RecordingData],
    valid: &[RecordingData],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    spectrogram_hash: &str,
) -> Result<(Model, History)> {
    cfg.validate()?;
    let model_cfg = ModelConfig { head, dropout_p: cfg.dropout_p, ..model_cfg.clone() };
    let mut model = Model::new(&model_cfg, cfg.seed, spectrogram_hash)?;
    if cfg.epochs == 0 {
        return Ok((model, History::default()));
    }
    let window_bins = model_cfg.input_shape[0];
    let ratio = match head {
        Head::Classifier => cfg.pos_neg_ratio,
        Head::Regressor => (1, 0),
    };
    let positives_only = head == Head::Regressor;
    let mut streams = Streams::new(cfg.seed, head);
    let mut sampler = WindowSampler::new(train, window_bins, ratio, streams.sampler.clone())?;

    let valid_set = match WindowSampler::new(valid, window_bins, ratio, streams.valid.clone()) {
        Ok(mut s) => draw_windows(&mut s, cfg.valid_windows, positives_only),
        Err(e) => {
            warn!("validation recordings unusable ({e}); validating on training windows");
            let mut s = WindowSampler::new(train, window_bins, ratio, streams.valid.clone())?;
            draw_windows(&mut s, cfg.valid_windows, positives_only)
        }
    };

    let mut adam = cfg.adam()?;
    let mut history = History::default();
    let mut best: Option<(f64, Network)> = None;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let batch: Vec<WindowSample> = draw_windows(&mut sampler, cfg.batch_size, positives_only)
                .iter()
                .map(|w| augment_gaussian(w, cfg.gauss_std_max, &mut streams.augment))
                .collect();
            let refs: Vec<&WindowSample> = batch.iter().collect();
            let loss = step(&mut model.network, &mut adam, head, &refs, cfg, &mut streams.dropout)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            total += loss;
        }
        let (valid_loss, valid_metric) = evaluate_windows(&model.network, head, &valid_set, cfg)?;
        if !valid_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        let record = EpochRecord { epoch, train_loss: total / cfg.steps_per_epoch as f64, valid_loss, valid_metric };
        info!(
            "{head:?} epoch {epoch}: train {:.5} valid {:.5} metric {:.4}",
            record.train_loss, valid_loss, valid_metric
        );
        history.records.push(record);
        if best.as_ref().is_none_or(|(l, _)| valid_loss < *l) {
            best = Some((valid_loss, model.network.clone()));
            history.best_epoch = Some(epoch);
        }
    }
    if let Some((_, net)) = best {
        model.network = net;
    }
    Ok((model, history))
}

/// Trains on a fixed window set, cycling through it in `batch_size` chunks
/// without augmentation. Returns the per-step losses.
pub fn train_on_windows(model: &mut Model, windows: &[WindowSample], steps: usize, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let head = model.config.head;
    if windows.is_empty() || (head == Head::Regressor && windows.iter().any(|w| !w.positive)) {
        return Err(Error::EmptyClass("positive"));
    }
    let mut adam = cfg.adam()?;
    let mut streams = Streams::new(cfg.seed, head);
    let refs: Vec<&WindowSample> = windows.iter().collect();
    let mut losses = Vec::with_capacity(steps);
    for (i, batch) in refs.chunks(cfg.batch_size).cycle().take(steps).enumerate() {
        let loss = step(&mut model.network, &mut adam, head, batch, cfg, &mut streams.dropout)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch: i });
        }
        losses.push(loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{SoundEvent, SoundKind};
    use crate::spectrogram::Spectrogram;
    use rand::Rng;

    /// Noise spectrogram with a bright band over each event.
    fn toy_recording(id: &str, events: &[(f64, f64)], seed: u64) -> RecordingData {
        let (rows, mels) = (630, 16);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut values: Vec<f32> = (0..rows * mels).map(|_| r.gen_range(0.0..0.3)).collect();
        for &(s, e) in events {
            for t in (s * 630.0) as usize..(e * 630.0) as usize {
                for m in 2..10 {
                    values[t * mels + m] = 0.9;
                }
            }
        }
        RecordingData {
            id: id.into(),
            spectrogram: Spectrogram::new(values, rows, mels, 630),
            events: events.iter().map(|&(s, e)| SoundEvent::new(s, e, SoundKind::SingleBurst)).collect(),
        }
    }

    fn tiny(head: Head) -> ModelConfig {
        ModelConfig {
            input_shape: [126, 16],
            conv_filters: vec![4],
            kernel: [3, 3],
            padding: 1,
            pool: [4, 4],
            dense_units: vec![16],
            head,
            dropout_p: 0.0,
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig { epochs: 2, steps_per_epoch: 5, batch_size: 8, valid_windows: 16, lr: 1e-3, ..Default::default() }
    }

    fn corpus() -> Vec<RecordingData> {
        vec![toy_recording("a", &[(0.2, 0.23), (0.6, 0.64)], 1), toy_recording("b", &[(0.4, 0.42)], 2)]
    }

    #[test]
    fn zero_epochs_returns_initial_network() {
        let recs = corpus();
        let cfg = TrainConfig { epochs: 0, ..small_cfg() };
        let (m, h) = train_classifier(&recs, &recs, &tiny(Head::Classifier), &cfg, "h").unwrap();
        let init = Model::new(&ModelConfig { dropout_p: cfg.dropout_p, ..tiny(Head::Classifier) }, cfg.seed, "h").unwrap();
        assert!(h.records.is_empty());
        assert!(m.network.params().zip(init.network.params()).all(|(a, b)| a.value == b.value));
    }

    #[test]
    fn training_is_reproducible_and_keeps_best_epoch() {
        let recs = corpus();
        let cfg = TrainConfig { epochs: 3, ..small_cfg() };
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for i in 0..2 {
            let (m, h) = train_classifier(&recs, &recs[1..], &tiny(Head::Classifier), &cfg, "h").unwrap();
            let best = h.records[h.best_epoch.unwrap()].valid_loss;
            assert!(h.records.iter().all(|r| best <= r.valid_loss));
            let p = dir.path().join(format!("{i}.bwm"));
            m.save(&p).unwrap();
            bytes.push(std::fs::read(&p).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
        let (_, h) = train_regressor(&recs, &recs, &tiny(Head::Regressor), &cfg, "h").unwrap();
        assert_eq!(h.records.len(), 3);
        let path = dir.path().join("h.csv");
        h.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_loss,valid_loss,valid_metric\n"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn regressor_needs_positive_windows() {
        let recs = vec![toy_recording("empty", &[], 3)];
        let r = train_regressor(&recs, &recs, &tiny(Head::Regressor), &small_cfg(), "h");
        assert!(matches!(r, Err(Error::EmptyClass("positive"))));
    }

    #[test]
    fn divergence_is_reported() {
        let recs = corpus();
        let cfg = TrainConfig { lr: 1e30, ..small_cfg() };
        let r = train_classifier(&recs, &recs, &tiny(Head::Classifier), &cfg, "h");
        assert!(matches!(r, Err(Error::TrainingDiverged { .. })), "{r:?}");
    }

    #[test]
    fn initial_regression_loss_is_bounded() {
        let recs = corpus();
        let mut sampler = WindowSampler::new(&recs, 126, (1, 0), ChaCha8Rng::seed_from_u64(0)).unwrap();
        let windows = draw_windows(&mut sampler, 32, true);
        let model = Model::new(&tiny(Head::Regressor), 42, "h").unwrap();
        let cfg = TrainConfig::default();
        let (loss, _) = evaluate_windows(&model.network, Head::Regressor, &windows, &cfg).unwrap();
        assert!(loss <= 1.0 + cfg.alpha + cfg.beta, "{loss}");
    }

    #[test]
    fn weighted_sampling_balances_class_gradients() {
        // one positive per three negatives at p = 0.5 on a linear logit
        let (_, g) = weighted_bce(&[0.5, 0.5, 0.5, 0.5], &[1.0, 0.0, 0.0, 0.0], 3.0);
        let pos: f64 = g[..1].iter().map(|v| *v as f64).sum();
        let neg: f64 = g[1..].iter().map(|v| *v as f64).sum();
        assert!((pos.abs() - neg.abs()).abs() < 1e-9, "{pos} {neg}");
    }
}
