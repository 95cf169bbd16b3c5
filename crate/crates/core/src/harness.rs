//! The run pipeline behind the command-line tool: preprocess a dataset
//! directory into a spectrogram store, train both heads, predict, evaluate,
//! and sweep prediction parameters over several seeds.
//!
//! Work directory layout:
//! - `preprocess/`: `spectrograms.f32`, `manifest.json`, `skipped.json`, `split.json`
//! - `models/seed_{seed}/`: `classifier.bwm`, `regressor.bwm`, history CSVs, `*_trained_with.json`
//! - `predictions/`: `detections.csv`, `intervals.csv`
//! - `evaluation/metrics.csv`
//! - `sweep/`: `sweep.csv` (averaged over seeds), `sweep_per_seed.csv`

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{low_pass, read_wav};
use crate::config::RunConfig;
use crate::dataset::{filter_events, parse_annotations, split_dataset, AnnotatedRecording, DatasetSplit, RecordingData, SoundEvent};
use crate::error::{Error, Result};
use crate::inference::{aggregate, meta_combine, score_windows, DetectionsFile, IntervalSet, IntervalsFile, MetaMode, PredictConfig, WindowScores};
use crate::metrics::{Evaluation, MetricsRow};
use crate::models::{Head, Model};
use crate::spectrogram::{mel_spectrogram, normalize_segments, Spectrogram};
use crate::trainer::{train_classifier, train_regressor};
use crate::util::{read_json, stable_hash, write_bytes, write_json};

/// Paths of every artifact under one work directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn store(&self) -> PathBuf {
        self.root.join("preprocess/spectrograms.f32")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("preprocess/manifest.json")
    }

    pub fn skipped(&self) -> PathBuf {
        self.root.join("preprocess/skipped.json")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("preprocess/split.json")
    }

    pub fn model_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("models/seed_{seed}"))
    }

    pub fn model(&self, seed: u64, head: Head) -> PathBuf {
        self.model_dir(seed).join(match head {
            Head::Classifier => "classifier.bwm",
            Head::Regressor => "regressor.bwm",
        })
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("evaluation/metrics.csv")
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }
}

/// Sidecar header of the flat spectrogram store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    /// Total rows over all recordings.
    pub rows: usize,
    pub cols: usize,
    pub time_bins_per_s: u32,
    /// Hash of the spectrogram config that produced the store.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub audio_path: PathBuf,
    /// First row of this recording in the store.
    pub offset_rows: usize,
    pub rows: usize,
    pub duration_s: f64,
    /// Every annotated event; filtering happens when the corpus is loaded.
    pub events: Vec<SoundEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_config_hash: String,
    pub store: StoreHeader,
    /// Sorted by id; store rows follow the same order.
    pub recordings: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessReport {
    pub n_recordings: usize,
    pub skipped: Vec<SkippedFile>,
    pub stratification_warning: bool,
}

fn process_file(wav: &Path, cfg: &RunConfig) -> Result<(Spectrogram, Vec<SoundEvent>, f64)> {
    let txt = wav.with_extension("txt");
    let text = std::fs::read_to_string(&txt).map_err(|e| Error::io(&txt, e))?;
    let events = parse_annotations(&text)?;
    let signal = read_wav(wav)?;
    let filtered = low_pass(&signal, cfg.spectrogram.low_pass_hz)?;
    let spec = mel_spectrogram(&filtered, &cfg.spectrogram)?;
    Ok((normalize_segments(&spec, cfg.spectrogram.segment_norm_s), events, signal.duration_s()))
}

/// Spectrograms for every `*.wav` with a readable same-stem `*.txt`
/// annotation. Bad files go to the skip report and the run continues.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<PreprocessReport> {
    let ws = Workspace::new(&cfg.data.work_dir);
    let dir = &cfg.data.dataset_dir;
    let mut wavs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    wavs.sort();
    let results: Vec<_> = wavs.par_iter().map(|p| process_file(p, cfg)).collect();

    let mut store = Vec::new();
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    let mut offset = 0;
    for (path, res) in wavs.iter().zip(results) {
        match res {
            Ok((spec, events, duration_s)) => {
                let id = path.file_stem().expect("file has a stem").to_string_lossy().into_owned();
                store.extend(spec.values.iter().flat_map(|v| v.to_le_bytes()));
                entries.push(ManifestEntry { id, audio_path: path.clone(), offset_rows: offset, rows: spec.rows, duration_s, events });
                offset += spec.rows;
            }
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                skipped.push(SkippedFile { path: path.clone(), reason: e.to_string() });
            }
        }
    }
    let manifest = Manifest {
        run_config_hash: cfg.hash(),
        store: StoreHeader {
            rows: offset,
            cols: cfg.spectrogram.n_mels,
            time_bins_per_s: cfg.spectrogram.time_bins_per_s,
            config_hash: cfg.spectrogram.hash(),
        },
        recordings: entries,
    };
    let annotated: Vec<AnnotatedRecording> = manifest
        .recordings
        .iter()
        .map(|e| AnnotatedRecording {
            id: e.id.clone(),
            audio_path: e.audio_path.clone(),
            events: filter_events(&e.events, cfg.data.filter.max_duration_s, &cfg.data.filter.allowed_kinds),
            duration_s: e.duration_s,
        })
        .collect();
    let outcome = split_dataset(&annotated, cfg.data.split_ratios, cfg.data.split_seed)?;

    write_bytes(&ws.store(), &store)?;
    write_json(&ws.manifest(), &manifest)?;
    write_json(&ws.skipped(), &skipped)?;
    write_json(&ws.split(), &outcome.split)?;
    info!("preprocessed {} recordings, skipped {}", manifest.recordings.len(), skipped.len());
    Ok(PreprocessReport {
        n_recordings: manifest.recordings.len(),
        skipped,
        stratification_warning: outcome.stratification_warning,
    })
}

/// The preprocessed dataset with filtered events, in manifest order.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: Manifest,
    pub split: DatasetSplit,
    pub recordings: Vec<RecordingData>,
    index: BTreeMap<String, usize>,
}

impl Corpus {
    /// Loads the store; refuses one built with a different spectrogram config.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let ws = Workspace::new(&cfg.data.work_dir);
        let manifest: Manifest = read_json(&ws.manifest())?;
        let split: DatasetSplit = read_json(&ws.split())?;
        let current = cfg.spectrogram.hash();
        if manifest.store.config_hash != current {
            return Err(Error::InvalidConfig(format!(
                "the spectrogram store was built with config {} but the current config is {current}; rerun preprocess",
                manifest.store.config_hash
            )));
        }
        let path = ws.store();
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let cols = manifest.store.cols;
        if bytes.len() != manifest.store.rows * cols * 4 {
            return Err(Error::InvalidConfig(format!(
                "{}: {} bytes, header describes {} rows x {cols} cols",
                path.display(),
                bytes.len(),
                manifest.store.rows
            )));
        }
        let values: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let filter = &cfg.data.filter;
        let recordings: Vec<RecordingData> = manifest
            .recordings
            .iter()
            .map(|e| RecordingData {
                id: e.id.clone(),
                spectrogram: Spectrogram::new(
                    values[e.offset_rows * cols..(e.offset_rows + e.rows) * cols].to_vec(),
                    e.rows,
                    cols,
                    manifest.store.time_bins_per_s,
                ),
                events: filter_events(&e.events, filter.max_duration_s, &filter.allowed_kinds),
            })
            .collect();
        let index = recordings.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        Ok(Self { manifest, split, recordings, index })
    }

    pub fn get(&self, id: &str) -> Option<&RecordingData> {
        self.index.get(id).map(|i| &self.recordings[*i])
    }

    /// Recordings for `ids`; unknown ids are an evaluation error naming them.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&RecordingData>> {
        let missing: Vec<&str> = ids.iter().filter(|id| !self.index.contains_key(*id)).map(String::as_str).collect();
        if !missing.is_empty() {
            return Err(Error::Evaluation(format!("unknown recording ids: {}", missing.join(", "))));
        }
        Ok(ids.iter().map(|id| &self.recordings[self.index[id]]).collect())
    }

    fn owned(&self, ids: &[String]) -> Result<Vec<RecordingData>> {
        Ok(self.select(ids)?.into_iter().cloned().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Classifier,
    Regressor,
    Both,
}

impl std::str::FromStr for Which {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classifier" => Ok(Self::Classifier),
            "regressor" => Ok(Self::Regressor),
            "both" => Ok(Self::Both),
            other => Err(Error::InvalidConfig(format!("unknown model {other:?}; use classifier, regressor or both"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainReport {
    pub seed: u64,
    /// `(head, parameter count)` per trained model.
    pub param_counts: Vec<(Head, usize)>,
}

/// Everything a trained model depends on, hashed so sweeps can reuse it.
fn training_fingerprint(cfg: &RunConfig, head: Head, split: &DatasetSplit) -> String {
    stable_hash(&(
        head,
        &cfg.train,
        cfg.model_config(head),
        cfg.spectrogram.hash(),
        &cfg.data.filter,
        &split.train,
        &split.valid,
    ))
}

fn fingerprint_path(ws: &Workspace, seed: u64, head: Head) -> PathBuf {
    ws.model_dir(seed).join(match head {
        Head::Classifier => "classifier_trained_with.json",
        Head::Regressor => "regressor_trained_with.json",
    })
}

fn heads(which: Which) -> Vec<Head> {
    match which {
        Which::Classifier => vec![Head::Classifier],
        Which::Regressor => vec![Head::Regressor],
        Which::Both => vec![Head::Classifier, Head::Regressor],
    }
}

fn train_heads(cfg: &RunConfig, corpus: &Corpus, which: Which) -> Result<TrainReport> {
    let ws = Workspace::new(&cfg.data.work_dir);
    let seed = cfg.train.seed;
    let train = corpus.owned(&corpus.split.train)?;
    let valid = corpus.owned(&corpus.split.valid)?;
    let hash = cfg.spectrogram.hash();
    let mut param_counts = Vec::new();
    for head in heads(which) {
        let model_cfg = cfg.model_config(head);
        let (model, history) = match head {
            Head::Classifier => train_classifier(&train, &valid, &model_cfg, &cfg.train, &hash)?,
            Head::Regressor => train_regressor(&train, &valid, &model_cfg, &cfg.train, &hash)?,
        };
        let dir = ws.model_dir(seed);
        model.save(&ws.model(seed, head))?;
        let name = match head {
            Head::Classifier => "classifier_history.csv",
            Head::Regressor => "regressor_history.csv",
        };
        history.write_csv(&dir.join(name))?;
        write_json(&fingerprint_path(&ws, seed, head), &training_fingerprint(cfg, head, &corpus.split))?;
        info!("{head:?}: {} parameters, best epoch {:?}", model.param_count(), history.best_epoch);
        param_counts.push((head, model.param_count()));
    }
    Ok(TrainReport { seed, param_counts })
}

/// Trains the requested heads with `cfg.train.seed` on the train split.
pub fn cmd_train(cfg: &RunConfig, which: Which) -> Result<TrainReport> {
    let corpus = Corpus::load(cfg)?;
    train_heads(cfg, &corpus, which)
}

/// The classifier and regressor for `cfg.train.seed`, reused when their
/// recorded fingerprint matches the current config and trained otherwise.
fn ensure_models(cfg: &RunConfig, corpus: &Corpus) -> Result<(Model, Model)> {
    let ws = Workspace::new(&cfg.data.work_dir);
    let seed = cfg.train.seed;
    let stale: Vec<Head> = [Head::Classifier, Head::Regressor]
        .into_iter()
        .filter(|h| {
            let recorded: Option<String> = read_json(&fingerprint_path(&ws, seed, *h)).ok();
            !ws.model(seed, *h).exists() || recorded.as_deref() != Some(training_fingerprint(cfg, *h, &corpus.split).as_str())
        })
        .collect();
    let which = match stale.as_slice() {
        [] => None,
        [Head::Classifier] => Some(Which::Classifier),
        [Head::Regressor] => Some(Which::Regressor),
        _ => Some(Which::Both),
    };
    if let Some(which) = which {
        info!("seed {seed}: training {which:?}");
        train_heads(cfg, corpus, which)?;
    }
    Ok((Model::load(&ws.model(seed, Head::Classifier))?, Model::load(&ws.model(seed, Head::Regressor))?))
}

fn load_models(cfg: &RunConfig) -> Result<(Model, Model)> {
    let ws = Workspace::new(&cfg.data.work_dir);
    let seed = cfg.train.seed;
    Ok((Model::load(&ws.model(seed, Head::Classifier))?, Model::load(&ws.model(seed, Head::Regressor))?))
}

/// External intervals combined with the model's own output.
#[derive(Debug, Clone)]
pub struct MetaInput {
    pub mode: MetaMode,
    pub external: PathBuf,
}

#[derive(Debug, Clone)]
pub struct PredictOutput {
    pub detections: DetectionsFile,
    pub intervals: IntervalsFile,
    pub detections_path: PathBuf,
    pub intervals_path: PathBuf,
}

/// Scores the recordings `ids` (the test split by default) and writes
/// `detections.csv` and `intervals.csv` into `out_dir`.
pub fn cmd_predict(cfg: &RunConfig, ids: Option<&[String]>, meta: Option<&MetaInput>, out_dir: Option<&Path>) -> Result<PredictOutput> {
    let corpus = Corpus::load(cfg)?;
    let (classifier, regressor) = load_models(cfg)?;
    let ids: Vec<String> = ids.map_or_else(|| corpus.split.test.clone(), <[String]>::to_vec);
    let recs = corpus.select(&ids)?;
    let external = meta.map(|m| IntervalsFile::read(&m.external)).transpose()?;
    let hash = cfg.spectrogram.hash();
    let p = &cfg.predict;
    let per_rec: Vec<_> = recs
        .par_iter()
        .map(|rec| {
            let scores = score_windows(&classifier, &regressor, &rec.spectrogram, p.window_s, p.overlap, p.threshold, &hash)?;
            let dets = scores.detections(p.threshold);
            let mut set = aggregate(&dets, p, rec.spectrogram.rows, rec.spectrogram.time_bins_per_s);
            if let (Some(m), Some(ext)) = (meta, &external) {
                set = meta_combine(m.mode, &set, &ext.get(&rec.id));
            }
            Ok((rec.id.clone(), dets, set))
        })
        .collect::<Result<_>>()?;
    let config_hash = Some(cfg.hash());
    let mut detections = DetectionsFile { config_hash: config_hash.clone(), recordings: ids.clone(), rows: BTreeMap::new() };
    let mut intervals = IntervalsFile { config_hash, recordings: ids, rows: BTreeMap::new() };
    for (id, dets, set) in per_rec {
        if !dets.is_empty() {
            detections.rows.insert(id.clone(), dets);
        }
        if !set.is_empty() {
            intervals.rows.insert(id, set);
        }
    }
    let dir = out_dir.map_or_else(|| Workspace::new(&cfg.data.work_dir).predictions(), Path::to_path_buf);
    let detections_path = dir.join("detections.csv");
    let intervals_path = dir.join("intervals.csv");
    write_bytes(&detections_path, &detections.to_csv())?;
    write_bytes(&intervals_path, &intervals.to_csv())?;
    Ok(PredictOutput { detections, intervals, detections_path, intervals_path })
}

/// Pools bin counts and event IoUs of `(recording, predicted set)` pairs.
pub fn evaluate_sets<'a>(pairs: impl IntoIterator<Item = (&'a RecordingData, &'a IntervalSet)>) -> Evaluation {
    let mut ev = Evaluation::default();
    for (rec, set) in pairs {
        ev.add_recording(set, &rec.events, rec.spectrogram.rows, rec.spectrogram.time_bins_per_s);
    }
    ev
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateOutput {
    pub row: MetricsRow,
    pub evaluation: Evaluation,
    pub n_recordings: usize,
    pub path: PathBuf,
}

const METRIC_COLUMNS: [&str; 6] = ["accuracy", "precision", "recall", "specificity", "f1_score", "avg_iou"];

fn metric_values(row: &MetricsRow) -> [f64; 6] {
    let b = &row.bins;
    [b.accuracy, b.precision, b.recall, b.specificity, b.f1_score, row.avg_iou]
}

/// Scores an intervals CSV against the ground truth of the recordings
/// `ids` (the test split by default). Every id must be covered by the
/// file. A file stamped with another run config hash is refused unless
/// `force` is set.
pub fn cmd_evaluate(cfg: &RunConfig, predictions: &Path, ids: Option<&[String]>, force: bool) -> Result<EvaluateOutput> {
    let corpus = Corpus::load(cfg)?;
    let file = IntervalsFile::read(predictions)?;
    let current = cfg.hash();
    if let Some(h) = &file.config_hash {
        if *h != current {
            let msg = format!("{} was written under run config {h}, the current config is {current}", predictions.display());
            if !force {
                return Err(Error::Evaluation(format!("{msg}; pass --force to evaluate anyway")));
            }
            warn!("{msg}");
        }
    }
    let ids: Vec<String> = ids.map_or_else(|| corpus.split.test.clone(), <[String]>::to_vec);
    let covered: BTreeSet<&str> = file.recordings.iter().map(String::as_str).collect();
    let missing: Vec<&str> = ids.iter().map(String::as_str).filter(|id| !covered.contains(id)).collect();
    if !missing.is_empty() {
        return Err(Error::Evaluation(format!("predictions lack recordings: {}", missing.join(", "))));
    }
    let unknown: Vec<&str> = file.recordings.iter().map(String::as_str).filter(|id| corpus.get(id).is_none()).collect();
    if !unknown.is_empty() {
        return Err(Error::Evaluation(format!("predictions name recordings missing from the ground truth: {}", unknown.join(", "))));
    }
    let recs = corpus.select(&ids)?;
    let sets: Vec<IntervalSet> = ids.iter().map(|id| file.get(id)).collect();
    let evaluation = evaluate_sets(recs.iter().copied().zip(&sets));
    let row = evaluation.row();

    let path = Workspace::new(&cfg.data.work_dir).metrics();
    let mut header = vec!["config_hash", "n_recordings", "n_events"];
    header.extend(METRIC_COLUMNS);
    let mut record = vec![current, ids.len().to_string(), evaluation.n_events.to_string()];
    record.extend(metric_values(&row).iter().map(|v| v.to_string()));
    write_csv(&path, &header, &[record])?;
    Ok(EvaluateOutput { row, evaluation, n_recordings: ids.len(), path })
}

fn write_csv(path: &Path, header: &[&str], records: &[Vec<String>]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in records {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One grid cell of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub threshold: f64,
    pub overlap: usize,
    pub vote_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub seed: u64,
    pub outcome: std::result::Result<MetricsRow, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragedCell {
    pub cell: Cell,
    /// Seeds whose evaluation succeeded.
    pub n_seeds: usize,
    /// Mean over successful seeds; `None` when every seed failed.
    pub mean: Option<MetricsRow>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub per_seed: Vec<CellResult>,
    pub averaged: Vec<AveragedCell>,
    pub averaged_path: PathBuf,
    pub per_seed_path: PathBuf,
}

/// Cells in threshold-major, then overlap, then vote-fraction order.
pub fn sweep_cells(cfg: &RunConfig) -> Vec<Cell> {
    let s = &cfg.sweep;
    let mut cells = Vec::new();
    for &threshold in &s.thresholds {
        for &overlap in &s.overlaps {
            for &vote_fraction in &s.vote_fractions {
                cells.push(Cell { threshold, overlap, vote_fraction });
            }
        }
    }
    cells
}

fn evaluate_cell(recs: &[&RecordingData], scores: &[WindowScores], cell: Cell, window_s: f64) -> Result<MetricsRow> {
    let p = PredictConfig { threshold: cell.threshold, vote_fraction: cell.vote_fraction, overlap: cell.overlap, window_s };
    p.validate()?;
    let sets: Vec<IntervalSet> = recs
        .iter()
        .zip(scores)
        .map(|(rec, sc)| aggregate(&sc.detections(p.threshold), &p, rec.spectrogram.rows, rec.spectrogram.time_bins_per_s))
        .collect();
    Ok(evaluate_sets(recs.iter().copied().zip(&sets)).row())
}

/// Evaluates every grid cell on the test split for each sweep seed,
/// training models that are missing or stale. Cell failures are recorded
/// and the sweep continues.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepOutput> {
    if sweep_cells(cfg).is_empty() || cfg.sweep.seeds.is_empty() {
        return Err(Error::InvalidConfig("sweep grid and seeds must be non-empty".into()));
    }
    let corpus = Corpus::load(cfg)?;
    let recs = corpus.select(&corpus.split.test)?;
    let cells = sweep_cells(cfg);
    let min_threshold = cfg.sweep.thresholds.iter().copied().fold(f64::INFINITY, f64::min);
    let window_s = cfg.predict.window_s;
    let hash = cfg.spectrogram.hash();
    let mut per_seed = Vec::new();
    for &seed in &cfg.sweep.seeds {
        let mut seeded = cfg.clone();
        seeded.train.seed = seed;
        let (classifier, regressor) = ensure_models(&seeded, &corpus)?;
        let mut by_overlap: BTreeMap<usize, std::result::Result<Vec<WindowScores>, String>> = BTreeMap::new();
        for &overlap in &cfg.sweep.overlaps {
            by_overlap.entry(overlap).or_insert_with(|| {
                recs.par_iter()
                    .map(|r| score_windows(&classifier, &regressor, &r.spectrogram, window_s, overlap, min_threshold, &hash))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| e.to_string())
            });
        }
        let results: Vec<CellResult> = cells
            .par_iter()
            .map(|&cell| {
                let outcome = match &by_overlap[&cell.overlap] {
                    Ok(scores) => evaluate_cell(&recs, scores, cell, window_s).map_err(|e| e.to_string()),
                    Err(e) => Err(e.clone()),
                };
                CellResult { cell, seed, outcome }
            })
            .collect();
        per_seed.extend(results);
    }

    let averaged: Vec<AveragedCell> = cells
        .iter()
        .enumerate()
        .map(|(i, &cell)| {
            let runs: Vec<&CellResult> = per_seed.iter().skip(i).step_by(cells.len()).collect();
            let ok: Vec<[f64; 6]> = runs.iter().filter_map(|r| r.outcome.as_ref().ok()).map(metric_values).collect();
            let errors = runs.iter().filter_map(|r| r.outcome.as_ref().err().map(|e| format!("seed {}: {e}", r.seed))).collect();
            let mean = (!ok.is_empty()).then(|| {
                let m: Vec<f64> = (0..6).map(|k| ok.iter().map(|v| v[k]).sum::<f64>() / ok.len() as f64).collect();
                MetricsRow {
                    bins: crate::metrics::BinMetrics { accuracy: m[0], precision: m[1], recall: m[2], specificity: m[3], f1_score: m[4] },
                    avg_iou: m[5],
                }
            });
            AveragedCell { cell, n_seeds: ok.len(), mean, errors }
        })
        .collect();

    let ws = Workspace::new(&cfg.data.work_dir);
    let config_hash = cfg.hash();
    let cell_fields = |c: &Cell| vec![c.threshold.to_string(), c.overlap.to_string(), c.vote_fraction.to_string()];
    let metric_fields = |m: Option<&MetricsRow>| -> Vec<String> {
        m.map_or_else(|| vec![String::new(); 6], |m| metric_values(m).iter().map(|v| v.to_string()).collect())
    };

    let mut header = vec!["config_hash", "seed", "threshold", "overlap", "vote_fraction"];
    header.extend(METRIC_COLUMNS);
    header.push("error");
    let rows: Vec<Vec<String>> = per_seed
        .iter()
        .map(|r| {
            let mut f = vec![config_hash.clone(), r.seed.to_string()];
            f.extend(cell_fields(&r.cell));
            f.extend(metric_fields(r.outcome.as_ref().ok()));
            f.push(r.outcome.as_ref().err().cloned().unwrap_or_default());
            f
        })
        .collect();
    let per_seed_path = ws.sweep_dir().join("sweep_per_seed.csv");
    write_csv(&per_seed_path, &header, &rows)?;

    let mut header = vec!["config_hash", "threshold", "overlap", "vote_fraction", "n_seeds"];
    header.extend(METRIC_COLUMNS);
    header.push("error");
    let rows: Vec<Vec<String>> = averaged
        .iter()
        .map(|a| {
            let mut f = vec![config_hash.clone()];
            f.extend(cell_fields(&a.cell));
            f.push(a.n_seeds.to_string());
            f.extend(metric_fields(a.mean.as_ref()));
            f.push(a.errors.join("; "));
            f
        })
        .collect();
    let averaged_path = ws.sweep_dir().join("sweep.csv");
    write_csv(&averaged_path, &header, &rows)?;
    Ok(SweepOutput { per_seed, averaged, averaged_path, per_seed_path })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub recordings: usize,
    pub events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub recordings: usize,
    pub total_duration_s: f64,
    pub annotated_events: usize,
    /// Events left after the configured filter.
    pub retained_events: usize,
    pub events_by_kind: BTreeMap<String, usize>,
    pub mean_retained_duration_s: f64,
    pub train: SplitStats,
    pub valid: SplitStats,
    pub test: SplitStats,
}

/// Counts over the preprocessed corpus and its split.
pub fn dataset_stats(cfg: &RunConfig) -> Result<DatasetStats> {
    let corpus = Corpus::load(cfg)?;
    let entries = &corpus.manifest.recordings;
    let mut events_by_kind = BTreeMap::new();
    for e in entries.iter().flat_map(|e| &e.events) {
        *events_by_kind.entry(e.kind.to_string()).or_insert(0) += 1;
    }
    let retained: Vec<&SoundEvent> = corpus.recordings.iter().flat_map(|r| &r.events).collect();
    let part = |ids: &[String]| -> Result<SplitStats> {
        let recs = corpus.select(ids)?;
        Ok(SplitStats { recordings: recs.len(), events: recs.iter().map(|r| r.events.len()).sum() })
    };
    Ok(DatasetStats {
        recordings: entries.len(),
        total_duration_s: entries.iter().map(|e| e.duration_s).sum(),
        annotated_events: entries.iter().map(|e| e.events.len()).sum(),
        retained_events: retained.len(),
        events_by_kind,
        mean_retained_duration_s: if retained.is_empty() {
            0.0
        } else {
            retained.iter().map(|e| e.duration()).sum::<f64>() / retained.len() as f64
        },
        train: part(&corpus.split.train)?,
        valid: part(&corpus.split.valid)?,
        test: part(&corpus.split.test)?,
    })
}
