//! Annotations, event filtering, corpus splits, and labelled training windows.

use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrogram::Spectrogram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoundKind {
    SingleBurst,
    DistinctBurst,
    MultipleBurst,
    Continuous,
    Other,
}

impl SoundKind {
    pub fn from_token(token: &str) -> Self {
        match token.trim().to_ascii_lowercase().as_str() {
            "sb" | "single_burst" | "single" => SoundKind::SingleBurst,
            "db" | "distinct_burst" | "distinct" => SoundKind::DistinctBurst,
            "mb" | "multiple_burst" | "multiple" => SoundKind::MultipleBurst,
            "cr" | "crbs" | "continuous" | "continuous_random" => SoundKind::Continuous,
            _ => SoundKind::Other,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            SoundKind::SingleBurst => "sb",
            SoundKind::DistinctBurst => "db",
            SoundKind::MultipleBurst => "mb",
            SoundKind::Continuous => "cr",
            SoundKind::Other => "other",
        }
    }
}

impl fmt::Display for SoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoundEvent {
    pub start_s: f64,
    pub end_s: f64,
    pub kind: SoundKind,
}

impl SoundEvent {
    pub fn new(start_s: f64, end_s: f64, kind: SoundKind) -> Self {
        Self { start_s, end_s, kind }
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start_s + self.end_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedRecording {
    pub id: String,
    pub audio_path: PathBuf,
    pub events: Vec<SoundEvent>,
    pub duration_s: f64,
}

/// Parses `start_s<sep>end_s<sep>kind` lines. Blank lines and `#` comments
/// are skipped; a missing kind token reads as `other`.
pub fn parse_annotations(text: &str) -> Result<Vec<SoundEvent>> {
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() < 2 {
            return Err(Error::Parse { line: line_no, msg: format!("expected start, end, kind: {line:?}") });
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse { line: line_no, msg: format!("not a number: {s:?}") })
        };
        let (start, end) = (num(fields[0])?, num(fields[1])?);
        if !(start >= 0.0 && start < end) {
            return Err(Error::InvalidInterval { line: line_no, start, end });
        }
        let kind = fields.get(2).map_or(SoundKind::Other, |t| SoundKind::from_token(t));
        events.push(SoundEvent::new(start, end, kind));
    }
    events.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    Ok(events)
}

pub fn format_annotations(events: &[SoundEvent]) -> String {
    events
        .iter()
        .map(|e| format!("{:.6},{:.6},{}\n", e.start_s, e.end_s, e.kind))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterCriteria {
    pub max_duration_s: f64,
    pub allowed_kinds: Vec<SoundKind>,
}

impl Default for FilterCriteria {
    fn default() -> Self {
        Self { max_duration_s: 0.2, allowed_kinds: vec![SoundKind::SingleBurst, SoundKind::DistinctBurst] }
    }
}

pub fn filter_events(events: &[SoundEvent], max_duration_s: f64, allowed_kinds: &[SoundKind]) -> Vec<SoundEvent> {
    events
        .iter()
        .filter(|e| allowed_kinds.contains(&e.kind) && e.duration() <= max_duration_s)
        .copied()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitOutcome {
    pub split: DatasetSplit,
    /// Set when there were too few recordings to stratify.
    pub stratification_warning: bool,
}

fn stratum(n_events: usize) -> usize {
    match n_events {
        0 => 0,
        1..=3 => 1,
        4..=7 => 2,
        _ => 3,
    }
}

/// Stratified split by event-count bin (0, 1-3, 4-7, 8+). Each stratum is
/// shuffled with `seed`, the strata are concatenated, and items are dealt to
/// the part whose quota is furthest behind, so every part's size stays within
/// one recording of its exact share.
pub fn split_dataset(recordings: &[AnnotatedRecording], ratios: [f64; 3], seed: u64) -> Result<SplitOutcome> {
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strata: [Vec<&AnnotatedRecording>; 4] = Default::default();
    for rec in recordings {
        strata[stratum(rec.events.len())].push(rec);
    }
    let occupied = strata.iter().filter(|s| !s.is_empty()).count();
    let warn = recordings.len() < occupied * 3;
    let mut ordered: Vec<String> = Vec::with_capacity(recordings.len());
    if warn {
        log::warn!("{} recordings are too few to stratify over {occupied} strata; using a plain shuffle", recordings.len());
        let mut ids: Vec<String> = recordings.iter().map(|r| r.id.clone()).collect();
        ids.sort();
        ids.shuffle(&mut rng);
        ordered = ids;
    } else {
        for s in strata.iter_mut() {
            let mut ids: Vec<String> = s.iter().map(|r| r.id.clone()).collect();
            ids.sort();
            ids.shuffle(&mut rng);
            ordered.extend(ids);
        }
    }
    let mut parts: [Vec<String>; 3] = Default::default();
    for (i, id) in ordered.into_iter().enumerate() {
        let seen = (i + 1) as f64;
        let j = (0..3)
            .max_by(|&a, &b| {
                let da = ratios[a] * seen - parts[a].len() as f64;
                let db = ratios[b] * seen - parts[b].len() as f64;
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .unwrap();
        parts[j].push(id);
    }
    let [train, valid, test] = parts;
    Ok(SplitOutcome { split: DatasetSplit { seed, train, valid, test }, stratification_warning: warn })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowLabel {
    Negative,
    Positive { offset: f64, scale: f64, event: usize },
}

impl WindowLabel {
    pub fn is_positive(&self) -> bool {
        matches!(self, WindowLabel::Positive { .. })
    }
}

/// Positive iff some event has at least half of its own duration inside the
/// window; the event with the largest overlap (earliest on ties) supplies the
/// regression targets.
pub fn label_window(window_start_s: f64, window_s: f64, events: &[SoundEvent]) -> WindowLabel {
    let window_end = window_start_s + window_s;
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in events.iter().enumerate() {
        let overlap = (e.end_s.min(window_end) - e.start_s.max(window_start_s)).max(0.0);
        if 2.0 * overlap < e.duration() || overlap <= 0.0 {
            continue;
        }
        let better = match best {
            None => true,
            Some((j, o)) => overlap > o || (overlap == o && e.start_s < events[j].start_s),
        };
        if better {
            best = Some((i, overlap));
        }
    }
    match best {
        None => WindowLabel::Negative,
        Some((i, _)) => {
            let e = &events[i];
            let window_center = window_start_s + 0.5 * window_s;
            WindowLabel::Positive {
                offset: ((e.center() - window_center) / window_s).clamp(-0.5, 0.5),
                scale: (e.duration() / window_s).min(1.0),
                event: i,
            }
        }
    }
}

/// A preprocessed recording: its normalized spectrogram and filtered events.
#[derive(Debug, Clone)]
pub struct RecordingData {
    pub id: String,
    pub spectrogram: Spectrogram,
    pub events: Vec<SoundEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `[rows x n_mels]`, row-major.
    pub values: Vec<f32>,
    pub rows: usize,
    pub n_mels: usize,
    pub positive: bool,
    /// `(offset, scale)`, present iff positive.
    pub target: Option<(f32, f32)>,
    pub recording: usize,
    pub start_bin: usize,
}

impl WindowSample {
    pub fn from_recording(rec: &RecordingData, index: usize, start_bin: usize, window_bins: usize) -> Self {
        let spec = &rec.spectrogram;
        let tbps = spec.time_bins_per_s as f64;
        let label = label_window(start_bin as f64 / tbps, window_bins as f64 / tbps, &rec.events);
        let target = match label {
            WindowLabel::Positive { offset, scale, .. } => Some((offset as f32, scale as f32)),
            WindowLabel::Negative => None,
        };
        Self {
            values: spec.rows_slice(start_bin, window_bins).to_vec(),
            rows: window_bins,
            n_mels: spec.n_mels,
            positive: target.is_some(),
            target,
            recording: index,
            start_bin,
        }
    }
}

/// Infinite, seed-deterministic stream of labelled windows.
///
/// Each draw is positive with probability `p / (p + n)`. Positives are
/// windows whose centre lies within a quarter window of a random event's
/// centre; negatives are uniform over all window positions that label
/// negative.
pub struct WindowSampler<'a> {
    recordings: &'a [RecordingData],
    window_bins: usize,
    pos_prob: f64,
    events: Vec<(usize, usize)>,
    negatives: Vec<(usize, usize)>,
    rng: ChaCha8Rng,
}

impl<'a> WindowSampler<'a> {
    pub fn new(recordings: &'a [RecordingData], window_bins: usize, ratio: (u32, u32), rng: ChaCha8Rng) -> Result<Self> {
        if ratio.0 + ratio.1 == 0 {
            return Err(Error::InvalidConfig("positive:negative ratio must not be 0:0".into()));
        }
        let mut events = Vec::new();
        let mut negatives = Vec::new();
        for (r, rec) in recordings.iter().enumerate() {
            let rows = rec.spectrogram.rows;
            if rows < window_bins {
                continue;
            }
            events.extend((0..rec.events.len()).map(|e| (r, e)));
            if ratio.1 > 0 {
                let tbps = rec.spectrogram.time_bins_per_s as f64;
                for start in 0..=rows - window_bins {
                    if !label_window(start as f64 / tbps, window_bins as f64 / tbps, &rec.events).is_positive() {
                        negatives.push((r, start));
                    }
                }
            }
        }
        if ratio.0 > 0 && events.is_empty() {
            return Err(Error::EmptyClass("positive"));
        }
        if ratio.1 > 0 && negatives.is_empty() {
            return Err(Error::EmptyClass("negative"));
        }
        Ok(Self {
            recordings,
            window_bins,
            pos_prob: ratio.0 as f64 / (ratio.0 + ratio.1) as f64,
            events,
            negatives,
            rng,
        })
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn draw_positive(&mut self) -> WindowSample {
        let w = self.window_bins;
        for _ in 0..64 {
            let (r, e) = self.events[self.rng.gen_range(0..self.events.len())];
            let rec = &self.recordings[r];
            let tbps = rec.spectrogram.time_bins_per_s as f64;
            let window_s = w as f64 / tbps;
            let center = rec.events[e].center() + self.rng.gen_range(-0.25..=0.25) * window_s;
            let start = ((center - 0.5 * window_s) * tbps).round().clamp(0.0, (rec.spectrogram.rows - w) as f64) as usize;
            let sample = WindowSample::from_recording(rec, r, start, w);
            if sample.positive {
                return sample;
            }
        }
        // an event longer than the window can make every jittered draw
        // negative; fall back to the window centred on the event
        let (r, e) = self.events[self.rng.gen_range(0..self.events.len())];
        let rec = &self.recordings[r];
        let tbps = rec.spectrogram.time_bins_per_s as f64;
        let start = ((rec.events[e].center() * tbps).round() as isize - (w / 2) as isize)
            .clamp(0, (rec.spectrogram.rows - w) as isize) as usize;
        WindowSample::from_recording(rec, r, start, w)
    }

    fn draw_negative(&mut self) -> WindowSample {
        let (r, start) = self.negatives[self.rng.gen_range(0..self.negatives.len())];
        WindowSample::from_recording(&self.recordings[r], r, start, self.window_bins)
    }
}

impl Iterator for WindowSampler<'_> {
    type Item = WindowSample;

    fn next(&mut self) -> Option<WindowSample> {
        let positive = self.rng.gen_bool(self.pos_prob);
        Some(if positive { self.draw_positive() } else { self.draw_negative() })
    }
}

/// Adds N(0, sigma^2) noise with sigma ~ U(0, std_max), clamped to [0, 1].
pub fn augment_gaussian<R: Rng>(sample: &WindowSample, std_max: f64, rng: &mut R) -> WindowSample {
    let mut out = sample.clone();
    if std_max <= 0.0 {
        return out;
    }
    let sigma = rng.gen_range(0.0..std_max);
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    for v in out.values.iter_mut() {
        *v = (*v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
    }
    out
}
