//! Sliding-window detection and vote aggregation.
//!
//! Time bin `t` is the half-open span `[t, t + 1) / time_bins_per_s`; an
//! interval covers a bin iff it contains the bin centre. Aggregation and the
//! evaluation masks share that rule through [`covered_bins`].

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Head, Model};
use crate::spectrogram::Spectrogram;
use crate::util::round_half_up;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Classifier probability a window must exceed to be refined.
    pub threshold: f64,
    /// Fraction of `overlap` votes a bin needs to be positive.
    pub vote_fraction: f64,
    /// Number of window positions covering each time point.
    pub overlap: usize,
    pub window_s: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { threshold: 0.9, vote_fraction: 0.1, overlap: 10, window_s: 0.2 }
    }
}

impl PredictConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.vote_fraction > 0.0 && self.vote_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("vote_fraction {} outside (0, 1]", self.vote_fraction)));
        }
        if self.overlap == 0 {
            return Err(Error::InvalidConfig("overlap must be at least 1".into()));
        }
        if !(self.window_s > 0.0) {
            return Err(Error::InvalidConfig(format!("window_s {} must be positive", self.window_s)));
        }
        Ok(())
    }

    /// Accumulated confidence a bin needs to be positive.
    pub fn vote_threshold(&self) -> f64 {
        self.vote_fraction * self.overlap as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub start_s: f64,
    pub end_s: f64,
    pub confidence: f64,
}

/// Sorted intervals with positive gaps between neighbours.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IntervalSet(Vec<(f64, f64)>);

impl IntervalSet {
    /// Sorts and merges overlapping or touching intervals; empty ones vanish.
    pub fn from_intervals(mut intervals: Vec<(f64, f64)>) -> Self {
        intervals.retain(|(s, e)| s < e);
        intervals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(intervals.len());
        for (s, e) in intervals {
            match out.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => out.push((s, e)),
            }
        }
        Self(out)
    }

    pub fn as_slice(&self) -> &[(f64, f64)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_length(&self) -> f64 {
        self.0.iter().map(|(s, e)| e - s).sum()
    }
}

/// Window start bins for a scan with `overlap` positions per time point.
pub fn slide_windows(n_bins: usize, window_s: f64, overlap: usize, time_bins_per_s: u32) -> Result<Vec<usize>> {
    if overlap == 0 {
        return Err(Error::InvalidConfig("overlap must be at least 1".into()));
    }
    let window_bins = round_half_up(window_s * time_bins_per_s as f64);
    if window_bins == 0 || window_bins > n_bins {
        return Err(Error::WindowTooLarge { window_bins, n_bins });
    }
    let stride = round_half_up(window_bins as f64 / overlap as f64).max(1);
    Ok((0..=n_bins - window_bins).step_by(stride).collect())
}

/// Interval placed by the regressor inside a window, clipped to `[0, duration_s]`.
pub fn refine_interval(window_start_s: f64, window_s: f64, offset: f64, scale: f64, duration_s: f64) -> (f64, f64) {
    let center = window_start_s + window_s / 2.0 + offset * window_s;
    let half = scale * window_s / 2.0;
    ((center - half).max(0.0), (center + half).min(duration_s))
}

/// Bins `[lo, hi)` whose centres lie in `[start_s, end_s)`, clipped to `n_bins`.
pub fn covered_bins(start_s: f64, end_s: f64, n_bins: usize, time_bins_per_s: u32) -> (usize, usize) {
    let tbps = time_bins_per_s as f64;
    let center = |t: usize| (t as f64 + 0.5) / tbps;
    // first bin whose centre is >= x, found from an estimate and corrected
    // so the result is exactly the centre predicate
    let first_at_or_after = |x: f64| -> usize {
        let est = (x * tbps - 0.5).ceil();
        let mut t = if est.is_nan() || est <= 0.0 { 0 } else { (est as usize).min(n_bins) };
        while t > 0 && center(t - 1) >= x {
            t -= 1;
        }
        while t < n_bins && center(t) < x {
            t += 1;
        }
        t
    };
    let lo = first_at_or_after(start_s);
    let hi = first_at_or_after(end_s).max(lo);
    (lo, hi)
}

/// Runs of `true` as `[start, end)` intervals in seconds.
pub fn mask_to_intervals(mask: &[bool], time_bins_per_s: u32) -> IntervalSet {
    let tbps = time_bins_per_s as f64;
    let mut out = Vec::new();
    let mut run: Option<usize> = None;
    for (t, &on) in mask.iter().chain(std::iter::once(&false)).enumerate() {
        match (on, run) {
            (true, None) => run = Some(t),
            (false, Some(s)) => {
                out.push((s as f64 / tbps, t as f64 / tbps));
                run = None;
            }
            _ => {}
        }
    }
    IntervalSet(out)
}

/// Per-bin confidence votes thresholded at `vote_fraction * overlap`.
pub fn aggregate(detections: &[Detection], cfg: &PredictConfig, n_bins: usize, time_bins_per_s: u32) -> IntervalSet {
    let mut acc = vec![0.0f64; n_bins];
    for d in detections {
        let (lo, hi) = covered_bins(d.start_s, d.end_s, n_bins, time_bins_per_s);
        acc[lo..hi].iter_mut().for_each(|a| *a += d.confidence);
    }
    let thr = cfg.vote_threshold();
    let mask: Vec<bool> = acc.iter().map(|a| *a > 0.0 && *a >= thr).collect();
    mask_to_intervals(&mask, time_bins_per_s)
}

/// Classifier probabilities and regressor outputs for every scan window of
/// one recording. Threshold-independent, so sweeps can reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowScores {
    pub starts: Vec<usize>,
    pub probabilities: Vec<f32>,
    /// `(offset, scale)` per window; `None` where the regressor was skipped.
    pub refinements: Vec<Option<(f32, f32)>>,
    pub window_bins: usize,
    pub time_bins_per_s: u32,
    pub duration_s: f64,
}

const BATCH: usize = 128;

fn check_model(model: &Model, head: Head, current_hash: &str) -> Result<()> {
    if model.config.head != head {
        return Err(Error::InvalidConfig(format!("expected a {head:?} model, got {:?}", model.config.head)));
    }
    if model.spectrogram_hash != current_hash {
        return Err(Error::IncompatibleModel {
            model_hash: model.spectrogram_hash.clone(),
            current_hash: current_hash.to_string(),
        });
    }
    Ok(())
}

fn run_windows(model: &Model, spec: &Spectrogram, starts: &[usize], outputs: usize) -> Result<Vec<f32>> {
    let bins = model.window_bins();
    let mut out = Vec::with_capacity(starts.len() * outputs);
    for chunk in starts.chunks(BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * bins * spec.n_mels);
        for &s in chunk {
            data.extend_from_slice(spec.rows_slice(s, bins));
        }
        out.extend(model.predict(&data, chunk.len())?);
    }
    Ok(out)
}

/// Scores all scan windows; the regressor runs only where the probability
/// exceeds `min_threshold`.
pub fn score_windows(
    classifier: &Model,
    regressor: &Model,
    spec: &Spectrogram,
    window_s: f64,
    overlap: usize,
    min_threshold: f64,
    current_hash: &str,
) -> Result<WindowScores> {
    check_model(classifier, Head::Classifier, current_hash)?;
    check_model(regressor, Head::Regressor, current_hash)?;
    let window_bins = round_half_up(window_s * spec.time_bins_per_s as f64);
    if classifier.window_bins() != window_bins || regressor.window_bins() != window_bins {
        return Err(Error::InvalidConfig(format!(
            "models take {} and {} rows but the window is {window_bins} bins",
            classifier.window_bins(),
            regressor.window_bins()
        )));
    }
    let starts = slide_windows(spec.rows, window_s, overlap, spec.time_bins_per_s)?;
    let probabilities = run_windows(classifier, spec, &starts, 1)?;
    let keep: Vec<usize> = starts.iter().zip(&probabilities).filter(|(_, p)| **p as f64 > min_threshold).map(|(s, _)| *s).collect();
    let refined = run_windows(regressor, spec, &keep, 2)?;
    let mut it = refined.chunks_exact(2);
    let refinements = probabilities
        .iter()
        .map(|p| (*p as f64 > min_threshold).then(|| it.next().map(|o| (o[0], o[1])).expect("one output per kept window")))
        .collect();
    Ok(WindowScores {
        starts,
        probabilities,
        refinements,
        window_bins,
        time_bins_per_s: spec.time_bins_per_s,
        duration_s: spec.duration_s(),
    })
}

impl WindowScores {
    /// Detections for windows whose probability exceeds `threshold`.
    pub fn detections(&self, threshold: f64) -> Vec<Detection> {
        let tbps = self.time_bins_per_s as f64;
        let window_s = self.window_bins as f64 / tbps;
        let mut out = Vec::new();
        for ((start, p), r) in self.starts.iter().zip(&self.probabilities).zip(&self.refinements) {
            if (*p as f64) <= threshold {
                continue;
            }
            let (offset, scale) = r.expect("threshold at or above the scoring threshold");
            let (s, e) = refine_interval(*start as f64 / tbps, window_s, offset as f64, scale as f64, self.duration_s);
            if s < e {
                out.push(Detection { start_s: s, end_s: e, confidence: *p as f64 });
            }
        }
        out
    }
}

/// Windows scoring above `cfg.threshold`, each refined by the regressor.
pub fn detect(classifier: &Model, regressor: &Model, spec: &Spectrogram, cfg: &PredictConfig, current_hash: &str) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let scores = score_windows(classifier, regressor, spec, cfg.window_s, cfg.overlap, cfg.threshold, current_hash)?;
    Ok(scores.detections(cfg.threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaMode {
    Intersect,
    Sum,
}

impl std::str::FromStr for MetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intersect" => Ok(Self::Intersect),
            "sum" => Ok(Self::Sum),
            other => Err(Error::InvalidConfig(format!("unknown meta mode {other:?}; use intersect or sum"))),
        }
    }
}

/// Coverage AND (`Intersect`) or OR (`Sum`) of two interval sets.
pub fn meta_combine(mode: MetaMode, a: &IntervalSet, b: &IntervalSet) -> IntervalSet {
    match mode {
        MetaMode::Sum => IntervalSet::from_intervals(a.0.iter().chain(&b.0).copied().collect()),
        MetaMode::Intersect => {
            let (mut i, mut j) = (0, 0);
            let mut out = Vec::new();
            while i < a.0.len() && j < b.0.len() {
                let (s, e) = (a.0[i].0.max(b.0[j].0), a.0[i].1.min(b.0[j].1));
                if s < e {
                    out.push((s, e));
                }
                if a.0[i].1 < b.0[j].1 {
                    i += 1;
                } else {
                    j += 1;
                }
            }
            IntervalSet::from_intervals(out)
        }
    }
}

/// Rows of a detections or intervals CSV plus its comment headers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionFile<T> {
    pub config_hash: Option<String>,
    /// Every recording the file speaks for, including ones without rows.
    pub recordings: Vec<String>,
    pub rows: BTreeMap<String, T>,
}

pub type DetectionsFile = PredictionFile<Vec<Detection>>;
pub type IntervalsFile = PredictionFile<IntervalSet>;

fn write_header(out: &mut Vec<u8>, config_hash: Option<&str>, recordings: &[String], columns: &str) {
    if let Some(h) = config_hash {
        writeln!(out, "# config_hash: {h}").unwrap();
    }
    writeln!(out, "# recordings: {}", recordings.join(" ")).unwrap();
    writeln!(out, "{columns}").unwrap();
}

impl DetectionsFile {
    pub fn to_csv(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_header(&mut out, self.config_hash.as_deref(), &self.recordings, "recording_id,start_s,end_s,confidence");
        for (id, dets) in &self.rows {
            for d in dets {
                writeln!(out, "{id},{},{},{}", d.start_s, d.end_s, d.confidence).unwrap();
            }
        }
        out
    }
}

impl IntervalsFile {
    pub fn to_csv(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_header(&mut out, self.config_hash.as_deref(), &self.recordings, "recording_id,start_s,end_s");
        for (id, set) in &self.rows {
            for (s, e) in set.as_slice() {
                writeln!(out, "{id},{s},{e}").unwrap();
            }
        }
        out
    }

    /// Parses an intervals CSV. Files without a `# recordings:` line speak
    /// for exactly the ids that appear in their rows.
    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut config_hash = None;
        let mut recordings: Option<Vec<String>> = None;
        let mut raw: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(h) = comment.strip_prefix("config_hash:") {
                    config_hash = Some(h.trim().to_string());
                } else if let Some(ids) = comment.strip_prefix("recordings:") {
                    recordings = Some(ids.split_whitespace().map(str::to_string).collect());
                }
                continue;
            }
            if line.is_empty() || line.starts_with("recording_id") {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse { line: i + 1, msg: format!("{s:?}: {e}") });
            if fields.len() < 3 {
                return Err(Error::Parse { line: i + 1, msg: format!("expected recording_id,start_s,end_s, got {line:?}") });
            }
            let (start, end) = (parse(fields[1])?, parse(fields[2])?);
            if !(start < end) || start < 0.0 {
                return Err(Error::InvalidInterval { line: i + 1, start, end });
            }
            raw.entry(fields[0].to_string()).or_default().push((start, end));
        }
        let recordings = recordings.unwrap_or_else(|| raw.keys().cloned().collect());
        let rows = raw.into_iter().map(|(k, v)| (k, IntervalSet::from_intervals(v))).collect();
        Ok(Self { config_hash, recordings, rows })
    }

    pub fn get(&self, id: &str) -> IntervalSet {
        self.rows.get(id).cloned().unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use crate::nn::LayerSpec;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn slide_window_examples() {
        let s = slide_windows(1260, 0.2, 1, 630).unwrap();
        assert_eq!(s, (0..10).map(|i| i * 126).collect::<Vec<_>>());
        let s = slide_windows(1260, 0.2, 10, 630).unwrap();
        assert_eq!(s.len(), 88);
        assert_eq!(s[1], 13);
        assert_eq!(slide_windows(1260, 0.2, 126, 630).unwrap().len(), 1135);
        assert!(matches!(slide_windows(100, 0.2, 10, 630), Err(Error::WindowTooLarge { window_bins: 126, n_bins: 100 })));
    }

    #[test]
    fn refine_examples() {
        let (s, e) = refine_interval(1.0, 0.2, 0.0, 1.0, 2.0);
        assert!((s - 1.0).abs() < 1e-12 && (e - 1.2).abs() < 1e-12);
        let (s, e) = refine_interval(1.0, 0.2, -0.175, 0.15, 2.0);
        assert!((s - 1.05).abs() < 1e-12 && (e - 1.08).abs() < 1e-12);
        // inverse of labelling the event [1.10, 1.13] from the window at 1.05
        let (s, e) = refine_interval(1.05, 0.2, -0.175, 0.15, 2.0);
        assert!((s - 1.1).abs() < 1e-12 && (e - 1.13).abs() < 1e-12);
        let (s, e) = refine_interval(0.0, 0.2, 0.25, 0.5, 2.0);
        assert!((s - 0.1).abs() < 1e-12 && (e - 0.2).abs() < 1e-12);
        assert_eq!(refine_interval(1.9, 0.2, 0.5, 1.0, 2.0).1, 2.0);
    }

    #[test]
    fn aggregate_examples() {
        let cfg = PredictConfig::default();
        let one = [Detection { start_s: 0.1, end_s: 0.2, confidence: 1.0 }];
        let got = aggregate(&one, &cfg, 1260, 630);
        assert_eq!(got.len(), 1);
        let (s, e) = got.as_slice()[0];
        assert!((s - 0.1).abs() < 1e-9 && (e - 0.2).abs() < 1e-9);
        let two = [Detection { start_s: 0.1, end_s: 0.2, confidence: 0.4 }; 2];
        assert!(aggregate(&two, &cfg, 1260, 630).is_empty());
        assert!(aggregate(&[], &cfg, 1260, 630).is_empty());
    }

    fn oracle_mask(dets: &[Detection], thr: f64, n: usize, tbps: u32) -> Vec<bool> {
        (0..n)
            .map(|t| {
                let c = (t as f64 + 0.5) / tbps as f64;
                let mut acc = 0.0f64;
                for d in dets {
                    if d.start_s <= c && c < d.end_s {
                        acc += d.confidence;
                    }
                }
                acc > 0.0 && acc >= thr
            })
            .collect()
    }

    fn mask_of(set: &IntervalSet, n: usize, tbps: u32) -> Vec<bool> {
        let mut m = vec![false; n];
        for (s, e) in set.as_slice() {
            let (lo, hi) = covered_bins(*s, *e, n, tbps);
            m[lo..hi].iter_mut().for_each(|v| *v = true);
        }
        m
    }

    #[test]
    fn aggregate_matches_bin_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let n = r.gen_range(1..400);
            let dur = n as f64 / 630.0;
            let dets: Vec<Detection> = (0..r.gen_range(0..12))
                .map(|_| {
                    // snap some endpoints exactly onto bin centres
                    let snap = |x: f64, r: &mut ChaCha8Rng| if r.gen_bool(0.3) { ((x * 630.0).floor() + 0.5) / 630.0 } else { x };
                    let a = snap(r.gen_range(0.0..dur), &mut r);
                    let b = snap(r.gen_range(0.0..dur), &mut r);
                    Detection { start_s: a.min(b), end_s: a.max(b) + 1e-9, confidence: r.gen_range(0.01..=1.0) }
                })
                .collect();
            let cfg = PredictConfig { vote_fraction: r.gen_range(0.01..=1.0), overlap: r.gen_range(1..6), ..Default::default() };
            let got = mask_of(&aggregate(&dets, &cfg, n, 630), n, 630);
            assert_eq!(got, oracle_mask(&dets, cfg.vote_threshold(), n, 630));
        }
    }

    proptest! {
        #[test]
        fn meta_laws(a in proptest::collection::vec((0.0f64..10.0, 0.001f64..1.0), 0..8),
                     b in proptest::collection::vec((0.0f64..10.0, 0.001f64..1.0), 0..8)) {
            let a = IntervalSet::from_intervals(a.into_iter().map(|(s, l)| (s, s + l)).collect());
            let b = IntervalSet::from_intervals(b.into_iter().map(|(s, l)| (s, s + l)).collect());
            let i = meta_combine(MetaMode::Intersect, &a, &b);
            let u = meta_combine(MetaMode::Sum, &a, &b);
            prop_assert_eq!(&i, &meta_combine(MetaMode::Intersect, &b, &a));
            prop_assert_eq!(&u, &meta_combine(MetaMode::Sum, &b, &a));
            prop_assert_eq!(&meta_combine(MetaMode::Intersect, &a, &a), &a);
            prop_assert_eq!(&meta_combine(MetaMode::Sum, &a, &a), &a);
            let inside = |x: f64, s: &IntervalSet| s.as_slice().iter().any(|(lo, hi)| *lo <= x && x < *hi);
            for k in 0..2000 {
                let x = k as f64 * 0.00551;
                prop_assert_eq!(inside(x, &i), inside(x, &a) && inside(x, &b));
                prop_assert_eq!(inside(x, &u), inside(x, &a) || inside(x, &b));
            }
            for w in u.as_slice().windows(2) {
                prop_assert!(w[0].1 < w[1].0);
            }
        }
    }

    #[test]
    fn meta_examples() {
        let a = IntervalSet::from_intervals(vec![(0.0, 2.0)]);
        let b = IntervalSet::from_intervals(vec![(1.0, 3.0)]);
        assert_eq!(meta_combine(MetaMode::Intersect, &a, &b).as_slice(), &[(1.0, 2.0)]);
        assert_eq!(meta_combine(MetaMode::Sum, &a, &b).as_slice(), &[(0.0, 3.0)]);
        let c = IntervalSet::from_intervals(vec![(5.0, 6.0)]);
        assert!(meta_combine(MetaMode::Intersect, &a, &c).is_empty());
        assert_eq!(meta_combine(MetaMode::Sum, &a, &c).as_slice(), &[(0.0, 2.0), (5.0, 6.0)]);
    }

    /// Models whose final bias fixes the output regardless of the input.
    fn constant_models(prob_logit: f32, offset_z: f32, scale_z: f32) -> (Model, Model) {
        let mut cls = Model::new(&ModelConfig { conv_filters: vec![1], dense_units: vec![1], ..ModelConfig::classifier([126, 8]) }, 0, "h").unwrap();
        let mut reg = Model::new(&ModelConfig { conv_filters: vec![1], dense_units: vec![1], ..ModelConfig::regressor([126, 8]) }, 0, "h").unwrap();
        for (m, bias) in [(&mut cls, vec![prob_logit]), (&mut reg, vec![offset_z, scale_z])] {
            let n = m.network.specs().iter().filter(|s| matches!(s, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })).count();
            let mut params: Vec<Vec<f32>> = m.network.params().map(|p| p.value.clone()).collect();
            let last = params.len() - 1;
            params[last - 1].iter_mut().for_each(|w| *w = 0.0);
            params[last] = bias;
            assert_eq!(params.len(), 2 * n);
            for (p, v) in m.network.params_mut().zip(params) {
                p.value = v;
            }
        }
        (cls, reg)
    }

    fn flat_spec(rows: usize) -> Spectrogram {
        Spectrogram::new(vec![0.5; rows * 8], rows, 8, 630)
    }

    #[test]
    fn detect_with_constant_models() {
        let spec = flat_spec(1260);
        let cfg = PredictConfig::default();
        let (cls, reg) = constant_models(-30.0, 0.0, 30.0);
        assert!(detect(&cls, &reg, &spec, &cfg, "h").unwrap().is_empty());
        let (cls, reg) = constant_models(30.0, 0.0, 30.0);
        let dets = detect(&cls, &reg, &spec, &cfg, "h").unwrap();
        let starts = slide_windows(1260, 0.2, 10, 630).unwrap();
        assert_eq!(dets.len(), starts.len());
        for (d, s) in dets.iter().zip(&starts) {
            assert!((d.start_s - *s as f64 / 630.0).abs() < 1e-9);
            assert!((d.end_s - d.start_s - 0.2).abs() < 1e-6);
        }
        assert!(matches!(detect(&cls, &reg, &spec, &cfg, "other"), Err(Error::IncompatibleModel { .. })));
    }

    #[test]
    fn intervals_csv_roundtrip() {
        let mut f = IntervalsFile { config_hash: Some("abc".into()), recordings: vec!["a".into(), "b".into()], ..Default::default() };
        f.rows.insert("a".into(), IntervalSet::from_intervals(vec![(0.1, 0.2), (1.0, 1.5)]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.csv");
        std::fs::write(&p, f.to_csv()).unwrap();
        assert_eq!(IntervalsFile::read(&p).unwrap(), f);
        std::fs::write(&p, "recording_id,start_s,end_s\nx,0.5,0.6\n").unwrap();
        let ext = IntervalsFile::read(&p).unwrap();
        assert_eq!(ext.recordings, vec!["x".to_string()]);
        assert!(ext.config_hash.is_none());
        std::fs::write(&p, "x,0.5,0.4\n").unwrap();
        assert!(matches!(IntervalsFile::read(&p), Err(Error::InvalidInterval { line: 1, .. })));
    }
}
