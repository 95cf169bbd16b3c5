//! Log-mel spectrograms at a fixed time resolution, plus per-segment
//! min/max normalization.
//!
//! The mel filterbank integrates each unit-peak triangle against the
//! linearly interpolated power spectrum rather than sampling the triangle at
//! FFT bin centres. At 630 frames/s with a 512-point frame the lowest mel
//! bands are narrower than one FFT bin; sampling would leave them empty.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{reflect_index, PcmSignal};
use crate::error::{Error, Result};
use crate::util::stable_hash;

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrogramConfig {
    pub n_mels: usize,
    pub time_bins_per_s: u32,
    pub fft_size: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub segment_norm_s: f64,
    pub low_pass_hz: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            time_bins_per_s: 630,
            fft_size: 512,
            f_min: 0.0,
            f_max: 2000.0,
            segment_norm_s: 2.0,
            low_pass_hz: 2000.0,
        }
    }
}

impl SpectrogramConfig {
    pub fn hash(&self) -> String {
        stable_hash(self)
    }

    pub fn hop_samples(&self, sample_rate: u32) -> Result<usize> {
        if self.time_bins_per_s == 0 || !sample_rate.is_multiple_of(self.time_bins_per_s) {
            return Err(Error::InvalidConfig(format!(
                "sample rate {sample_rate} is not divisible by {} time bins/s",
                self.time_bins_per_s
            )));
        }
        Ok((sample_rate / self.time_bins_per_s) as usize)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        self.hop_samples(sample_rate)?;
        if self.n_mels == 0 || self.fft_size < 2 {
            return Err(Error::InvalidConfig("n_mels and fft_size must be positive".into()));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= sample_rate as f64 / 2.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= f_min < f_max <= {} Hz, got [{}, {}]",
                sample_rate as f64 / 2.0,
                self.f_min,
                self.f_max
            )));
        }
        if !(self.segment_norm_s > 0.0) {
            return Err(Error::InvalidConfig("segment_norm_s must be positive".into()));
        }
        Ok(())
    }

    /// Rows covered by a window of `window_s` seconds.
    pub fn window_bins(&self, window_s: f64) -> usize {
        (window_s * self.time_bins_per_s as f64).round() as usize
    }
}

/// Row-major `[rows x n_mels]` grid; row `t` is time `t / time_bins_per_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<f32>,
    pub rows: usize,
    pub n_mels: usize,
    pub time_bins_per_s: u32,
}

impl Spectrogram {
    pub fn new(values: Vec<f32>, rows: usize, n_mels: usize, time_bins_per_s: u32) -> Self {
        assert_eq!(values.len(), rows * n_mels, "spectrogram buffer does not match its shape");
        Self { values, rows, n_mels, time_bins_per_s }
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Rows `[start, start + len)` as a contiguous slice.
    pub fn rows_slice(&self, start: usize, len: usize) -> &[f32] {
        &self.values[start * self.n_mels..(start + len) * self.n_mels]
    }

    pub fn duration_s(&self) -> f64 {
        self.rows as f64 / self.time_bins_per_s as f64
    }
}

pub fn hz_to_mel(f: f64) -> Result<f64> {
    if !(f >= 0.0) {
        return Err(Error::InvalidFrequency(f));
    }
    Ok(2595.0 * (1.0 + f / 700.0).log10())
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangle edge frequencies: `n_mels + 2` points equally spaced in mel.
pub fn mel_points(n_mels: usize, f_min: f64, f_max: f64) -> Result<Vec<f64>> {
    let lo = hz_to_mel(f_min)?;
    let hi = hz_to_mel(f_max)?;
    Ok((0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect())
}

/// Centre frequency of every mel band.
pub fn mel_centers(n_mels: usize, f_min: f64, f_max: f64) -> Result<Vec<f64>> {
    let pts = mel_points(n_mels, f_min, f_max)?;
    Ok(pts[1..=n_mels].to_vec())
}

/// Sparse mel filterbank: for each band, the first FFT bin and its weights.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub rows: Vec<(usize, Vec<f64>)>,
    pub n_bins: usize,
}

fn triangle(f: f64, l: f64, c: f64, r: f64) -> f64 {
    if f <= l || f >= r {
        0.0
    } else if f <= c {
        (f - l) / (c - l)
    } else {
        (r - f) / (r - c)
    }
}

fn hat(f: f64, center: f64, width: f64) -> f64 {
    (1.0 - (f - center).abs() / width).max(0.0)
}

impl MelFilterbank {
    pub fn new(cfg: &SpectrogramConfig, sample_rate: u32) -> Result<Self> {
        let pts = mel_points(cfg.n_mels, cfg.f_min, cfg.f_max)?;
        let n_bins = cfg.fft_size / 2 + 1;
        let df = sample_rate as f64 / cfg.fft_size as f64;
        let rows = (0..cfg.n_mels)
            .map(|m| {
                let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
                let first = (((l / df).floor() as isize) - 1).max(0) as usize;
                let last = (((r / df).ceil() as usize) + 1).min(n_bins - 1);
                let weights = (first..=last)
                    .map(|k| {
                        let fk = k as f64 * df;
                        let lo = l.max(fk - df);
                        let hi = r.min(fk + df);
                        if hi <= lo {
                            return 0.0;
                        }
                        // product of two piecewise-linear functions is piecewise
                        // quadratic, so Simpson's rule between breakpoints is exact
                        let mut knots = vec![lo, hi];
                        knots.extend([c, fk].into_iter().filter(|&x| x > lo && x < hi));
                        knots.sort_by(|a, b| a.total_cmp(b));
                        let g = |f: f64| triangle(f, l, c, r) * hat(f, fk, df);
                        knots
                            .windows(2)
                            .map(|w| (w[1] - w[0]) / 6.0 * (g(w[0]) + 4.0 * g(0.5 * (w[0] + w[1])) + g(w[1])))
                            .sum::<f64>()
                            / df
                    })
                    .collect();
                (first, weights)
            })
            .collect();
        Ok(Self { rows, n_bins })
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, (first, w)) in out.iter_mut().zip(&self.rows) {
            *o = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
        }
    }

    /// Dense row `m` over all FFT bins.
    pub fn dense_row(&self, m: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.n_bins];
        let (first, w) = &self.rows[m];
        row[*first..*first + w.len()].copy_from_slice(w);
        row
    }
}

/// Reusable log-mel extractor for one config and sample rate.
pub struct MelExtractor {
    cfg: SpectrogramConfig,
    sample_rate: u32,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filterbank: MelFilterbank,
}

impl MelExtractor {
    pub fn new(cfg: &SpectrogramConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let n = cfg.fft_size;
        let window = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            hop: cfg.hop_samples(sample_rate)?,
            window,
            fft,
            filterbank: MelFilterbank::new(cfg, sample_rate)?,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Unnormalized `log10(eps + mel energy)`.
    pub fn compute(&self, signal: &PcmSignal) -> Result<Spectrogram> {
        if signal.sample_rate != self.sample_rate {
            return Err(Error::InvalidConfig(format!(
                "extractor built for {} Hz, signal is {} Hz",
                self.sample_rate, signal.sample_rate
            )));
        }
        let n = self.cfg.fft_size;
        let len = signal.len();
        if len < n {
            return Err(Error::SignalTooShort { len, needed: n });
        }
        let rows = len / self.hop;
        let n_mels = self.cfg.n_mels;
        let mut values = Vec::with_capacity(rows * n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n / 2 + 1];
        let mut mel = vec![0.0; n_mels];
        for k in 0..rows {
            let start = k * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                let idx = reflect_index((start + i) as isize, len);
                *b = Complex::new(signal.samples[idx] * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            self.filterbank.apply(&power, &mut mel);
            values.extend(mel.iter().map(|e| (LOG_FLOOR + e).log10() as f32));
        }
        Ok(Spectrogram::new(values, rows, n_mels, self.cfg.time_bins_per_s))
    }
}

/// One-shot log-mel spectrogram (before segment normalization).
pub fn mel_spectrogram(signal: &PcmSignal, cfg: &SpectrogramConfig) -> Result<Spectrogram> {
    MelExtractor::new(cfg, signal.sample_rate)?.compute(signal)
}

/// Min/max rescales every consecutive block of `segment_s` seconds to `[0, 1]`.
/// A block with zero range becomes all zeros.
pub fn normalize_segments(spec: &Spectrogram, segment_s: f64) -> Spectrogram {
    let block_rows = ((segment_s * spec.time_bins_per_s as f64).round() as usize).max(1);
    let mut out = spec.clone();
    for block in out.values.chunks_mut(block_rows * spec.n_mels) {
        let (lo, hi) = block
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi as f64 - lo as f64;
        for v in block.iter_mut() {
            *v = if range > 0.0 { ((*v as f64 - lo as f64) / range) as f32 } else { 0.0 };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, secs: f64) -> PcmSignal {
        let sr = 44_100;
        let n = (sr as f64 * secs) as usize;
        PcmSignal::new((0..n).map(|i| (2.0 * PI * freq * i as f64 / sr as f64).sin()).collect(), sr)
    }

    #[test]
    fn mel_formula_values() {
        assert_eq!(hz_to_mel(0.0).unwrap(), 0.0);
        assert!((hz_to_mel(700.0).unwrap() - 781.17).abs() < 0.01);
        let m1000 = 2595.0 * (1.0f64 + 1000.0 / 700.0).log10();
        assert!((hz_to_mel(1000.0).unwrap() - m1000).abs() < 1e-12);
        assert!((m1000 - 999.99).abs() < 0.01);
        assert!(matches!(hz_to_mel(-1.0), Err(Error::InvalidFrequency(_))));
        assert!((mel_to_hz(hz_to_mel(1234.5).unwrap()) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn shape_law_two_seconds() {
        let spec = mel_spectrogram(&sine(440.0, 2.0), &SpectrogramConfig::default()).unwrap();
        assert_eq!((spec.rows, spec.n_mels), (1260, 64));
        let odd = PcmSignal::new(vec![0.1; 70 * 10 + 69], 44_100);
        assert_eq!(mel_spectrogram(&odd, &SpectrogramConfig::default()).unwrap().rows, 10);
    }

    #[test]
    fn sine_peaks_in_nearest_band() {
        let cfg = SpectrogramConfig::default();
        let spec = mel_spectrogram(&sine(440.0, 2.0), &cfg).unwrap();
        let mut mean = vec![0.0f64; cfg.n_mels];
        for t in 0..spec.rows {
            for (m, v) in spec.row(t).iter().enumerate() {
                mean[m] += *v as f64;
            }
        }
        let argmax = (0..cfg.n_mels).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
        let centers = mel_centers(cfg.n_mels, cfg.f_min, cfg.f_max).unwrap();
        let nearest = (0..cfg.n_mels)
            .min_by(|&a, &b| (centers[a] - 440.0).abs().total_cmp(&(centers[b] - 440.0).abs()))
            .unwrap();
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn silence_is_log_floor() {
        let spec = mel_spectrogram(&PcmSignal::new(vec![0.0; 4410], 44_100), &SpectrogramConfig::default()).unwrap();
        assert!(spec.values.iter().all(|&v| v == (LOG_FLOOR.log10() as f32)));
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = SpectrogramConfig::default();
        let short = PcmSignal::new(vec![0.0; 100], 44_100);
        assert!(matches!(mel_spectrogram(&short, &cfg), Err(Error::SignalTooShort { .. })));
        let odd_rate = PcmSignal::new(vec![0.0; 4000], 44_000);
        assert!(matches!(mel_spectrogram(&odd_rate, &cfg), Err(Error::InvalidConfig(_))));
        let bad = SpectrogramConfig { f_max: 30_000.0, ..cfg };
        assert!(matches!(bad.validate(44_100), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn filterbank_rows_positive_and_partition_unity() {
        let cfg = SpectrogramConfig::default();
        let fb = MelFilterbank::new(&cfg, 44_100).unwrap();
        for (_, w) in &fb.rows {
            assert!(w.iter().sum::<f64>() > 0.0);
        }
        let centers = mel_centers(cfg.n_mels, cfg.f_min, cfg.f_max).unwrap();
        let df = 44_100.0 / cfg.fft_size as f64;
        let dense: Vec<Vec<f64>> = (0..cfg.n_mels).map(|m| fb.dense_row(m)).collect();
        let mut interior = 0;
        for k in 0..fb.n_bins {
            let fk = k as f64 * df;
            if fk - df >= centers[0] && fk + df <= centers[cfg.n_mels - 1] {
                let s: f64 = dense.iter().map(|r| r[k]).sum();
                assert!((s - 1.0).abs() < 1e-9, "bin {k}: {s}");
                interior += 1;
            }
        }
        assert!(interior > 10);
    }

    #[test]
    fn normalize_block_examples() {
        let spec = Spectrogram::new(vec![-8.0, -5.0, -2.0, -2.0], 2, 2, 1);
        let n = normalize_segments(&spec, 2.0);
        assert_eq!(n.values, vec![0.0, 0.5, 1.0, 1.0]);
        let flat = Spectrogram::new(vec![-3.0; 6], 3, 2, 1);
        assert_eq!(normalize_segments(&flat, 10.0).values, vec![0.0; 6]);
    }

    #[test]
    fn four_second_spectrogram_normalizes_per_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sig = PcmSignal::new((0..44_100 * 4).map(|_| rng.gen_range(-0.5..0.5)).collect(), 44_100);
        let cfg = SpectrogramConfig::default();
        let spec = normalize_segments(&mel_spectrogram(&sig, &cfg).unwrap(), 2.0);
        assert_eq!(spec.rows, 2520);
        for block in spec.values.chunks(1260 * 64) {
            let lo = block.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = block.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!((lo, hi), (0.0, 1.0));
        }
        let twice = normalize_segments(&spec, 2.0);
        for (a, b) in spec.values.iter().zip(&twice.values) {
            assert!((*a as f64 - *b as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_output_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..44_100).map(|_| rng.gen_range(-0.4..0.4)).collect();
        let cfg = SpectrogramConfig::default();
        let a = normalize_segments(&mel_spectrogram(&PcmSignal::new(x.clone(), 44_100), &cfg).unwrap(), 2.0);
        let doubled = PcmSignal::new(x.iter().map(|v| 2.0 * v).collect(), 44_100);
        let b = normalize_segments(&mel_spectrogram(&doubled, &cfg).unwrap(), 2.0);
        for (p, q) in a.values.iter().zip(&b.values) {
            assert!((p - q).abs() < 1e-6, "{p} vs {q}");
        }
    }
}
