//! Synthetic corpus: band-limited noise bursts over a pink-ish background,
//! written as 24-bit WAV files with matching annotation files.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{encode_wav, PcmSignal};
use crate::dataset::{format_annotations, AnnotatedRecording, SoundEvent, SoundKind};
use crate::error::{Error, Result};
use crate::util::write_bytes;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_recordings: usize,
    pub duration_s: f64,
    /// Inclusive range of bursts per recording.
    pub bursts_per_recording: (usize, usize),
    pub burst_duration_s: (f64, f64),
    pub burst_band_hz: (f64, f64),
    /// In-band signal-to-background ratio range.
    pub snr_db: (f64, f64),
    /// Minimum silence between bursts and from the recording edges.
    pub min_gap_s: f64,
    pub background_rms: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_recordings: 200,
            duration_s: 2.0,
            bursts_per_recording: (1, 6),
            burst_duration_s: (0.01, 0.04),
            burst_band_hz: (60.0, 2000.0),
            snr_db: (15.0, 25.0),
            min_gap_s: 0.05,
            background_rms: 0.01,
            sample_rate: 44_100,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let (b0, b1) = self.burst_duration_s;
        if !(b0 > 0.0 && b0 <= b1) || !(self.duration_s > 0.0) {
            return bad(format!("burst durations {:?} and duration {} must be positive and ordered", self.burst_duration_s, self.duration_s));
        }
        if self.bursts_per_recording.0 > self.bursts_per_recording.1 {
            return bad(format!("burst count range {:?} is reversed", self.bursts_per_recording));
        }
        if self.snr_db.0 > self.snr_db.1 || self.min_gap_s < 0.0 || !(self.background_rms > 0.0) {
            return bad("snr range must be ordered, gap non-negative and background level positive".into());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        let (f0, f1) = self.burst_band_hz;
        if !(0.0 <= f0 && f0 < f1 && f1 <= nyquist) {
            return bad(format!("burst band {:?} must be ordered and below {nyquist} Hz", self.burst_band_hz));
        }
        let n = self.bursts_per_recording.1 as f64;
        let needed = n * b1 + (n + 1.0) * self.min_gap_s;
        if n > 0.0 && needed > self.duration_s {
            return Err(Error::Packing(format!(
                "{} bursts of up to {b1} s with {} s gaps need {needed:.3} s but recordings last {} s",
                self.bursts_per_recording.1, self.min_gap_s, self.duration_s
            )));
        }
        Ok(())
    }
}

/// Keeps only FFT bins inside `[f_lo, f_hi]` Hz.
fn band_limit(x: &[f64], sample_rate: u32, (f_lo, f_hi): (f64, f64)) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let df = sample_rate as f64 / n as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * df;
        if f < f_lo || f > f_hi {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}

/// White noise through a six-pole approximation of a 1/f spectrum.
fn pink_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const WARMUP: usize = 4096;
    let mut b = [0.0f64; 7];
    let mut out = Vec::with_capacity(n);
    for i in 0..n + WARMUP {
        let w: f64 = rng.sample(StandardNormal);
        b[0] = 0.99886 * b[0] + w * 0.0555179;
        b[1] = 0.99332 * b[1] + w * 0.0750759;
        b[2] = 0.96900 * b[2] + w * 0.1538520;
        b[3] = 0.86650 * b[3] + w * 0.3104856;
        b[4] = 0.55000 * b[4] + w * 0.5329522;
        b[5] = -0.7616 * b[5] - w * 0.0168980;
        let v = b.iter().sum::<f64>() + w * 0.5362;
        b[6] = w * 0.115926;
        if i >= WARMUP {
            out.push(v);
        }
    }
    out
}

/// Non-overlapping `(start, len)` sample spans with at least `gap` samples
/// between bursts and from both edges. Free space is split by sorted
/// uniforms, so every layout is drawn directly without rejection.
fn place(lens: &[usize], total: usize, gap: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let needed = lens.iter().sum::<usize>() + gap * (lens.len() + 1);
    if needed > total {
        return Err(Error::Packing(format!("bursts need {needed} samples, recording has {total}")));
    }
    let slack = total - needed;
    let mut cuts: Vec<usize> = (0..lens.len()).map(|_| rng.gen_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut starts = Vec::with_capacity(lens.len());
    let mut used = gap;
    for (cut, len) in cuts.iter().zip(lens) {
        starts.push(cut + used);
        used += len + gap;
    }
    Ok(starts)
}

/// One recording and its exact burst intervals; deterministic in
/// `(spec.seed, index)`.
pub fn synthesize(spec: &SynthSpec, index: usize) -> Result<(PcmSignal, Vec<SoundEvent>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let sr = spec.sample_rate as f64;
    let n = (spec.duration_s * sr).round() as usize;

    let mut samples = pink_noise(n, &mut rng);
    let scale = spec.background_rms / mean_power(&samples).sqrt().max(f64::MIN_POSITIVE);
    samples.iter_mut().for_each(|v| *v *= scale);
    let background_band = mean_power(&band_limit(&samples, spec.sample_rate, spec.burst_band_hz));

    let (lo, hi) = spec.bursts_per_recording;
    let count = rng.gen_range(lo..=hi);
    let lens: Vec<usize> = (0..count)
        .map(|_| {
            let d = rng.gen_range(spec.burst_duration_s.0..=spec.burst_duration_s.1);
            ((d * sr).round() as usize).max(2)
        })
        .collect();
    let starts = place(&lens, n, (spec.min_gap_s * sr).round() as usize, &mut rng)?;

    let mut events = Vec::with_capacity(count);
    for (&start, &len) in starts.iter().zip(&lens) {
        let white: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let mut burst = band_limit(&white, spec.sample_rate, spec.burst_band_hz);
        for (i, v) in burst.iter_mut().enumerate() {
            let phase = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / len as f64;
            *v *= 0.5 * (1.0 - phase.cos());
        }
        let snr = rng.gen_range(spec.snr_db.0..=spec.snr_db.1);
        let gain = (background_band * 10f64.powf(snr / 10.0) / mean_power(&burst).max(f64::MIN_POSITIVE)).sqrt();
        for (dst, v) in samples[start..start + len].iter_mut().zip(&burst) {
            *dst += gain * v;
        }
        events.push(SoundEvent::new(start as f64 / sr, (start + len) as f64 / sr, SoundKind::SingleBurst));
    }
    Ok((PcmSignal::new(samples, spec.sample_rate), events))
}

pub fn recording_id(index: usize) -> String {
    format!("synth_{index:05}")
}

/// Writes `synth_NNNNN.wav` and `synth_NNNNN.txt` for every recording.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<AnnotatedRecording>> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    (0..spec.n_recordings)
        .into_par_iter()
        .map(|i| {
            let (signal, events) = synthesize(spec, i)?;
            let id = recording_id(i);
            let audio_path = out_dir.join(format!("{id}.wav"));
            write_bytes(&audio_path, &encode_wav(&signal, 24)?)?;
            write_bytes(&out_dir.join(format!("{id}.txt")), format_annotations(&events).as_bytes())?;
            Ok(AnnotatedRecording { id, audio_path, events, duration_s: signal.duration_s() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::parse_annotations;

    fn small(n: usize, bursts: (usize, usize)) -> SynthSpec {
        SynthSpec { n_recordings: n, bursts_per_recording: bursts, ..Default::default() }
    }

    #[test]
    fn zero_bursts_give_empty_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let recs = generate(&small(2, (0, 0)), dir.path()).unwrap();
        for r in recs {
            assert!(r.events.is_empty());
            assert_eq!(std::fs::read_to_string(dir.path().join(format!("{}.txt", r.id))).unwrap(), "");
        }
    }

    #[test]
    fn generation_is_deterministic_and_counts_lines() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = small(100, (3, 3));
        generate(&spec, a.path()).unwrap();
        generate(&spec, b.path()).unwrap();
        let mut lines = 0;
        for i in [0, 17, 99] {
            let id = recording_id(i);
            let wav = |d: &Path| std::fs::read(d.join(format!("{id}.wav"))).unwrap();
            assert_eq!(wav(a.path()), wav(b.path()));
        }
        for i in 0..100 {
            let text = std::fs::read_to_string(a.path().join(format!("{}.txt", recording_id(i)))).unwrap();
            let evs = parse_annotations(&text).unwrap();
            assert!(evs.iter().all(|e| e.kind == SoundKind::SingleBurst && e.duration() <= 0.0401));
            for w in evs.windows(2) {
                assert!(w[1].start_s - w[0].end_s >= spec.min_gap_s - 1e-6);
            }
            lines += text.lines().count();
        }
        assert_eq!(lines, 300);
    }

    #[test]
    fn infeasible_packing_is_rejected() {
        let spec = small(1, (60, 60));
        assert!(matches!(generate(&spec, Path::new("/nonexistent")), Err(Error::Packing(_))));
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(place(&[10, 10], 25, 2, &mut r), Err(Error::Packing(_))));
        assert_eq!(place(&[10, 10], 26, 2, &mut r).unwrap(), vec![2, 14]);
    }

    #[test]
    fn bursts_exceed_background_in_band() {
        let spec = SynthSpec { snr_db: (10.0, 10.0), bursts_per_recording: (2, 2), ..small(1, (2, 2)) };
        for i in 0..5 {
            let (sig, events) = synthesize(&spec, i).unwrap();
            let band = band_limit(&sig.samples, spec.sample_rate, spec.burst_band_hz);
            let sr = spec.sample_rate as f64;
            let inside: Vec<f64> = events
                .iter()
                .flat_map(|e| band[(e.start_s * sr) as usize..(e.end_s * sr) as usize].iter().copied())
                .collect();
            let quiet = mean_power(&band) * band.len() as f64 - mean_power(&inside) * inside.len() as f64;
            let outside = quiet / (band.len() - inside.len()) as f64;
            let ratio_db = 10.0 * (mean_power(&inside) / outside).log10();
            assert!(ratio_db > 6.0, "recording {i}: {ratio_db:.1} dB");
        }
    }
}
