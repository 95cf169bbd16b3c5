//! WAV decoding and the anti-noise low-pass filter.
//!
//! Decoding accepts integer PCM (16- or 24-bit, little-endian) with any
//! channel count and downmixes to mono by averaging each frame.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

const WAVE_FORMAT_PCM: u16 = 0x0001;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Number of taps of the low-pass FIR.
pub const LOW_PASS_TAPS: usize = 101;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcmSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl PcmSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

struct FmtChunk {
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

fn parse_fmt(body: &[u8]) -> Result<FmtChunk> {
    if body.len() < 16 {
        return Err(Error::Decode(format!("fmt chunk too short ({} bytes)", body.len())));
    }
    let mut tag = read_u16(body, 0);
    let channels = read_u16(body, 2);
    let sample_rate = read_u32(body, 4);
    let bits = read_u16(body, 14);
    if tag == WAVE_FORMAT_EXTENSIBLE {
        if body.len() < 26 {
            return Err(Error::Decode("extensible fmt chunk too short".into()));
        }
        // first two bytes of the sub-format GUID carry the format tag
        tag = read_u16(body, 24);
    }
    if tag != WAVE_FORMAT_PCM {
        return Err(Error::UnsupportedFormat(format!("format tag {tag:#06x} is not integer PCM")));
    }
    if bits != 16 && bits != 24 {
        return Err(Error::UnsupportedFormat(format!("{bits}-bit samples")));
    }
    if channels == 0 {
        return Err(Error::Decode("zero channels".into()));
    }
    if sample_rate == 0 {
        return Err(Error::Decode("zero sample rate".into()));
    }
    Ok(FmtChunk { channels, sample_rate, bits })
}

/// Decodes a RIFF/WAVE container into a mono signal.
pub fn decode_wav(bytes: &[u8]) -> Result<PcmSignal> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Decode("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let start = pos + 8;
        let end = start.saturating_add(size).min(bytes.len());
        match id {
            b"fmt " => fmt = Some(parse_fmt(&bytes[start..end])?),
            b"data" => data = Some(&bytes[start..end]),
            _ => {}
        }
        pos = start.saturating_add(size).saturating_add(size & 1);
    }
    let fmt = fmt.ok_or_else(|| Error::Decode("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Decode("no data chunk".into()))?;

    let width = (fmt.bits / 8) as usize;
    let channels = fmt.channels as usize;
    let frame_bytes = width * channels;
    let scale = 1.0 / (1u32 << (fmt.bits - 1)) as f64;
    let samples = data
        .chunks_exact(frame_bytes)
        .map(|frame| {
            let sum: i64 = frame
                .chunks_exact(width)
                .map(|s| match width {
                    2 => i16::from_le_bytes([s[0], s[1]]) as i64,
                    // sign-extend the packed 3-byte value
                    _ => (i32::from_le_bytes([0, s[0], s[1], s[2]]) >> 8) as i64,
                })
                .sum();
            sum as f64 / channels as f64 * scale
        })
        .collect();
    Ok(PcmSignal { samples, sample_rate: fmt.sample_rate })
}

pub fn read_wav(path: &Path) -> Result<PcmSignal> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

/// Encodes a mono signal as integer PCM. Samples are quantized by rounding
/// and saturate at full scale.
pub fn encode_wav(signal: &PcmSignal, bits: u16) -> Result<Vec<u8>> {
    if bits != 16 && bits != 24 {
        return Err(Error::UnsupportedFormat(format!("{bits}-bit samples")));
    }
    let width = (bits / 8) as usize;
    let full = (1i64 << (bits - 1)) as f64;
    let data_len = signal.samples.len() * width;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&WAVE_FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&signal.sample_rate.to_le_bytes());
    out.extend_from_slice(&(signal.sample_rate * width as u32).to_le_bytes());
    out.extend_from_slice(&(width as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &signal.samples {
        let q = (s * full).round().clamp(-full, full - 1.0) as i32;
        out.extend_from_slice(&q.to_le_bytes()[..width]);
    }
    Ok(out)
}

/// Windowed-sinc low-pass taps (Hamming window), normalized to unit DC gain.
pub fn low_pass_taps(cutoff_hz: f64, sample_rate: u32, n_taps: usize) -> Vec<f64> {
    let fc = cutoff_hz / sample_rate as f64;
    let mid = (n_taps - 1) as f64 / 2.0;
    let mut taps: Vec<f64> = (0..n_taps)
        .map(|n| {
            let x = n as f64 - mid;
            let sinc = if x == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * x).sin() / (PI * x) };
            let hamming = 0.54 - 0.46 * (2.0 * PI * n as f64 / (n_taps - 1) as f64).cos();
            sinc * hamming
        })
        .collect();
    let dc: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= dc);
    taps
}

/// Index into a signal of length `len` with mirror reflection at both ends
/// (the edge sample is not repeated).
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Zero-phase low-pass: the symmetric FIR is applied centred on each output
/// sample, with reflection padding, so the output has the input's length and
/// no group delay.
pub fn low_pass(signal: &PcmSignal, cutoff_hz: f64) -> Result<PcmSignal> {
    let nyquist_hz = signal.sample_rate as f64 / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist_hz) {
        return Err(Error::InvalidCutoff { cutoff_hz, nyquist_hz });
    }
    let taps = low_pass_taps(cutoff_hz, signal.sample_rate, LOW_PASS_TAPS);
    let half = (LOW_PASS_TAPS / 2) as isize;
    let x = &signal.samples;
    let n = x.len();
    if n == 0 {
        return Ok(signal.clone());
    }
    let padded: Vec<f64> = (-half..n as isize + half).map(|i| x[reflect_index(i, n)]).collect();
    let samples = padded
        .windows(LOW_PASS_TAPS)
        .map(|w| w.iter().zip(&taps).map(|(a, b)| a * b).sum())
        .collect();
    Ok(PcmSignal { samples, sample_rate: signal.sample_rate })
}
