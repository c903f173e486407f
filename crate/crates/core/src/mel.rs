//! Waveform to normalized log-mel frames, and the frame stacking that sets
//! the token rate.
//!
//! Conventions: periodic Hann window, reflect center padding,
//! `floor(len / hop)` frames, power spectrum, HTK mel scale with unnormalized
//! triangular filters, `ln(max(power, 1e-10))`, then global mean/variance
//! normalization `(log_mel − mean) / sqrt(var)`.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub hop: usize,
    pub win: usize,
    pub n_fft: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub norm_mean: f64,
    pub norm_var: f64,
    pub stack: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            n_mels: 128,
            hop: 480,
            win: 1920,
            n_fft: 1920,
            fmin: 0.0,
            fmax: 12_000.0,
            norm_mean: -4.92,
            norm_var: 8.14,
            stack: 4,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("mel: {m}")));
        if self.win > self.n_fft {
            return bad("win > n_fft");
        }
        if self.hop == 0 || self.hop > self.win {
            return bad("hop must be in 1..=win");
        }
        if self.fmax > self.sample_rate as f64 / 2.0 || self.fmin < 0.0 || self.fmin >= self.fmax {
            return bad("need 0 <= fmin < fmax <= sample_rate/2");
        }
        if self.stack == 0 || self.n_mels == 0 {
            return bad("stack and n_mels must be >= 1");
        }
        if self.norm_var <= 0.0 {
            return bad("norm_var must be positive");
        }
        Ok(())
    }

    /// Mel frames per second before stacking.
    pub fn mel_frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Token (stacked frame) rate in Hz.
    pub fn token_rate(&self) -> f64 {
        self.mel_frame_rate() / self.stack as f64
    }

    /// Normalized value of the log floor, used for padding.
    pub fn pad_value(&self) -> f32 {
        ((LOG_FLOOR.ln() - self.norm_mean) / self.norm_var.sqrt()) as f32
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("MelConfig serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Row-major `[rows × width]` mel frames. `stack` base frames are packed per
/// row; `valid_len` always counts base (unstacked) frames.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub data: Vec<f32>,
    pub rows: usize,
    pub width: usize,
    pub stack: usize,
    pub valid_len: usize,
    pub config_hash: String,
}

impl MelSpectrogram {
    pub fn n_bins(&self) -> usize {
        self.width / self.stack
    }

    pub fn base_frames(&self) -> usize {
        self.rows * self.stack
    }

    /// Rows holding at least one valid base frame.
    pub fn valid_rows(&self) -> usize {
        self.valid_len.div_ceil(self.stack)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    /// Per-element mask for the first `valid_rows()` rows: 1 for elements
    /// belonging to valid base frames.
    pub fn element_mask(&self) -> Vec<f32> {
        let bins = self.n_bins();
        let rows = self.valid_rows();
        let mut mask = Vec::with_capacity(rows * self.width);
        for r in 0..rows {
            for s in 0..self.stack {
                let frame = r * self.stack + s;
                let m = if frame < self.valid_len { 1.0 } else { 0.0 };
                mask.extend(std::iter::repeat_n(m, bins));
            }
        }
        mask
    }
}

/// `n_mels` HTK filters over `n_fft/2 + 1` bins, plus their center frequencies.
pub fn mel_filterbank(cfg: &MelConfig) -> (Vec<Vec<f64>>, Vec<f64>) {
    let hz_to_mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let mel_to_hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let n_bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
    let filters = (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (points[m], points[m + 1], points[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = bin_hz(k);
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect();
    (filters, points[1..=cfg.n_mels].to_vec())
}

fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Periodic Hann window of length `win`, zero-padded and centered in `n_fft`.
fn window(cfg: &MelConfig) -> Vec<f64> {
    let mut w = vec![0.0; cfg.n_fft];
    let off = (cfg.n_fft - cfg.win) / 2;
    for i in 0..cfg.win {
        w[off + i] = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / cfg.win as f64).cos();
    }
    w
}

pub fn extract_mel(waveform: &[f32], cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if waveform.is_empty() {
        return Err(Error::InvalidArgument("empty waveform".into()));
    }
    if waveform.len() < cfg.hop {
        return Err(Error::InvalidArgument(format!(
            "waveform has {} samples, need at least one hop ({})",
            waveform.len(),
            cfg.hop
        )));
    }
    let n_frames = waveform.len() / cfg.hop;
    let (filters, _) = mel_filterbank(cfg);
    let win = window(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let half = (cfg.n_fft / 2) as isize;
    let n_bins = cfg.n_fft / 2 + 1;
    let inv_std = 1.0 / cfg.norm_var.sqrt();

    let padded_frames = n_frames.div_ceil(cfg.stack) * cfg.stack;
    let mut data = Vec::with_capacity(padded_frames * cfg.n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut power = vec![0.0; n_bins];
    for f in 0..n_frames {
        let start = (f * cfg.hop) as isize - half;
        for (j, slot) in buf.iter_mut().enumerate() {
            let s = waveform[reflect(start + j as isize, waveform.len())] as f64;
            *slot = Complex::new(s * win[j], 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for filt in &filters {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            data.push(((e.max(LOG_FLOOR).ln() - cfg.norm_mean) * inv_std) as f32);
        }
    }
    data.resize(padded_frames * cfg.n_mels, cfg.pad_value());
    Ok(MelSpectrogram {
        data,
        rows: padded_frames,
        width: cfg.n_mels,
        stack: 1,
        valid_len: n_frames,
        config_hash: cfg.hash(),
    })
}

/// Packs `stack` consecutive frames per row, frame-major.
pub fn stack_frames(mel: &MelSpectrogram, stack: usize) -> Result<MelSpectrogram> {
    if mel.stack != 1 {
        return Err(Error::InvalidArgument("mel is already stacked".into()));
    }
    if stack == 0 || !mel.rows.is_multiple_of(stack) {
        return Err(Error::InvalidArgument(format!(
            "{} frames not a multiple of stack {stack}",
            mel.rows
        )));
    }
    // Row-major storage makes frame-major stacking a reinterpretation.
    Ok(MelSpectrogram {
        data: mel.data.clone(),
        rows: mel.rows / stack,
        width: mel.width * stack,
        stack,
        valid_len: mel.valid_len,
        config_hash: mel.config_hash.clone(),
    })
}

pub fn unstack_frames(mel: &MelSpectrogram, n_mels: usize) -> Result<MelSpectrogram> {
    if n_mels == 0 || !mel.width.is_multiple_of(n_mels) {
        return Err(Error::InvalidArgument(format!(
            "channel count {} not divisible by n_mels {n_mels}",
            mel.width
        )));
    }
    let stack = mel.width / n_mels;
    Ok(MelSpectrogram {
        data: mel.data.clone(),
        rows: mel.rows * stack,
        width: n_mels,
        stack: 1,
        valid_len: mel.valid_len,
        config_hash: mel.config_hash.clone(),
    })
}

/// Reads a mono 16-bit PCM WAV as samples in [-1, 1).
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Vec<f32>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let name = path.display().to_string();
    if spec.channels != 1 {
        return Err(Error::format(
            name,
            "channels",
            format!("expected mono, got {}", spec.channels),
        ));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(
            name,
            "bits_per_sample",
            "expected 16-bit PCM",
        ));
    }
    if spec.sample_rate != expected_rate {
        return Err(Error::format(
            name,
            "sample_rate",
            format!(
                "expected {expected_rate}, got {} (resampling unsupported)",
                spec.sample_rate
            ),
        ));
    }
    reader
        .samples::<i16>()
        .map(|s| Ok(s? as f32 / 32768.0))
        .collect()
}

pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(freq: f64, secs: f64, rate: u32) -> Vec<f32> {
        let n = (secs * rate as f64) as usize;
        (0..n)
            .map(|i| {
                (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()) as f32
            })
            .collect()
    }

    #[test]
    fn one_second_gives_fifty_frames_padded_to_52() {
        let cfg = MelConfig::default();
        let mel = extract_mel(&vec![0.01; 24_000], &cfg).unwrap();
        assert_eq!(mel.valid_len, 50);
        assert_eq!(mel.rows, 52);
        assert_eq!(mel.width, 128);
        let pad = cfg.pad_value();
        assert!(mel.data[50 * 128..].iter().all(|&v| v == pad));
    }

    #[test]
    fn mean_log_mel_normalizes_to_zero() {
        let cfg = MelConfig::default();
        let y = ((-4.92f64 - cfg.norm_mean) / cfg.norm_var.sqrt()) as f32;
        assert_eq!(y, 0.0);
    }

    #[test]
    fn pure_tone_peaks_at_nearest_center() {
        let cfg = MelConfig::default();
        let (_, centers) = mel_filterbank(&cfg);
        let expected = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - 1000.0)
                    .abs()
                    .partial_cmp(&(b.1 - 1000.0).abs())
                    .unwrap()
            })
            .unwrap()
            .0;
        let mel = extract_mel(&sine(1000.0, 0.5, cfg.sample_rate), &cfg).unwrap();
        for f in 2..mel.valid_len - 2 {
            let row = mel.row(f);
            let arg = (0..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            assert_eq!(arg, expected, "frame {f}");
        }
    }

    #[test]
    fn rejects_empty_and_short_input() {
        let cfg = MelConfig::default();
        assert!(extract_mel(&[], &cfg).is_err());
        assert!(extract_mel(&[0.0; 100], &cfg).is_err());
        assert!(extract_mel(&[0.0; 480], &cfg).is_ok());
    }

    #[test]
    fn deterministic() {
        let cfg = MelConfig::default();
        let w = sine(440.0, 0.3, cfg.sample_rate);
        assert_eq!(
            extract_mel(&w, &cfg).unwrap(),
            extract_mel(&w, &cfg).unwrap()
        );
    }

    #[test]
    fn duration_identity_within_one_hop() {
        let cfg = MelConfig::default();
        for len in [480usize, 1000, 24_000, 24_479, 31_337] {
            let mel = extract_mel(&vec![0.0; len], &cfg).unwrap();
            let dur = mel.valid_len as f64 * cfg.hop as f64 / cfg.sample_rate as f64;
            let actual = len as f64 / cfg.sample_rate as f64;
            assert!((dur - actual).abs() < cfg.hop as f64 / cfg.sample_rate as f64);
        }
    }

    #[test]
    fn stack_shapes() {
        let mel = MelSpectrogram {
            data: (0..48 * 128).map(|i| i as f32).collect(),
            rows: 48,
            width: 128,
            stack: 1,
            valid_len: 48,
            config_hash: String::new(),
        };
        let s = stack_frames(&mel, 4).unwrap();
        assert_eq!((s.rows, s.width), (12, 512));
        // frame 1's bins follow frame 0's in the first stacked row
        assert_eq!(s.row(0)[128], mel.row(1)[0]);
        assert_eq!(stack_frames(&mel, 1).unwrap().data, mel.data);
        let one = MelSpectrogram {
            rows: 1,
            ..s.clone()
        };
        let one = MelSpectrogram {
            data: one.data[..512].to_vec(),
            ..one
        };
        let u = unstack_frames(&one, 128).unwrap();
        assert_eq!((u.rows, u.width), (4, 128));
        assert!(unstack_frames(&s, 100).is_err());
    }

    #[test]
    fn element_mask_covers_partial_last_row() {
        let mel = MelSpectrogram {
            data: vec![0.0; 8 * 2],
            rows: 8,
            width: 2,
            stack: 1,
            valid_len: 5,
            config_hash: String::new(),
        };
        let s = stack_frames(&mel, 4).unwrap();
        assert_eq!(s.valid_rows(), 2);
        assert_eq!(
            s.element_mask(),
            vec![1., 1., 1., 1., 1., 1., 1., 1., 1., 1., 0., 0., 0., 0., 0., 0.]
        );
    }

    #[test]
    fn wav_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = sine(300.0, 0.05, 24_000);
        write_wav(&p, &w, 24_000).unwrap();
        let r = read_wav(&p, 24_000).unwrap();
        assert_eq!(r.len(), w.len());
        assert!(w.iter().zip(&r).all(|(a, b)| (a - b).abs() < 1e-4));
        assert!(read_wav(&p, 16_000).is_err());
    }

    proptest! {
        #[test]
        fn stack_unstack_roundtrip(rows in 1usize..8, stack in 1usize..5, seed in any::<u64>()) {
            let n = rows * stack * 3;
            let data: Vec<f32> = (0..n).map(|i| ((i as u64 ^ seed) % 1000) as f32 * 0.37).collect();
            let mel = MelSpectrogram { data, rows: rows * stack, width: 3, stack: 1, valid_len: rows * stack, config_hash: String::new() };
            let back = unstack_frames(&stack_frames(&mel, stack).unwrap(), 3).unwrap();
            prop_assert_eq!(back, mel);
        }
    }
}
