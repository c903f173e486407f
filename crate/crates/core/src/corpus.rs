//! Synthetic tone corpus. Each label is a pure tone at `200·k` Hz held for
//! one segment, with linear crossfades between neighbours and a Gaussian
//! noise floor.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ctc::BLANK;
use crate::error::{Error, Result};
use crate::mel::{extract_mel, read_wav, stack_frames, write_wav, MelConfig};
use crate::train::Utterance;

/// Seed of the frozen eight-utterance overfit split.
pub const OVERFIT_SEED: u64 = 42;
pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub sample_rate: u32,
    /// Tone classes; vocabulary size is this plus one for blank.
    pub classes: usize,
    pub base_hz: f64,
    pub segment_ms: f64,
    pub crossfade_ms: f64,
    pub min_labels: usize,
    pub max_labels: usize,
    pub amplitude: f64,
    pub noise_floor: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            classes: 9,
            base_hz: 200.0,
            segment_ms: 320.0,
            crossfade_ms: 10.0,
            min_labels: 2,
            max_labels: 6,
            amplitude: 0.3,
            noise_floor: 0.01,
            seed: OVERFIT_SEED,
        }
    }
}

impl GeneratorConfig {
    pub fn vocab_size(&self) -> usize {
        self.classes + 1
    }

    /// Frequency of label `k` (1-based; 0 is blank).
    pub fn tone_hz(&self, label: usize) -> f64 {
        self.base_hz * label as f64
    }

    pub fn segment_samples(&self) -> usize {
        (self.segment_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self, token_rate: f64, fmax: f64) -> Result<()> {
        if self.classes == 0 || self.min_labels == 0 || self.min_labels > self.max_labels {
            return Err(Error::Config(
                "need classes >= 1 and 1 <= min_labels <= max_labels".into(),
            ));
        }
        if self.segment_ms * token_rate / 1000.0 < 2.0 {
            return Err(Error::Config(format!(
                "segment_ms {} gives fewer than 2 tokens per label at {token_rate} Hz",
                self.segment_ms
            )));
        }
        let top = self.tone_hz(self.classes);
        if top >= fmax || top >= self.sample_rate as f64 / 2.0 {
            return Err(Error::Config(format!(
                "highest tone {top} Hz is not below fmax {fmax} Hz"
            )));
        }
        if self.crossfade_ms > self.segment_ms {
            return Err(Error::Config("crossfade longer than a segment".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyUtterance {
    pub id: String,
    pub waveform: Vec<f32>,
    pub labels: Vec<usize>,
    pub duration: f64,
}

/// Linear ramp weight of segment `k` at sample `i`; neighbouring weights sum
/// to one inside each crossfade.
fn envelope(i: usize, k: usize, n: usize, seg: usize, xfade: usize) -> f64 {
    let i = i as f64;
    let half = xfade as f64 / 2.0;
    let start = (k * seg) as f64;
    let end = ((k + 1) * seg) as f64;
    let rise = if k == 0 || xfade == 0 {
        1.0
    } else {
        ((i - (start - half) + 0.5) / xfade as f64).clamp(0.0, 1.0)
    };
    let fall = if k + 1 == n || xfade == 0 {
        1.0
    } else {
        ((end + half - i - 0.5) / xfade as f64).clamp(0.0, 1.0)
    };
    rise * fall
}

/// Render `labels` to a waveform.
pub fn render<R: Rng>(cfg: &GeneratorConfig, labels: &[usize], rng: &mut R) -> Vec<f32> {
    let sr = cfg.sample_rate as f64;
    let seg = cfg.segment_samples();
    let xfade = (cfg.crossfade_ms * sr / 1000.0).round() as usize;
    let n = labels.len();
    let total = n * seg;
    let phases: Vec<f64> = labels
        .iter()
        .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
        .collect();
    let noise = Normal::new(0.0, cfg.noise_floor).expect("noise floor is finite");
    (0..total)
        .map(|i| {
            let k = i / seg;
            let mut s = 0.0;
            for j in k.saturating_sub(1)..(k + 2).min(n) {
                let w = envelope(i, j, n, seg, xfade);
                if w > 0.0 {
                    let f = cfg.tone_hz(labels[j]);
                    s += w
                        * cfg.amplitude
                        * (std::f64::consts::TAU * f * i as f64 / sr + phases[j]).sin();
                }
            }
            (s + noise.sample(rng)) as f32
        })
        .collect()
}

/// Length uniform over the configured range, labels uniform over classes.
pub fn draw_labels<R: Rng>(cfg: &GeneratorConfig, rng: &mut R) -> Vec<usize> {
    let len = rng.random_range(cfg.min_labels..=cfg.max_labels);
    (0..len)
        .map(|_| rng.random_range(1..=cfg.classes))
        .collect()
}

pub fn generate_utterance<R: Rng>(cfg: &GeneratorConfig, id: String, rng: &mut R) -> ToyUtterance {
    let labels = draw_labels(cfg, rng);
    debug_assert!(labels.iter().all(|&l| l != BLANK));
    let waveform = render(cfg, &labels, rng);
    let duration = waveform.len() as f64 / cfg.sample_rate as f64;
    ToyUtterance {
        id,
        waveform,
        labels,
        duration,
    }
}

/// `n` utterances; utterance `i` draws from its own stream of the seed.
pub fn generate_corpus(cfg: &GeneratorConfig, n: usize) -> Vec<ToyUtterance> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            generate_utterance(cfg, format!("toy{:05}", i), &mut rng)
        })
        .collect()
}

/// Mel features for training.
pub fn to_utterance(u: &ToyUtterance, mel: &MelConfig) -> Result<Utterance> {
    let m = stack_frames(&extract_mel(&u.waveform, mel)?, mel.stack)?;
    Ok(Utterance {
        id: u.id.clone(),
        mel: m,
        labels: u.labels.clone(),
    })
}

pub fn to_utterances(corpus: &[ToyUtterance], mel: &MelConfig) -> Result<Vec<Utterance>> {
    corpus.iter().map(|u| to_utterance(u, mel)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub labels: Vec<usize>,
    pub wav_path: String,
}

/// Writes `wav/<id>.wav` per utterance and `manifest.jsonl` into `dir`.
pub fn write_corpus(dir: &Path, corpus: &[ToyUtterance], sample_rate: u32) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("wav"))?;
    let manifest = dir.join(MANIFEST);
    let mut out = std::io::BufWriter::new(fs::File::create(&manifest)?);
    for u in corpus {
        let rel = format!("wav/{}.wav", u.id);
        write_wav(&dir.join(&rel), &u.waveform, sample_rate)?;
        let entry = ManifestEntry {
            id: u.id.clone(),
            labels: u.labels.clone(),
            wav_path: rel,
        };
        writeln!(out, "{}", serde_json::to_string(&entry)?)?;
    }
    out.flush()?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let name = path.display().to_string();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::format(&name, format!("line {}", n + 1), e.to_string()))?;
        out.push(entry);
    }
    Ok(out)
}

/// Loads a manifest directory into training utterances. Labels must lie in
/// `1..vocab_size`.
pub fn load_corpus(dir: &Path, mel: &MelConfig, vocab_size: usize) -> Result<Vec<Utterance>> {
    let path = dir.join(MANIFEST);
    let name = path.display().to_string();
    read_manifest(&path)?
        .into_iter()
        .map(|e| {
            if let Some(&bad) = e.labels.iter().find(|&&l| l == BLANK || l >= vocab_size) {
                return Err(Error::format(
                    &name,
                    "labels",
                    format!("utterance {} has label {bad} outside 1..{vocab_size}", e.id),
                ));
            }
            let wav = read_wav(&dir.join(&e.wav_path), mel.sample_rate)?;
            let m = stack_frames(&extract_mel(&wav, mel)?, mel.stack)?;
            Ok(Utterance {
                id: e.id,
                mel: m,
                labels: e.labels,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mel::mel_filterbank;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn segment_arithmetic() {
        let cfg = GeneratorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = render(&cfg, &[3], &mut rng);
        assert_eq!(w.len(), 7680);
        assert!((w.len() as f64 / 24_000.0 - 0.32).abs() < 1e-12);
        cfg.validate(12.5, 12_000.0).unwrap();
        assert!(GeneratorConfig {
            segment_ms: 100.0,
            ..cfg.clone()
        }
        .validate(12.5, 12_000.0)
        .is_err());
    }

    #[test]
    fn crossfade_weights_partition_unity() {
        let (n, seg, x) = (3, 100, 10);
        for i in 0..n * seg {
            let s: f64 = (0..n).map(|k| envelope(i, k, n, seg, x)).sum();
            assert!((s - 1.0).abs() < 1e-12, "sample {i}: {s}");
        }
    }

    #[test]
    fn seeded_determinism_and_feasibility() {
        let cfg = GeneratorConfig::default();
        let a = generate_corpus(&cfg, 8);
        let b = generate_corpus(&cfg, 8);
        assert_eq!(a, b);
        assert!(generate_corpus(&cfg, 0).is_empty());
        let mel = MelConfig::default();
        for u in &a {
            assert!((2..=6).contains(&u.labels.len()));
            assert!((u.duration - u.labels.len() as f64 * 0.32).abs() < mel.hop as f64 / 24_000.0);
            let tokens = (u.duration * mel.token_rate()).floor() as usize;
            assert!(tokens >= 2 * u.labels.len());
        }
        // Prefixes agree: utterance i does not depend on n.
        assert_eq!(generate_corpus(&cfg, 3)[..], a[..3]);
    }

    /// Oracle: the filter with the largest triangular response at `f`.
    fn oracle_bin(cfg: &MelConfig, f: f64) -> usize {
        let (_, centers) = mel_filterbank(cfg);
        let hz_to_mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let target = hz_to_mel(f);
        (0..centers.len())
            .min_by(|&a, &b| {
                let da = (hz_to_mel(centers[a]) - target).abs();
                let db = (hz_to_mel(centers[b]) - target).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap()
    }

    #[test]
    fn mel_argmax_matches_tone_bin() {
        let gcfg = GeneratorConfig::default();
        let mel = MelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<usize> = (1..=9).collect();
        let w = render(&gcfg, &labels, &mut rng);
        let m = extract_mel(&w, &mel).unwrap();
        let frames_per_seg = gcfg.segment_samples() / mel.hop;
        for (k, &l) in labels.iter().enumerate() {
            let frame = k * frames_per_seg + frames_per_seg / 2;
            let row = m.row(frame);
            let arg = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            assert_eq!(arg, oracle_bin(&mel, gcfg.tone_hz(l)), "label {l}");
        }
    }

    #[test]
    fn label_marginal_is_uniform() {
        let cfg = GeneratorConfig {
            seed: 7,
            ..GeneratorConfig::default()
        };
        let mut counts = vec![0usize; cfg.classes];
        for i in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i);
            for l in draw_labels(&cfg, &mut rng) {
                counts[l - 1] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let expected = total as f64 / cfg.classes as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let p = 1.0 - ChiSquared::new((cfg.classes - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 1e-3, "chi2 {chi2}, p {p}");
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig::default();
        let corpus = generate_corpus(&cfg, 2);
        write_corpus(dir.path(), &corpus, cfg.sample_rate).unwrap();
        let entries = read_manifest(&dir.path().join(MANIFEST)).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].labels, corpus[0].labels);
        let mel = MelConfig::default();
        let utts = load_corpus(dir.path(), &mel, cfg.vocab_size()).unwrap();
        assert_eq!(utts[1].labels, corpus[1].labels);
        let err = load_corpus(dir.path(), &mel, 1).unwrap_err().to_string();
        assert!(err.contains("labels"), "{err}");
    }
}
