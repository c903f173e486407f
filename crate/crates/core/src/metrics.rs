//! Reconstruction metrics over the valid frames of two mel spectrograms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mel::MelSpectrogram;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub id: String,
    pub frames: usize,
    pub mel_l1: f64,
    pub mel_cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    /// Mean absolute error over all valid elements of all utterances.
    pub mel_l1: f64,
    /// Mean per-frame cosine similarity over all valid frames.
    pub mel_cosine: f64,
    pub utterances: Vec<UtteranceMetrics>,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na > 0.0, nb > 0.0) {
        (true, true) => dot / (na.sqrt() * nb.sqrt()),
        (false, false) => 1.0,
        _ => 0.0,
    }
}

/// Sums `(|Δ| total, elements, cosine total, frames)` for one pair.
fn accumulate(
    reference: &MelSpectrogram,
    hyp: &MelSpectrogram,
) -> Result<(f64, usize, f64, usize)> {
    if reference.stack != 1 || hyp.stack != 1 {
        return Err(Error::InvalidArgument(
            "metrics expect unstacked frames".into(),
        ));
    }
    if reference.width != hyp.width || reference.rows != hyp.rows {
        return Err(Error::Mismatch(format!(
            "shape {}×{} vs {}×{}",
            reference.rows, reference.width, hyp.rows, hyp.width
        )));
    }
    if reference.valid_len != hyp.valid_len {
        return Err(Error::Mismatch(format!(
            "valid_len {} vs {}",
            reference.valid_len, hyp.valid_len
        )));
    }
    let w = reference.width;
    let n = reference.valid_len;
    let (a, b) = (&reference.data[..n * w], &hyp.data[..n * w]);
    let l1: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    let cos: f64 = a
        .chunks(w)
        .zip(b.chunks(w))
        .map(|(x, y)| cosine(x, y))
        .sum();
    Ok((l1, n * w, cos, n))
}

pub fn eval_pair(
    id: &str,
    reference: &MelSpectrogram,
    hyp: &MelSpectrogram,
) -> Result<UtteranceMetrics> {
    let (l1, el, cos, frames) = accumulate(reference, hyp)?;
    Ok(UtteranceMetrics {
        id: id.to_string(),
        frames,
        mel_l1: l1 / el.max(1) as f64,
        mel_cosine: cos / frames.max(1) as f64,
    })
}

pub fn eval_reconstruction(
    pairs: &[(String, MelSpectrogram, MelSpectrogram)],
) -> Result<ReconstructionReport> {
    let (mut l1, mut el, mut cos, mut frames) = (0.0, 0, 0.0, 0);
    let mut utterances = Vec::with_capacity(pairs.len());
    for (id, r, h) in pairs {
        let (a, b, c, d) = accumulate(r, h).map_err(|e| match e {
            Error::Mismatch(m) => Error::Mismatch(format!("utterance {id}: {m}")),
            other => other,
        })?;
        l1 += a;
        el += b;
        cos += c;
        frames += d;
        utterances.push(eval_pair(id, r, h)?);
    }
    Ok(ReconstructionReport {
        mel_l1: l1 / el.max(1) as f64,
        mel_cosine: cos / frames.max(1) as f64,
        utterances,
    })
}
