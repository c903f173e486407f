//! Discrete bottleneck: EMA vector quantization, residual VQ and FSQ.
//!
//! Codebooks are not gradient-trained, so they live outside the
//! [`ParamStore`](crate::params::ParamStore) and always use 64-bit state.
//! Quantized outputs enter the tape through a straight-through node.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};

pub const COUNT_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantizerKind {
    Vq,
    Rvq,
    Fsq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantizerConfig {
    pub kind: QuantizerKind,
    /// Entries per codebook (per stage for RVQ).
    pub cs: usize,
    pub cn: usize,
    pub cd: usize,
    pub fsq_levels: Vec<usize>,
    pub decay: f64,
    pub beta: f64,
    /// Entries whose EMA count drops below this are reseeded.
    pub dead_threshold: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            kind: QuantizerKind::Vq,
            cs: 65536,
            cn: 1,
            cd: 32,
            fsq_levels: vec![2; 16],
            decay: 0.99,
            beta: 0.25,
            dead_threshold: 1e-2,
        }
    }
}

impl QuantizerConfig {
    pub fn fsq(levels: Vec<usize>) -> Self {
        Self {
            kind: QuantizerKind::Fsq,
            cs: levels.iter().product(),
            cn: 1,
            cd: levels.len(),
            fsq_levels: levels,
            ..Self::default()
        }
    }

    pub fn rvq(cn: usize, cs: usize, cd: usize) -> Self {
        Self {
            kind: QuantizerKind::Rvq,
            cs,
            cn,
            cd,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cs == 0 || self.cd == 0 || self.cn == 0 {
            return Err(Error::Config("cs, cn and cd must be positive".into()));
        }
        match self.kind {
            QuantizerKind::Fsq => {
                if self.fsq_levels.len() != self.cd {
                    return Err(Error::Config(format!(
                        "fsq_levels has {} entries, cd is {}",
                        self.fsq_levels.len(),
                        self.cd
                    )));
                }
                if self.fsq_levels.contains(&0) {
                    return Err(Error::Config("fsq level count must be positive".into()));
                }
                let prod = self
                    .fsq_levels
                    .iter()
                    .try_fold(1usize, |a, &l| a.checked_mul(l))
                    .ok_or_else(|| Error::Config("fsq codebook size overflows".into()))?;
                if prod != self.cs {
                    return Err(Error::Config(format!(
                        "product of fsq_levels {} != cs {}",
                        prod, self.cs
                    )));
                }
                if self.cn != 1 {
                    return Err(Error::Config("fsq requires cn = 1".into()));
                }
            }
            QuantizerKind::Vq if self.cn != 1 => {
                return Err(Error::Config(
                    "vq requires cn = 1; use rvq for several codebooks".into(),
                ))
            }
            QuantizerKind::Rvq if self.cn < 2 => {
                return Err(Error::Config("rvq requires cn >= 2".into()))
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.decay) {
            return Err(Error::Config("decay must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Bits per token per codebook, when `cs` is a power of two.
    pub fn bits_per_code(&self) -> Option<u32> {
        self.cs.is_power_of_two().then(|| self.cs.trailing_zeros())
    }

    /// Number of stored codebooks (FSQ has an implicit one).
    pub fn stored_codebooks(&self) -> usize {
        match self.kind {
            QuantizerKind::Fsq => 0,
            _ => self.cn,
        }
    }
}

/// EMA-updated codebook of `cs` entries of width `cd`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub cs: usize,
    pub cd: usize,
    pub entries: Vec<f64>,
    pub ema_count: Vec<f64>,
    pub ema_sum: Vec<f64>,
    pub decay: f64,
    pub initialized: bool,
}

impl Codebook {
    /// Random fallback initialization `normal(0, 1/√cd)`.
    pub fn random<R: Rng>(cs: usize, cd: usize, decay: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, 1.0 / (cd as f64).sqrt()).expect("valid std");
        let entries: Vec<f64> = (0..cs * cd).map(|_| dist.sample(rng)).collect();
        Self {
            cs,
            cd,
            ema_sum: entries.clone(),
            entries,
            ema_count: vec![1.0; cs],
            decay,
            initialized: false,
        }
    }

    pub fn from_entries(cd: usize, entries: Vec<f64>, decay: f64) -> Result<Self> {
        if cd == 0 || entries.is_empty() || !entries.len().is_multiple_of(cd) {
            return Err(Error::InvalidArgument(format!(
                "{} codebook values do not form rows of width {}",
                entries.len(),
                cd
            )));
        }
        let cs = entries.len() / cd;
        Ok(Self {
            cs,
            cd,
            ema_sum: entries.clone(),
            entries,
            ema_count: vec![1.0; cs],
            decay,
            initialized: true,
        })
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        &self.entries[k * self.cd..(k + 1) * self.cd]
    }

    /// Seed every entry from a random row of `rows` plus small jitter.
    pub fn init_from_data<R: Rng>(&mut self, rows: &[f64], rng: &mut R) {
        let n = rows.len() / self.cd;
        if n == 0 {
            return;
        }
        let var = rows.iter().map(|v| v * v).sum::<f64>() / rows.len() as f64;
        let jitter = Normal::new(0.0, 1e-2 * var.sqrt().max(1e-6)).expect("valid std");
        for k in 0..self.cs {
            let r = rng.random_range(0..n);
            for d in 0..self.cd {
                self.entries[k * self.cd + d] = rows[r * self.cd + d] + jitter.sample(rng);
            }
        }
        self.ema_sum.copy_from_slice(&self.entries);
        self.ema_count.iter_mut().for_each(|c| *c = 1.0);
        self.initialized = true;
    }

    /// Nearest entry by squared Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, z: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.cs {
            let d: f64 = self
                .entry(k)
                .iter()
                .zip(z)
                .map(|(e, x)| (e - x) * (e - x))
                .sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    /// One EMA step over the assigned `rows` (`[n × cd]`).
    pub fn ema_update(&mut self, rows: &[f64], indices: &[usize]) {
        let cd = self.cd;
        let mut counts = vec![0.0; self.cs];
        let mut sums = vec![0.0; self.cs * cd];
        for (i, &k) in indices.iter().enumerate() {
            counts[k] += 1.0;
            for d in 0..cd {
                sums[k * cd + d] += rows[i * cd + d];
            }
        }
        let (a, b) = (self.decay, 1.0 - self.decay);
        for k in 0..self.cs {
            self.ema_count[k] = a * self.ema_count[k] + b * counts[k];
            let denom = self.ema_count[k].max(COUNT_FLOOR);
            for d in 0..cd {
                let j = k * cd + d;
                self.ema_sum[j] = a * self.ema_sum[j] + b * sums[j];
                self.entries[j] = self.ema_sum[j] / denom;
            }
        }
    }

    /// Reseed starved entries from random rows; returns how many were reset.
    pub fn dead_code_reset<R: Rng>(&mut self, rows: &[f64], threshold: f64, rng: &mut R) -> usize {
        let n = rows.len() / self.cd;
        if n == 0 {
            return 0;
        }
        let mut reset = 0;
        for k in 0..self.cs {
            if self.ema_count[k] < threshold {
                let r = rng.random_range(0..n);
                let row = &rows[r * self.cd..(r + 1) * self.cd];
                self.entries[k * self.cd..(k + 1) * self.cd].copy_from_slice(row);
                self.ema_sum[k * self.cd..(k + 1) * self.cd].copy_from_slice(row);
                self.ema_count[k] = 1.0;
                reset += 1;
            }
        }
        reset
    }
}

/// `(perplexity, utilization)` of an index multiset over `cs` entries.
pub fn codebook_stats(indices: &[usize], cs: usize) -> (f64, f64) {
    if indices.is_empty() || cs == 0 {
        return (0.0, 0.0);
    }
    let mut counts = std::collections::HashMap::new();
    for &i in indices {
        *counts.entry(i).or_insert(0usize) += 1;
    }
    let n = indices.len() as f64;
    let entropy: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    (entropy.exp(), counts.len() as f64 / cs as f64)
}

/// Snap `b ∈ [-1, 1]` to one of `levels` uniformly spaced points; returns
/// `(digit, value)`.
pub fn fsq_snap(b: f64, levels: usize) -> (usize, f64) {
    if levels == 1 {
        return (0, 0.0);
    }
    let step = (levels - 1) as f64;
    let digit = (((b + 1.0) * step / 2.0).round() as i64).clamp(0, levels as i64 - 1) as usize;
    (digit, -1.0 + 2.0 * digit as f64 / step)
}

/// Mixed-radix index of FSQ digits, dimension 0 least significant.
pub fn fsq_encode_digits(digits: &[usize], levels: &[usize]) -> usize {
    let mut idx = 0;
    for d in (0..levels.len()).rev() {
        idx = idx * levels[d] + digits[d];
    }
    idx
}

pub fn fsq_decode_index(mut index: usize, levels: &[usize]) -> Vec<usize> {
    levels
        .iter()
        .map(|&l| {
            let d = index % l;
            index /= l;
            d
        })
        .collect()
}

/// Code vector for an FSQ index.
pub fn fsq_embed(index: usize, levels: &[usize]) -> Vec<f64> {
    fsq_decode_index(index, levels)
        .into_iter()
        .zip(levels)
        .map(|(d, &l)| {
            if l == 1 {
                0.0
            } else {
                -1.0 + 2.0 * d as f64 / (l - 1) as f64
            }
        })
        .collect()
}

#[derive(Debug)]
pub struct QuantizeOutput {
    pub z_q: Var,
    /// `[T][CN]`.
    pub indices: Vec<Vec<usize>>,
    pub commit: Var,
    pub perplexity: f64,
    pub utilization: f64,
    /// Per stored codebook, the `[T × cd]` rows it quantized (for EMA).
    pub stage_inputs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub config: QuantizerConfig,
    pub codebooks: Vec<Codebook>,
}

impl Quantizer {
    pub fn new<R: Rng>(config: QuantizerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let codebooks = (0..config.stored_codebooks())
            .map(|_| Codebook::random(config.cs, config.cd, config.decay, rng))
            .collect();
        Ok(Self { config, codebooks })
    }

    pub fn is_initialized(&self) -> bool {
        self.codebooks.iter().all(|c| c.initialized)
    }

    /// Data-dependent init: each stage is seeded from the residuals left by
    /// the stages before it.
    pub fn init_from_data<R: Rng>(&mut self, rows: &[f64], rng: &mut R) {
        let cd = self.config.cd;
        let mut residual = rows.to_vec();
        for cb in &mut self.codebooks {
            cb.init_from_data(&residual, rng);
            for r in residual.chunks_mut(cd) {
                let (k, _) = cb.nearest(r);
                for (x, e) in r.iter_mut().zip(cb.entry(k)) {
                    *x -= e;
                }
            }
        }
    }

    /// Indices without touching a tape, `[T][CN]`.
    pub fn indices_of(&self, rows: &[f64]) -> Vec<Vec<usize>> {
        let cd = self.config.cd;
        match self.config.kind {
            QuantizerKind::Fsq => rows
                .chunks(cd)
                .map(|r| {
                    let digits: Vec<usize> = r
                        .iter()
                        .zip(&self.config.fsq_levels)
                        .map(|(&z, &l)| fsq_snap(z.tanh(), l).0)
                        .collect();
                    vec![fsq_encode_digits(&digits, &self.config.fsq_levels)]
                })
                .collect(),
            _ => rows
                .chunks(cd)
                .map(|r| {
                    let mut res = r.to_vec();
                    self.codebooks
                        .iter()
                        .map(|cb| {
                            let (k, _) = cb.nearest(&res);
                            res.iter_mut().zip(cb.entry(k)).for_each(|(x, e)| *x -= e);
                            k
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Code vectors (summed over stages) for `[T][CN]` indices.
    pub fn embed(&self, indices: &[Vec<usize>]) -> Result<Vec<f64>> {
        let cd = self.config.cd;
        let mut out = Vec::with_capacity(indices.len() * cd);
        for row in indices {
            if row.len() != self.config.cn {
                return Err(Error::Mismatch(format!(
                    "token has {} codes, cn is {}",
                    row.len(),
                    self.config.cn
                )));
            }
            if let Some(&bad) = row.iter().find(|&&k| k >= self.config.cs) {
                return Err(Error::Mismatch(format!(
                    "index {} outside codebook of {}",
                    bad, self.config.cs
                )));
            }
            match self.config.kind {
                QuantizerKind::Fsq => out.extend(fsq_embed(row[0], &self.config.fsq_levels)),
                _ => {
                    let mut v = vec![0.0; cd];
                    for (cb, &k) in self.codebooks.iter().zip(row) {
                        v.iter_mut().zip(cb.entry(k)).for_each(|(a, e)| *a += e);
                    }
                    out.extend(v);
                }
            }
        }
        Ok(out)
    }

    /// Quantize `z: [T, cd]` on the tape.
    pub fn quantize<S: Scalar>(&self, tape: &mut Tape<S>, z: Var) -> Result<QuantizeOutput> {
        let shape = tape.shape(z).to_vec();
        let cd = self.config.cd;
        if shape.len() != 2 || shape[1] != cd {
            return Err(Error::shape(
                "quantize",
                format!("z {:?} vs code dim {}", shape, cd),
            ));
        }
        let t = shape[0];
        let zv: Vec<f64> = tape.value(z).iter().map(|&v| Scalar::to_f64(v)).collect();
        match self.config.kind {
            QuantizerKind::Fsq => {
                let b = tape.tanh(z)?;
                let bv: Vec<f64> = tape.value(b).iter().map(|&v| Scalar::to_f64(v)).collect();
                let levels = &self.config.fsq_levels;
                let mut snapped = Vec::with_capacity(t * cd);
                let mut indices = Vec::with_capacity(t);
                for row in bv.chunks(cd) {
                    let (digits, vals): (Vec<usize>, Vec<f64>) = row
                        .iter()
                        .zip(levels)
                        .map(|(&x, &l)| fsq_snap(x, l))
                        .unzip();
                    indices.push(vec![fsq_encode_digits(&digits, levels)]);
                    snapped.extend(vals);
                }
                let z_q =
                    tape.straight_through(b, snapped.iter().map(|&v| S::from_f64(v)).collect())?;
                let commit = tape.scalar(S::zero());
                let flat: Vec<usize> = indices.iter().map(|r| r[0]).collect();
                let (perplexity, utilization) = codebook_stats(&flat, self.config.cs);
                Ok(QuantizeOutput {
                    z_q,
                    indices,
                    commit,
                    perplexity,
                    utilization,
                    stage_inputs: Vec::new(),
                })
            }
            _ => {
                if self.codebooks.is_empty() {
                    return Err(Error::InvalidArgument("empty codebook".into()));
                }
                let beta = S::from_f64(self.config.beta);
                let mut residual_var = z;
                let mut residual = zv;
                let mut total = vec![0.0; t * cd];
                let mut indices = vec![Vec::with_capacity(self.codebooks.len()); t];
                let mut commit: Option<Var> = None;
                let mut stage_inputs = Vec::with_capacity(self.codebooks.len());
                let (mut ppl, mut util) = (0.0, 0.0);
                for (s, cb) in self.codebooks.iter().enumerate() {
                    let mut chosen = Vec::with_capacity(t * cd);
                    let mut stage_idx = Vec::with_capacity(t);
                    for (i, row) in residual.chunks(cd).enumerate() {
                        let (k, _) = cb.nearest(row);
                        indices[i].push(k);
                        stage_idx.push(k);
                        chosen.extend_from_slice(cb.entry(k));
                    }
                    let (p, u) = codebook_stats(&stage_idx, cb.cs);
                    ppl += p;
                    util += u;
                    let e = tape.constant(
                        vec![t, cd],
                        chosen.iter().map(|&v| S::from_f64(v)).collect(),
                    )?;
                    let c = tape.l2_loss(residual_var, e, None)?;
                    let c = tape.scale(c, beta)?;
                    commit = Some(match commit {
                        Some(prev) => tape.add(prev, c)?,
                        None => c,
                    });
                    stage_inputs.push(residual.clone());
                    total.iter_mut().zip(&chosen).for_each(|(a, e)| *a += e);
                    if s + 1 < self.codebooks.len() {
                        residual_var = tape.sub(residual_var, e)?;
                        residual.iter_mut().zip(&chosen).for_each(|(r, e)| *r -= e);
                    }
                }
                let n = self.codebooks.len() as f64;
                let z_q =
                    tape.straight_through(z, total.iter().map(|&v| S::from_f64(v)).collect())?;
                Ok(QuantizeOutput {
                    z_q,
                    indices,
                    commit: commit.expect("at least one stage"),
                    perplexity: ppl / n,
                    utilization: util / n,
                    stage_inputs,
                })
            }
        }
    }

    /// EMA-update every stage from gathered `(stage_inputs, indices)`.
    pub fn ema_update(&mut self, stage_inputs: &[Vec<f64>], indices: &[Vec<usize>]) {
        for (s, cb) in self.codebooks.iter_mut().enumerate() {
            let idx: Vec<usize> = indices.iter().map(|r| r[s]).collect();
            cb.ema_update(&stage_inputs[s], &idx);
        }
    }

    pub fn dead_code_reset<R: Rng>(&mut self, stage_inputs: &[Vec<f64>], rng: &mut R) -> usize {
        let th = self.config.dead_threshold;
        self.codebooks
            .iter_mut()
            .zip(stage_inputs)
            .map(|(cb, rows)| cb.dead_code_reset(rows, th, rng))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vq(entries: Vec<f64>, cd: usize) -> Quantizer {
        let cb = Codebook::from_entries(cd, entries, 0.99).unwrap();
        Quantizer {
            config: QuantizerConfig {
                kind: QuantizerKind::Vq,
                cs: cb.cs,
                cn: 1,
                cd,
                ..QuantizerConfig::default()
            },
            codebooks: vec![cb],
        }
    }

    fn run(q: &Quantizer, z: &[f64]) -> (Vec<Vec<usize>>, Vec<f64>, f64) {
        let mut tape = Tape::<f64>::new();
        let zv = tape
            .constant(vec![z.len() / q.config.cd, q.config.cd], z.to_vec())
            .unwrap();
        let out = q.quantize(&mut tape, zv).unwrap();
        (
            out.indices,
            tape.value(out.z_q).to_vec(),
            tape.item(out.commit),
        )
    }

    #[test]
    fn vq_nearest_example() {
        let q = vq(vec![0.0, 0.0, 1.0, 1.0], 2);
        let (idx, zq, _) = run(&q, &[0.9, 0.8]);
        // Distances by hand: 0.81 + 0.64 = 1.45 and 0.01 + 0.04 = 0.05.
        assert_eq!(idx, vec![vec![1]]);
        assert_eq!(zq, vec![1.0, 1.0]);
        assert!((q.codebooks[0].nearest(&[0.9, 0.8]).1 - 0.05).abs() < 1e-12);
    }

    #[test]
    fn exact_entry_has_zero_commit() {
        let entries: Vec<f64> = (0..10).map(|i| i as f64 * 0.5).collect();
        let q = vq(entries, 2);
        let (idx, _, commit) = run(&q, &[3.0, 3.5]);
        assert_eq!(idx, vec![vec![3]]);
        assert_eq!(commit, 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let q = vq(vec![1.0, 0.0, -1.0, 0.0], 2);
        assert_eq!(run(&q, &[0.0, 0.0]).0, vec![vec![0]]);
    }

    #[test]
    fn commit_loss_value() {
        let q = vq(vec![0.0, 0.0], 2);
        let (_, _, commit) = run(&q, &[1.0, 2.0]);
        assert!((commit - 0.25 * 2.5).abs() < 1e-12);
    }

    #[test]
    fn straight_through_gradient_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = Quantizer::new(
            QuantizerConfig {
                cs: 16,
                cd: 4,
                ..QuantizerConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let z = Tensor::from_f64(
            vec![3, 4],
            &(0..12).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(),
        )
        .unwrap()
        .with_grad();
        let w: Vec<f64> = (0..12).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut tape = Tape::<f64>::new();
        let zv = tape.leaf(&z);
        let out = q.quantize(&mut tape, zv).unwrap();
        let wv = tape.constant(vec![3, 4], w).unwrap();
        let y = tape.mul(out.z_q, wv).unwrap();
        let y = tape.mul(y, y).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(zv).unwrap(), g.get(out.z_q).unwrap());
    }

    #[test]
    fn ema_hand_example() {
        let mut cb = Codebook::from_entries(2, vec![0.0, 0.0, 5.0, 5.0], 0.99).unwrap();
        cb.ema_count = vec![1.0, 1.0];
        cb.ema_update(&[1.0, 1.0], &[0]);
        assert!((cb.ema_count[0] - 1.0).abs() < 1e-12);
        assert!((cb.ema_sum[0] - 0.01).abs() < 1e-12);
        assert!((cb.entry(0)[0] - 0.01).abs() < 1e-12);
        assert!((cb.entry(0)[1] - 0.01).abs() < 1e-12);
        // No assignment: sum and count decay together.
        assert!((cb.entry(1)[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ema_zero_decay_is_batch_mean() {
        let mut cb = Codebook::from_entries(1, vec![0.0, 9.0], 0.0).unwrap();
        cb.ema_update(&[1.0, 2.0, 6.0], &[0, 0, 0]);
        assert_eq!(cb.entry(0), &[3.0]);
    }

    #[test]
    fn rvq_two_stage_example() {
        let cb1 = Codebook::from_entries(2, vec![0.0, 0.0, 2.0, 2.0], 0.99).unwrap();
        let cb2 = Codebook::from_entries(2, vec![0.0, 0.0, -1.0, 0.0], 0.99).unwrap();
        let q = Quantizer {
            config: QuantizerConfig::rvq(2, 2, 2),
            codebooks: vec![cb1, cb2],
        };
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(vec![1, 2], vec![1.2, 1.9]).unwrap();
        let out = q.quantize(&mut tape, z).unwrap();
        assert_eq!(out.indices, vec![vec![1, 1]]);
        let r = &out.stage_inputs[1];
        assert!((r[0] + 0.8).abs() < 1e-12 && (r[1] + 0.1).abs() < 1e-12);
        let zq = tape.value(out.z_q);
        assert!((zq[0] - 1.0).abs() < 1e-12 && (zq[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rvq_zero_residual_when_stage_one_exact() {
        let cb1 = Codebook::from_entries(2, vec![0.5, 0.5, 2.0, 2.0], 0.99).unwrap();
        let cb2 = Codebook::from_entries(2, vec![0.1, 0.0, -1.0, 0.0], 0.99).unwrap();
        let q = Quantizer {
            config: QuantizerConfig::rvq(2, 2, 2),
            codebooks: vec![cb1, cb2],
        };
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(vec![1, 2], vec![2.0, 2.0]).unwrap();
        let out = q.quantize(&mut tape, z).unwrap();
        assert_eq!(out.stage_inputs[1], vec![0.0, 0.0]);
    }

    #[test]
    fn fsq_example() {
        let q = Quantizer::new(
            QuantizerConfig::fsq(vec![2, 2]),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let (idx, zq, commit) = run(&q, &[0.3, -0.7]);
        assert_eq!(idx, vec![vec![1]]);
        assert_eq!(zq, vec![1.0, -1.0]);
        assert_eq!(commit, 0.0);
        assert!((0.3f64.tanh() - 0.291).abs() < 1e-3);
        assert!(((-0.7f64).tanh() + 0.604).abs() < 1e-3);
    }

    #[test]
    fn fsq_snapped_vector_is_fixed_point() {
        let levels = vec![3, 5, 2];
        for idx in 0..30 {
            let v = fsq_embed(idx, &levels);
            let digits: Vec<usize> = v
                .iter()
                .zip(&levels)
                .map(|(&x, &l)| fsq_snap(x, l).0)
                .collect();
            assert_eq!(fsq_encode_digits(&digits, &levels), idx);
        }
    }

    #[test]
    fn codebook_stats_examples() {
        assert_eq!(codebook_stats(&[3, 3, 3], 8), (1.0, 1.0 / 8.0));
        let (p, u) = codebook_stats(&[0, 1, 2, 3], 4);
        assert!((p - 4.0).abs() < 1e-12);
        assert_eq!(u, 1.0);
        let (p, u) = codebook_stats(&[0, 0, 1, 1], 4);
        assert!((p - 2.0).abs() < 1e-12);
        assert_eq!(u, 0.5);
    }

    #[test]
    fn dead_code_reset_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = vec![7.0, 8.0, 9.0, 10.0];
        let mut cb = Codebook::from_entries(2, vec![0.0; 6], 0.99).unwrap();
        assert_eq!(cb.dead_code_reset(&rows, 0.0, &mut rng), 0);
        assert_eq!(cb.dead_code_reset(&rows, 0.5, &mut rng), 0);
        cb.ema_count[1] = 1e-4;
        assert_eq!(cb.dead_code_reset(&rows, 0.5, &mut rng), 1);
        let e = cb.entry(1);
        assert!(e == [7.0, 8.0] || e == [9.0, 10.0]);
        assert_eq!(cb.entry(0), &[0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(QuantizerConfig::default().validate().is_ok());
        assert!(QuantizerConfig::fsq(vec![2; 16]).validate().is_ok());
        assert_eq!(QuantizerConfig::fsq(vec![2; 16]).cs, 65536);
        let mut bad = QuantizerConfig::fsq(vec![2; 16]);
        bad.cs = 1000;
        assert!(bad.validate().is_err());
        let mut bad = QuantizerConfig::default();
        bad.cn = 2;
        assert!(bad.validate().is_err());
        assert!(QuantizerConfig::rvq(4, 16384, 32).validate().is_ok());
    }

    #[test]
    fn embed_matches_quantized_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = Quantizer::new(QuantizerConfig::rvq(3, 8, 4), &mut rng).unwrap();
        let z: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let (idx, zq, _) = run(&q, &z);
        assert_eq!(q.indices_of(&z), idx);
        let emb = q.embed(&idx).unwrap();
        for (a, b) in emb.iter().zip(&zq) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(q.embed(&[vec![0, 0]]).is_err());
        assert!(q.embed(&[vec![0, 0, 8]]).is_err());
    }

    proptest! {
        #[test]
        fn nearest_neighbor_is_optimal(seed in 0u64..1000, t in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = Quantizer::new(QuantizerConfig { cs: 32, cd: 3, ..QuantizerConfig::default() }, &mut rng).unwrap();
            let z: Vec<f64> = (0..t * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (idx, _, _) = run(&q, &z);
            let cb = &q.codebooks[0];
            for (i, row) in z.chunks(3).enumerate() {
                let dist = |k: usize| -> f64 { cb.entry(k).iter().zip(row).map(|(e, x)| (e - x).powi(2)).sum() };
                let chosen = dist(idx[i][0]);
                for k in 0..cb.cs {
                    prop_assert!(chosen <= dist(k));
                }
            }
        }

        #[test]
        fn fsq_index_bijection(levels in proptest::collection::vec(1usize..5, 1..4)) {
            let cs: usize = levels.iter().product();
            for idx in 0..cs {
                prop_assert_eq!(fsq_encode_digits(&fsq_decode_index(idx, &levels), &levels), idx);
            }
        }

        #[test]
        fn quantize_is_deterministic(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = Quantizer::new(QuantizerConfig::rvq(2, 16, 2), &mut rng).unwrap();
            let z: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            prop_assert_eq!(run(&q, &z).0, run(&q, &z).0);
        }
    }
}
