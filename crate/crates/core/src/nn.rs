//! Llama-style transformer pieces: RMSNorm and its timestep-modulated
//! variant, rotary self-attention, SiLU-gated MLP, and the sinusoidal
//! timestep embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId};

pub const NORM_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;
pub const INIT_STD: f64 = 0.02;
const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub causal: bool,
    pub adaptive_norm: bool,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(self.hidden / self.heads).is_multiple_of(2) {
            return Err(Error::Config(
                "head_dim must be even for rotary pairs".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

fn p<S: Scalar>(tape: &Tape<S>, id: ParamId) -> Var {
    tape.param(id.0)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(
        b: &mut ParamBuilder<S, R>,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = b.normal("weight", vec![d_in, d_out], INIT_STD);
        let bias = bias.then(|| b.fill("bias", vec![d_out], 0.0));
        Self { weight, bias }
    }

    pub fn zeros<S: Scalar, R: Rng>(b: &mut ParamBuilder<S, R>, d_in: usize, d_out: usize) -> Self {
        let weight = b.fill("weight", vec![d_in, d_out], 0.0);
        let bias = Some(b.fill("bias", vec![d_out], 0.0));
        Self { weight, bias }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p(tape, self.weight))?;
        match self.bias {
            Some(bias) => tape.add(y, p(tape, bias)),
            None => Ok(y),
        }
    }

    pub fn numel(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }
}

/// `gain ⊙ x / sqrt(mean(x²) + eps)` row-wise.
pub fn rms_norm<S: Scalar>(tape: &mut Tape<S>, x: Var, gain: Var) -> Result<Var> {
    let n = tape.rms_stat(x, S::from_f64(NORM_EPS))?;
    tape.mul(n, gain)
}

/// `rms_norm(x, gain) ⊙ (1 + scale) + shift`.
pub fn ada_rms_norm<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    gain: Var,
    scale: Var,
    shift: Var,
) -> Result<Var> {
    let n = rms_norm(tape, x, gain)?;
    let one_plus = tape.shift(scale, S::one())?;
    let m = tape.mul(n, one_plus)?;
    tape.add(m, shift)
}

#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub gain: ParamId,
}

impl RmsNorm {
    pub fn new<S: Scalar, R: Rng>(b: &mut ParamBuilder<S, R>, dim: usize) -> Self {
        Self {
            gain: b.fill("gain", vec![dim], 1.0),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let g = p(tape, self.gain);
        rms_norm(tape, x, g)
    }
}

/// Zero-initialized `silu(t_emb) → (scale, shift)` projection.
#[derive(Clone, Debug)]
pub struct Modulation {
    proj: Linear,
    hidden: usize,
}

impl Modulation {
    pub fn new<S: Scalar, R: Rng>(b: &mut ParamBuilder<S, R>, hidden: usize) -> Self {
        Self {
            proj: Linear::zeros(b, hidden, 2 * hidden),
            hidden,
        }
    }

    /// `t_emb` is `[hidden]`; returns `(scale, shift)`, each `[hidden]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, t_emb: Var) -> Result<(Var, Var)> {
        let h = self.hidden;
        let e = tape.reshape(t_emb, vec![1, h])?;
        let e = tape.silu(e)?;
        let m = self.proj.forward(tape, e)?;
        let m = tape.reshape(m, vec![2 * h])?;
        let scale = tape.slice(m, 0, 0, h)?;
        let shift = tape.slice(m, 0, h, h)?;
        Ok((scale, shift))
    }

    pub fn numel(hidden: usize) -> usize {
        Linear::numel(hidden, 2 * hidden, true)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    causal: bool,
}

impl Attention {
    pub fn new<S: Scalar, R: Rng>(b: &mut ParamBuilder<S, R>, cfg: &BlockConfig) -> Self {
        let h = cfg.hidden;
        Self {
            q: Linear::new(&mut b.sub("q"), h, h, false),
            k: Linear::new(&mut b.sub("k"), h, h, false),
            v: Linear::new(&mut b.sub("v"), h, h, false),
            o: Linear::new(&mut b.sub("o"), h, h, false),
            heads: cfg.heads,
            causal: cfg.causal,
        }
    }

    fn split_heads<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let (t, h) = (tape.shape(x)[0], tape.shape(x)[1]);
        let x = tape.reshape(x, vec![t, self.heads, h / self.heads])?;
        tape.transpose(x, 0, 1)
    }

    /// Self-attention over `x: [T, hidden]` with rotary positions `0..T`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::shape("rope_attention", format!("{:?}", shape)));
        }
        let (t, h) = (shape[0], shape[1]);
        let dh = h / self.heads;
        let base = S::from_f64(ROPE_BASE);
        let q = self.q.forward(tape, x)?;
        let q = self.split_heads(tape, q)?;
        let q = tape.rope(q, base)?;
        let k = self.k.forward(tape, x)?;
        let k = self.split_heads(tape, k)?;
        let k = tape.rope(k, base)?;
        let v = self.v.forward(tape, x)?;
        let v = self.split_heads(tape, v)?;

        let kt = tape.transpose(k, 1, 2)?;
        let scores = tape.matmul(q, kt)?;
        let mut scores = tape.scale(scores, S::from_f64(1.0 / (dh as f64).sqrt()))?;
        if self.causal && t > 1 {
            let mask: Vec<S> = (0..t * t)
                .map(|i| {
                    if i % t > i / t {
                        S::from_f64(MASK_VALUE)
                    } else {
                        S::zero()
                    }
                })
                .collect();
            let mask = tape.constant(vec![t, t], mask)?;
            scores = tape.add(scores, mask)?;
        }
        let att = tape.softmax(scores)?;
        let ctx = tape.matmul(att, v)?;
        let ctx = tape.transpose(ctx, 0, 1)?;
        let ctx = tape.reshape(ctx, vec![t, h])?;
        self.o.forward(tape, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    gate: Linear,
    up: Linear,
    down: Linear,
}

impl Mlp {
    pub fn new<S: Scalar, R: Rng>(
        b: &mut ParamBuilder<S, R>,
        hidden: usize,
        intermediate: usize,
    ) -> Self {
        Self {
            gate: Linear::new(&mut b.sub("gate"), hidden, intermediate, false),
            up: Linear::new(&mut b.sub("up"), hidden, intermediate, false),
            down: Linear::new(&mut b.sub("down"), intermediate, hidden, false),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let g = self.gate.forward(tape, x)?;
        let g = tape.silu(g)?;
        let u = self.up.forward(tape, x)?;
        let h = tape.mul(g, u)?;
        self.down.forward(tape, h)
    }
}

/// Pre-norm residual block. With `adaptive_norm`, one modulation per block
/// drives both of its norms from the timestep embedding.
#[derive(Clone, Debug)]
pub struct Block {
    attn_norm: RmsNorm,
    attn: Attention,
    mlp_norm: RmsNorm,
    mlp: Mlp,
    modulation: Option<Modulation>,
}

impl Block {
    pub fn new<S: Scalar, R: Rng>(b: &mut ParamBuilder<S, R>, cfg: &BlockConfig) -> Self {
        Self {
            attn_norm: RmsNorm::new(&mut b.sub("attn_norm"), cfg.hidden),
            attn: Attention::new(&mut b.sub("attn"), cfg),
            mlp_norm: RmsNorm::new(&mut b.sub("mlp_norm"), cfg.hidden),
            mlp: Mlp::new(&mut b.sub("mlp"), cfg.hidden, cfg.intermediate),
            modulation: cfg
                .adaptive_norm
                .then(|| Modulation::new(&mut b.sub("modulation"), cfg.hidden)),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        t_emb: Option<Var>,
    ) -> Result<Var> {
        tape.counters.block_executions += 1;
        let mods = match (&self.modulation, t_emb) {
            (Some(m), Some(e)) => Some(m.forward(tape, e)?),
            (Some(_), None) => {
                return Err(Error::InvalidArgument(
                    "adaptive block needs a timestep embedding".into(),
                ))
            }
            (None, _) => None,
        };
        let norm = |tape: &mut Tape<S>, n: &RmsNorm, x: Var| -> Result<Var> {
            let g = p(tape, n.gain);
            match mods {
                Some((scale, shift)) => ada_rms_norm(tape, x, g, scale, shift),
                None => rms_norm(tape, x, g),
            }
        };
        let h = norm(tape, &self.attn_norm, x)?;
        let h = self.attn.forward(tape, h)?;
        let x = tape.add(x, h)?;
        let h = norm(tape, &self.mlp_norm, x)?;
        let h = self.mlp.forward(tape, h)?;
        tape.add(x, h)
    }

    pub fn numel(cfg: &BlockConfig) -> usize {
        let h = cfg.hidden;
        let attn = 4 * h * h;
        let mlp = 3 * h * cfg.intermediate;
        let norms = 2 * h;
        let modulation = if cfg.adaptive_norm {
            Modulation::numel(h)
        } else {
            0
        };
        attn + mlp + norms + modulation
    }
}

/// Geometric frequencies from 1 to 10⁴.
pub fn timestep_frequencies(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 10_000f64.powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// Sinusoidal features of a scalar in [0, 1] followed by a two-layer SiLU MLP.
#[derive(Clone, Debug)]
pub struct TimestepEmbedding {
    freqs: Vec<f64>,
    fc1: Linear,
    fc2: Linear,
    hidden: usize,
}

impl TimestepEmbedding {
    /// `freq_dim` is the sinusoid feature width (even).
    pub fn new<S: Scalar, R: Rng>(
        b: &mut ParamBuilder<S, R>,
        freq_dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            freqs: timestep_frequencies(freq_dim / 2),
            fc1: Linear::new(&mut b.sub("fc1"), freq_dim, hidden, true),
            fc2: Linear::new(&mut b.sub("fc2"), hidden, hidden, true),
            hidden,
        }
    }

    /// Same architecture with a zero-initialized output layer, so the
    /// embedding starts as an exact no-op when summed into another.
    pub fn new_zero_out<S: Scalar, R: Rng>(
        b: &mut ParamBuilder<S, R>,
        freq_dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            freqs: timestep_frequencies(freq_dim / 2),
            fc1: Linear::new(&mut b.sub("fc1"), freq_dim, hidden, true),
            fc2: Linear::zeros(&mut b.sub("fc2"), hidden, hidden),
            hidden,
        }
    }

    /// `t` is a one-element node; returns `[hidden]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, t: Var) -> Result<Var> {
        let freqs: Vec<S> = self.freqs.iter().map(|&f| S::from_f64(f)).collect();
        let t = tape.reshape(t, vec![1])?;
        let f = tape.sinusoid(t, &freqs)?;
        let h = self.fc1.forward(tape, f)?;
        let h = tape.silu(h)?;
        let h = self.fc2.forward(tape, h)?;
        tape.reshape(h, vec![self.hidden])
    }

    pub fn numel(freq_dim: usize, hidden: usize) -> usize {
        Linear::numel(freq_dim, hidden, true) + Linear::numel(hidden, hidden, true)
    }
}
