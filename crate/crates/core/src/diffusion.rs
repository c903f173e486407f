//! Flow-matching decoder: noising, velocity prediction conditioned on the
//! token sequence and timestep, Euler sampling and token guidance.
//!
//! Conditioning is additive and positionwise. With `split_head`, the first
//! `layers - head_layers` blocks process the conditioning once per
//! utterance and only the head repeats per sampling step.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Block, BlockConfig, Linear, RmsNorm, TimestepEmbedding};
use crate::params::{ParamBuilder, ParamId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub head_layers: usize,
    pub split_head: bool,
    pub cfg_drop_prob: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 16,
            head_layers: 4,
            split_head: false,
            cfg_drop_prob: 0.1,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.split_head && (self.head_layers == 0 || self.head_layers > self.layers) {
            return Err(Error::Config(format!(
                "head_layers {} must lie in [1, {}]",
                self.head_layers, self.layers
            )));
        }
        if !(0.0..1.0).contains(&self.cfg_drop_prob) {
            return Err(Error::Config("cfg_drop_prob must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn main_layers(&self) -> usize {
        if self.split_head {
            self.layers - self.head_layers
        } else {
            0
        }
    }

    /// Blocks executed per velocity evaluation.
    pub fn step_layers(&self) -> usize {
        self.layers - self.main_layers()
    }
}

/// `x_t = t·x + (1 − t)·ε`.
pub fn forward_diffuse<S: Scalar>(x: &[S], eps: &[S], t: S) -> Vec<S> {
    x.iter()
        .zip(eps)
        .map(|(&a, &e)| t * a + (S::one() - t) * e)
        .collect()
}

/// `v_u + w·(v_c − v_u)`; `w == 1` returns `v_c` untouched.
pub fn cfg_combine<S: Scalar>(v_cond: Vec<S>, v_uncond: &[S], w: S) -> Vec<S> {
    if w == S::one() {
        return v_cond;
    }
    v_cond
        .iter()
        .zip(v_uncond)
        .map(|(&c, &u)| u + w * (c - u))
        .collect()
}

/// Masked L1 between predicted velocity and the target `x − ε`.
pub fn flow_matching_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Var,
    x: &[S],
    eps: &[S],
    mask: Option<&[S]>,
) -> Result<Var> {
    let target: Vec<S> = x.iter().zip(eps).map(|(&a, &e)| a - e).collect();
    let shape = tape.shape(pred).to_vec();
    let target = tape.constant(shape, target)?;
    tape.l1_loss(pred, target, mask)
}

pub fn gaussian<S: Scalar, R: Rng>(rng: &mut R, n: usize) -> Vec<S> {
    (0..n)
        .map(|_| S::from_f64(StandardNormal.sample(rng)))
        .collect()
}

/// Uniform-grid Euler from `t = 0` to `1`. `velocity(x, t, dt)` receives the
/// step size so step-conditioned models can use it.
pub fn euler_sample<S, F>(noise: Vec<S>, steps: usize, mut velocity: F) -> Result<Vec<S>>
where
    S: Scalar,
    F: FnMut(&[S], S, S) -> Result<Vec<S>>,
{
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "sampling needs at least one step".into(),
        ));
    }
    let n = S::from_f64(steps as f64);
    let dt = S::one() / n;
    let mut x = noise;
    for k in 0..steps {
        let t = S::from_f64(k as f64) / n;
        let v = velocity(&x, t, dt)?;
        if v.len() != x.len() {
            return Err(Error::shape(
                "euler_sample",
                format!("velocity {} vs state {}", v.len(), x.len()),
            ));
        }
        for (xi, vi) in x.iter_mut().zip(v) {
            *xi += vi / n;
        }
    }
    Ok(x)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleStats {
    pub forward_passes: usize,
    pub block_executions: usize,
    pub base_computations: usize,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    hidden: usize,
    in_proj: Linear,
    cond_proj: Linear,
    null_embedding: ParamId,
    t_embed: TimestepEmbedding,
    step_embed: Option<TimestepEmbedding>,
    main: Vec<Block>,
    base_proj: Option<Linear>,
    head: Vec<Block>,
    norm: RmsNorm,
    out: Linear,
}

impl Decoder {
    pub fn new<S: Scalar, R: Rng>(
        b: &mut ParamBuilder<S, R>,
        config: &DecoderConfig,
        block: &BlockConfig,
        mel_dim: usize,
        freq_dim: usize,
    ) -> Self {
        let h = block.hidden;
        let plain = BlockConfig {
            causal: false,
            adaptive_norm: false,
            ..*block
        };
        let adaptive = BlockConfig {
            causal: false,
            adaptive_norm: true,
            ..*block
        };
        let main = (0..config.main_layers())
            .map(|i| Block::new(&mut b.sub(&format!("main.{i}")), &plain))
            .collect();
        let base_proj = config
            .split_head
            .then(|| Linear::new(&mut b.sub("base_proj"), h, h, true));
        let head = (0..config.step_layers())
            .map(|i| Block::new(&mut b.sub(&format!("blocks.{i}")), &adaptive))
            .collect();
        Self {
            config: config.clone(),
            hidden: h,
            in_proj: Linear::new(&mut b.sub("in_proj"), mel_dim, h, true),
            cond_proj: Linear::new(&mut b.sub("cond_proj"), h, h, true),
            null_embedding: b.normal("null_embedding", vec![1, h], crate::nn::INIT_STD),
            t_embed: TimestepEmbedding::new(&mut b.sub("t_embed"), freq_dim, h),
            step_embed: None,
            main,
            base_proj,
            head,
            norm: RmsNorm::new(&mut b.sub("norm"), h),
            out: Linear::new(&mut b.sub("out"), h, mel_dim, true),
        }
    }

    /// Adds the zero-initialized step-size pathway used by shortcut models.
    pub fn add_step_embedding<S: Scalar, R: Rng>(
        &mut self,
        b: &mut ParamBuilder<S, R>,
        freq_dim: usize,
    ) {
        self.step_embed = Some(TimestepEmbedding::new_zero_out(
            &mut b.sub("step_embed"),
            freq_dim,
            self.hidden,
        ));
    }

    pub fn has_step_embedding(&self) -> bool {
        self.step_embed.is_some()
    }

    /// The learned null conditioning broadcast to `t_len` rows.
    pub fn null_cond<S: Scalar>(&self, tape: &mut Tape<S>, t_len: usize) -> Result<Var> {
        let table = tape.param(self.null_embedding.0);
        tape.embedding(table, &vec![0; t_len])
    }

    /// Per-utterance work independent of `x_t` and `t`. Returns the additive
    /// conditioning consumed by [`velocity`](Self::velocity).
    pub fn prepare<S: Scalar>(&self, tape: &mut Tape<S>, cond: Var) -> Result<Var> {
        let mut h = self.cond_proj.forward(tape, cond)?;
        if let Some(base_proj) = &self.base_proj {
            for block in &self.main {
                h = block.forward(tape, h, None)?;
            }
            h = base_proj.forward(tape, h)?;
        }
        Ok(h)
    }

    /// Velocity for `x_t: [T, mel_dim]` at `t` (one element) with optional
    /// step size `d` (one element).
    pub fn velocity<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        x_t: Var,
        t: Var,
        d: Option<Var>,
        prepared: Var,
    ) -> Result<Var> {
        let (xs, cs) = (tape.shape(x_t).to_vec(), tape.shape(prepared).to_vec());
        if xs.len() != 2 || cs.len() != 2 || xs[0] != cs[0] {
            return Err(Error::shape(
                "predict_velocity",
                format!("x_t {:?} vs cond {:?}", xs, cs),
            ));
        }
        let mut emb = self.t_embed.forward(tape, t)?;
        if let (Some(se), Some(d)) = (&self.step_embed, d) {
            let de = se.forward(tape, d)?;
            emb = tape.add(emb, de)?;
        }
        let x = self.in_proj.forward(tape, x_t)?;
        let mut h = tape.add(x, prepared)?;
        for block in &self.head {
            h = block.forward(tape, h, Some(emb))?;
        }
        let h = self.norm.forward(tape, h)?;
        self.out.forward(tape, h)
    }
}
