//! The full tokenizer: causal encoder, quantizer, flow-matching decoder and
//! auxiliary CTC head, plus named size presets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Scalar, Tape, Var};
use crate::diffusion::{
    euler_sample, forward_diffuse, gaussian, Decoder, DecoderConfig, SampleStats,
};
use crate::error::{Error, Result};
use crate::mel::{MelConfig, MelSpectrogram};
use crate::nn::{Block, BlockConfig, Linear, Modulation, RmsNorm, TimestepEmbedding};
use crate::params::{ParamBuilder, ParamStore};
use crate::quantizer::{Quantizer, QuantizerConfig, QuantizerKind};

/// Parameter-name prefixes of the freezable module groups.
pub const ENCODER_PREFIX: &str = "encoder.";
pub const QUANTIZER_PREFIX: &str = "quantizer.";
pub const DECODER_PREFIX: &str = "decoder.";
pub const CTC_PREFIX: &str = "ctc.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub mel: MelConfig,
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub ctc_layers: usize,
    /// CTC output classes including blank.
    pub vocab_size: usize,
    /// Width of the sinusoidal timestep features.
    pub freq_dim: usize,
    pub quantizer: QuantizerConfig,
    pub decoder: DecoderConfig,
    /// Whether the decoder carries the step-size pathway.
    pub shortcut: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset("desk").expect("desk preset exists")
    }
}

impl ModelConfig {
    /// `S`, `B`, `L`, `XL` or `desk`.
    pub fn preset(name: &str) -> Result<Self> {
        let large = |enc: usize, dec: usize| Self {
            mel: MelConfig::default(),
            hidden: 1536,
            intermediate: 4096,
            heads: 16,
            encoder_layers: enc,
            ctc_layers: 4,
            vocab_size: 32100,
            freq_dim: 256,
            quantizer: QuantizerConfig::default(),
            decoder: DecoderConfig {
                layers: dec,
                ..DecoderConfig::default()
            },
            shortcut: false,
        };
        Ok(match name {
            "S" => large(8, 8),
            "B" => large(12, 12),
            "L" => large(16, 16),
            "XL" => large(24, 24),
            "desk" => Self {
                // 16 bins × stack 4 keeps the stacked frame as wide as the hidden state.
                mel: MelConfig {
                    n_mels: 16,
                    ..MelConfig::default()
                },
                hidden: 64,
                intermediate: 128,
                heads: 4,
                encoder_layers: 2,
                ctc_layers: 2,
                vocab_size: 10,
                freq_dim: 32,
                quantizer: QuantizerConfig {
                    cs: 256,
                    cd: 8,
                    ..QuantizerConfig::default()
                },
                decoder: DecoderConfig {
                    layers: 2,
                    head_layers: 1,
                    split_head: false,
                    cfg_drop_prob: 0.1,
                },
                shortcut: false,
            },
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        })
    }

    /// A configuration under 2k trainable parameters, small enough for
    /// exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            mel: MelConfig {
                n_mels: 4,
                stack: 2,
                ..MelConfig::default()
            },
            hidden: 8,
            intermediate: 4,
            heads: 2,
            encoder_layers: 1,
            ctc_layers: 1,
            vocab_size: 3,
            freq_dim: 4,
            quantizer: QuantizerConfig {
                cs: 4,
                cd: 2,
                ..QuantizerConfig::default()
            },
            decoder: DecoderConfig {
                layers: 1,
                head_layers: 1,
                split_head: false,
                cfg_drop_prob: 0.1,
            },
            shortcut: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.quantizer.validate()?;
        self.decoder.validate()?;
        self.block(false, false).validate()?;
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if self.freq_dim < 2 || !self.freq_dim.is_multiple_of(2) {
            return Err(Error::Config("freq_dim must be even and >= 2".into()));
        }
        Ok(())
    }

    pub fn block(&self, causal: bool, adaptive_norm: bool) -> BlockConfig {
        BlockConfig {
            hidden: self.hidden,
            intermediate: self.intermediate,
            heads: self.heads,
            causal,
            adaptive_norm,
        }
    }

    /// Width of one stacked mel row.
    pub fn mel_dim(&self) -> usize {
        self.mel.n_mels * self.mel.stack
    }

    pub fn frame_rate(&self) -> f64 {
        self.mel.token_rate()
    }

    /// `frame_rate · CN · log2(CS)`, exact when `CS` is a power of two.
    pub fn bitrate_bps(&self) -> f64 {
        let q = &self.quantizer;
        match q.bits_per_code() {
            Some(bits) => {
                let num = self.mel.sample_rate as u64 * q.cn as u64 * bits as u64;
                let den = (self.mel.hop * self.mel.stack) as u64;
                if num.is_multiple_of(den) {
                    (num / den) as f64
                } else {
                    num as f64 / den as f64
                }
            }
            None => self.frame_rate() * q.cn as f64 * (q.cs as f64).log2(),
        }
    }

    /// Exact parameter count from the layer formulae, including codebook
    /// entries.
    pub fn count_params(&self) -> usize {
        let (h, m, cd) = (self.hidden, self.mel_dim(), self.quantizer.cd);
        let plain = Block::numel(&self.block(false, false));
        let adaptive = Block::numel(&self.block(false, true));
        let temb = TimestepEmbedding::numel(self.freq_dim, h);
        let d = &self.decoder;

        let encoder = Linear::numel(m, h, true) + self.encoder_layers * plain + h;
        let quantizer = Linear::numel(h, cd, true) + Linear::numel(cd, h, true);
        let codebooks = self.quantizer.stored_codebooks() * self.quantizer.cs * cd;
        let mut decoder = Linear::numel(m, h, true)
            + Linear::numel(h, h, true)
            + h
            + temb
            + d.main_layers() * plain
            + d.step_layers() * adaptive
            + h
            + Linear::numel(h, m, true);
        if d.split_head {
            decoder += Linear::numel(h, h, true);
        }
        if self.shortcut {
            decoder += temb;
        }
        let ctc = self.ctc_layers * plain + h + Linear::numel(h, self.vocab_size, true);
        encoder + quantizer + codebooks + decoder + ctc
    }
}

/// Per-block modulation share of [`ModelConfig::count_params`].
pub fn modulation_params(cfg: &ModelConfig) -> usize {
    cfg.decoder.step_layers() * Modulation::numel(cfg.hidden)
}

/// One utterance's discrete tokens plus codec metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub id: String,
    pub frame_rate: f64,
    pub cn: usize,
    pub cs: usize,
    /// Tokens covering at least one valid mel frame.
    pub valid_len: usize,
    /// `[T][CN]`.
    pub tokens: Vec<Vec<usize>>,
    pub model_hash: String,
    /// Valid base mel frames, so decode can restore the exact length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mel_valid_len: Option<usize>,
}

/// Random draws for one training forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNoise<S> {
    pub t: S,
    pub eps: Vec<S>,
    pub drop_tokens: bool,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Use `z` directly instead of its quantization (diagnostic).
    pub bypass_quantizer: bool,
    pub skip_ctc: bool,
}

#[derive(Debug)]
pub struct ForwardOutputs<S> {
    pub x: Var,
    pub eps: Vec<S>,
    pub t: S,
    pub x_t: Var,
    pub flow_pred: Var,
    pub ctc_logp: Option<Var>,
    pub commit: Var,
    pub z: Var,
    pub cond: Var,
    pub indices: Vec<Vec<usize>>,
    pub stage_inputs: Vec<Vec<f64>>,
    pub perplexity: f64,
    pub utilization: f64,
    pub dropped: bool,
}

#[derive(Clone, Debug)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub quantizer: Quantizer,
    enc_in: Linear,
    enc_blocks: Vec<Block>,
    enc_norm: RmsNorm,
    vq_in: Linear,
    vq_out: Linear,
    pub decoder: Decoder,
    ctc_blocks: Vec<Block>,
    ctc_norm: RmsNorm,
    ctc_head: Linear,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (h, m, cd) = (config.hidden, config.mel_dim(), config.quantizer.cd);
        let causal = config.block(true, false);

        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let mut enc = b.sub("encoder");
        let enc_in = Linear::new(&mut enc.sub("in_proj"), m, h, true);
        let enc_blocks = (0..config.encoder_layers)
            .map(|i| Block::new(&mut enc.sub(&format!("blocks.{i}")), &causal))
            .collect();
        let enc_norm = RmsNorm::new(&mut enc.sub("norm"), h);

        let mut qb = b.sub("quantizer");
        let vq_in = Linear::new(&mut qb.sub("vq_in"), h, cd, true);
        let vq_out = Linear::new(&mut qb.sub("vq_out"), cd, h, true);

        let mut decoder = Decoder::new(
            &mut b.sub("decoder"),
            &config.decoder,
            &config.block(false, true),
            m,
            config.freq_dim,
        );

        let mut cb = b.sub("ctc");
        let ctc_blocks = (0..config.ctc_layers)
            .map(|i| Block::new(&mut cb.sub(&format!("blocks.{i}")), &causal))
            .collect();
        let ctc_norm = RmsNorm::new(&mut cb.sub("norm"), h);
        let ctc_head = Linear::new(&mut cb.sub("head"), h, config.vocab_size, true);

        if config.shortcut {
            decoder.add_step_embedding(&mut b.sub("decoder"), config.freq_dim);
        }
        let quantizer = Quantizer::new(config.quantizer.clone(), &mut rng)?;
        Ok(Self {
            config,
            params,
            quantizer,
            enc_in,
            enc_blocks,
            enc_norm,
            vq_in,
            vq_out,
            decoder,
            ctc_blocks,
            ctc_norm,
            ctc_head,
        })
    }

    /// Attach the zero-initialized step-size pathway (shortcut fine-tuning).
    pub fn enable_shortcut(&mut self, seed: u64) {
        if self.config.shortcut {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut self.params, &mut rng);
        self.decoder
            .add_step_embedding(&mut b.sub("decoder"), self.config.freq_dim);
        self.config.shortcut = true;
    }

    /// Freeze or unfreeze a module group: `encoder`, `quantizer`, `decoder`
    /// or `ctc`.
    pub fn set_trainable(&mut self, group: &str, trainable: bool) -> Result<usize> {
        let prefix = match group {
            "encoder" => ENCODER_PREFIX,
            "quantizer" => QUANTIZER_PREFIX,
            "decoder" => DECODER_PREFIX,
            "ctc" => CTC_PREFIX,
            other => return Err(Error::Config(format!("unknown module group {other:?}"))),
        };
        Ok(self.params.set_trainable(prefix, trainable))
    }

    /// Short content hash over config, parameters and codebooks.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for &v in t.data() {
                h.update((Scalar::to_f64(v) as f32).to_le_bytes());
            }
        }
        for cb in &self.quantizer.codebooks {
            for &v in &cb.entries {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Encoder latent `z = vq_in(encoder(x))` for `x: [T, mel_dim]`.
    pub fn encode_latent(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let mut h = self.enc_in.forward(tape, x)?;
        for b in &self.enc_blocks {
            h = b.forward(tape, h, None)?;
        }
        let h = self.enc_norm.forward(tape, h)?;
        self.vq_in.forward(tape, h)
    }

    pub fn cond_from_zq(&self, tape: &mut Tape<S>, z_q: Var) -> Result<Var> {
        self.vq_out.forward(tape, z_q)
    }

    /// Frame-level CTC log-probabilities `[T, V]` from the conditioning.
    pub fn ctc_logp(&self, tape: &mut Tape<S>, cond: Var) -> Result<Var> {
        let mut h = cond;
        for b in &self.ctc_blocks {
            h = b.forward(tape, h, None)?;
        }
        let h = self.ctc_norm.forward(tape, h)?;
        let logits = self.ctc_head.forward(tape, h)?;
        tape.log_softmax(logits)
    }

    /// Training forward pass over one utterance's valid stacked rows.
    /// Parameters must already be bound on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        x: &[S],
        noise: &ForwardNoise<S>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutputs<S>> {
        let m = self.config.mel_dim();
        if x.is_empty() || !x.len().is_multiple_of(m) {
            return Err(Error::shape(
                "sitok_forward",
                format!("{} values for rows of {}", x.len(), m),
            ));
        }
        if noise.eps.len() != x.len() {
            return Err(Error::shape(
                "sitok_forward",
                format!("noise has {} values, input {}", noise.eps.len(), x.len()),
            ));
        }
        let t_len = x.len() / m;
        let xv = tape.constant(vec![t_len, m], x.to_vec())?;
        let z = self.encode_latent(tape, xv)?;
        let (z_q, commit, indices, stage_inputs, perplexity, utilization) = if opts.bypass_quantizer
        {
            let zero = tape.scalar(S::zero());
            (z, zero, Vec::new(), Vec::new(), 0.0, 0.0)
        } else {
            let q = self.quantizer.quantize(tape, z)?;
            (
                q.z_q,
                q.commit,
                q.indices,
                q.stage_inputs,
                q.perplexity,
                q.utilization,
            )
        };
        let cond = self.cond_from_zq(tape, z_q)?;
        let dec_cond = if noise.drop_tokens {
            self.decoder.null_cond(tape, t_len)?
        } else {
            cond
        };
        let x_t_vals = forward_diffuse(x, &noise.eps, noise.t);
        let x_t = tape.constant(vec![t_len, m], x_t_vals)?;
        let tv = tape.constant(vec![1], vec![noise.t])?;
        let d = if self.decoder.has_step_embedding() {
            Some(tape.constant(vec![1], vec![S::zero()])?)
        } else {
            None
        };
        let prepared = self.decoder.prepare(tape, dec_cond)?;
        let flow_pred = self.decoder.velocity(tape, x_t, tv, d, prepared)?;
        let ctc_logp = if opts.skip_ctc {
            None
        } else {
            Some(self.ctc_logp(tape, cond)?)
        };
        Ok(ForwardOutputs {
            x: xv,
            eps: noise.eps.clone(),
            t: noise.t,
            x_t,
            flow_pred,
            ctc_logp,
            commit,
            z,
            cond,
            indices,
            stage_inputs,
            perplexity,
            utilization,
            dropped: noise.drop_tokens,
        })
    }

    /// Stacked rows of `mel` as model input, with padded frames set to the
    /// pad value so they are identical regardless of their source.
    pub fn input_rows(&self, mel: &MelSpectrogram) -> Result<Vec<S>> {
        if mel.width != self.config.mel_dim() || mel.stack != self.config.mel.stack {
            return Err(Error::Mismatch(format!(
                "mel rows of width {} (stack {}) vs model {} (stack {})",
                mel.width,
                mel.stack,
                self.config.mel_dim(),
                self.config.mel.stack
            )));
        }
        let rows = mel.valid_rows();
        let pad = self.config.mel.pad_value();
        let mask = mel.element_mask();
        Ok(mel.data[..rows * mel.width]
            .iter()
            .zip(&mask)
            .map(|(&v, &k)| S::from_f64(if k > 0.0 { v } else { pad } as f64))
            .collect())
    }

    /// Deterministic tokenization of a stacked mel.
    pub fn encode(&self, id: &str, mel: &MelSpectrogram) -> Result<TokenSequence> {
        let x = self.input_rows(mel)?;
        let mut tape = Tape::new();
        self.params.bind(&mut tape);
        let t_len = x.len() / self.config.mel_dim();
        let xv = tape.constant(vec![t_len, self.config.mel_dim()], x)?;
        let z = self.encode_latent(&mut tape, xv)?;
        let rows: Vec<f64> = tape.value(z).iter().map(|&v| Scalar::to_f64(v)).collect();
        let tokens = self.quantizer.indices_of(&rows);
        Ok(TokenSequence {
            id: id.to_string(),
            frame_rate: self.config.frame_rate(),
            cn: self.config.quantizer.cn,
            cs: self.config.quantizer.cs,
            valid_len: tokens.len(),
            tokens,
            model_hash: self.hash(),
            mel_valid_len: Some(mel.valid_len),
        })
    }

    /// Reject token metadata that does not belong to this model.
    pub fn check_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        let q = &self.config.quantizer;
        if tokens.cs != q.cs || tokens.cn != q.cn {
            return Err(Error::Mismatch(format!(
                "tokens have cs={} cn={}, checkpoint has cs={} cn={}",
                tokens.cs, tokens.cn, q.cs, q.cn
            )));
        }
        let own = self.hash();
        if tokens.model_hash != own {
            return Err(Error::Mismatch(format!(
                "tokens model_hash={} vs checkpoint {}",
                tokens.model_hash, own
            )));
        }
        if (tokens.frame_rate - self.config.frame_rate()).abs() > 1e-9 {
            return Err(Error::Mismatch(format!(
                "tokens frame_rate={} vs checkpoint {}",
                tokens.frame_rate,
                self.config.frame_rate()
            )));
        }
        Ok(())
    }

    /// Conditioning `[T, H]` for token indices.
    pub fn cond_from_tokens(&self, tape: &mut Tape<S>, tokens: &[Vec<usize>]) -> Result<Var> {
        let zq = self.quantizer.embed(tokens)?;
        let zq = tape.constant(
            vec![tokens.len(), self.config.quantizer.cd],
            zq.into_iter().map(S::from_f64).collect(),
        )?;
        self.cond_from_zq(tape, zq)
    }

    /// Sample stacked mel rows for `tokens` with `steps` Euler steps and
    /// guidance `w`. Step-conditioned decoders receive `d = 1/steps`.
    pub fn sample(
        &self,
        tokens: &[Vec<usize>],
        steps: usize,
        guidance: f64,
        seed: u64,
    ) -> Result<(Vec<S>, SampleStats)> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("no tokens to decode".into()));
        }
        let m = self.config.mel_dim();
        let t_len = tokens.len();
        let mut tape = Tape::new();
        self.params.bind(&mut tape);
        let cond = self.cond_from_tokens(&mut tape, tokens)?;
        let before = tape.counters.block_executions;
        let mut stats = SampleStats::default();
        let prep_c = self.decoder.prepare(&mut tape, cond)?;
        stats.base_computations += 1;
        let w = S::from_f64(guidance);
        let prep_u = if w != S::one() {
            let null = self.decoder.null_cond(&mut tape, t_len)?;
            stats.base_computations += 1;
            Some(self.decoder.prepare(&mut tape, null)?)
        } else {
            None
        };
        let step_cond = self.decoder.has_step_embedding();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = gaussian::<S, _>(&mut rng, t_len * m);
        let out = euler_sample(noise, steps, |x, t, dt| {
            let xv = tape.constant(vec![t_len, m], x.to_vec())?;
            let tv = tape.constant(vec![1], vec![t])?;
            let d = if step_cond {
                Some(tape.constant(vec![1], vec![dt])?)
            } else {
                None
            };
            let vc = self.decoder.velocity(&mut tape, xv, tv, d, prep_c)?;
            stats.forward_passes += 1;
            let vc = tape.value(vc).to_vec();
            match prep_u {
                None => Ok(vc),
                Some(pu) => {
                    let vu = self.decoder.velocity(&mut tape, xv, tv, d, pu)?;
                    stats.forward_passes += 1;
                    Ok(crate::diffusion::cfg_combine(vc, tape.value(vu), w))
                }
            }
        })?;
        stats.block_executions = tape.counters.block_executions - before;
        Ok((out, stats))
    }

    /// Decode a token sequence to an unstacked-layout mel spectrogram.
    pub fn decode(
        &self,
        tokens: &TokenSequence,
        steps: usize,
        guidance: f64,
        seed: u64,
    ) -> Result<(MelSpectrogram, SampleStats)> {
        self.check_tokens(tokens)?;
        let (rows, stats) = self.sample(&tokens.tokens, steps, guidance, seed)?;
        let stack = self.config.mel.stack;
        let t_len = tokens.tokens.len();
        let valid = tokens
            .mel_valid_len
            .unwrap_or(tokens.valid_len * stack)
            .min(t_len * stack);
        let mel = MelSpectrogram {
            data: rows.iter().map(|&v| Scalar::to_f64(v) as f32).collect(),
            rows: t_len,
            width: self.config.mel_dim(),
            stack,
            valid_len: valid,
            config_hash: self.config.mel.hash(),
        };
        Ok((mel, stats))
    }

    pub fn is_fsq(&self) -> bool {
        self.config.quantizer.kind == QuantizerKind::Fsq
    }
}
