//! Training loop: loss assembly, AdamW with linear warmup, global-norm
//! clipping, duration-packed batches, module freezing and EMA codebook
//! maintenance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::ctc::{ctc_loss_on_tape, edit_distance, greedy_decode};
use crate::diffusion::{flow_matching_loss, forward_diffuse, gaussian};
use crate::error::{Error, Result};
use crate::mel::MelSpectrogram;
use crate::model::{ForwardNoise, ForwardOptions, Model};
use crate::shortcut::{shortcut_utterance_loss, ShortcutConfig, ShortcutSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Flow matching + CTC + commitment.
    Base,
    /// Shortcut fine-tuning of the step-conditioned decoder.
    Shortcut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub lambda_ctc: f64,
    /// Seconds of audio per packed batch.
    pub duration_budget: f64,
    /// Module groups kept fixed: `encoder`, `quantizer`, `decoder`, `ctc`.
    pub freeze: Vec<String>,
    pub seed: u64,
    pub steps: usize,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub mode: TrainMode,
    pub shortcut: ShortcutConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 8e-5,
            warmup_steps: 32_000,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 0.5,
            lambda_ctc: 0.1,
            duration_budget: 300.0,
            freeze: Vec::new(),
            seed: 0,
            steps: 450_000,
            checkpoint_every: 0,
            mode: TrainMode::Base,
            shortcut: ShortcutConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        Self {
            lr_peak: 1e-3,
            warmup_steps: 200,
            duration_budget: 8.0,
            steps: 2000,
            ..Self::default()
        }
    }

    /// Decoder-only fine-tuning: everything else frozen.
    pub fn finetune_decoder(mut self) -> Self {
        self.freeze = vec!["encoder".into(), "quantizer".into(), "ctc".into()];
        self.mode = TrainMode::Base;
        self
    }

    /// Shortcut fine-tuning: encoder, quantizer and CTC head frozen, CTC
    /// loss dropped.
    pub fn finetune_shortcut(mut self) -> Self {
        self.freeze = vec!["encoder".into(), "quantizer".into(), "ctc".into()];
        self.mode = TrainMode::Shortcut;
        self.lambda_ctc = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_ctc < 0.0 {
            return Err(Error::Config("lambda_ctc must be >= 0".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be > 0".into()));
        }
        if self.duration_budget <= 0.0 {
            return Err(Error::Config("duration_budget must be > 0".into()));
        }
        self.shortcut.validate()
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.freeze.iter().any(|g| g == group)
    }
}

/// Linear warmup from 0 to `lr_peak`, constant afterwards.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.lr_peak
    } else {
        cfg.lr_peak * step as f64 / cfg.warmup_steps as f64
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns `(norm_before, applied_scale)`.
pub fn clip_grads<S: Scalar>(grads: &mut [&mut [S]], max_norm: f64) -> (f64, f64) {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| {
            let v = Scalar::to_f64(v);
            v * v
        })
        .sum();
    let norm = sq.sqrt();
    if norm <= max_norm {
        return (norm, 1.0);
    }
    let scale = max_norm / norm;
    let s = S::from_f64(scale);
    for g in grads.iter_mut() {
        g.iter_mut().for_each(|v| *v *= s);
    }
    (norm, scale)
}

/// Per-parameter AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S> {
    pub step: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![S::zero(); n], vec![S::zero(); n]))
            .unzip();
        Self { step: 0, m, v }
    }

    /// Bias-corrected AdamW on `params[i]` for every `i` with `Some` grad.
    pub fn update(
        &mut self,
        params: &mut [&mut [S]],
        grads: &[Option<&[S]>],
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.step += 1;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1s, b2s) = (S::from_f64(b1), S::from_f64(b2));
        let (one_b1, one_b2) = (S::from_f64(1.0 - b1), S::from_f64(1.0 - b2));
        let (bc1, bc2) = (S::from_f64(bc1), S::from_f64(bc2));
        let lr_s = S::from_f64(lr);
        let decay = S::from_f64(1.0 - lr * cfg.weight_decay);
        let eps = S::from_f64(cfg.adam_eps);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1s * m[j] + one_b1 * g[j];
                v[j] = b2s * v[j] + one_b2 * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] = p[j] * decay - lr_s * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Greedy in-order packing under a total-duration budget.
pub fn pack_batches(items: &[(String, f64)], budget: f64) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut total = 0.0;
    for (i, (id, dur)) in items.iter().enumerate() {
        if *dur > budget {
            return Err(Error::InvalidArgument(format!(
                "utterance {id} lasts {dur:.3} s, over the {budget} s batch budget"
            )));
        }
        if !cur.is_empty() && total + dur > budget {
            out.push(std::mem::take(&mut cur));
            total = 0.0;
        }
        cur.push(i);
        total += dur;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

/// A training example: stacked mel plus its label sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub mel: MelSpectrogram,
    pub labels: Vec<usize>,
}

impl Utterance {
    pub fn duration(&self, hop: usize, sample_rate: u32) -> f64 {
        (self.mel.valid_len * hop) as f64 / sample_rate as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub total: f64,
    pub rec: f64,
    pub ctc: f64,
    pub vq: f64,
    pub lambda_ctc: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
    pub lr: f64,
    pub utilization: f64,
    pub perplexity: f64,
    pub utterances: usize,
    pub ctc_infeasible: usize,
    pub tokens_dropped: usize,
    pub dead_codes_reset: usize,
}

/// Loss values before reduction into the report.
#[derive(Debug)]
pub struct LossTerms {
    pub total: Var,
    pub rec: f64,
    pub ctc: f64,
    pub vq: f64,
    pub ctc_infeasible: usize,
}

/// `rec + λ·ctc + vq`, each averaged over utterances (CTC over feasible
/// ones only).
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    rec: &[Var],
    ctc: &[Option<Var>],
    vq: &[Var],
    lambda: f64,
) -> Result<LossTerms> {
    let mean = |tape: &mut Tape<S>, vars: &[Var]| -> Result<Option<Var>> {
        if vars.is_empty() {
            return Ok(None);
        }
        let shaped: Vec<Var> = vars
            .iter()
            .map(|&v| tape.reshape(v, vec![1]))
            .collect::<Result<_>>()?;
        let cat = tape.concat(&shaped, 0)?;
        tape.mean(cat).map(Some)
    };
    let rec_v = mean(tape, rec)?.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let vq_v = mean(tape, vq)?.expect("same length as rec");
    let feasible: Vec<Var> = ctc.iter().flatten().copied().collect();
    let ctc_v = mean(tape, &feasible)?;
    let mut total = tape.add(rec_v, vq_v)?;
    let mut ctc_val = 0.0;
    if let Some(c) = ctc_v {
        ctc_val = Scalar::to_f64(tape.item(c));
        if lambda > 0.0 {
            let w = tape.scale(c, S::from_f64(lambda))?;
            total = tape.add(total, w)?;
        }
    }
    Ok(LossTerms {
        total,
        rec: Scalar::to_f64(tape.item(rec_v)),
        ctc: ctc_val,
        vq: Scalar::to_f64(tape.item(vq_v)),
        ctc_infeasible: ctc.len() - feasible.len(),
    })
}

/// Random draws for one utterance in a base training step.
pub fn draw_noise<S: Scalar, R: Rng>(rng: &mut R, n: usize, drop_prob: f64) -> ForwardNoise<S> {
    let t = S::from_f64(rng.random::<f64>());
    let drop_tokens = rng.random::<f64>() < drop_prob;
    let eps = gaussian(rng, n);
    ForwardNoise {
        t,
        eps,
        drop_tokens,
    }
}

/// Generator for step `step`: independent of how many steps ran before.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainCounters {
    pub optimizer_steps: usize,
    pub ema_updates: usize,
}

/// Per-step batch statistics next to the loss.
pub struct BatchLoss {
    pub terms: LossTerms,
    pub stage_inputs: Vec<Vec<f64>>,
    pub indices: Vec<Vec<usize>>,
    pub utilization: f64,
    pub perplexity: f64,
    pub dropped: usize,
}

/// Total loss of `batch` on a tape with the model parameters bound. All
/// randomness comes from `rng`. `bypass_quantizer` feeds `z` straight to the
/// decoder (base mode only).
pub fn batch_loss<S: Scalar, R: Rng>(
    model: &Model<S>,
    tape: &mut Tape<S>,
    batch: &[&Utterance],
    rng: &mut R,
    cfg: &TrainConfig,
    bypass_quantizer: bool,
) -> Result<BatchLoss> {
    let m = model.config.mel_dim();
    let drop_prob = model.config.decoder.cfg_drop_prob;
    let lambda = cfg.lambda_ctc;

    let (mut rec, mut ctc, mut vq) = (Vec::new(), Vec::new(), Vec::new());
    let mut stage_inputs: Vec<Vec<f64>> = vec![Vec::new(); model.quantizer.codebooks.len()];
    let mut all_indices = Vec::new();
    let (mut util, mut ppl, mut dropped) = (0.0, 0.0, 0);
    for u in batch {
        let x = model.input_rows(&u.mel)?;
        let mask: Vec<S> = u
            .mel
            .element_mask()
            .iter()
            .map(|&v| S::from_f64(v as f64))
            .collect();
        match cfg.mode {
            TrainMode::Base => {
                let noise = draw_noise::<S, _>(rng, x.len(), drop_prob);
                let out = model.forward(
                    tape,
                    &x,
                    &noise,
                    ForwardOptions {
                        bypass_quantizer,
                        skip_ctc: lambda == 0.0,
                    },
                )?;
                rec.push(flow_matching_loss(
                    tape,
                    out.flow_pred,
                    &x,
                    &noise.eps,
                    Some(&mask),
                )?);
                vq.push(out.commit);
                ctc.push(match out.ctc_logp {
                    Some(lp) => ctc_loss_on_tape(tape, lp, &u.labels)?,
                    None => None,
                });
                for (s, rows) in out.stage_inputs.into_iter().enumerate() {
                    stage_inputs[s].extend(rows);
                }
                all_indices.extend(out.indices);
                util += out.utilization;
                ppl += out.perplexity;
                dropped += usize::from(out.dropped);
            }
            TrainMode::Shortcut => {
                let sample = ShortcutSample::draw(&cfg.shortcut, rng);
                let drop_tokens = rng.random::<f64>() < drop_prob;
                let eps: Vec<S> = gaussian(rng, x.len());
                let t_len = x.len() / m;
                let xv = tape.constant(vec![t_len, m], x.clone())?;
                let z = model.encode_latent(tape, xv)?;
                let q = model.quantizer.quantize(tape, z)?;
                let cond = if drop_tokens {
                    model.decoder.null_cond(tape, t_len)?
                } else {
                    model.cond_from_zq(tape, q.z_q)?
                };
                let prepared = model.decoder.prepare(tape, cond)?;
                rec.push(shortcut_utterance_loss(
                    model,
                    tape,
                    &x,
                    &eps,
                    prepared,
                    sample,
                    Some(&mask),
                    true,
                )?);
                vq.push(tape.scalar(S::zero()));
                ctc.push(None);
                util += q.utilization;
                ppl += q.perplexity;
                dropped += usize::from(drop_tokens);
            }
        }
    }
    let terms = total_loss(tape, &rec, &ctc, &vq, lambda)?;
    Ok(BatchLoss {
        terms,
        stage_inputs,
        indices: all_indices,
        utilization: util,
        perplexity: ppl,
        dropped,
    })
}

pub struct Trainer<S> {
    pub model: Model<S>,
    pub config: TrainConfig,
    pub opt: AdamW<S>,
    pub step: usize,
    pub counters: TrainCounters,
    last_total: Option<f64>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(mut model: Model<S>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        for g in ["encoder", "quantizer", "decoder", "ctc"] {
            model.set_trainable(g, !config.is_frozen(g))?;
        }
        if let Some(bad) = config
            .freeze
            .iter()
            .find(|g| !["encoder", "quantizer", "decoder", "ctc"].contains(&g.as_str()))
        {
            return Err(Error::Config(format!(
                "unknown module group {bad:?} in freeze"
            )));
        }
        if config.mode == TrainMode::Shortcut && !model.decoder.has_step_embedding() {
            model.enable_shortcut(config.seed ^ 0x5eed);
        }
        let opt = AdamW::new(model.params.iter().map(|(_, t)| t.numel()));
        Ok(Self {
            model,
            config,
            opt,
            step: 0,
            counters: TrainCounters::default(),
            last_total: None,
        })
    }

    /// Restore optimizer progress (used when resuming from a checkpoint).
    pub fn with_state(mut self, step: usize, opt: AdamW<S>) -> Result<Self> {
        if opt.m.len() != self.model.params.len() {
            return Err(Error::Mismatch(format!(
                "optimizer state for {} tensors, model has {}",
                opt.m.len(),
                self.model.params.len()
            )));
        }
        self.step = step;
        self.opt = opt;
        Ok(self)
    }

    fn quantizer_trainable(&self) -> bool {
        !self.config.is_frozen("quantizer") && self.config.mode == TrainMode::Base
    }

    fn init_codebooks(&mut self, batch: &[&Utterance], rng: &mut ChaCha8Rng) -> Result<()> {
        let mut rows = Vec::new();
        for u in batch {
            let x = self.model.input_rows(&u.mel)?;
            let mut tape = Tape::new();
            self.model.params.bind(&mut tape);
            let m = self.model.config.mel_dim();
            let xv = tape.constant(vec![x.len() / m, m], x)?;
            let z = self.model.encode_latent(&mut tape, xv)?;
            rows.extend(tape.value(z).iter().map(|&v| Scalar::to_f64(v)));
        }
        self.model.quantizer.init_from_data(&rows, rng);
        Ok(())
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[&Utterance]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let step = self.step;
        let mut rng = step_rng(self.config.seed, step);
        if self.quantizer_trainable()
            && !self.model.quantizer.is_initialized()
            && !self.model.is_fsq()
        {
            self.init_codebooks(batch, &mut rng)?;
        }
        let lambda = self.config.lambda_ctc;
        let mut tape = Tape::new();
        self.model.params.bind(&mut tape);
        let BatchLoss {
            terms,
            stage_inputs,
            indices: all_indices,
            utilization: util,
            perplexity: ppl,
            dropped,
        } = batch_loss(&self.model, &mut tape, batch, &mut rng, &self.config, false)?;
        let total = Scalar::to_f64(tape.item(terms.total));
        if !total.is_finite() {
            return Err(Error::NanLoss {
                step,
                last_total: self.last_total,
            });
        }
        let grads = tape.backward(terms.total).map_err(|e| self.nan_error(e))?;
        self.model.params.zero_grads();
        self.model.params.collect_grads(&tape, &grads);
        drop(grads);

        let lr = lr_schedule(step, &self.config);
        let (grad_norm, clip_scale) = {
            let mut gs: Vec<&mut [S]> = self
                .model
                .params
                .iter_mut()
                .filter_map(|(_, t)| t.grad.as_deref_mut())
                .collect();
            clip_grads(&mut gs, self.config.clip_norm)
        };
        if !grad_norm.is_finite() {
            return Err(Error::NanLoss {
                step,
                last_total: self.last_total,
            });
        }
        {
            let mut grads_owned: Vec<Option<Vec<S>>> = Vec::with_capacity(self.model.params.len());
            let mut data: Vec<&mut [S]> = Vec::with_capacity(self.model.params.len());
            for (_, t) in self.model.params.iter_mut() {
                grads_owned.push(if t.requires_grad { t.grad.take() } else { None });
                data.push(t.data_mut());
            }
            let grads: Vec<Option<&[S]>> = grads_owned.iter().map(|g| g.as_deref()).collect();
            self.opt.update(&mut data, &grads, lr, &self.config);
        }
        self.counters.optimizer_steps += 1;

        let mut dead = 0;
        if self.quantizer_trainable() && !self.model.is_fsq() {
            self.model.quantizer.ema_update(&stage_inputs, &all_indices);
            self.counters.ema_updates += 1;
            dead = self
                .model
                .quantizer
                .dead_code_reset(&stage_inputs, &mut rng);
        }

        let n = batch.len() as f64;
        let report = LossReport {
            step,
            total,
            rec: terms.rec,
            ctc: terms.ctc,
            vq: terms.vq,
            lambda_ctc: lambda,
            grad_norm,
            clip_scale,
            lr,
            utilization: util / n,
            perplexity: ppl / n,
            utterances: batch.len(),
            ctc_infeasible: terms.ctc_infeasible,
            tokens_dropped: dropped,
            dead_codes_reset: dead,
        };
        self.last_total = Some(total);
        self.step += 1;
        Ok(report)
    }

    fn nan_error(&self, e: Error) -> Error {
        match e {
            Error::NonFinite { .. } => Error::NanLoss {
                step: self.step,
                last_total: self.last_total,
            },
            other => other,
        }
    }

    /// Packed batches for `data`, in corpus order.
    pub fn batches(&self, data: &[Utterance]) -> Result<Vec<Vec<usize>>> {
        let mel = &self.model.config.mel;
        let items: Vec<(String, f64)> = data
            .iter()
            .map(|u| (u.id.clone(), u.duration(mel.hop, mel.sample_rate)))
            .collect();
        pack_batches(&items, self.config.duration_budget)
    }

    /// Train until `self.step == until`, cycling through packed batches.
    pub fn run<F>(&mut self, data: &[Utterance], until: usize, mut on_step: F) -> Result<()>
    where
        F: FnMut(&mut Self, &LossReport) -> Result<()>,
    {
        let batches = self.batches(data)?;
        if batches.is_empty() {
            return Err(Error::InvalidArgument("no training data".into()));
        }
        while self.step < until {
            let batch: Vec<&Utterance> = batches[self.step % batches.len()]
                .iter()
                .map(|&i| &data[i])
                .collect();
            let step_result = self.train_step(&batch);
            let report = step_result.map_err(|e| self.nan_error(e))?;
            on_step(self, &report)?;
        }
        Ok(())
    }
}

/// Masked flow L1 at fixed timesteps and fixed noise, averaged over the
/// data. Tokens are always kept.
pub fn evaluate_flow_l1<S: Scalar>(model: &Model<S>, data: &[Utterance], seed: u64) -> Result<f64> {
    const TS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, u) in data.iter().enumerate() {
        let x = model.input_rows(&u.mel)?;
        let mask: Vec<S> = u
            .mel
            .element_mask()
            .iter()
            .map(|&v| S::from_f64(v as f64))
            .collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let eps: Vec<S> = gaussian(&mut rng, x.len());
        let mut tape = Tape::new();
        model.params.bind(&mut tape);
        let m = model.config.mel_dim();
        let t_len = x.len() / m;
        let xv = tape.constant(vec![t_len, m], x.clone())?;
        let z = model.encode_latent(&mut tape, xv)?;
        let q = model.quantizer.quantize(&mut tape, z)?;
        let cond = model.cond_from_zq(&mut tape, q.z_q)?;
        let prepared = model.decoder.prepare(&mut tape, cond)?;
        let d = if model.decoder.has_step_embedding() {
            Some(tape.constant(vec![1], vec![S::zero()])?)
        } else {
            None
        };
        for &t in &TS {
            let ts = S::from_f64(t);
            let x_t = tape.constant(vec![t_len, m], forward_diffuse(&x, &eps, ts))?;
            let tv = tape.constant(vec![1], vec![ts])?;
            let v = model.decoder.velocity(&mut tape, x_t, tv, d, prepared)?;
            let l = flow_matching_loss(&mut tape, v, &x, &eps, Some(&mask))?;
            total += Scalar::to_f64(tape.item(l));
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Greedy CTC decode of each utterance from the model's own tokens.
pub fn ctc_transcripts<S: Scalar>(model: &Model<S>, data: &[Utterance]) -> Result<Vec<Vec<usize>>> {
    data.iter()
        .map(|u| {
            let x = model.input_rows(&u.mel)?;
            let mut tape = Tape::new();
            model.params.bind(&mut tape);
            let m = model.config.mel_dim();
            let xv = tape.constant(vec![x.len() / m, m], x)?;
            let z = model.encode_latent(&mut tape, xv)?;
            let q = model.quantizer.quantize(&mut tape, z)?;
            let cond = model.cond_from_zq(&mut tape, q.z_q)?;
            let lp = model.ctc_logp(&mut tape, cond)?;
            let vals: Vec<f64> = tape.value(lp).iter().map(|&v| Scalar::to_f64(v)).collect();
            Ok(greedy_decode(&vals, model.config.vocab_size))
        })
        .collect()
}

/// Retrain a freshly initialized CTC head on frozen encoder and quantizer
/// outputs. Its greedy accuracy measures how much label information the
/// tokens carry, independent of whether the head was trained before.
pub fn ctc_probe<S: Scalar>(
    model: &Model<S>,
    data: &[Utterance],
    config: &TrainConfig,
    steps: usize,
) -> Result<Model<S>> {
    let fresh = Model::<S>::new(model.config.clone(), config.seed ^ 0xc7c)?;
    let mut probe = model.clone();
    let init: std::collections::HashMap<&str, &[S]> = fresh
        .params
        .iter()
        .filter(|(n, _)| n.starts_with(crate::model::CTC_PREFIX))
        .map(|(n, t)| (n, t.data()))
        .collect();
    for (name, dst) in probe.params.iter_mut() {
        if let Some(src) = init.get(name) {
            dst.data_mut().copy_from_slice(src);
        }
    }
    let cfg = TrainConfig {
        lambda_ctc: 1.0,
        freeze: vec!["encoder".into(), "quantizer".into(), "decoder".into()],
        mode: TrainMode::Base,
        ..config.clone()
    };
    let mut trainer = Trainer::new(probe, cfg)?;
    trainer.run(data, steps, |_, _| Ok(()))?;
    Ok(trainer.model)
}

/// `(exact matches, mean 1 − normalized edit distance)`.
pub fn label_accuracy(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> (usize, f64) {
    let exact = hyps.iter().zip(refs).filter(|(h, r)| h == r).count();
    let acc: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| 1.0 - edit_distance(h, r) as f64 / r.len().max(1) as f64)
        .sum();
    (exact, acc / refs.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(16_000, &cfg), 4e-5);
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert_eq!(lr_schedule(32_000, &cfg), 8e-5);
        assert_eq!(lr_schedule(100_000, &cfg), 8e-5);
    }

    #[test]
    fn clip_examples() {
        let mut a = vec![2.0f64, 0.0];
        let (n, s) = clip_grads(&mut [&mut a[..]], 0.5);
        assert_eq!((n, s), (2.0, 0.25));
        assert_eq!(a, vec![0.5, 0.0]);
        let mut b = vec![0.3f64, 0.4];
        let (_, s) = clip_grads(&mut [&mut b[..]], 0.5);
        assert_eq!(s, 1.0);
        assert_eq!(b, vec![0.3, 0.4]);
    }

    #[test]
    fn adamw_examples() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::<f64>::new([1]);
        let mut theta = [0.0];
        opt.update(&mut [&mut theta[..]], &[Some(&[1.0][..])], 0.1, &cfg);
        // Hand evaluation: m̂ = 1, v̂ = 1.
        assert!((theta[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);

        let mut opt = AdamW::<f64>::new([2]);
        let mut theta = vec![1.5, -2.0];
        opt.update(&mut [&mut theta[..]], &[Some(&[0.0, 0.0][..])], 0.1, &cfg);
        assert_eq!(theta, vec![1.5, -2.0]);

        let cfg = TrainConfig {
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        let mut theta = vec![1.5, -2.0];
        opt.update(&mut [&mut theta[..]], &[Some(&[0.0, 0.0][..])], 0.1, &cfg);
        assert_eq!(theta, vec![1.5 * (1.0 - 0.001), -2.0 * (1.0 - 0.001)]);
    }

    #[test]
    fn pack_examples() {
        let items = |d: &[f64]| -> Vec<(String, f64)> {
            d.iter()
                .enumerate()
                .map(|(i, &v)| (format!("u{i}"), v))
                .collect()
        };
        assert_eq!(
            pack_batches(&items(&[100.0, 150.0, 200.0]), 300.0).unwrap(),
            vec![vec![0, 1], vec![2]]
        );
        assert_eq!(
            pack_batches(&items(&[5.0, 5.0, 5.0]), 5.0).unwrap(),
            vec![vec![0], vec![1], vec![2]]
        );
        assert!(pack_batches(&[], 5.0).unwrap().is_empty());
        let err = pack_batches(&items(&[1.0, 9.0]), 5.0)
            .unwrap_err()
            .to_string();
        assert!(err.contains("u1"));
    }

    #[test]
    fn total_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let rec = tape.scalar(1.0);
        let ctc = tape.scalar(2.0);
        let vq = tape.scalar(0.1);
        let t = total_loss(&mut tape, &[rec], &[Some(ctc)], &[vq], 0.1).unwrap();
        assert!((tape.item(t.total) - 1.3).abs() < 1e-12);
        let t = total_loss(&mut tape, &[rec], &[Some(ctc)], &[vq], 0.0).unwrap();
        assert_eq!(tape.item(t.total), 1.0 + 0.1);
        let zero = tape.scalar(0.0);
        let t = total_loss(&mut tape, &[zero], &[Some(ctc)], &[zero], 0.1).unwrap();
        assert_eq!(tape.item(t.total), 0.1 * 2.0);
        // Infeasible CTC entries are excluded from the mean.
        let t = total_loss(&mut tape, &[rec, rec], &[Some(ctc), None], &[vq, vq], 0.1).unwrap();
        assert_eq!(t.ctc, 2.0);
        assert_eq!(t.ctc_infeasible, 1);
    }

    fn toy_data(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Utterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let rows = 3 + i % 3;
                let width = cfg.mel_dim();
                let data: Vec<f32> = (0..rows * width)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                Utterance {
                    id: format!("u{i}"),
                    mel: MelSpectrogram {
                        data,
                        rows,
                        width,
                        stack: cfg.mel.stack,
                        valid_len: rows * cfg.mel.stack - 1,
                        config_hash: cfg.mel.hash(),
                    },
                    labels: vec![1 + i % 2],
                }
            })
            .collect()
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            lr_peak: 1e-2,
            warmup_steps: 2,
            duration_budget: 0.5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn report_identity_and_determinism() {
        let cfg = ModelConfig::tiny();
        let data = toy_data(&cfg, 4, 1);
        let run = || {
            let mut tr =
                Trainer::new(Model::<f64>::new(cfg.clone(), 0).unwrap(), tiny_train()).unwrap();
            let mut reports = Vec::new();
            tr.run(&data, 6, |_, r| {
                reports.push(r.clone());
                Ok(())
            })
            .unwrap();
            (reports, tr.counters.clone())
        };
        let (a, counters) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        assert_eq!(counters.ema_updates, counters.optimizer_steps);
        for r in &a {
            assert!((r.total - (r.rec + r.lambda_ctc * r.ctc + r.vq)).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_groups_are_bit_stable() {
        let cfg = ModelConfig::tiny();
        let data = toy_data(&cfg, 4, 2);
        let mut base = Trainer::new(Model::<f64>::new(cfg, 0).unwrap(), tiny_train()).unwrap();
        base.run(&data, 2, |_, _| Ok(())).unwrap();
        let model = base.model;
        let before = model.params.clone();
        let codebooks = model.quantizer.codebooks.clone();
        let mut ft = Trainer::new(model, tiny_train().finetune_decoder()).unwrap();
        ft.run(&data, 3, |_, _| Ok(())).unwrap();
        for ((name, a), (_, b)) in before.iter().zip(ft.model.params.iter()) {
            if name.starts_with("decoder.") {
                continue;
            }
            assert_eq!(a.data(), b.data(), "{name}");
        }
        assert_eq!(codebooks, ft.model.quantizer.codebooks);
        assert_eq!(ft.counters.ema_updates, 0);
    }

    #[test]
    fn unknown_freeze_group_rejected() {
        let cfg = TrainConfig {
            freeze: vec!["vocoder".into()],
            ..TrainConfig::default()
        };
        assert!(Trainer::new(Model::<f64>::new(ModelConfig::tiny(), 0).unwrap(), cfg).is_err());
    }

    #[test]
    fn nan_aborts_with_step() {
        let cfg = ModelConfig::tiny();
        let mut data = toy_data(&cfg, 2, 3);
        data[0].mel.data[0] = f32::NAN;
        let mut tr = Trainer::new(Model::<f64>::new(cfg, 0).unwrap(), tiny_train()).unwrap();
        match tr.run(&data, 3, |_, _| Ok(())) {
            Err(Error::NanLoss { step, .. }) => assert_eq!(step, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shortcut_mode_runs_and_freezes() {
        let cfg = ModelConfig::tiny();
        let data = toy_data(&cfg, 4, 4);
        let model = Model::<f64>::new(cfg, 0).unwrap();
        let enc_before: Vec<f64> = model
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("encoder."))
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        let mut tcfg = tiny_train().finetune_shortcut();
        tcfg.shortcut.self_consistency_fraction = 0.5;
        let mut tr = Trainer::new(model, tcfg).unwrap();
        assert!(tr.model.decoder.has_step_embedding());
        tr.run(&data, 3, |_, r| {
            assert_eq!(r.ctc, 0.0);
            Ok(())
        })
        .unwrap();
        let enc_after: Vec<f64> = tr
            .model
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("encoder."))
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        assert_eq!(enc_before, enc_after);
    }
}
