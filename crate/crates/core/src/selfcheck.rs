//! Oracle suites that can run from a release binary: each compares an
//! implementation against brute force, finite differences or exact
//! arithmetic.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Scalar;
use crate::autodiff::{grad_check, grad_check_many, Coords, Tape, Tensor, Var};
use crate::corpus::{generate_corpus, to_utterance, GeneratorConfig};
use crate::ctc::{ctc_loss, ctc_loss_bruteforce};
use crate::diffusion::{euler_sample, forward_diffuse, gaussian, DecoderConfig};
use crate::error::{Error, Result};
use crate::formats::{checkpoint_bytes, parse_checkpoint};
use crate::model::{ForwardNoise, ForwardOptions, Model, ModelConfig};
use crate::quantizer::{fsq_decode_index, fsq_encode_digits, Codebook, Quantizer, QuantizerConfig};
use crate::shortcut::{shortcut_target, shortcut_utterance_loss, step_velocity, ShortcutSample};
use crate::train::{batch_loss, TrainConfig, Trainer, Utterance};

pub const CTC_TOL: f64 = 1e-9;
pub const CTC_GRAD_TOL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;
pub const SAMPLER_TOL: f64 = 1e-6;
pub const PARAM_TOL: f64 = 0.10;

/// Reference sizes in billions for `S`, `B`, `L`, `XL`.
pub const PRESET_SIZES: [(&str, f64); 4] = [("S", 0.63), ("B", 0.88), ("L", 1.12), ("XL", 1.61)];

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn fail(msg: impl Into<String>) -> Error {
    Error::Mismatch(msg.into())
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(fail(msg()))
    }
}

fn log_softmax_rows(logits: &[f64], v: usize) -> Vec<f64> {
    logits
        .chunks(v)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter().map(move |x| x - lse).collect::<Vec<_>>()
        })
        .collect()
}

/// DP loss against path enumeration on `n` random instances, and DP
/// gradients against central differences.
pub fn ctc_suite(n: usize, seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_loss, mut worst_grad, mut feasible) = (0.0f64, 0.0f64, 0);
    for i in 0..n {
        let t_len = rng.random_range(1..=6);
        let v = rng.random_range(2..=5);
        let y_len = rng.random_range(0..=3);
        let labels: Vec<usize> = (0..y_len).map(|_| rng.random_range(1..v)).collect();
        let logits: Vec<f64> = (0..t_len * v)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let logp = log_softmax_rows(&logits, v);
        let dp = ctc_loss(&logp, t_len, v, &labels)?;
        let bf = ctc_loss_bruteforce(&logp, t_len, v, &labels)?;
        if !dp.feasible {
            check(bf.is_infinite(), || {
                format!("instance {i}: DP infeasible but enumeration gives {bf}")
            })?;
            continue;
        }
        feasible += 1;
        let err = (dp.loss - bf).abs();
        worst_loss = worst_loss.max(err);
        check(err < CTC_TOL, || {
            format!("instance {i}: DP {} vs enumeration {bf}", dp.loss)
        })?;
        let eps = 1e-6;
        let mut p = logp.clone();
        for j in 0..p.len() {
            p[j] = logp[j] + eps;
            let up = ctc_loss(&p, t_len, v, &labels)?.loss;
            p[j] = logp[j] - eps;
            let down = ctc_loss(&p, t_len, v, &labels)?.loss;
            p[j] = logp[j];
            let fd = (up - down) / (2.0 * eps);
            let e = (dp.grad[j] - fd).abs();
            worst_grad = worst_grad.max(e);
            check(e < CTC_GRAD_TOL, || {
                format!(
                    "instance {i}, coordinate {j}: grad {} vs FD {fd}",
                    dp.grad[j]
                )
            })?;
        }
    }
    Ok(format!(
        "{n} instances ({feasible} feasible), max loss error {worst_loss:.2e}, max grad error {worst_grad:.2e}"
    ))
}

type Primitive = (
    &'static str,
    Vec<Vec<usize>>,
    Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
);

/// Reduce any tensor to a scalar with fixed non-uniform weights.
fn weigh(tape: &mut Tape<f64>, v: Var) -> Result<Var> {
    let n: usize = tape.shape(v).iter().product();
    let w: Vec<f64> = (0..n)
        .map(|i| ((i as f64 + 1.0) * 0.731).sin() + 0.2)
        .collect();
    let wv = tape.constant(tape.shape(v).to_vec(), w)?;
    let y = tape.mul(v, wv)?;
    tape.sum(y)
}

fn primitives() -> Vec<Primitive> {
    fn p<F>(name: &'static str, shapes: Vec<Vec<usize>>, f: F) -> Primitive
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
    {
        (name, shapes, Box::new(f))
    }
    vec![
        p("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weigh(t, y)
        }),
        p(
            "matmul_batched",
            vec![vec![2, 3, 4], vec![2, 4, 2]],
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weigh(t, y)
            },
        ),
        p("add_broadcast", vec![vec![3, 4], vec![4]], |t, v| {
            let y = t.add(v[0], v[1])?;
            let y = t.mul(y, y)?;
            weigh(t, y)
        }),
        p("sub", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let y = t.sub(v[0], v[1])?;
            let y = t.mul(y, y)?;
            weigh(t, y)
        }),
        p("mul", vec![vec![3, 4], vec![4]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weigh(t, y)
        }),
        p("scale_shift", vec![vec![5]], |t, v| {
            let y = t.scale(v[0], -1.7)?;
            let y = t.shift(y, 0.3)?;
            let y = t.mul(y, y)?;
            weigh(t, y)
        }),
        p("transpose", vec![vec![2, 3, 4]], |t, v| {
            let y = t.transpose(v[0], 0, 2)?;
            weigh(t, y)
        }),
        p("reshape", vec![vec![3, 4]], |t, v| {
            let y = t.reshape(v[0], vec![2, 6])?;
            let y = t.mul(y, y)?;
            weigh(t, y)
        }),
        p("concat", vec![vec![2, 3], vec![4, 3]], |t, v| {
            let y = t.concat(&[v[0], v[1]], 0)?;
            let y = t.tanh(y)?;
            weigh(t, y)
        }),
        p("slice", vec![vec![3, 5]], |t, v| {
            let y = t.slice(v[0], 1, 1, 3)?;
            let y = t.mul(y, y)?;
            weigh(t, y)
        }),
        p("gather", vec![vec![4, 3]], |t, v| {
            let y = t.gather(v[0], &[2, 0, 2, 1])?;
            let y = t.mul(y, y)?;
            weigh(t, y)
        }),
        p("embedding", vec![vec![4, 3]], |t, v| {
            let y = t.embedding(v[0], &[1, 1, 3])?;
            let y = t.silu(y)?;
            weigh(t, y)
        }),
        p("softmax", vec![vec![3, 5]], |t, v| {
            let y = t.softmax(v[0])?;
            weigh(t, y)
        }),
        p("log_softmax", vec![vec![3, 5]], |t, v| {
            let y = t.log_softmax(v[0])?;
            weigh(t, y)
        }),
        p("silu", vec![vec![7]], |t, v| {
            let y = t.silu(v[0])?;
            weigh(t, y)
        }),
        p("tanh", vec![vec![7]], |t, v| {
            let y = t.tanh(v[0])?;
            weigh(t, y)
        }),
        p("rms_stat", vec![vec![3, 4]], |t, v| {
            let y = t.rms_stat(v[0], 1e-6)?;
            weigh(t, y)
        }),
        p("mean", vec![vec![3, 4]], |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.mean(y)
        }),
        p("l1_loss", vec![vec![2, 3], vec![2, 3]], |t, v| {
            let mask = [1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
            t.l1_loss(v[0], v[1], Some(&mask))
        }),
        p("l2_loss", vec![vec![2, 3], vec![2, 3]], |t, v| {
            t.l2_loss(v[0], v[1], None)
        }),
        p("rope", vec![vec![2, 5, 4]], |t, v| {
            let y = t.rope(v[0], 10_000.0)?;
            weigh(t, y)
        }),
        p("sinusoid", vec![vec![1]], |t, v| {
            let y = t.sinusoid(v[0], &[1.0, 0.3, 7.0])?;
            weigh(t, y)
        }),
    ]
}

/// Every differentiable primitive on `points` random inputs each. The
/// straight-through estimator is checked by its identity Jacobian instead.
pub fn primitive_suite(points: usize, seed: u64) -> Result<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let list = primitives();
    for (name, shapes, f) in &list {
        for _ in 0..points {
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|s| {
                    let n = s.iter().product();
                    let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
                    Tensor::new(s.clone(), d)
                })
                .collect::<Result<_>>()?;
            let coords = vec![Coords::All; inputs.len()];
            let err = grad_check_many(|t, v| f(t, v), &inputs, &coords, 1e-6)?;
            worst = worst.max(err);
            check(err < GRAD_TOL, || {
                format!("{name}: relative error {err:.2e}")
            })?;
        }
    }
    Ok((
        format!("{} primitives × {points} points", list.len()),
        worst,
    ))
}

/// Utterances for model-level checks, from the tone corpus under `cfg`.
pub fn probe_batch(
    cfg: &ModelConfig,
    n: usize,
    max_labels: usize,
    seed: u64,
) -> Result<Vec<Utterance>> {
    let gen = GeneratorConfig {
        seed,
        classes: cfg.vocab_size - 1,
        max_labels,
        min_labels: max_labels.min(2),
        ..GeneratorConfig::default()
    };
    generate_corpus(&gen, n)
        .iter()
        .map(|u| to_utterance(u, &cfg.mel))
        .collect()
}

/// Full total loss with fixed randomness against central differences on
/// the chosen parameter coordinates. The quantizer is bypassed: its
/// straight-through output is piecewise constant, so central differences
/// cannot see the surrogate gradient. [`quantizer_backward_check`] covers
/// that link.
pub fn model_loss_check(
    model: &Model<f64>,
    batch: &[Utterance],
    coords: &[Coords],
    seed: u64,
) -> Result<f64> {
    let tcfg = TrainConfig::default();
    let refs: Vec<&Utterance> = batch.iter().collect();
    let points: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone()).collect();
    grad_check_many(
        |tape, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(batch_loss(model, tape, &refs, &mut rng, &tcfg, true)?
                .terms
                .total)
        },
        &points,
        coords,
        1e-6,
    )
}

/// Quantizer backward against central differences of its frozen-code
/// surrogate `w·(z + (q₀ − z₀)) + commit(z; codes₀)`, evaluated without the
/// tape. Returns the max relative error.
pub fn quantizer_backward_check(q: &Quantizer, z0: &[f64], t: usize) -> Result<f64> {
    let cd = q.config.cd;
    let w: Vec<f64> = (0..t * cd)
        .map(|i| ((i as f64 + 1.0) * 0.731).sin() + 0.2)
        .collect();

    let mut tape = Tape::<f64>::new();
    let zt = Tensor::new(vec![t, cd], z0.to_vec())?.with_grad();
    let zv = tape.leaf(&zt);
    let out = q.quantize(&mut tape, zv)?;
    let wz = weigh(&mut tape, out.z_q)?;
    let loss = tape.add(wz, out.commit)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get(zv).expect("leaf gradient").to_vec();
    let q0 = tape.value(out.z_q).to_vec();

    let fsq = q.config.kind == crate::quantizer::QuantizerKind::Fsq;
    let pre = |z: &[f64]| -> Vec<f64> {
        if fsq {
            z.iter().map(|v| v.tanh()).collect()
        } else {
            z.to_vec()
        }
    };
    let offset: Vec<f64> = q0.iter().zip(pre(z0)).map(|(a, b)| a - b).collect();
    let stage_entries: Vec<Vec<f64>> = if fsq {
        Vec::new()
    } else {
        (0..q.codebooks.len())
            .map(|s| {
                out.indices
                    .iter()
                    .flat_map(|row| q.codebooks[s].entry(row[s]).to_vec())
                    .collect()
            })
            .collect()
    };
    let surrogate = |z: &[f64]| -> f64 {
        let p = pre(z);
        let mut v: f64 = p
            .iter()
            .zip(&offset)
            .zip(&w)
            .map(|((a, c), w)| (a + c) * w)
            .sum();
        let mut residual = z.to_vec();
        for e in &stage_entries {
            let mse: f64 = residual
                .iter()
                .zip(e)
                .map(|(r, e)| (r - e) * (r - e))
                .sum::<f64>()
                / residual.len() as f64;
            v += q.config.beta * mse;
            residual.iter_mut().zip(e).for_each(|(r, e)| *r -= e);
        }
        v
    };
    let eps = 1e-6;
    let mut worst = 0.0f64;
    let mut z = z0.to_vec();
    for i in 0..z.len() {
        z[i] = z0[i] + eps;
        let up = surrogate(&z);
        z[i] = z0[i] - eps;
        let down = surrogate(&z);
        z[i] = z0[i];
        let fd = (up - down) / (2.0 * eps);
        worst = worst.max((analytic[i] - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}

/// Up to `per_tensor` seeded coordinates of every parameter tensor.
pub fn sampled_coords(model: &Model<f64>, per_tensor: usize, seed: u64) -> Vec<Coords> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model
        .params
        .iter()
        .map(|(_, t)| {
            let n = t.numel();
            if n <= per_tensor {
                Coords::All
            } else {
                Coords::Subset((0..per_tensor).map(|_| rng.random_range(0..n)).collect())
            }
        })
        .collect()
}

/// Fits data-dependent codebooks so the quantizer sees realistic inputs.
pub fn init_codebooks(model: &mut Model<f64>, batch: &[Utterance], seed: u64) -> Result<()> {
    let mut rows = Vec::new();
    for u in batch {
        let x = model.input_rows(&u.mel)?;
        let mut tape = Tape::new();
        model.params.bind(&mut tape);
        let m = model.config.mel_dim();
        let xv = tape.constant(vec![x.len() / m, m], x)?;
        let z = model.encode_latent(&mut tape, xv)?;
        rows.extend_from_slice(tape.value(z));
    }
    model
        .quantizer
        .init_from_data(&rows, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(())
}

pub fn autodiff_suite(seed: u64) -> Result<String> {
    let (prims, worst_prim) = primitive_suite(3, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_q = 0.0f64;
    for cfg in [
        QuantizerConfig {
            cs: 16,
            cd: 4,
            ..QuantizerConfig::default()
        },
        QuantizerConfig::rvq(3, 8, 4),
        QuantizerConfig::fsq(vec![3, 2, 5, 4]),
    ] {
        let q = Quantizer::new(cfg, &mut rng)?;
        let z: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = quantizer_backward_check(&q, &z, 3)?;
        worst_q = worst_q.max(err);
        check(err < GRAD_TOL, || {
            format!(
                "{:?} quantizer backward: relative error {err:.2e}",
                q.config.kind
            )
        })?;
    }
    let tiny = ModelConfig::tiny();
    let mut model = Model::<f64>::new(tiny.clone(), seed)?;
    let batch = probe_batch(&tiny, 1, 1, seed)?;
    init_codebooks(&mut model, &batch, seed)?;
    let all = vec![Coords::All; model.params.len()];
    let tiny_err = model_loss_check(&model, &batch, &all, seed)?;
    check(tiny_err < GRAD_TOL, || {
        format!("tiny model loss: relative error {tiny_err:.2e}")
    })?;

    let desk = ModelConfig::preset("desk")?;
    let mut model = Model::<f64>::new(desk.clone(), seed)?;
    let batch = probe_batch(&desk, 1, 2, seed)?;
    init_codebooks(&mut model, &batch, seed)?;
    let coords = sampled_coords(&model, 2, seed);
    let desk_err = model_loss_check(&model, &batch, &coords, seed)?;
    check(desk_err < GRAD_TOL, || {
        format!("desk model loss: relative error {desk_err:.2e}")
    })?;
    Ok(format!(
        "{prims} (max {worst_prim:.2e}); quantizer backward {worst_q:.2e}; tiny loss all {} params {tiny_err:.2e}; desk loss {} tensors {desk_err:.2e}",
        tiny.count_params(),
        coords.len()
    ))
}

/// Single-tensor sanity of [`grad_check`] itself on `sum(x²)`.
pub fn grad_check_sanity() -> Result<f64> {
    let x = Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0])?;
    grad_check(
        |t, v| {
            let y = t.mul(v, v)?;
            t.sum(y)
        },
        &x,
        1e-6,
    )
}

/// Euler sampling of the straight-line field `x − ε` lands on `x`.
pub fn sampler_suite(seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = gaussian(&mut rng, 64);
    let eps: Vec<f64> = gaussian(&mut rng, 64);
    let mut worst = 0.0f64;
    for n in [1usize, 2, 4, 8, 16] {
        let out = euler_sample(eps.clone(), n, |x_t, t, _| {
            // The oracle field is recovered from the current state so the
            // check also covers the time bookkeeping.
            let expect = forward_diffuse(&x, &eps, t);
            let drift = x_t
                .iter()
                .zip(&expect)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if drift > SAMPLER_TOL {
                return Err(fail(format!("N={n}: state left the path at t={t}")));
            }
            Ok(x.iter().zip(&eps).map(|(a, e)| a - e).collect())
        })?;
        let err = out
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
        check(err < SAMPLER_TOL, || format!("N={n}: max error {err:.2e}"))?;
    }
    Ok(format!("N ∈ {{1,2,4,8,16}}, max error {worst:.2e}"))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn quantizer_suite(seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for &cs in &[1usize, 7, 64, 1024] {
        let cb = Codebook::random(cs, 8, 0.99, &mut rng);
        for _ in 0..32 {
            let z: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (k, d) = cb.nearest(&z);
            let best = (0..cs)
                .map(|j| dist2(&z, cb.entry(j)))
                .fold(f64::INFINITY, f64::min);
            check(
                (d - best).abs() < 1e-12 && (dist2(&z, cb.entry(k)) - best).abs() < 1e-12,
                || format!("CS={cs}: picked distance {d}, brute force {best}"),
            )?;
        }
    }

    let q = Quantizer::new(
        QuantizerConfig {
            cs: 16,
            cd: 4,
            ..QuantizerConfig::default()
        },
        &mut rng,
    )?;
    let z = Tensor::new(
        vec![3, 4],
        (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?
    .with_grad();
    let mut tape = Tape::<f64>::new();
    let zv = tape.leaf(&z);
    let out = q.quantize(&mut tape, zv)?;
    let sq = tape.mul(out.z_q, out.z_q)?;
    let loss = weigh(&mut tape, sq)?;
    let g = tape.backward(loss)?;
    check(g.get(zv) == g.get(out.z_q), || {
        "straight-through gradient differs from the upstream gradient".into()
    })?;

    let mut cb = Codebook::from_entries(2, vec![0.0, 0.0, 5.0, 5.0], 0.99)?;
    cb.ema_count = vec![1.0, 1.0];
    cb.ema_update(&[1.0, 1.0], &[0]);
    let hand = [
        (cb.ema_count[0], 1.0),
        (cb.ema_sum[0], 0.01),
        (cb.ema_sum[1], 0.01),
        (cb.entry(0)[0], 0.01),
        (cb.entry(0)[1], 0.01),
    ];
    for (got, want) in hand {
        check((got - want).abs() < 1e-12, || {
            format!("EMA: got {got}, want {want}")
        })?;
    }

    let rvq = Quantizer::new(QuantizerConfig::rvq(3, 32, 4), &mut rng)?;
    for _ in 0..16 {
        let z: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::<f64>::new();
        let zv = tape.constant(vec![1, 4], z.clone())?;
        let out = rvq.quantize(&mut tape, zv)?;
        let mut residual = z.clone();
        for (s, cb) in rvq.codebooks.iter().enumerate() {
            let best = (0..cb.cs)
                .min_by(|&a, &b| {
                    dist2(&residual, cb.entry(a)).total_cmp(&dist2(&residual, cb.entry(b)))
                })
                .expect("non-empty codebook");
            check(out.indices[0][s] == best, || {
                format!(
                    "RVQ stage {s}: picked {}, brute force {best}",
                    out.indices[0][s]
                )
            })?;
            for (r, e) in residual.iter_mut().zip(cb.entry(best)) {
                *r -= e;
            }
        }
    }

    let levels = vec![2usize; 16];
    let total: usize = levels.iter().product();
    let mut seen = vec![false; total];
    for idx in 0..total {
        let digits = fsq_decode_index(idx, &levels);
        let back = fsq_encode_digits(&digits, &levels);
        check(back == idx, || format!("FSQ: {idx} → {digits:?} → {back}"))?;
        check(!seen[back], || format!("FSQ: index {back} produced twice"))?;
        seen[back] = true;
    }
    Ok(format!(
        "nearest-neighbour CS ≤ 1024, straight-through, EMA, 3-stage RVQ, FSQ bijection over {total} codes"
    ))
}

pub fn bitrate_suite() -> Result<String> {
    let vq = ModelConfig::preset("S")?;
    let mut rvq = vq.clone();
    rvq.quantizer = QuantizerConfig::rvq(4, 16_384, 32);
    let (a, b) = (vq.bitrate_bps(), rvq.bitrate_bps());
    check(a == 200.0, || {
        format!("VQ 65536 at 12.5 Hz: {a} bps, want 200")
    })?;
    check(b == 700.0, || {
        format!("RVQ 4×16384 at 12.5 Hz: {b} bps, want 700")
    })?;
    check(
        format!("{:.2}", a / 1000.0) == "0.20" && format!("{:.2}", b / 1000.0) == "0.70",
        || "kbps rendering".into(),
    )?;
    Ok(format!("{a} bps and {b} bps"))
}

pub fn params_suite() -> Result<String> {
    let mut parts = Vec::new();
    for (name, billions) in PRESET_SIZES {
        let n = ModelConfig::preset(name)?.count_params() as f64 / 1e9;
        let rel = (n - billions).abs() / billions;
        check(rel <= PARAM_TOL, || {
            format!("{name}: {n:.3} B vs {billions} B ({:.1}% off)", rel * 100.0)
        })?;
        parts.push(format!(
            "{name} {n:.3}B ({:+.1}%)",
            (n / billions - 1.0) * 100.0
        ));
    }
    let desk = ModelConfig::preset("desk")?;
    let built = Model::<f32>::new(desk.clone(), 0)?;
    let stored: usize = built.params.numel()
        + built
            .quantizer
            .codebooks
            .iter()
            .map(|c| c.entries.len())
            .sum::<usize>();
    check(stored == desk.count_params(), || {
        format!("desk: analytic {} vs built {stored}", desk.count_params())
    })?;
    Ok(parts.join(", "))
}

fn group_values(model: &Model<f64>, prefix: &str) -> Vec<f64> {
    model
        .params
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .flat_map(|(_, t)| t.data().to_vec())
        .collect()
}

fn codebook_values(model: &Model<f64>) -> Vec<f64> {
    model
        .quantizer
        .codebooks
        .iter()
        .flat_map(|c| {
            c.entries
                .iter()
                .chain(&c.ema_count)
                .chain(&c.ema_sum)
                .copied()
        })
        .collect()
}

fn all_grads(tape: &Tape<f64>, g: &crate::autodiff::Gradients<f64>) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for &p in tape.params() {
        out.extend_from_slice(g.get(p).ok_or_else(|| fail("parameter without gradient"))?);
    }
    Ok(out)
}

/// Step-size pathway contracts: `d = 0` reproduces the pretrained decoder,
/// the stop-gradient target carries no gradient, fine-tuning leaves the
/// encoder and quantizer untouched, and on a constant field one step of
/// `2d` lands where two steps of `d` do.
pub fn shortcut_suite(seed: u64) -> Result<String> {
    let cfg = ModelConfig::tiny();
    let batch = probe_batch(&cfg, 4, 2, seed)?;
    let mut base = Model::<f64>::new(cfg.clone(), seed)?;
    init_codebooks(&mut base, &batch, seed)?;
    let mut tuned = base.clone();
    tuned.enable_shortcut(seed + 1);

    let m = cfg.mel_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for u in &batch {
        let x = base.input_rows(&u.mel)?;
        let noise = ForwardNoise {
            t: rng.random::<f64>(),
            eps: gaussian(&mut rng, x.len()),
            drop_tokens: false,
        };
        let pred = |model: &Model<f64>| -> Result<Vec<f64>> {
            let mut tape = Tape::new();
            model.params.bind(&mut tape);
            let out = model.forward(&mut tape, &x, &noise, ForwardOptions::default())?;
            Ok(tape.value(out.flow_pred).to_vec())
        };
        check(pred(&base)? == pred(&tuned)?, || {
            format!("{}: d = 0 prediction differs from the base decoder", u.id)
        })?;
    }

    // Move the zero-initialized pathway off its no-op point.
    let mut moved = tuned.clone();
    for (_, t) in moved.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let x = moved.input_rows(&batch[0].mel)?;
    let t_len = x.len() / m;
    let eps: Vec<f64> = gaussian(&mut rng, x.len());
    let tokens: Vec<Vec<usize>> = (0..t_len).map(|i| vec![i % cfg.quantizer.cs]).collect();
    let (t, d) = (0.25, 0.125);
    let grads = |detach: bool| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        moved.params.bind(&mut tape);
        let cond = moved.cond_from_tokens(&mut tape, &tokens)?;
        let prep = moved.decoder.prepare(&mut tape, cond)?;
        let sample = ShortcutSample::Consistency { t, d };
        let loss =
            shortcut_utterance_loss(&moved, &mut tape, &x, &eps, prep, sample, None, detach)?;
        let g = tape.backward(loss)?;
        all_grads(&tape, &g)
    };
    let (detached, attached) = (grads(true)?, grads(false)?);
    check(detached != attached, || {
        "detaching the target changed nothing".into()
    })?;
    let oracle = {
        let mut tape = Tape::new();
        moved.params.bind(&mut tape);
        let cond = moved.cond_from_tokens(&mut tape, &tokens)?;
        let prep = moved.decoder.prepare(&mut tape, cond)?;
        let x_t = forward_diffuse(&x, &eps, t);
        let x_t = tape.constant(vec![t_len, m], x_t)?;
        let target = shortcut_target(&moved, &mut tape, x_t, t, d, prep, true)?;
        let target = tape.constant(vec![t_len, m], tape.value(target).to_vec())?;
        let pred = step_velocity(&moved, &mut tape, x_t, t, 2.0 * d, prep)?;
        let loss = tape.l2_loss(pred, target, None)?;
        let g = tape.backward(loss)?;
        all_grads(&tape, &g)?
    };
    check(detached == oracle, || {
        "detached target gradients differ from a constant-target oracle".into()
    })?;

    let enc = group_values(&base, "encoder.");
    let quant = group_values(&base, "quantizer.");
    let books = codebook_values(&base);
    let mut tcfg = TrainConfig {
        lr_peak: 1e-2,
        warmup_steps: 2,
        duration_budget: 2.0,
        seed,
        ..TrainConfig::default()
    }
    .finetune_shortcut();
    tcfg.shortcut.self_consistency_fraction = 0.5;
    let mut trainer = Trainer::new(base.clone(), tcfg)?;
    trainer.run(&batch, 4, |_, _| Ok(()))?;
    check(
        group_values(&trainer.model, "decoder.") != group_values(&base, "decoder."),
        || "decoder did not train".into(),
    )?;
    check(group_values(&trainer.model, "encoder.") == enc, || {
        "encoder moved during fine-tuning".into()
    })?;
    check(
        group_values(&trainer.model, "quantizer.") == quant
            && codebook_values(&trainer.model) == books,
        || "quantizer moved during fine-tuning".into(),
    )?;

    // Dyadic values keep every product and sum exact.
    let x0 = vec![0.25, -1.5, 3.0, 0.0];
    let field = vec![0.5, 0.25, -2.0, 1.75];
    for n in [1usize, 2, 4, 8, 16, 32, 64] {
        let one = euler_sample(x0.clone(), n, |_, _, _| Ok(field.clone()))?;
        let two = euler_sample(x0.clone(), 2 * n, |_, _, _| Ok(field.clone()))?;
        check(one == two, || {
            format!("constant field: {n} vs {} steps", 2 * n)
        })?;
    }
    let (v1, v2) = (field.clone(), field.clone());
    let avg: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| (a + b) / 2.0).collect();
    check(avg == field, || "constant field target".into())?;
    Ok("d = 0 bit match, detached target, frozen encoder/quantizer, constant field".into())
}

/// Decoder with `layers` blocks of which `head` repeat per step.
pub fn split_config(layers: usize, head: usize, split: bool) -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    cfg.decoder = DecoderConfig {
        layers,
        head_layers: head,
        split_head: split,
        cfg_drop_prob: 0.1,
    };
    cfg
}

/// Counts decoder block executions per decode and compares them with
/// `main + head·N`.
pub fn head_suite(seed: u64) -> Result<String> {
    let tokens = vec![vec![0], vec![1], vec![2]];
    let mut lines = Vec::new();
    for (layers, head, split, steps) in [
        (16, 4, true, 16),
        (16, 4, false, 16),
        (4, 1, true, 1),
        (4, 1, true, 8),
        (3, 3, true, 4),
    ] {
        let cfg = split_config(layers, head, split);
        let model = Model::<f64>::new(cfg.clone(), seed)?;
        let (_, stats) = model.sample(&tokens, steps, 1.0, seed)?;
        let want = cfg.decoder.main_layers() + cfg.decoder.step_layers() * steps;
        check(stats.block_executions == want, || {
            format!(
                "{layers}/{head} split={split} N={steps}: {} executions, want {want}",
                stats.block_executions
            )
        })?;
        lines.push(stats.block_executions);
    }
    let (split, full) = (lines[0], lines[1]);
    check(split == 76 && full == 256, || {
        format!("12/4 at N=16: {split} vs {full}, want 76 vs 256")
    })?;
    let asymptote = split_config(16, 4, true);
    let ratio = |n: usize| {
        (16 * n) as f64
            / (asymptote.decoder.main_layers() + asymptote.decoder.step_layers() * n) as f64
    };
    check(ratio(1 << 20) > 3.99 && ratio(1 << 20) < 4.0, || {
        "per-step reduction does not approach 4".into()
    })?;
    Ok(format!(
        "12/4 at N=16: {split} vs {full} executions ({:.2}× fewer)",
        full as f64 / split as f64
    ))
}

/// Guidance 1.0 against a hand-rolled conditional-only sampler, and the
/// trainer's token-drop rate over 10⁴ seeded utterances.
pub fn cfg_suite(seed: u64) -> Result<String> {
    let cfg = ModelConfig::tiny();
    let batch = probe_batch(&cfg, 4, 2, seed)?;
    let mut model = Model::<f64>::new(cfg.clone(), seed)?;
    init_codebooks(&mut model, &batch, seed)?;
    let m = cfg.mel_dim();
    for steps in [1usize, 4, 16] {
        let tokens: Vec<Vec<usize>> = (0..5).map(|i| vec![(i * 3) % cfg.quantizer.cs]).collect();
        let (guided, _) = model.sample(&tokens, steps, 1.0, seed)?;
        let mut tape = Tape::new();
        model.params.bind(&mut tape);
        let cond = model.cond_from_tokens(&mut tape, &tokens)?;
        let prep = model.decoder.prepare(&mut tape, cond)?;
        let noise = gaussian::<f64, _>(&mut ChaCha8Rng::seed_from_u64(seed), tokens.len() * m);
        let plain = euler_sample(noise, steps, |x, t, _| {
            let xv = tape.constant(vec![tokens.len(), m], x.to_vec())?;
            let tv = tape.constant(vec![1], vec![t])?;
            let v = model.decoder.velocity(&mut tape, xv, tv, None, prep)?;
            Ok(tape.value(v).to_vec())
        })?;
        check(guided == plain, || {
            format!("N={steps}: guidance 1.0 differs from conditional-only decode")
        })?;
    }

    let utterances = probe_batch(&cfg, 100, 2, seed)?;
    let tcfg = TrainConfig {
        duration_budget: 1e6,
        seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, tcfg)?;
    let refs: Vec<&Utterance> = utterances.iter().collect();
    let (mut dropped, mut seen) = (0usize, 0usize);
    for _ in 0..100 {
        let report = trainer.train_step(&refs)?;
        dropped += report.tokens_dropped;
        seen += report.utterances;
    }
    let rate = dropped as f64 / seen as f64;
    check(seen == 10_000 && (rate - 0.10).abs() <= 0.02, || {
        format!("token drop rate {rate:.4} over {seen} utterances")
    })?;
    Ok(format!(
        "guidance 1.0 bit match for N ∈ {{1, 4, 16}}; drop rate {rate:.4} over {seen}"
    ))
}

fn trained<S: Scalar>(
    model: &Model<S>,
    tcfg: &TrainConfig,
    data: &[Utterance],
    steps: usize,
) -> Result<Trainer<S>> {
    let mut trainer = Trainer::new(model.clone(), tcfg.clone())?;
    trainer.run(data, steps, |_, _| Ok(()))?;
    Ok(trainer)
}

fn param_bits<S: Scalar>(model: &Model<S>) -> Vec<f64> {
    model
        .params
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|&v| Scalar::to_f64(v)))
        .chain(
            model
                .quantizer
                .codebooks
                .iter()
                .flat_map(|c| c.entries.clone()),
        )
        .collect()
}

/// Repeated fixed-seed train, encode and decode, and a checkpoint
/// roundtrip followed by one more optimizer step.
pub fn persistence_suite(seed: u64) -> Result<String> {
    let cfg = ModelConfig::tiny();
    let data = probe_batch(&cfg, 6, 3, seed)?;
    let model = Model::<f32>::new(cfg, seed)?;
    let tcfg = TrainConfig {
        lr_peak: 1e-2,
        warmup_steps: 2,
        duration_budget: 2.0,
        seed,
        ..TrainConfig::default()
    };
    let a = trained(&model, &tcfg, &data, 5)?;
    let b = trained(&model, &tcfg, &data, 5)?;
    check(param_bits(&a.model) == param_bits(&b.model), || {
        "two fixed-seed runs diverged".into()
    })?;
    check(a.model.hash() == b.model.hash(), || "model hash".into())?;

    let mut decoded = Vec::new();
    for _ in 0..2 {
        let tokens = a.model.encode(&data[0].id, &data[0].mel)?;
        let (mel, _) = a.model.decode(&tokens, 4, 1.5, seed)?;
        decoded.push((tokens, mel));
    }
    check(decoded[0] == decoded[1], || {
        "encode/decode not reproducible".into()
    })?;

    let bytes = checkpoint_bytes(&a.model, Some(&a.config), a.step, Some(&a.opt))?;
    let ckpt = parse_checkpoint::<f32>(&bytes, "memory")?;
    let opt = ckpt
        .opt
        .ok_or_else(|| fail("checkpoint lost optimizer state"))?;
    let train = ckpt
        .train
        .ok_or_else(|| fail("checkpoint lost training config"))?;
    let mut resumed = Trainer::new(ckpt.model, train)?.with_state(ckpt.step, opt)?;
    let mut straight = a;
    straight.run(&data, 6, |_, _| Ok(()))?;
    resumed.run(&data, 6, |_, _| Ok(()))?;
    check(resumed.step == 6 && straight.step == 6, || {
        "step count".into()
    })?;
    check(
        param_bits(&resumed.model) == param_bits(&straight.model)
            && resumed.opt.m == straight.opt.m
            && resumed.opt.v == straight.opt.v,
        || "resumed step differs from the uninterrupted run".into(),
    )?;
    Ok("train, encode, decode and checkpoint resume are bit-exact".into())
}

/// Run every suite and report each.
pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    type Suite = Box<dyn Fn() -> Result<String>>;
    let suites: Vec<(&'static str, Suite)> = vec![
        ("ctc", Box::new(move || ctc_suite(200, seed))),
        (
            "autodiff",
            Box::new(move || {
                let s = grad_check_sanity()?;
                check(s < 1e-8, || format!("grad_check on sum(x²): {s:.2e}"))?;
                autodiff_suite(seed)
            }),
        ),
        ("sampler", Box::new(move || sampler_suite(seed))),
        ("quantizer", Box::new(move || quantizer_suite(seed))),
        ("bitrate", Box::new(bitrate_suite)),
        ("params", Box::new(params_suite)),
        ("shortcut", Box::new(move || shortcut_suite(seed))),
        ("head", Box::new(move || head_suite(seed))),
        ("cfg", Box::new(move || cfg_suite(seed))),
        ("persistence", Box::new(move || persistence_suite(seed))),
    ];
    suites
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let res = f();
            SuiteReport {
                name,
                passed: res.is_ok(),
                detail: match res {
                    Ok(d) => d,
                    Err(e) => e.to_string(),
                },
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}
