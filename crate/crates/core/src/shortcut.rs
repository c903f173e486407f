//! Shortcut fine-tuning: the decoder additionally sees a step size `d` and
//! learns that one step of `2d` matches two steps of `d`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShortcutConfig {
    /// Finest grid resolution `M`; step sizes are `2^k / M`.
    pub base_steps: usize,
    /// Probability that an utterance trains the self-consistency term.
    pub self_consistency_fraction: f64,
}

impl Default for ShortcutConfig {
    fn default() -> Self {
        Self {
            base_steps: 128,
            self_consistency_fraction: 0.25,
        }
    }
}

impl ShortcutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_steps < 2 || !self.base_steps.is_power_of_two() {
            return Err(Error::Config(
                "base_steps must be a power of two >= 2".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.self_consistency_fraction) {
            return Err(Error::Config(
                "self_consistency_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// `{1/M, 2/M, 4/M, …, 1/2}`.
    pub fn step_grid(&self) -> Vec<f64> {
        let m = self.base_steps as f64;
        let mut out = Vec::new();
        let mut k = 1usize;
        while 2 * k <= self.base_steps {
            out.push(k as f64 / m);
            k *= 2;
        }
        out
    }
}

/// Draw `(d, t)` with `d` uniform on the dyadic grid and `t` uniform on
/// `{0, d, …, 1 − 2d}`.
pub fn sample_step<R: Rng>(cfg: &ShortcutConfig, rng: &mut R) -> (f64, f64) {
    let grid = cfg.step_grid();
    let d = grid[rng.random_range(0..grid.len())];
    let slots = cfg.base_steps / (d * cfg.base_steps as f64) as usize - 1;
    let t = rng.random_range(0..slots) as f64 * d;
    (d, t)
}

/// Velocity of the step-conditioned decoder.
pub fn step_velocity<S: Scalar>(
    model: &Model<S>,
    tape: &mut Tape<S>,
    x_t: Var,
    t: S,
    d: S,
    prepared: Var,
) -> Result<Var> {
    if !model.decoder.has_step_embedding() {
        return Err(Error::Config("decoder has no step-size pathway".into()));
    }
    let tv = tape.constant(vec![1], vec![t])?;
    let dv = tape.constant(vec![1], vec![d])?;
    model.decoder.velocity(tape, x_t, tv, Some(dv), prepared)
}

/// `(v1 + v2) / 2` from two consecutive steps of size `d`. With `detach`
/// the result is cut from the graph.
pub fn shortcut_target<S: Scalar>(
    model: &Model<S>,
    tape: &mut Tape<S>,
    x_t: Var,
    t: S,
    d: S,
    prepared: Var,
    detach: bool,
) -> Result<Var> {
    let v1 = step_velocity(model, tape, x_t, t, d, prepared)?;
    let step = tape.scale(v1, d)?;
    let x_next = tape.add(x_t, step)?;
    let x_next = if detach { tape.detach(x_next) } else { x_next };
    let v2 = step_velocity(model, tape, x_next, t + d, d, prepared)?;
    let sum = tape.add(v1, v2)?;
    let avg = tape.scale(sum, S::from_f64(0.5))?;
    Ok(if detach { tape.detach(avg) } else { avg })
}

/// Which term an utterance trains in a shortcut step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShortcutSample {
    Flow { t: f64 },
    Consistency { t: f64, d: f64 },
}

impl ShortcutSample {
    pub fn draw<R: Rng>(cfg: &ShortcutConfig, rng: &mut R) -> Self {
        if rng.random::<f64>() < cfg.self_consistency_fraction {
            let (d, t) = sample_step(cfg, rng);
            ShortcutSample::Consistency { t, d }
        } else {
            ShortcutSample::Flow {
                t: rng.random::<f64>(),
            }
        }
    }

    pub fn t(&self) -> f64 {
        match *self {
            ShortcutSample::Flow { t } | ShortcutSample::Consistency { t, .. } => t,
        }
    }
}

/// Masked L2 shortcut loss for one utterance. `x` is data, `eps` noise.
#[allow(clippy::too_many_arguments)]
pub fn shortcut_utterance_loss<S: Scalar>(
    model: &Model<S>,
    tape: &mut Tape<S>,
    x: &[S],
    eps: &[S],
    prepared: Var,
    sample: ShortcutSample,
    mask: Option<&[S]>,
    detach: bool,
) -> Result<Var> {
    let m = model.config.mel_dim();
    let t_len = x.len() / m;
    let t = S::from_f64(sample.t());
    let x_t = crate::diffusion::forward_diffuse(x, eps, t);
    let x_t = tape.constant(vec![t_len, m], x_t)?;
    match sample {
        ShortcutSample::Flow { .. } => {
            let pred = step_velocity(model, tape, x_t, t, S::zero(), prepared)?;
            let target: Vec<S> = x.iter().zip(eps).map(|(&a, &e)| a - e).collect();
            let target = tape.constant(vec![t_len, m], target)?;
            tape.l2_loss(pred, target, mask)
        }
        ShortcutSample::Consistency { d, .. } => {
            let d = S::from_f64(d);
            let target = shortcut_target(model, tape, x_t, t, d, prepared, detach)?;
            let pred = step_velocity(model, tape, x_t, t, d + d, prepared)?;
            tape.l2_loss(pred, target, mask)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::euler_sample;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_and_sampling() {
        let cfg = ShortcutConfig::default();
        let grid = cfg.step_grid();
        assert_eq!(grid.len(), 7);
        assert_eq!(grid[0], 1.0 / 128.0);
        assert_eq!(*grid.last().unwrap(), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2000 {
            let (d, t) = sample_step(&cfg, &mut rng);
            assert!(t + 2.0 * d <= 1.0 + 1e-12);
            assert_eq!((t / d).fract(), 0.0);
        }
        assert!(ShortcutConfig {
            base_steps: 100,
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn constant_field_identities() {
        // Target of a constant field is the constant.
        let c = 0.7;
        let (v1, v2) = (c, c);
        assert_eq!((v1 + v2) / 2.0, c);
        assert_eq!((1.0 + 3.0) / 2.0, 2.0);
        // One step of 2d equals two steps of d on a constant field.
        let x0: Vec<f64> = vec![0.25, -1.5, 3.0];
        let field = vec![0.5, 0.25, -2.0];
        for n in [1usize, 2, 4, 8, 16] {
            let one = euler_sample(x0.clone(), n, |_, _, _| Ok(field.clone())).unwrap();
            let two = euler_sample(x0.clone(), 2 * n, |_, _, _| Ok(field.clone())).unwrap();
            for (a, b) in one.iter().zip(&two) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    fn shortcut_model() -> Model<f64> {
        let mut model = Model::<f64>::new(ModelConfig::tiny(), 1).unwrap();
        model.enable_shortcut(2);
        // Move the zero-initialized pathway off its no-op point.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (_, t) in model.params.iter_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
        model
    }

    #[test]
    fn detached_target_carries_no_gradient() {
        let model = shortcut_model();
        let m = model.config.mel_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = crate::diffusion::gaussian(&mut rng, 3 * m);
        let eps: Vec<f64> = crate::diffusion::gaussian(&mut rng, 3 * m);
        let sample = ShortcutSample::Consistency { t: 0.25, d: 0.25 };
        let grads = |detach: bool| -> Vec<f64> {
            let mut tape = Tape::new();
            model.params.bind(&mut tape);
            let cond = model
                .cond_from_tokens(&mut tape, &[vec![0], vec![1], vec![2]])
                .unwrap();
            let prep = model.decoder.prepare(&mut tape, cond).unwrap();
            let loss =
                shortcut_utterance_loss(&model, &mut tape, &x, &eps, prep, sample, None, detach)
                    .unwrap();
            let g = tape.backward(loss).unwrap();
            tape.params()
                .iter()
                .flat_map(|&p| g.get(p).unwrap().to_vec())
                .collect()
        };
        let (det, att) = (grads(true), grads(false));
        assert_ne!(det, att);

        // Oracle: with a constant target of the same value, gradients only
        // flow through the 2d prediction and must equal the detached run.
        let mut tape = Tape::new();
        model.params.bind(&mut tape);
        let cond = model
            .cond_from_tokens(&mut tape, &[vec![0], vec![1], vec![2]])
            .unwrap();
        let prep = model.decoder.prepare(&mut tape, cond).unwrap();
        let x_t = crate::diffusion::forward_diffuse(&x, &eps, 0.25);
        let x_t = tape.constant(vec![3, m], x_t).unwrap();
        let target = shortcut_target(&model, &mut tape, x_t, 0.25, 0.25, prep, true).unwrap();
        let target = tape
            .constant(vec![3, m], tape.value(target).to_vec())
            .unwrap();
        let pred = step_velocity(&model, &mut tape, x_t, 0.25, 0.5, prep).unwrap();
        let loss = tape.l2_loss(pred, target, None).unwrap();
        let g = tape.backward(loss).unwrap();
        let oracle: Vec<f64> = tape
            .params()
            .iter()
            .flat_map(|&p| g.get(p).unwrap().to_vec())
            .collect();
        assert_eq!(det, oracle);
    }

    #[test]
    fn step_velocity_requires_pathway() {
        let model = Model::<f64>::new(ModelConfig::tiny(), 1).unwrap();
        let mut tape = Tape::new();
        model.params.bind(&mut tape);
        let x = tape.constant(vec![1, 8], vec![0.0; 8]).unwrap();
        let c = model.cond_from_tokens(&mut tape, &[vec![0]]).unwrap();
        let p = model.decoder.prepare(&mut tape, c).unwrap();
        assert!(step_velocity(&model, &mut tape, x, 0.0, 0.0, p).is_err());
    }
}
