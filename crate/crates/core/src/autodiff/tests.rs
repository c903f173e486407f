use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn t(shape: Vec<usize>, data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Fixed random weights turn any tensor-valued op into a scalar for checking.
fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.constant(shape, w)?;
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

type UnaryCase = (
    &'static str,
    Vec<usize>,
    fn(&mut Tape<f64>, Var) -> Result<Var>,
);

fn unary_cases() -> Vec<UnaryCase> {
    vec![
        ("scale", vec![3, 4], |t, v| t.scale(v, -1.7)),
        ("shift", vec![5], |t, v| t.shift(v, 0.3)),
        ("transpose", vec![2, 3, 4], |t, v| t.transpose(v, 0, 2)),
        ("reshape", vec![3, 4], |t, v| t.reshape(v, vec![2, 6])),
        ("slice", vec![4, 5], |t, v| t.slice(v, 1, 1, 3)),
        ("gather", vec![3, 4], |t, v| t.gather(v, &[0, 3, 2])),
        ("embedding_lookup", vec![4, 3], |t, v| {
            t.embedding(v, &[1, 1, 3, 0])
        }),
        ("softmax_lastdim", vec![3, 5], |t, v| t.softmax(v)),
        ("log_softmax_lastdim", vec![3, 5], |t, v| t.log_softmax(v)),
        ("silu", vec![6], |t, v| t.silu(v)),
        ("tanh", vec![6], |t, v| t.tanh(v)),
        ("rms_stat", vec![3, 6], |t, v| t.rms_stat(v, 1e-6)),
        ("rope", vec![2, 5, 4], |t, v| t.rope(v, 10000.0)),
        ("sinusoid", vec![3], |t, v| t.sinusoid(v, &[1.0, 3.0, 10.0])),
        ("sum", vec![3, 2], |t, v| t.sum(v)),
        ("mean", vec![3, 2], |t, v| t.mean(v)),
        ("mul_self", vec![4], |t, v| t.mul(v, v)),
        ("concat", vec![2, 3], |t, v| {
            let s = t.scale(v, 2.0)?;
            t.concat(&[v, s], 1)
        }),
    ]
}

#[test]
fn every_unary_primitive_passes_grad_check_on_20_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (name, shape, op) in unary_cases() {
        for k in 0..20 {
            let x = random(&mut rng, shape.clone());
            let err = grad_check(
                |tape, v| {
                    let y = op(tape, v)?;
                    if tape.shape(y).is_empty() {
                        Ok(y)
                    } else {
                        weighted_sum(tape, y, k)
                    }
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "{name} point {k}: {err}");
        }
    }
}

#[test]
fn binary_primitives_pass_grad_check_on_20_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    type BinaryCase = (
        &'static str,
        Vec<usize>,
        Vec<usize>,
        fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
    );
    let cases: Vec<BinaryCase> = vec![
        ("matmul", vec![3, 4], vec![4, 2], |t, a, b| t.matmul(a, b)),
        ("matmul_batched", vec![2, 3, 4], vec![2, 4, 5], |t, a, b| {
            t.matmul(a, b)
        }),
        ("add", vec![3, 4], vec![3, 4], |t, a, b| t.add(a, b)),
        ("add_bias", vec![3, 4], vec![4], |t, a, b| t.add(a, b)),
        ("sub", vec![3, 4], vec![3, 4], |t, a, b| t.sub(a, b)),
        ("mul", vec![2, 3], vec![2, 3], |t, a, b| t.mul(a, b)),
        ("mul_gain", vec![2, 3, 4], vec![3, 4], |t, a, b| t.mul(a, b)),
        ("l2_loss", vec![3, 4], vec![3, 4], |t, a, b| {
            t.l2_loss(a, b, None)
        }),
        ("l1_loss", vec![3, 4], vec![3, 4], |t, a, b| {
            t.l1_loss(a, b, None)
        }),
    ];
    for (name, sa, sb, op) in cases {
        for k in 0..20 {
            let a = random(&mut rng, sa.clone());
            let b = random(&mut rng, sb.clone());
            let err = grad_check_many(
                |tape, v| {
                    let y = op(tape, v[0], v[1])?;
                    if tape.shape(y).is_empty() {
                        Ok(y)
                    } else {
                        weighted_sum(tape, y, k)
                    }
                },
                &[a, b],
                &[Coords::All, Coords::All],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "{name} point {k}: {err}");
        }
    }
}

#[test]
fn softmax_times_weights_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, vec![8]);
    let err = grad_check(
        |t, v| {
            let s = t.softmax(v)?;
            weighted_sum(t, s, 99)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6);
}

#[test]
fn rms_norm_composition_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, vec![16]);
    let g = random(&mut rng, vec![16]);
    let err = grad_check_many(
        |t, v| {
            let n = t.rms_stat(v[0], 1e-6)?;
            let y = t.mul(n, v[1])?;
            weighted_sum(t, y, 5)
        },
        &[x, g],
        &[Coords::All, Coords::All],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6);
}

#[test]
fn forward_examples() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(vec![1], vec![0.0]).unwrap();
    let s = tape.silu(z).unwrap();
    assert_eq!(tape.value(s), &[0.0]);

    let zz = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
    let sm = tape.softmax(zz).unwrap();
    assert_eq!(tape.value(sm), &[0.5, 0.5]);

    let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let eye = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = tape.matmul(a, eye).unwrap();
    assert_eq!(tape.value(m), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn derivative_of_square_at_three() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&t(vec![], &[3.0]).with_grad());
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[6.0]);
}

#[test]
fn silu_derivative_at_one_matches_central_difference() {
    let silu = |x: f64| x / (1.0 + (-x).exp());
    let h = 1e-6;
    let oracle = (silu(1.0 + h) - silu(1.0 - h)) / (2.0 * h);
    assert!((oracle - 0.9277).abs() < 1e-4);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&t(vec![1], &[1.0]).with_grad());
    let y = tape.silu(x).unwrap();
    let y = tape.sum(y).unwrap();
    let g = tape.backward(y).unwrap();
    assert!((g.get(x).unwrap()[0] - oracle).abs() < 1e-8);
}

#[test]
fn l1_gradient_is_sign_over_n_and_zero_at_ties() {
    let mut tape = Tape::<f64>::new();
    let p = tape.leaf(&t(vec![4], &[1.0, -1.0, 2.0, 0.5]).with_grad());
    let q = tape.constant(vec![4], vec![0.0, 0.0, 3.0, 0.5]).unwrap();
    let l = tape.l1_loss(p, q, None).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(p).unwrap(), &[0.25, -0.25, -0.25, 0.0]);
}

#[test]
fn gradient_accumulation_is_additive() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, vec![5]);
    let grad_of = |twice: bool| {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(&x.clone().with_grad());
        let g1 = tape.silu(v).unwrap();
        let g1 = tape.sum(g1).unwrap();
        let out = if twice {
            let g2 = tape.silu(v).unwrap();
            let g2 = tape.sum(g2).unwrap();
            tape.add(g1, g2).unwrap()
        } else {
            g1
        };
        tape.backward(out).unwrap().get(v).unwrap().to_vec()
    };
    let once = grad_of(false);
    let twice = grad_of(true);
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn reshape_and_transpose_roundtrip_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, vec![2, 3, 4]);
    let mut tape = Tape::<f64>::new();
    let v = tape.leaf(&x);
    let r = tape.reshape(v, vec![4, 6]).unwrap();
    let r = tape.reshape(r, vec![2, 3, 4]).unwrap();
    assert_eq!(tape.value(r), x.data());
    let tr = tape.transpose(v, 1, 2).unwrap();
    let tr = tape.transpose(tr, 1, 2).unwrap();
    assert_eq!(tape.value(tr), x.data());
}

#[test]
fn straight_through_has_identity_jacobian() {
    let mut tape = Tape::<f64>::new();
    let z = tape.leaf(&t(vec![3], &[0.1, 0.2, 0.3]).with_grad());
    let q = tape.straight_through(z, vec![1.0, 0.0, -1.0]).unwrap();
    assert_eq!(tape.value(q), &[1.0, 0.0, -1.0]);
    let w = tape.constant(vec![3], vec![2.0, 3.0, 4.0]).unwrap();
    let p = tape.mul(q, w).unwrap();
    let l = tape.sum(p).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(z).unwrap(), &[2.0, 3.0, 4.0]);
}

#[test]
fn rope_at_position_zero_is_identity() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let r = tape.rope(x, 10000.0).unwrap();
    assert_eq!(tape.value(r), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&t(vec![2], &[1.0, 2.0]).with_grad());
    assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
}

#[test]
fn shape_mismatch_names_the_op() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let err = tape.matmul(a, b).unwrap_err();
    assert!(err.to_string().contains("matmul"), "{err}");
    assert!(err.to_string().contains("[2, 3]"), "{err}");
    let c = tape.constant(vec![2], vec![0.0; 2]).unwrap();
    assert!(tape.add(a, c).is_err());
}

#[test]
fn non_finite_values_are_flagged() {
    let mut tape = Tape::<f64>::new();
    tape.set_check_finite(true);
    let a = tape.constant(vec![1], vec![f64::MAX]).unwrap();
    let err = tape.scale(a, 10.0).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "scale" }));
}

#[test]
fn unreached_leaves_get_zero_gradients() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(&t(vec![2], &[1.0, 2.0]).with_grad());
    let b = tape.leaf(&t(vec![1], &[5.0]).with_grad());
    let l = tape.sum(a).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(b).unwrap(), &[0.0]);
}
