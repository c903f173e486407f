//! Connectionist temporal classification: log-space forward–backward loss
//! with its gradient, an exhaustive oracle, and greedy decoding.
//!
//! Blank is id 0 everywhere.

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};

pub const BLANK: usize = 0;
const BRUTE_FORCE_LIMIT: f64 = 1e6;

fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum frame count for which `labels` has at least one alignment.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtcOutcome {
    /// `-log p(y | x)`, or `+∞` when infeasible.
    pub loss: f64,
    /// d loss / d logp, `[T × V]`; zeros when infeasible.
    pub grad: Vec<f64>,
    pub feasible: bool,
}

/// Forward–backward over `logp: [T × V]` log-probabilities.
pub fn ctc_loss(logp: &[f64], t_len: usize, vocab: usize, labels: &[usize]) -> Result<CtcOutcome> {
    if logp.len() != t_len * vocab || vocab < 2 {
        return Err(Error::shape(
            "ctc_loss",
            format!("{} values for T={} V={}", logp.len(), t_len, vocab),
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l == BLANK || l >= vocab) {
        return Err(Error::InvalidArgument(format!(
            "label {} outside [1, {})",
            l, vocab
        )));
    }
    if t_len == 0 || min_frames(labels) > t_len {
        return Ok(CtcOutcome {
            loss: f64::INFINITY,
            grad: vec![0.0; logp.len()],
            feasible: false,
        });
    }
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(labels.iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let s_len = ext.len();
    let lp = |t: usize, s: usize| logp[t * vocab + ext[s]];
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = logsumexp2(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if skip_ok(s) {
                a = logsumexp2(a, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, s) };
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = if s_len > 1 {
        logsumexp2(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                b = logsumexp2(b, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = logsumexp2(b, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp(t, s) };
        }
    }

    let mut grad = vec![0.0; t_len * vocab];
    for t in 0..t_len {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab == ninf {
                continue;
            }
            grad[t * vocab + ext[s]] -= (ab - lp(t, s) - log_p).exp();
        }
    }
    Ok(CtcOutcome {
        loss: -log_p,
        grad,
        feasible: true,
    })
}

/// Records the CTC loss of `logp: [T, V]` on the tape, or `None` when the
/// pair is infeasible.
pub fn ctc_loss_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    logp: Var,
    labels: &[usize],
) -> Result<Option<Var>> {
    let shape = tape.shape(logp).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("ctc_loss", format!("{:?}", shape)));
    }
    let vals: Vec<f64> = tape
        .value(logp)
        .iter()
        .map(|&v| Scalar::to_f64(v))
        .collect();
    let out = ctc_loss(&vals, shape[0], shape[1], labels)?;
    if !out.feasible {
        return Ok(None);
    }
    let grad = out.grad.iter().map(|&g| S::from_f64(g)).collect();
    tape.precomputed("ctc_loss", logp, S::from_f64(out.loss), grad)
        .map(Some)
}

/// Merge repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Exhaustive sum over all `V^T` paths.
pub fn ctc_loss_bruteforce(
    logp: &[f64],
    t_len: usize,
    vocab: usize,
    labels: &[usize],
) -> Result<f64> {
    if (vocab as f64).powi(t_len as i32) > BRUTE_FORCE_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "V^T = {}^{} too large to enumerate",
            vocab, t_len
        )));
    }
    if logp.len() != t_len * vocab {
        return Err(Error::shape(
            "ctc_loss_bruteforce",
            format!("{} values for T={} V={}", logp.len(), t_len, vocab),
        ));
    }
    let mut path = vec![0usize; t_len];
    let mut total = f64::NEG_INFINITY;
    loop {
        if collapse(&path) == labels {
            let lp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &k)| logp[t * vocab + k])
                .sum();
            total = logsumexp2(total, lp);
        }
        let mut d = 0;
        loop {
            if d == t_len {
                return Ok(-total);
            }
            path[d] += 1;
            if path[d] < vocab {
                break;
            }
            path[d] = 0;
            d += 1;
        }
    }
}

/// Per-frame argmax (lowest id on ties), collapsed.
pub fn greedy_decode(logp: &[f64], vocab: usize) -> Vec<usize> {
    let path: Vec<usize> = logp
        .chunks(vocab)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| {
                    if v > best.1 {
                        (k, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect();
    collapse(&path)
}

/// Levenshtein distance between two label sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y))
                .min(prev[j + 1] + 1)
                .min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn log_softmax_rows(x: &[f64], v: usize) -> Vec<f64> {
        x.chunks(v)
            .flat_map(|r| {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + r.iter().map(|a| (a - m).exp()).sum::<f64>().ln();
                r.iter().map(move |a| a - lse)
            })
            .collect()
    }

    #[test]
    fn uniform_examples() {
        let lp = vec![0.5f64.ln(); 2];
        let out = ctc_loss(&lp, 1, 2, &[1]).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
        let lp = vec![0.5f64.ln(); 4];
        let out = ctc_loss(&lp, 2, 2, &[1]).unwrap();
        assert!((out.loss - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((out.loss - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lp = log_softmax_rows(&raw, 3);
        let out = ctc_loss(&lp, 4, 3, &[]).unwrap();
        let expect: f64 = -(0..4).map(|t| lp[t * 3]).sum::<f64>();
        assert!((out.loss - expect).abs() < 1e-12);
    }

    #[test]
    fn infeasible_is_sentinel() {
        let lp = vec![0.5f64.ln(); 4];
        let out = ctc_loss(&lp, 2, 2, &[1, 1]).unwrap();
        assert!(!out.feasible && out.loss.is_infinite());
        assert!(ctc_loss_bruteforce(&lp, 2, 2, &[1, 1])
            .unwrap()
            .is_infinite());
        let lp = vec![0.5f64.ln(); 2];
        assert!(ctc_loss_bruteforce(&lp, 1, 2, &[1, 1])
            .unwrap()
            .is_infinite());
        assert_eq!(min_frames(&[1, 1, 2, 2]), 6);
    }

    #[test]
    fn rejects_blank_label_and_huge_bruteforce() {
        let lp = vec![0.5f64.ln(); 4];
        assert!(ctc_loss(&lp, 2, 2, &[0]).is_err());
        let lp = vec![0.0; 5 * 20];
        assert!(ctc_loss_bruteforce(&lp, 20, 5, &[1]).is_err());
    }

    #[test]
    fn matches_bruteforce_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..60 {
            let t = rng.random_range(1..=6usize);
            let v = rng.random_range(2..=5usize);
            let n = rng.random_range(0..=3usize);
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(1..v)).collect();
            let raw: Vec<f64> = (0..t * v).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lp = log_softmax_rows(&raw, v);
            let fb = ctc_loss(&lp, t, v, &y).unwrap();
            let bf = ctc_loss_bruteforce(&lp, t, v, &y).unwrap();
            if bf.is_infinite() {
                assert!(!fb.feasible);
                continue;
            }
            assert!((fb.loss - bf).abs() < 1e-9, "{} vs {}", fb.loss, bf);
            let point = Tensor::from_f64(vec![t, v], &raw).unwrap();
            let err = grad_check(
                |tape, x| {
                    let l = tape.log_softmax(x)?;
                    Ok(ctc_loss_on_tape(tape, l, &y)?.expect("feasible"))
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn certain_blank_frame_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lp = log_softmax_rows(&raw, 3);
        let base = ctc_loss(&lp, 4, 3, &[1, 2]).unwrap().loss;
        let mut ext = lp.clone();
        ext.extend([0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        let out = ctc_loss(&ext, 5, 3, &[1, 2]).unwrap().loss;
        assert!((out - base).abs() < 1e-12);
        assert!(base >= 0.0);
    }

    #[test]
    fn greedy_examples() {
        let onehot = |ids: &[usize], v: usize| -> Vec<f64> {
            ids.iter()
                .flat_map(|&k| (0..v).map(move |j| if j == k { 0.0 } else { -5.0 }))
                .collect()
        };
        assert!(greedy_decode(&onehot(&[0, 0, 0], 3), 3).is_empty());
        assert_eq!(greedy_decode(&onehot(&[1, 1, 0, 2], 3), 3), vec![1, 2]);
        assert_eq!(greedy_decode(&onehot(&[1, 0, 1], 3), 3), vec![1, 1]);
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(edit_distance(&[], &[4, 5]), 2);
        assert_eq!(edit_distance(&[1, 2], &[2, 1]), 2);
    }
}
