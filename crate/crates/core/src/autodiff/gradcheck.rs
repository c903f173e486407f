//! Central-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Coordinates of one input tensor that the check perturbs.
#[derive(Clone, Debug)]
pub enum Coords {
    All,
    Subset(Vec<usize>),
}

/// Max over coordinates of `|autodiff − central difference| / max(1, |central difference|)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        &[Coords::All],
        eps,
    )
}

/// Same check over several input tensors. The inputs are bound as the first
/// leaves of the tape (so [`Tape::param`] resolves them) before `f` runs.
pub fn grad_check_many<F>(f: F, points: &[Tensor<f64>], coords: &[Coords], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if coords.len() != points.len() {
        return Err(Error::InvalidArgument("one Coords entry per input".into()));
    }
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = tape.bind_params(inputs.iter());
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let leaves: Vec<Tensor<f64>> = points.iter().map(|p| p.clone().with_grad()).collect();
    let mut tape = Tape::new();
    let vars = tape.bind_params(leaves.iter());
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work = points.to_vec();
    for (ti, point) in points.iter().enumerate() {
        let analytic = grads.get(vars[ti]).expect("leaf gradient").to_vec();
        let idx: Vec<usize> = match &coords[ti] {
            Coords::All => (0..point.numel()).collect(),
            Coords::Subset(s) => s.clone(),
        };
        for i in idx {
            let orig = point.data()[i];
            work[ti].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[ti].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
