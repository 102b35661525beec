//! Central finite-difference verification of tape gradients.

use super::{Array, NodeId, Scalar, Tape};
use crate::error::{Error, Result};

fn eval_scalar<S, F>(x: &Array<S>, f: &F) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let id = tape.leaf(x);
    let out = f(&mut tape, id)?;
    let (r, c) = tape.dims(out);
    if r * c != 1 {
        return Err(Error::Contract(format!(
            "grad_check function must be scalar-valued, got {}x{}",
            r, c
        )));
    }
    Ok(tape.value(out)[0].to_f64_lossy())
}

/// Compare the tape gradient of `f` at `x` against central differences.
/// Returns the max over coordinates of
/// |analytic - central| / (|analytic| + |central| + 1e-8).
pub fn grad_check<S, F>(x: &Array<S>, eps: f64, f: F) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, NodeId) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("eps must be positive, got {}", eps)));
    }
    let mut tape = Tape::new();
    let id = tape.leaf(x);
    let out = f(&mut tape, id)?;
    let (r, c) = tape.dims(out);
    if r * c != 1 {
        return Err(Error::Contract(format!(
            "grad_check function must be scalar-valued, got {}x{}",
            r, c
        )));
    }
    tape.backward(out)?;
    let analytic: Vec<f64> = match tape.grad(id) {
        Some(g) => g.iter().map(|&v| v.to_f64_lossy()).collect(),
        None => vec![0.0; x.numel()],
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + S::of(eps);
        let up = eval_scalar(&probe, &f)?;
        probe.data_mut()[i] = orig - S::of(eps);
        let down = eval_scalar(&probe, &f)?;
        probe.data_mut()[i] = orig;
        let central = (up - down) / (2.0 * eps);
        let rel = (analytic[i] - central).abs() / (analytic[i].abs() + central.abs() + 1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
