//! Central finite-difference gradient checking.
//!
//! This harness is independent of the analytic backward path: it re-evaluates
//! the forward graph at perturbed inputs and compares difference quotients
//! against the gradients reported by the tape. Always run it in f64.

use super::tape::{Tape, Val};
use super::tensor::Tensor;
use super::DiffError;

/// Default central-difference step for the f64 harness.
pub const FD_STEP: f64 = 1e-3;
/// Acceptance threshold on the relative error.
pub const FD_TOLERANCE: f64 = 1e-3;

/// Checks the gradient of a scalar-valued graph w.r.t. every input tensor.
///
/// Returns the maximum relative error `|analytic - numeric| /
/// max(|analytic|, |numeric|, 1e-3)` over all input elements.
pub fn gradcheck<F>(build: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape<f64>, &[Val]) -> Result<Val, DiffError>,
{
    let mut tape = Tape::new();
    let vals: Vec<Val> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<_, _>>()?;
    let loss = build(&mut tape, &vals)?;
    if tape.value(loss).len() != 1 {
        return Err(DiffError::Shape {
            op: "gradcheck",
            detail: "graph must produce a scalar loss".into(),
        });
    }
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, DiffError> {
        let mut t = Tape::new();
        let vs: Vec<Val> = perturbed
            .iter()
            .map(|x| t.leaf(x.clone(), false))
            .collect::<Result<_, _>>()?;
        let out = build(&mut t, &vs)?;
        t.value(out).item()
    };

    let mut max_err = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vals[i]);
        for e in 0..input.len() {
            let mut plus: Vec<Tensor<f64>> = inputs.to_vec();
            plus[i].data_mut()[e] += step;
            let mut minus: Vec<Tensor<f64>> = inputs.to_vec();
            minus[i].data_mut()[e] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic.map(|g| g.data()[e]).unwrap_or(0.0);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_TOLERANCE);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
