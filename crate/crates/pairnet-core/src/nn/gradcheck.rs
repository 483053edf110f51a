//! Central finite-difference gradient checking.
//!
//! This is the independent oracle for the backward pass: it re-evaluates the
//! forward computation at perturbed inputs and never touches the recorded
//! gradients, so agreement genuinely cross-checks the two derivative paths.

use super::tape::{Tape, Value};
use super::tensor::Tensor;
use crate::error::Result;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Relative error with a unit floor, so near-zero true gradients compare by
/// absolute difference: |a - f| / max(1, |a|, |f|).
pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0)
}

#[derive(Debug, Clone, Copy)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub checks: usize,
}

fn eval(
    inputs: &[Tensor],
    build: &impl Fn(&mut Tape, &[Value]) -> Result<Value>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let leaves: Vec<Value> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &leaves)?;
    Ok(tape.value(loss).item())
}

/// Checks every entry of every input against a central difference with the
/// given step. `build` must construct the same scalar loss each call.
pub fn check_gradients(
    inputs: &[Tensor],
    h: f64,
    build: impl Fn(&mut Tape, &[Value]) -> Result<Value>,
) -> Result<FiniteDiffReport> {
    check_gradients_sampled(inputs, h, usize::MAX, None, build)
}

/// Like [`check_gradients`] but probing at most `samples_per_tensor` entries
/// of each input (all entries when the cap exceeds the element count). Used
/// for composite losses whose parameter tensors are too large to sweep.
pub fn check_gradients_sampled(
    inputs: &[Tensor],
    h: f64,
    samples_per_tensor: usize,
    rng: Option<&mut ChaCha8Rng>,
    build: impl Fn(&mut Tape, &[Value]) -> Result<Value>,
) -> Result<FiniteDiffReport> {
    // Analytic gradients once.
    let mut tape = Tape::new();
    let leaves: Vec<Value> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;

    let mut local_rng = rng.map(|r| r.clone());
    let mut max_rel_err: f64 = 0.0;
    let mut checks = 0;
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picked: Vec<usize> = if samples_per_tensor >= n {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            let r = local_rng
                .as_mut()
                .expect("sampling requires an rng when capping entries");
            all.shuffle(r);
            all.truncate(samples_per_tensor);
            all
        };
        for j in picked {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[j] -= h;
            let fd = (eval(&plus, &build)? - eval(&minus, &build)?) / (2.0 * h);
            let analytic = grads[leaves[ti].0].data()[j];
            max_rel_err = max_rel_err.max(relative_error(analytic, fd));
            checks += 1;
        }
    }
    Ok(FiniteDiffReport {
        max_rel_err,
        checks,
    })
}
