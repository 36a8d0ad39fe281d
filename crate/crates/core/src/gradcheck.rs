//! Central finite-difference gradient checking.
//!
//! The checker only evaluates forward values, so it is independent of the
//! pullbacks it validates.

use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Uniform random tensor with entries in [-2, 2].
pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite")
}

/// `sum(y * w)` with fixed, non-uniform weights `w_i = sin(1.3 i + 0.1)`, so
/// that every output element contributes to the scalar with a distinct weight.
pub fn weighted_sum(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let n = tape.value(y).numel();
    let w = (0..n).map(|i| (1.3 * i as f64 + 0.1).sin()).collect();
    let wv = tape.constant(Tensor::new(shape, w)?);
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

/// Worst relative error between tape and finite-difference gradients over all
/// `inputs`, measured per input as `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖)`.
pub fn max_relative_error<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[k])
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        let mut probe = inputs.to_vec();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = input.data()[i];
            probe[k].data_mut()[i] = x0 + FD_STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - FD_STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = crate::tensor::norm(&analytic).max(crate::tensor::norm(&numeric));
        let rel = if scale < 1e-10 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Fails with a description when [`max_relative_error`] reaches `tol`.
pub fn check_gradients<F>(name: &str, inputs: &[Tensor], build: F, tol: f64) -> std::result::Result<(), String>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    match max_relative_error(inputs, build) {
        Ok(err) if err < tol => Ok(()),
        Ok(err) => Err(format!("{name}: relative gradient error {err:e} >= {tol:e}")),
        Err(e) => Err(format!("{name}: {e}")),
    }
}
