//! Dense `f64` tensors and reverse-mode differentiation.

pub mod kernels;
mod tape;
mod tensor;

pub use kernels::{cross_entropy, gelu, log_prob, log_sum_exp, masked_softmax};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, Tensor};

use crate::error::Result;

/// Relative error used by gradient checks. Components below `floor` in
/// magnitude are compared on an absolute scale of `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare analytic and central-difference gradients of a scalar function.
///
/// `build` records the function on a fresh tape given one leaf per input and
/// returns the scalar output. Returns the worst relative error over every
/// input component.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").clone();
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[j], numeric, 1e-3));
        }
    }
    Ok(worst)
}
