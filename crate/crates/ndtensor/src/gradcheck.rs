//! Central finite-difference gradient checks.

use crate::element::Element;
use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error used by the checks: `|a - n| / (|a| + |n| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Compares the tape gradient of the scalar function `f` at `x` with central
/// differences of step `step`, returning the largest per-element relative error.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, step: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let errs = finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)?;
    Ok(errs[0])
}

/// Multi-input form of [`finite_diff_check`]: one maximum relative error per input.
pub fn finite_diff_check_many<T, F>(f: F, inputs: &[Tensor<T>], step: f64) -> Result<Vec<f64>>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| match grads.get(*v) {
            Some(g) => g.clone(),
            None => Tensor::from_parts(t.shape().to_vec(), vec![T::zero(); t.numel()]),
        })
        .collect();

    let eval = |values: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item()?.to_f64_lossy())
    };

    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, g) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for j in 0..inputs[i].numel() {
            let original = work[i].data()[j];
            work[i].data_mut()[j] = original + T::of(step);
            let plus = eval(&work)?;
            work[i].data_mut()[j] = original - T::of(step);
            let minus = eval(&work)?;
            work[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(g.data()[j].to_f64_lossy(), numeric));
        }
        errors.push(worst);
    }
    Ok(errors)
}
