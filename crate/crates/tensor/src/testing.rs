//! Finite-difference oracle for gradient checks (test support only).

use crate::{Result, Tape, Tensor, Var};

/// Relative error used by every gradient check: `|ad - fd| / (|fd| + 1e-8)`.
pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (fd.abs() + 1e-8)
}

/// Compares tape gradients of `f` against a five-point central difference
/// stencil for every element of every input. Returns the worst relative error.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zero(*v)).collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = probe.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value().item()?;
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x0 = input.data()[j];
            let mut at = |dx: f64| -> Result<f64> {
                probe[i].data_mut()[j] = x0 + dx;
                let v = eval(&probe);
                probe[i].data_mut()[j] = x0;
                v
            };
            let fd = (-at(2.0 * step)? + 8.0 * at(step)? - 8.0 * at(-step)? + at(-2.0 * step)?) / (12.0 * step);
            worst = worst.max(relative_error(analytic[i].data()[j], fd));
        }
    }
    Ok(worst)
}
