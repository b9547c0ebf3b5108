//! Central-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Input index and flat coordinate where the worst error occurred.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Relative error with the floor used throughout gradient checking.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of `f` against
/// `(f(x + eps) - f(x - eps)) / (2 eps)` for every input coordinate.
///
/// `f` must rebuild its computation on the tape it is handed and return a
/// scalar; it is evaluated `1 + 2 * n` times for `n` total input coordinates.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }

    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = f(&tape, &vars)?;
        if !out.value().is_scalar() {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar-valued function, got shape {:?}",
                out.shape()
            )));
        }
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                let g = grads.get_or_zeros(*v);
                Tensor::new(t.shape().to_vec(), g.into_data())
            })
            .collect::<Result<Vec<_>>>()?
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t)).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut work = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for (k, input) in inputs.iter().enumerate() {
        let mut num = vec![0.0; input.len()];
        for (j, slot) in num.iter_mut().enumerate() {
            let orig = input.data()[j];
            work[k].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * eps);

            let err = relative_error(analytic[k].data()[j], *slot);
            if !(err <= max_rel_error) {
                max_rel_error = err;
                worst = Some((k, j));
            }
        }
        numeric.push(Tensor::new(input.shape().to_vec(), num)?);
    }

    Ok(GradCheck {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}

/// Pins a closure to the higher-ranked signature [`grad_check`] expects,
/// for closures that are bound to a variable before use.
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}
