use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of `f` at `x0` with central differences.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)` over all
/// coordinates.
pub fn finite_diff_check<F>(f: F, x0: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    finite_diff_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x0), step)
}

/// Multi-input variant of [`finite_diff_check`]; every input is perturbed in turn.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.get(v)).collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let value = f(&tape, &vars)?.item();
        if !value.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation".into()));
        }
        Ok(value)
    };

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe[which].data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe[which].data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x0 = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let err = finite_diff_check(|_, x| x.square()?.sum(), &x0, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x0 = Tensor::vector(vec![0.5, -0.5]);
        let err = finite_diff_check(|tape, _| Ok(tape.scalar(3.0)), &x0, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_step() {
        let x0 = Tensor::vector(vec![1.0]);
        assert!(finite_diff_check(|_, x| x.sum(), &x0, 0.0).is_err());
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        // log(x) at x = step/2 pushes the lower probe below zero in unchecked
        // arithmetic; the checked tape reports a domain error instead.
        let x0 = Tensor::vector(vec![5e-6]);
        assert!(finite_diff_check(|_, x| x.log()?.sum(), &x0, 1e-5).is_err());
    }
}
