//! Central finite-difference gradient checker.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a [`grad_check`] run.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max |a - n| / max(1e-8, |a| + |n|)` over every coordinate.
    pub max_rel_error: f64,
    /// `(input, coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

/// Compares tape gradients of a scalar function against
/// `(f(x+eps) - f(x-eps)) / (2 eps)` for every coordinate of every input.
///
/// `f` receives a fresh tape and one trainable leaf per input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut col = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            col.push((plus - minus) / (2.0 * eps));
        }
        numeric.push(col);
    }

    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (a, n)) in a.iter().zip(n).enumerate() {
            let err = relative_error(*a, *n);
            if err > max_rel_error {
                max_rel_error = err;
                worst = (i, j);
            }
        }
    }
    Ok(GradCheck {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let check = grad_check(
            |tape, v| {
                let sq = tape.square(v[0]);
                Ok(tape.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(check.analytic[0], vec![2.0, 4.0]);
        assert!(check.max_rel_error < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::new([3], vec![0.3, -1.0, 2.0]).unwrap();
        let check =
            grad_check(|tape, _| Ok(tape.constant(Tensor::scalar(4.0))), &[x], 1e-5).unwrap();
        assert!(check.analytic[0].iter().all(|&g| g == 0.0));
        assert!(check.numeric[0].iter().all(|&g| g == 0.0));
        assert_eq!(check.max_rel_error, 0.0);
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::ones([2]);
        assert!(grad_check(|_, v| Ok(v[0]), &[x], 1e-5).is_err());
    }
}
