//! Central-difference gradient oracle.

use super::{Scalar, Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Which input and element produced the maximum.
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `‖a - b‖ / max(‖a‖, ‖b‖, 1e-8)` over all inputs jointly.
    pub norm_rel_error: f64,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks the gradient of a scalar function of one tensor.
pub fn finite_diff_check<T: Scalar>(
    f: impl Fn(&mut Tape<T>, Var) -> Result<Var>,
    x: &Tensor<T>,
    eps: T,
) -> Result<GradCheck> {
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Checks the gradient of a scalar function with respect to every input.
///
/// The analytic side runs one `backward`; the numeric side perturbs each
/// element by `±eps` and re-evaluates `f` on a fresh tape.
pub fn finite_diff_check_many<T: Scalar>(
    f: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<T>],
    eps: T,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.numel()]))
        .collect();
    drop(tape);

    let eval = |perturbed: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().as_f64())
    };

    let mut report =
        GradCheck { max_rel_error: 0.0, worst_input: 0, worst_index: 0, analytic: 0.0, numeric: 0.0, norm_rel_error: 0.0 };
    let (mut diff_sq, mut a_sq, mut n_sq) = (0.0f64, 0.0f64, 0.0f64);
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for (idx, &a) in grad.iter().enumerate() {
            let orig = work[which].data()[idx];
            let (hi, lo) = (orig + eps, orig - eps);
            work[which].data_mut()[idx] = hi;
            let plus = eval(&work)?;
            work[which].data_mut()[idx] = lo;
            let minus = eval(&work)?;
            work[which].data_mut()[idx] = orig;
            // The realized step, which differs from 2*eps after rounding.
            let numeric = (plus - minus) / (hi - lo).as_f64();
            let a = a.as_f64();
            diff_sq += (a - numeric).powi(2);
            a_sq += a * a;
            n_sq += numeric * numeric;
            let err = relative_error(a, numeric);
            if err > report.max_rel_error || err.is_nan() {
                report = GradCheck {
                    max_rel_error: if err.is_nan() { f64::INFINITY } else { err },
                    worst_input: which,
                    worst_index: idx,
                    analytic: a,
                    numeric,
                    norm_rel_error: 0.0,
                };
            }
        }
    }
    report.norm_rel_error = diff_sq.sqrt() / a_sq.sqrt().max(n_sq.sqrt()).max(1e-8);
    if report.norm_rel_error.is_nan() {
        report.norm_rel_error = f64::INFINITY;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.1);
        let r = finite_diff_check(|t, v| Ok(t.sum_all(v)), &x, 1e-2).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn tanh_sum_at_zero() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let r = finite_diff_check(
            |t, v| {
                let y = t.tanh(v);
                Ok(t.sum_all(y))
            },
            &x,
            1e-2,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let x = Tensor::<f32>::from_fn(&[4], |i| 0.3 + i as f32 * 0.2);
        let r = finite_diff_check(
            |t, v| {
                let value = t.value(v).map(|a| a.tanh());
                // derivative written as 1 - y instead of 1 - y^2
                let y = t.record(&[v], value, |ctx| {
                    vec![Some(ctx.grad.iter().zip(ctx.output.data()).map(|(g, y)| g * (1.0 - y)).collect())]
                });
                Ok(t.sum_all(y))
            },
            &x,
            1e-2,
        )
        .unwrap();
        assert!(r.max_rel_error > 1e-1, "{r:?}");
    }
}
