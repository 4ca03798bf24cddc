use super::{Tape, Tensor, Var};
use crate::error::{invalid, Result};

/// Outcome of a central-difference gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// Largest `|numeric - analytic| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates the evaluator declined (e.g. a perturbation changed a discrete selection).
    pub skipped: usize,
}

/// Compare `analytic` against central differences, one coordinate at a time.
///
/// `eval(i, delta)` returns the loss with coordinate `i` shifted by `delta`, or
/// `None` to skip the coordinate.
pub fn check_coordinates<F>(analytic: &[f64], h: f64, mut eval: F) -> FdReport
where
    F: FnMut(usize, f64) -> Option<f64>,
{
    let mut report = FdReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for (i, &a) in analytic.iter().enumerate() {
        let (Some(plus), Some(minus)) = (eval(i, h), eval(i, -h)) else {
            report.skipped += 1;
            continue;
        };
        let numeric = (plus - minus) / (2.0 * h);
        let err = (numeric - a).abs() / a.abs().max(1.0);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    report
}

/// Maximum relative error between the tape gradient of `f` at `x` and central
/// differences with step `h`.
///
/// `f` records a scalar function of its input on a fresh tape each call.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).data()[0])
    };
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(v).expect("input is a parameter").data().to_vec();

    let mut failure = None;
    let report = check_coordinates(&analytic, h, |i, delta| {
        let mut shifted = x.clone();
        shifted.data_mut()[i] += delta;
        match eval(&shifted) {
            Ok(v) => Some(v),
            Err(e) => {
                failure.get_or_insert(e);
                None
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(report.max_rel_error),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::randn(&[6], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let err = finite_diff_check(|t, x| t.sum(x), &x, 1e-3).unwrap();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::randn(&[6], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let err = finite_diff_check(
            |t, x| {
                let s = t.mul(x, x)?;
                t.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn skipped_coordinates_are_counted() {
        let r = check_coordinates(&[1.0, 2.0], 1e-3, |i, d| (i == 0).then_some(d));
        assert_eq!((r.checked, r.skipped), (1, 1));
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::zeros(&[2]);
        assert!(finite_diff_check(|t, x| t.sum(x), &x, 0.0).is_err());
    }
}
