use super::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};

/// Largest relative disagreement between the tape gradient of `f` at `x` and
/// a central finite difference with step `h`.
///
/// `f` builds a scalar from a tracked input on a fresh tape. The error per
/// entry is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Matrix, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(h > 0.0) {
        return Err(Error::config(format!("step must be positive, got {h}")));
    }
    let analytic = analytic_gradient(&f, x)?;
    let numeric = central_difference(&f, x, h)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max))
}

pub fn analytic_gradient<F>(f: &F, x: &Matrix) -> Result<Matrix>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = f(&mut tape, input)?;
    let value = tape.scalar(out)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("function value {value}")));
    }
    let mut grads = tape.backward(out)?;
    Ok(grads
        .take(input)
        .unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols())))
}

pub fn central_difference<F>(f: &F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let eval = |m: Matrix| -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.constant(m);
        let out = f(&mut tape, input)?;
        let v = tape.scalar(out)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!("function value {v}")))
        }
    };
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        grad.data_mut()[i] = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_checks_tightly() {
        let a = Matrix::from_rows(&[[2.0, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 3.0]]).unwrap();
        let x = Matrix::from_rows(&[[0.7], [-1.2], [0.4]]).unwrap();
        let err = grad_check(
            |t, x| {
                let a = t.constant(a.clone());
                let ax = t.matmul(a, x)?;
                let xt = t.transpose(x)?;
                t.matmul(xt, ax)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn non_finite_function_is_numeric_error() {
        let x = Matrix::scalar(1.0);
        let r = grad_check(
            |t, x| {
                let c = t.constant(Matrix::scalar(f64::INFINITY));
                let _ = x;
                t.sum(c)
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(grad_check(|t, x| t.sum(x), &Matrix::scalar(1.0), 0.0).is_err());
    }
}
