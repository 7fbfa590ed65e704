use super::{Tape, Tensor, Var};
use crate::error::{OclipError, Result};

/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of the scalar function `f` at `x` against
/// central differences with step `h`, returning the max relative error over
/// all coordinates of `x`.
///
/// `f` is called once on a recording tape and `2 * x.numel()` more times on
/// fresh tapes, so it must be a pure function of its input.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Var) -> Result<Var>,
{
    let eval = |point: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&v)?;
        scalar_of(&out)
    };

    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&xv)?;
    scalar_of(&loss)?;
    let analytic = tape.backward(&loss)?.get_or_zeros(&xv);

    let mut numeric = vec![0.0; x.numel()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        *slot = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }
    Ok(max_relative_error(analytic.data(), &numeric))
}

fn scalar_of(v: &Var) -> Result<f64> {
    let t = v.value();
    if !t.is_scalar() {
        return Err(OclipError::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}
