//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Coordinate-wise relative error between two gradient vectors.
///
/// Each coordinate is compared as `|a - b| / max(|a|, |b|, floor)` where
/// `floor` is `1e-3` times the largest magnitude in either vector (and at
/// least `1e-12`), so coordinates that are essentially zero do not blow up
/// the ratio. Returns the maximum over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function at `x`.
pub fn numeric_gradient<F>(f: &F, x: &Tensor, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.data().to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = eval(f, x.shape(), &probe)?;
        probe[i] = orig - h;
        let minus = eval(f, x.shape(), &probe)?;
        probe[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

fn eval<F>(f: &F, shape: &[usize], data: &[f64]) -> Result<f64>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(shape.to_vec(), data.to_vec())?);
    Ok(f(&tape, &x)?.item())
}

/// Compares the tape gradient of `f` at `x` against central differences with
/// step `h` and returns the maximum relative error (see
/// [`max_relative_error`]).
///
/// Results near activation kinks are not meaningful; callers should
/// evaluate away from them.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let y = f(&tape, &leaf)?;
    let analytic = tape.backward(&y, &[&leaf])?.remove(0);
    let numeric = numeric_gradient(&f, x, h)?;
    Ok(max_relative_error(analytic.data(), &numeric))
}
