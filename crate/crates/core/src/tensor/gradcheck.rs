use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const DENOM_FLOOR: f64 = 1e-6;

/// Compares the tape gradient of a scalar function against central differences.
///
/// Returns the maximum over elements of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-6)`.
#[allow(clippy::needless_range_loop)]
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Range(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    tape.value(out).validate_finite()?;
    tape.backward(out)?;
    let analytic = match tape.grad(xv) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; x.len()],
    };

    let eval = |probe: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(probe.clone(), false);
        let out = f(&mut tape, v)?;
        let value = tape.value(out).item()?;
        if !value.is_finite() {
            return Err(Error::numerics(format!("function evaluated to {value}")));
        }
        Ok(value)
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + DENOM_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}
