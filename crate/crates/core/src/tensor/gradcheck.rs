use crate::error::{usage_err, Result};

use super::{Tape, Tensor, Var};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare the tape gradient of a scalar function against central
/// differences at `point`, returning the largest per-coordinate relative
/// error.
///
/// `f` receives a fresh tape and the leaf holding the (possibly perturbed)
/// point, and must return a scalar on that tape.
pub fn finite_difference_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(usage_err!("epsilon {epsilon} outside [1e-7, 1e-3]"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape
        .take_grad(x)
        .expect("leaf was registered with requires_grad");

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(p);
        let out = f(&mut t, v)?;
        Ok(t.value(out).data()[0])
    };
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = orig - epsilon;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
