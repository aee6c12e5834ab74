//! Central finite-difference checks against tape gradients.

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)` over all
    /// inputs jointly.
    pub relative_error: f64,
    /// `‖analytic − numeric‖` per input.
    pub abs_errors: Vec<f64>,
    /// `‖analytic‖` per input.
    pub grad_norms: Vec<f64>,
    pub loss: f64,
}

/// Norms below this are treated as a zero gradient.
const NORM_FLOOR: f64 = 1e-10;

/// Differentiates the scalar returned by `build` with respect to every
/// input, once on the tape and once by central differences with step `h`.
pub fn check_gradients(
    inputs: &[DenseArray],
    h: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradientCheck> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|x| tape.leaf(x.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut tape, &vars)?;
    let loss_value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;

    let evaluate = |xs: &[DenseArray]| -> Result<f64> {
        let mut t = Tape::new();
        let vs = xs
            .iter()
            .map(|x| t.leaf(x.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let l = build(&mut t, &vs)?;
        t.value(l).item()
    };

    let mut abs_errors = Vec::with_capacity(inputs.len());
    let mut grad_norms = Vec::with_capacity(inputs.len());
    let (mut diff_total, mut a_total, mut n_total) = (0.0, 0.0, 0.0);
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads
            .get(v)
            .ok_or_else(|| Error::Grad(format!("input {i} has no gradient")))?;
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = evaluate(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let down = evaluate(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            diff_sq += (a - numeric).powi(2);
            a_sq += a * a;
            n_sq += numeric * numeric;
        }
        abs_errors.push(diff_sq.sqrt());
        grad_norms.push(a_sq.sqrt());
        diff_total += diff_sq;
        a_total += a_sq;
        n_total += n_sq;
    }
    let scale = a_total.sqrt().max(n_total.sqrt()).max(NORM_FLOOR);
    Ok(GradientCheck {
        relative_error: diff_total.sqrt() / scale,
        abs_errors,
        grad_norms,
        loss: loss_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_passes_and_wrong_gradient_fails() {
        let x = DenseArray::from_rows(&[[0.3, -1.2, 2.0]]).unwrap();
        let ok = check_gradients(std::slice::from_ref(&x), 1e-6, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let cube = t.mul(sq, v[0])?;
            t.sum_all(cube)
        })
        .unwrap();
        assert!(ok.relative_error < 1e-8, "{ok:?}");
        // Detaching one factor halves part of the gradient on the tape only.
        let bad = check_gradients(&[x], 1e-6, |t, v| {
            let frozen = t.constant(t.value(v[0]).clone())?;
            let sq = t.mul(v[0], frozen)?;
            t.sum_all(sq)
        })
        .unwrap();
        assert!(bad.relative_error > 0.1, "{bad:?}");
    }
}
