use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let analytic = {
        let tape = Tape::new();
        let xv = tape.param(x);
        let loss = f(&tape, xv)?;
        if !loss.item().is_finite() {
            return Err(Error::NumericFailure("function value is not finite".into()));
        }
        tape.backward(loss)?;
        xv.grad()
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; x.len()])
    };

    let eval = |probe: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = f(&tape, tape.constant(probe))?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NumericFailure("function value is not finite".into()))
        }
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{randn, RngState};

    #[test]
    fn sum_of_squares_self_test() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = finite_diff_check(|_, v| Ok(v.mul(&v)?.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function() {
        let x = Tensor::vector(vec![0.3, -0.7]);
        let err = finite_diff_check(
            |t, v| Ok(t.constant(&Tensor::scalar(4.0)).add(&v.scale(0.0).sum())?),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_finite_value_is_numeric_failure() {
        let x = Tensor::vector(vec![1.0]);
        let err = finite_diff_check(|_, v| Ok(v.scale(1e300).exp().sum()), &x, 1e-5).unwrap_err();
        assert!(matches!(err, Error::NumericFailure(_)));
    }

    #[test]
    fn epsilon_range_enforced() {
        let x = Tensor::vector(vec![1.0]);
        assert!(finite_diff_check(|_, v| Ok(v.sum()), &x, 1e-2).is_err());
    }

    // Each primitive composed into a scalar, checked at a random point.
    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = RngState::new(21);
        let x = randn(&[3, 3], 0.8, &mut rng).unwrap();
        let w = randn(&[3, 3], 0.8, &mut rng).unwrap();
        let checks: Vec<(&str, Box<dyn for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>>)> = vec![
            ("matmul", Box::new(|t, v| Ok(v.matmul(&t.constant(&w))?.silu().sum()))),
            ("matmul_t", Box::new(|t, v| Ok(t.constant(&w).matmul_t(&v)?.exp().sum()))),
            ("transpose", Box::new(|t, v| Ok(v.transpose()?.mul(&t.constant(&w))?.sum()))),
            ("softmax", Box::new(|t, v| Ok(v.softmax_rows(0.7)?.mul(&t.constant(&w))?.sum()))),
            ("causal", Box::new(|t, v| Ok(v.causal_softmax(1.3)?.mul(&t.constant(&w))?.sum()))),
            ("rms", Box::new(|t, v| Ok(v.rms_norm_rows(1e-6)?.mul(&t.constant(&w))?.sum()))),
            ("l2", Box::new(|t, v| Ok(v.l2_normalize_rows()?.mul(&t.constant(&w))?.sum()))),
            ("lse", Box::new(|_, v| Ok(v.log_sum_exp_rows()?.silu().sum()))),
            ("column", Box::new(|_, v| Ok(v.mul_column(&v.column(1)?)?.sum()))),
            ("pick", Box::new(|_, v| Ok(v.pick_per_row(&[2, 0, 1])?.exp().sum()))),
            ("row", Box::new(|_, v| Ok(Var::concat_rows(&[v.row(2)?, v])?.silu().sum()))),
            ("ln", Box::new(|_, v| Ok(v.mul(&v)?.scale(2.0).exp().ln()?.sub(&v)?.sum()))),
            ("mean", Box::new(|_, v| Ok(v.mul(&v)?.mean()))),
        ];
        for (name, f) in checks {
            let err = finite_diff_check(f, &x, 1e-6).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
    }
}
