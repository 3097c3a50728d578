use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradient magnitude below which entries are compared in absolute terms.
/// Central differences of a deep unrolled loss carry roundoff near `1e-10` at
/// `epsilon = 1e-5`, so relative error says nothing about gradients this small.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Compares tape gradients with central differences.
///
/// `f` builds a scalar on a fresh tape from the bound parameter leaves. The
/// returned value is the largest
/// `|analytic − numeric| / max(|analytic| + |numeric|, GRADIENT_FLOOR)` over
/// every parameter entry.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Parameter(format!(
            "epsilon must lie in (0, 1e-2], got {epsilon}"
        )));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Contract("checked function must return a scalar".into()));
        }
        Ok(v.item())
    };

    let base = eval(params)?;
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, (&var, param)) in vars.iter().zip(params).enumerate() {
        let analytic = grads.get_or_zeros(var, param.shape());
        for k in 0..param.len() {
            let orig = param.data()[k];
            work[pi].data_mut()[k] = orig + epsilon;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - epsilon;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(GRADIENT_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_tight() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5]);
        let err = finite_difference_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn affine_chain() {
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.2, -0.3, 0.5, -0.7, 0.4]).unwrap();
        let w1 = Tensor::new(vec![3, 2], vec![0.3, -0.1, 0.8, 0.2, -0.5, 0.6]).unwrap();
        let b1 = Tensor::vector(vec![0.1, -0.2]);
        let w2 = Tensor::new(vec![2, 2], vec![1.1, -0.4, 0.3, 0.9]).unwrap();
        let b2 = Tensor::vector(vec![0.05, 0.07]);
        let err = finite_difference_check(
            |t, v| {
                let h = t.affine(v[0], v[1], v[2])?;
                let o = t.affine(h, v[3], v[4])?;
                Ok(t.sum(o))
            },
            &[x, w1, b1, w2, b2],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn zero_function_has_zero_error() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = finite_difference_check(
            |t, v| {
                let z = t.scale(v[0], 0.0);
                Ok(t.sum(z))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let counter = Cell::new(0.0);
        let x = Tensor::vector(vec![1.0]);
        let res = finite_difference_check(
            |t, v| {
                counter.set(counter.get() + 1.0);
                let s = t.sum(v[0]);
                Ok(t.offset(s, counter.get()))
            },
            &[x],
            1e-5,
        );
        assert!(matches!(res, Err(Error::Oracle(_))));
    }

    #[test]
    fn small_wrong_gradient_is_caught() {
        // Constant forward value with a backward slope at the floor.
        let x = Tensor::vector(vec![0.7]);
        let err = finite_difference_check(
            |t, v| {
                let soft = t.scale(v[0], 1e-6);
                let st = t.straight_through(Tensor::vector(vec![0.0]), soft)?;
                Ok(t.sum(st))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 1.0);
    }

    #[test]
    fn rejects_bad_epsilon() {
        let x = Tensor::vector(vec![1.0]);
        let f = |t: &mut Tape, v: &[Var]| Ok(t.sum(v[0]));
        assert!(finite_difference_check(f, &[x.clone()], 0.0).is_err());
        assert!(finite_difference_check(f, &[x], 0.1).is_err());
    }
}
