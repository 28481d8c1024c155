use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{invalid, Error, Result};

/// Evaluates a tape-built scalar function at `params` without differentiating.
pub fn eval_scalar<T, F>(f: &F, params: &[Tensor<T>]) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.constant(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.item(out).ok_or_else(|| Error::NonScalarRoot(tape.shape(out).to_vec()))
}

/// Analytic gradient of a tape-built scalar function, one tensor per parameter.
pub fn analytic_gradient<T, F>(f: &F, params: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .map(|&v| grads.take(v).expect("leaf gradient"))
        .collect())
}

/// Max over every parameter coordinate of
/// `|analytic - central_difference| / max(1, |analytic|)`.
pub fn finite_diff_check<T, F>(f: F, params: &[Tensor<T>], h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |k| (p, k)))
        .collect();
    finite_diff_check_coords(f, params, h, &coords)
}

/// Same as [`finite_diff_check`] restricted to `(parameter, flat index)` coordinates.
pub fn finite_diff_check_coords<T, F>(
    f: F,
    params: &[Tensor<T>],
    h: T,
    coords: &[(usize, usize)],
) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if h <= T::zero() {
        return Err(invalid("finite difference step must be positive"));
    }
    let analytic = analytic_gradient(&f, params)?;
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let two = T::lit(2.0);
    let mut worst = T::zero();
    for &(p, k) in coords {
        if p >= params.len() || k >= params[p].len() {
            return Err(invalid(format!("coordinate ({p}, {k}) out of range")));
        }
        let orig = work[p].data()[k];
        work[p].data_mut()[k] = orig + h;
        let plus = eval_scalar(&f, &work);
        work[p].data_mut()[k] = orig - h;
        let minus = eval_scalar(&f, &work);
        work[p].data_mut()[k] = orig;
        let (plus, minus) = match (plus, minus) {
            (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => (a, b),
            _ => return Err(Error::NonFinite { op: "finite_diff_check" }),
        };
        let numeric = (plus - minus) / (two * h);
        let a = analytic[p].data()[k];
        let err = (a - numeric).abs() / a.abs().max(T::one());
        worst = worst.max(err);
    }
    Ok(worst)
}
