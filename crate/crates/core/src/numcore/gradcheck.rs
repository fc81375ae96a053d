//! Central finite-difference oracle for analytic gradients.

use crate::error::{Error, Result};
use crate::numcore::array::DenseArray;
use crate::numcore::tape::{Tape, Var};
use crate::scalar::Scalar;

/// Central-difference estimate of ∇f at `x0`, one coordinate at a time.
pub fn numerical_gradient<T: Scalar>(
    mut f: impl FnMut(&DenseArray<T>) -> Result<T>,
    x0: &DenseArray<T>,
    eps: T,
) -> Result<DenseArray<T>> {
    if !(eps > T::zero()) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let orig = x.values()[i];
        x.values_mut()[i] = orig + eps;
        let fp = f(&x)?;
        x.values_mut()[i] = orig - eps;
        let fm = f(&x)?;
        x.values_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "function not finite at coordinate {i} perturbed by ±{eps}"
            )));
        }
        out.push((fp - fm) / (eps + eps));
    }
    Ok(DenseArray::from_parts(x0.shape().to_vec(), out))
}

/// `max_i |a_i − n_i| / max(1, |a_i|, |n_i|)`.
pub fn max_relative_error<T: Scalar>(analytic: &[T], numeric: &[T]) -> T {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / T::one().max(a.abs()).max(n.abs()))
        .fold(T::zero(), T::max)
}

/// Max relative error between `analytic` and the central-difference gradient
/// of `f` at `x0`.
pub fn gradient_check<T: Scalar>(
    f: impl FnMut(&DenseArray<T>) -> Result<T>,
    analytic: &DenseArray<T>,
    x0: &DenseArray<T>,
    eps: T,
) -> Result<T> {
    if analytic.shape() != x0.shape() {
        return Err(Error::dim("gradient_check", analytic.shape(), x0.shape()));
    }
    let numeric = numerical_gradient(f, x0, eps)?;
    Ok(max_relative_error(analytic.values(), numeric.values()))
}

/// Value and tape gradient of a scalar function built on a fresh tape.
pub fn tape_value_and_grad<T: Scalar>(
    x0: &DenseArray<T>,
    build: impl Fn(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<(T, DenseArray<T>)> {
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let out = build(&mut tape, x)?;
    let grads = tape.backward(out)?;
    Ok((tape.scalar(out), grads.wrt(x)))
}

/// Checks the tape gradient of `build` against central differences.
pub fn check_tape_fn<T: Scalar>(
    x0: &DenseArray<T>,
    eps: T,
    build: impl Fn(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<T> {
    let (_, analytic) = tape_value_and_grad(x0, &build)?;
    gradient_check(
        |x| {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone());
            let out = build(&mut tape, v)?;
            Ok(tape.scalar(out))
        },
        &analytic,
        x0,
        eps,
    )
}
