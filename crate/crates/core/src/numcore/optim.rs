use crate::error::{Error, Result};
use crate::numcore::array::DenseArray;
use crate::scalar::Scalar;

/// Update rule over an ordered list of parameter arrays.
pub trait Optimizer<T: Scalar> {
    fn step(&mut self, params: &mut [&mut DenseArray<T>], grads: &[DenseArray<T>]) -> Result<()>;
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Adam {
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut [&mut DenseArray<T>], grads: &[DenseArray<T>]) -> Result<()> {
        check_lengths(params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = T::one() - self.beta1.powi(self.t);
        let bc2 = T::one() - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &gi), mi), vi) in p.values_mut().iter_mut().zip(g.values()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (T::one() - self.beta1) * gi;
                *vi = self.beta2 * *vi + (T::one() - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        check_finite(params)
    }
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub lr: T,
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for SgdMomentum<T> {
    fn step(&mut self, params: &mut [&mut DenseArray<T>], grads: &[DenseArray<T>]) -> Result<()> {
        check_lengths(params, grads)?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for ((w, &gi), vel) in p.values_mut().iter_mut().zip(g.values()).zip(self.velocity[k].iter_mut()) {
                *vel = self.momentum * *vel + gi;
                *w -= self.lr * *vel;
            }
        }
        check_finite(params)
    }
}

fn check_lengths<T: Scalar>(params: &[&mut DenseArray<T>], grads: &[DenseArray<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("optimizer", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim("optimizer", p.shape(), g.shape()));
        }
    }
    Ok(())
}

fn check_finite<T: Scalar>(params: &[&mut DenseArray<T>]) -> Result<()> {
    for (k, p) in params.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::Numeric(format!(
                "parameter block {k} became non-finite after optimizer step"
            )));
        }
    }
    Ok(())
}
