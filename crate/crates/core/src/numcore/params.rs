use crate::numcore::array::DenseArray;
use crate::numcore::tape::{Gradients, Tape, Var};
use crate::scalar::Scalar;

/// A named, ordered collection of trainable arrays.
///
/// The order of `named` and `named_mut` must agree; tape binding, gradient
/// collection, optimizers and checkpoints all rely on it.
pub trait ParamSet<T: Scalar> {
    fn named(&self) -> Vec<(&'static str, &DenseArray<T>)>;
    fn named_mut(&mut self) -> Vec<(&'static str, &mut DenseArray<T>)>;

    fn arrays_mut(&mut self) -> Vec<&mut DenseArray<T>> {
        self.named_mut().into_iter().map(|(_, a)| a).collect()
    }

    fn zero_grads(&self) -> Vec<DenseArray<T>> {
        self.named().into_iter().map(|(_, a)| DenseArray::zeros(a.shape())).collect()
    }

    fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, a)| a.len()).sum()
    }
}

/// Registers every array of `params` as a tape leaf, in `named` order.
pub fn bind<T: Scalar, P: ParamSet<T> + ?Sized>(tape: &mut Tape<T>, params: &P) -> Vec<Var> {
    params.named().into_iter().map(|(_, a)| tape.leaf(a.clone())).collect()
}

pub fn collect_grads<T: Scalar>(grads: &Gradients<T>, vars: &[Var]) -> Vec<DenseArray<T>> {
    vars.iter().map(|&v| grads.wrt(v)).collect()
}

/// `acc += g` block-wise.
pub fn accumulate_grads<T: Scalar>(acc: &mut [DenseArray<T>], g: &[DenseArray<T>]) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, &y) in a.values_mut().iter_mut().zip(b.values()) {
            *x += y;
        }
    }
}

pub fn scale_grads<T: Scalar>(g: &mut [DenseArray<T>], k: T) {
    for a in g {
        a.values_mut().iter_mut().for_each(|v| *v *= k);
    }
}
