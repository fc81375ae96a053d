use crate::error::{Error, Result};
use crate::numcore::rng::Rng;
use crate::scalar::Scalar;

/// Row-major dense array of finite scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> DenseArray<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Input(format!(
                "array extents must be positive, got {shape:?}"
            )));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::dim("array", &shape, &[data.len()]));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite entry at flat index {pos}"
            )));
        }
        Ok(DenseArray { shape, data })
    }

    /// Internal constructor for values already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        DenseArray { shape, data }
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", &[cols], &[bad.len()]));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn scalar(x: T) -> Result<Self> {
        Self::new(vec![1], vec![x])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        DenseArray::from_parts(shape.to_vec(), vec![T::zero(); n])
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        DenseArray::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn uniform(shape: &[usize], low: f64, high: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.uniform(low, high))).collect();
        DenseArray::from_parts(shape.to_vec(), data)
    }

    /// Glorot-uniform weights: half-width `sqrt(6 / (fan_in + fan_out))`,
    /// fan-in being the last extent. A vector counts as a single row.
    pub fn glorot(shape: &[usize], rng: &mut Rng) -> Self {
        let fan_in = *shape.last().unwrap_or(&1);
        let fan_out: usize = shape[..shape.len().saturating_sub(1)].iter().product();
        let a = (6.0 / (fan_in + fan_out.max(1)) as f64).sqrt();
        Self::uniform(shape, -a, a, rng)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_values(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows: first extent for matrices, 1 for vectors.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Row width: trailing extents flattened.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.shape[0]
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(DenseArray::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        DenseArray::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> DenseArray<U> {
        let data = self
            .data
            .iter()
            .map(|v| U::of(v.to_f64_lossy()))
            .collect();
        DenseArray::from_parts(self.shape.clone(), data)
    }

    pub fn abs_sum(&self) -> T {
        self.data.iter().map(|v| v.abs()).sum()
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn l2_norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Scales `a` to unit L2 norm; a zero vector is a degeneracy error.
pub fn l2_normalized<T: Scalar>(a: &[T]) -> Result<Vec<T>> {
    let n = l2_norm(a);
    if !(n > T::zero()) || !n.is_finite() {
        return Err(Error::Degenerate(
            "cannot L2-normalize a zero-norm vector".into(),
        ));
    }
    Ok(a.iter().map(|&v| v / n).collect())
}

/// Numerically stable softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::dim("softmax", &[0], &[1]));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// log Σ exp(x_i), stable.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = xs.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_count_mismatch_and_nan() {
        assert!(DenseArray::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(DenseArray::<f32>::new(vec![1], vec![f32::NAN]).is_err());
        assert!(DenseArray::<f32>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0f64, 0.0, 0.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let p = softmax(&[1.0f64, 0.0]).unwrap();
        assert!((p[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        let p = softmax(&[1000.0f32, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-6 && p[1] < 1e-6);
        assert!(softmax::<f32>(&[]).is_err());
    }

    #[test]
    fn normalize_zero_is_degenerate() {
        assert!(matches!(
            l2_normalized(&[0.0f32, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn sigmoid_zero_is_half() {
        assert_eq!(sigmoid(0.0f32), 0.5);
        assert!(sigmoid(-100.0f64) > 0.0);
    }
}
