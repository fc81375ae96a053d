//! Define-by-run reverse-mode tape over dense vectors and matrices.
//!
//! Nodes are appended in evaluation order, so the node index is a topological
//! order and the backward sweep is a single reverse scan.

use crate::error::{Error, Result};
use crate::numcore::array::{sigmoid, DenseArray};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    MatVec { w: Var, x: Var },
    MatMul { a: Var, b: Var },
    MatMulT { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { m: Var, v: Var },
    AddScalar { x: Var, s: Var },
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Softmax(Var),
    SoftmaxRows(Var),
    Dot(Var, Var),
    Sum(Var),
    Concat(Vec<Var>),
    ConcatCols(Var, Var),
    Slice { x: Var, start: usize },
    Row { m: Var, index: usize },
    Stack(Vec<Var>),
    MeanRows(Var),
    Reshape(Var),
    L2Normalize { x: Var, norm: T },
    AdditiveScores { u: Var, w: Var, p: Var, act: Vec<T> },
    CrossEntropy { logits: Var, target: usize, probs: Vec<T> },
    Bce { c: Var, target: T },
}

#[derive(Debug)]
struct Node<T> {
    value: DenseArray<T>,
    op: Op<T>,
}

/// Probability clamp applied before the logs of the binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients from one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> DenseArray<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => DenseArray::from_parts(shape, g.clone()),
            None => DenseArray::zeros(&shape),
        }
    }

    /// Number of nodes the sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn shape_of<T: Scalar>(a: &DenseArray<T>) -> (usize, usize) {
    (a.rows(), a.cols())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseArray<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &DenseArray<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.values()[0]
    }

    pub fn leaf(&mut self, value: DenseArray<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_vec(&mut self, values: Vec<T>) -> Result<Var> {
        Ok(self.leaf(DenseArray::vector(values)?))
    }

    fn vec_len(&self, v: Var, op: &'static str) -> Result<usize> {
        let s = self.value(v).shape();
        if s.len() != 1 {
            return Err(Error::dim(op, s, &[0]));
        }
        Ok(s[0])
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// `w · x + b` for `w: [out × in]`, `x: [in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (o, i) = self.mat_dims(w, "linear")?;
        let xn = self.vec_len(x, "linear")?;
        let bn = self.vec_len(b, "linear")?;
        if xn != i || bn != o {
            return Err(Error::dim(
                "linear",
                self.value(w).shape(),
                &[xn, bn],
            ));
        }
        let (wv, xv, bv) = (self.value(w).values(), self.value(x).values(), self.value(b).values());
        let out: Vec<T> = (0..o)
            .map(|r| {
                let row = &wv[r * i..(r + 1) * i];
                row.iter().zip(xv).map(|(&a, &c)| a * c).sum::<T>() + bv[r]
            })
            .collect();
        self.push(DenseArray::from_parts(vec![o], out), Op::Linear { x, w, b })
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (o, i) = self.mat_dims(w, "matvec")?;
        let xn = self.vec_len(x, "matvec")?;
        if xn != i {
            return Err(Error::dim("matvec", self.value(w).shape(), &[xn]));
        }
        let (wv, xv) = (self.value(w).values(), self.value(x).values());
        let out: Vec<T> = (0..o)
            .map(|r| wv[r * i..(r + 1) * i].iter().zip(xv).map(|(&a, &c)| a * c).sum())
            .collect();
        self.push(DenseArray::from_parts(vec![o], out), Op::MatVec { w, x })
    }

    /// `a · b` for `a: [m × k]`, `b: [k × n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", &[m, k], &[k2, n]));
        }
        let (av, bv) = (self.value(a).values(), self.value(b).values());
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let orow = &mut out[r * n..(r + 1) * n];
            for j in 0..k {
                let s = av[r * k + j];
                if s == T::zero() {
                    continue;
                }
                for (o, &bb) in orow.iter_mut().zip(&bv[j * n..(j + 1) * n]) {
                    *o += s * bb;
                }
            }
        }
        self.push(DenseArray::from_parts(vec![m, n], out), Op::MatMul { a, b })
    }

    /// `a · bᵀ` for `a: [m × k]`, `b: [n × k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_t")?;
        let (n, k2) = self.mat_dims(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::dim("matmul_t", &[m, k], &[n, k2]));
        }
        let (av, bv) = (self.value(a).values(), self.value(b).values());
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let arow = &av[r * k..(r + 1) * k];
            for c in 0..n {
                out.push(arow.iter().zip(&bv[c * k..(c + 1) * k]).map(|(&x, &y)| x * y).sum());
            }
        }
        self.push(DenseArray::from_parts(vec![m, n], out), Op::MatMulT { a, b })
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.values().iter().zip(bv.values()).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape().to_vec();
        self.push(DenseArray::from_parts(shape, out), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds vector `v: [c]` to every row of `m: [r × c]`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = self.mat_dims(m, "add_row")?;
        let n = self.vec_len(v, "add_row")?;
        if n != c {
            return Err(Error::dim("add_row", &[r, c], &[n]));
        }
        let vv = self.value(v).values();
        let out = self
            .value(m)
            .values()
            .chunks(c)
            .flat_map(|row| row.iter().zip(vv).map(|(&x, &y)| x + y))
            .collect();
        self.push(DenseArray::from_parts(vec![r, c], out), Op::AddRow { m, v })
    }

    /// Adds the single entry of `s` to every entry of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("add_scalar", self.value(s).shape(), &[1]));
        }
        let sv = self.scalar(s);
        let value = self.value(x).map(|v| v + sv);
        self.push(value, Op::AddScalar { x, s })
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * k);
        self.push(value, Op::Scale(x, k))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.tanh());
        self.push(value, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).values().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        let value = self.value(x).map(|v| v.ln());
        self.push(value, Op::Log(x))
    }

    /// Softmax over all entries of a vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.vec_len(x, "softmax")?;
        let p = crate::numcore::array::softmax(self.value(x).values())?;
        let shape = self.value(x).shape().to_vec();
        self.push(DenseArray::from_parts(shape, p), Op::Softmax(x))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat_dims(x, "softmax_rows")?;
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).values().chunks(c) {
            out.extend(crate::numcore::array::softmax(row)?);
        }
        self.push(DenseArray::from_parts(vec![r, c], out), Op::SoftmaxRows(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let d = crate::numcore::array::dot(self.value(a).values(), self.value(b).values());
        self.push(DenseArray::from_parts(vec![1], vec![d]), Op::Dot(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).values().iter().copied().sum();
        self.push(DenseArray::from_parts(vec![1], vec![s]), Op::Sum(x))
    }

    /// Concatenates vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat of zero parts".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            self.vec_len(p, "concat")?;
            out.extend_from_slice(self.value(p).values());
        }
        let n = out.len();
        self.push(DenseArray::from_parts(vec![n], out), Op::Concat(parts.to_vec()))
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.mat_dims(a, "concat_cols")?;
        let (rb, cb) = self.mat_dims(b, "concat_cols")?;
        if ra != rb {
            return Err(Error::dim("concat_cols", &[ra, ca], &[rb, cb]));
        }
        let (av, bv) = (self.value(a).values(), self.value(b).values());
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        self.push(DenseArray::from_parts(vec![ra, ca + cb], out), Op::ConcatCols(a, b))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.vec_len(x, "slice")?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice", &[n], &[start, len]));
        }
        let out = self.value(x).values()[start..start + len].to_vec();
        self.push(DenseArray::from_parts(vec![len], out), Op::Slice { x, start })
    }

    /// Row `index` of a matrix as a vector.
    pub fn row(&mut self, m: Var, index: usize) -> Result<Var> {
        let (r, c) = self.mat_dims(m, "row")?;
        if index >= r {
            return Err(Error::Input(format!("row {index} out of range for {r} rows")));
        }
        let out = self.value(m).row(index).to_vec();
        self.push(DenseArray::from_parts(vec![c], out), Op::Row { m, index })
    }

    /// Stacks equal-length vectors as matrix rows.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Input("stack of zero rows".into()));
        }
        let c = self.vec_len(rows[0], "stack")?;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            let n = self.vec_len(r, "stack")?;
            if n != c {
                return Err(Error::dim("stack", &[c], &[n]));
            }
            out.extend_from_slice(self.value(r).values());
        }
        self.push(DenseArray::from_parts(vec![rows.len(), c], out), Op::Stack(rows.to_vec()))
    }

    /// Column-wise mean of a matrix.
    pub fn mean_rows(&mut self, m: Var) -> Result<Var> {
        let (r, c) = self.mat_dims(m, "mean_rows")?;
        let mut out = vec![T::zero(); c];
        for row in self.value(m).values().chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::of_usize(r);
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(DenseArray::from_parts(vec![c], out), Op::MeanRows(m))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        self.push(value, Op::Reshape(x))
    }

    /// Unit-L2 rescaling. Zero norm is a degeneracy error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).values();
        let norm = crate::numcore::array::l2_norm(xv);
        if !(norm > T::zero()) {
            return Err(Error::Degenerate(
                "cannot L2-normalize a zero-norm vector".into(),
            ));
        }
        let value = self.value(x).map(|v| v / norm);
        self.push(value, Op::L2Normalize { x, norm })
    }

    /// Additive attention scores: `out[t][l] = Σ_k p_k · tanh(u[l][k] + w[t][k])`
    /// for `u: [L × K]`, `w: [T × K]`, `p: [K]`; result `[T × L]`.
    pub fn additive_scores(&mut self, u: Var, w: Var, p: Var) -> Result<Var> {
        let (l, k) = self.mat_dims(u, "additive_scores")?;
        let (t, k2) = self.mat_dims(w, "additive_scores")?;
        let pk = self.vec_len(p, "additive_scores")?;
        if k != k2 || k != pk {
            return Err(Error::dim("additive_scores", &[l, k], &[t, k2, pk]));
        }
        let (uv, wv, pv) = (self.value(u).values(), self.value(w).values(), self.value(p).values());
        let mut act = Vec::with_capacity(t * l * k);
        let mut out = Vec::with_capacity(t * l);
        for ti in 0..t {
            let wrow = &wv[ti * k..(ti + 1) * k];
            for li in 0..l {
                let urow = &uv[li * k..(li + 1) * k];
                let mut s = T::zero();
                for j in 0..k {
                    let z = (urow[j] + wrow[j]).tanh();
                    act.push(z);
                    s += pv[j] * z;
                }
                out.push(s);
            }
        }
        self.push(
            DenseArray::from_parts(vec![t, l], out),
            Op::AdditiveScores { u, w, p, act },
        )
    }

    /// `logsumexp(logits) − logits[target]`: cross-entropy of a softmax.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.vec_len(logits, "cross_entropy")?;
        if target >= n {
            return Err(Error::Input(format!("target {target} out of range for {n} classes")));
        }
        let z = self.value(logits).values();
        let loss = crate::numcore::array::log_sum_exp(z) - z[target];
        let probs = crate::numcore::array::softmax(z)?;
        self.push(
            DenseArray::from_parts(vec![1], vec![loss]),
            Op::CrossEntropy { logits, target, probs },
        )
    }

    /// Binary cross-entropy of a confidence `c ∈ (0,1)` against `target`,
    /// with `c` clamped to `[1e-7, 1 − 1e-7]` before the logs.
    pub fn bce(&mut self, c: Var, target: T) -> Result<Var> {
        if self.value(c).len() != 1 {
            return Err(Error::dim("bce", self.value(c).shape(), &[1]));
        }
        let loss = bce_value(self.scalar(c), target);
        self.push(DenseArray::from_parts(vec![1], vec![loss]), Op::Bce { c, target })
    }

    /// Backward sweep from a scalar output seeded with 1.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::dim("backward", self.value(output).shape(), &[1]));
        }
        self.backward_seeded(&[(output, vec![T::one()])])
    }

    /// Backward sweep with explicit output gradients, e.g. a closed-form
    /// loss gradient injected at a feature node.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(Error::dim("backward seed", self.value(*v).shape(), &[g.len()]));
            }
            accumulate(&mut grads, *v, g);
            top = top.max(v.0 + 1);
        }
        let mut visited = 0;
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes, visited })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = node.value.values();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                self.matvec_backward(*w, *x, g, grads);
                accumulate(grads, *b, g);
            }
            Op::MatVec { w, x } => self.matvec_backward(*w, *x, g, grads),
            Op::MatMul { a, b } => {
                let (m, k) = shape_of(self.value(*a));
                let n = self.value(*b).cols();
                let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                // dA = G · Bᵀ, dB = Aᵀ · G
                let mut da = vec![T::zero(); m * k];
                for r in 0..m {
                    for j in 0..k {
                        da[r * k + j] = g[r * n..(r + 1) * n]
                            .iter()
                            .zip(&bv[j * n..(j + 1) * n])
                            .map(|(&x, &y)| x * y)
                            .sum();
                    }
                }
                let mut db = vec![T::zero(); k * n];
                for r in 0..m {
                    for j in 0..k {
                        let s = av[r * k + j];
                        for (d, &gg) in db[j * n..(j + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *d += s * gg;
                        }
                    }
                }
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::MatMulT { a, b } => {
                let (m, k) = shape_of(self.value(*a));
                let n = self.value(*b).rows();
                let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                // out = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                let mut da = vec![T::zero(); m * k];
                let mut db = vec![T::zero(); n * k];
                for r in 0..m {
                    for c in 0..n {
                        let gg = g[r * n + c];
                        if gg == T::zero() {
                            continue;
                        }
                        for j in 0..k {
                            da[r * k + j] += gg * bv[c * k + j];
                            db[c * k + j] += gg * av[r * k + j];
                        }
                    }
                }
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                let da: Vec<T> = g.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                let db: Vec<T> = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::AddRow { m, v } => {
                accumulate(grads, *m, g);
                let c = self.value(*v).len();
                let mut dv = vec![T::zero(); c];
                for row in g.chunks(c) {
                    for (d, &x) in dv.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                accumulate(grads, *v, &dv);
            }
            Op::AddScalar { x, s } => {
                accumulate(grads, *x, g);
                let total: T = g.iter().copied().sum();
                accumulate(grads, *s, &[total]);
            }
            Op::Scale(x, k) => {
                let d: Vec<T> = g.iter().map(|&v| v * *k).collect();
                accumulate(grads, *x, &d);
            }
            Op::Tanh(x) => {
                let d: Vec<T> = g.iter().zip(val).map(|(&gg, &y)| gg * (T::one() - y * y)).collect();
                accumulate(grads, *x, &d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<T> = g.iter().zip(val).map(|(&gg, &y)| gg * y * (T::one() - y)).collect();
                accumulate(grads, *x, &d);
            }
            Op::Log(x) => {
                let xv = self.value(*x).values();
                let d: Vec<T> = g.iter().zip(xv).map(|(&gg, &v)| gg / v).collect();
                accumulate(grads, *x, &d);
            }
            Op::Softmax(x) => {
                let d = softmax_backward(val, g);
                accumulate(grads, *x, &d);
            }
            Op::SoftmaxRows(x) => {
                let c = self.value(*x).cols();
                let d: Vec<T> = val
                    .chunks(c)
                    .zip(g.chunks(c))
                    .flat_map(|(y, gg)| softmax_backward(y, gg))
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                let da: Vec<T> = bv.iter().map(|&v| v * g[0]).collect();
                let db: Vec<T> = av.iter().map(|&v| v * g[0]).collect();
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).len()];
                accumulate(grads, *x, &d);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    accumulate(grads, p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let mut da = Vec::with_capacity(self.value(*a).len());
                let mut db = Vec::with_capacity(self.value(*b).len());
                for row in g.chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Slice { x, start } => {
                let mut d = vec![T::zero(); self.value(*x).len()];
                d[*start..*start + g.len()].copy_from_slice(g);
                accumulate(grads, *x, &d);
            }
            Op::Row { m, index } => {
                let c = g.len();
                let slot = grads[m.0].get_or_insert_with(|| vec![T::zero(); self.nodes[m.0].value.len()]);
                for (d, &v) in slot[index * c..(index + 1) * c].iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::Stack(rows) => {
                let c = self.value(rows[0]).len();
                for (r, &v) in rows.iter().enumerate() {
                    accumulate(grads, v, &g[r * c..(r + 1) * c]);
                }
            }
            Op::MeanRows(m) => {
                let r = self.value(*m).rows();
                let inv = T::one() / T::of_usize(r);
                let row: Vec<T> = g.iter().map(|&v| v * inv).collect();
                let d: Vec<T> = (0..r).flat_map(|_| row.iter().copied()).collect();
                accumulate(grads, *m, &d);
            }
            Op::Reshape(x) => accumulate(grads, *x, g),
            Op::L2Normalize { x, norm } => {
                let yg = crate::numcore::array::dot(val, g);
                let d: Vec<T> = g.iter().zip(val).map(|(&gg, &y)| (gg - y * yg) / *norm).collect();
                accumulate(grads, *x, &d);
            }
            Op::AdditiveScores { u, w, p, act } => {
                let (l, k) = shape_of(self.value(*u));
                let t = self.value(*w).rows();
                let pv = self.value(*p).values();
                let mut du = vec![T::zero(); l * k];
                let mut dw = vec![T::zero(); t * k];
                let mut dp = vec![T::zero(); k];
                for ti in 0..t {
                    for li in 0..l {
                        let gg = g[ti * l + li];
                        let base = (ti * l + li) * k;
                        for j in 0..k {
                            let z = act[base + j];
                            dp[j] += gg * z;
                            let d = gg * pv[j] * (T::one() - z * z);
                            du[li * k + j] += d;
                            dw[ti * k + j] += d;
                        }
                    }
                }
                accumulate(grads, *u, &du);
                accumulate(grads, *w, &dw);
                accumulate(grads, *p, &dp);
            }
            Op::CrossEntropy { logits, target, probs } => {
                let mut d: Vec<T> = probs.iter().map(|&p| p * g[0]).collect();
                d[*target] -= g[0];
                accumulate(grads, *logits, &d);
            }
            Op::Bce { c, target } => {
                let cv = self.scalar(*c);
                let lo = T::of(BCE_CLAMP);
                let d = if cv < lo || cv > T::one() - lo {
                    T::zero()
                } else {
                    (-(*target) / cv + (T::one() - *target) / (T::one() - cv)) * g[0]
                };
                accumulate(grads, *c, &[d]);
            }
        }
    }

    fn matvec_backward(&self, w: Var, x: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (o, i) = shape_of(self.value(w));
        let (wv, xv) = (self.value(w).values(), self.value(x).values());
        let mut dw = Vec::with_capacity(o * i);
        let mut dx = vec![T::zero(); i];
        for r in 0..o {
            let gr = g[r];
            let row = &wv[r * i..(r + 1) * i];
            for j in 0..i {
                dw.push(gr * xv[j]);
                dx[j] += gr * row[j];
            }
        }
        accumulate(grads, w, &dw);
        accumulate(grads, x, &dx);
    }
}

/// Clamped binary cross-entropy of a single confidence.
pub fn bce_value<T: Scalar>(c: T, target: T) -> T {
    let lo = T::of(BCE_CLAMP);
    let cc = c.max(lo).min(T::one() - lo);
    -(target * cc.ln() + (T::one() - target) * (T::one() - cc).ln())
}

fn softmax_backward<T: Scalar>(y: &[T], g: &[T]) -> Vec<T> {
    let yg = crate::numcore::array::dot(y, g);
    y.iter().zip(g).map(|(&p, &gg)| p * (gg - yg)).collect()
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Linear { .. } => "linear",
        Op::MatVec { .. } => "matvec",
        Op::MatMul { .. } => "matmul",
        Op::MatMulT { .. } => "matmul_t",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow { .. } => "add_row",
        Op::AddScalar { .. } => "add_scalar",
        Op::Scale(..) => "scale",
        Op::Tanh(_) => "tanh",
        Op::Sigmoid(_) => "sigmoid",
        Op::Log(_) => "log",
        Op::Softmax(_) => "softmax",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::Dot(..) => "dot",
        Op::Sum(_) => "sum",
        Op::Concat(_) => "concat",
        Op::ConcatCols(..) => "concat_cols",
        Op::Slice { .. } => "slice",
        Op::Row { .. } => "row",
        Op::Stack(_) => "stack",
        Op::MeanRows(_) => "mean_rows",
        Op::Reshape(_) => "reshape",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::AdditiveScores { .. } => "additive_scores",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Bce { .. } => "bce",
    }
}
