//! Finite-difference suites behind `gradcheck` and the acceptance tests.
//!
//! Analytic gradients are computed in the precision under test. The oracle
//! is always a central difference evaluated in `f64` at the same point, so a
//! 32-bit run is judged against a reference that is not itself limited by
//! 32-bit cancellation.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::cmce::{cmce_gradients, cmce_loss, cmce_term_on, CmceConfig, FeatureBuffer, Modality, Sample};
use crate::coattention::{pair_confidence_on, CoattentionDims, MatchingNetwork, Stage2Variant};
use crate::encoders::{EncoderDims, EncoderParams, ImageGrid, TokenSequence};
use crate::error::Result;
use crate::numcore::{
    collect_grads, l2_normalized, max_relative_error, numerical_gradient, tape_value_and_grad, DenseArray, ParamSet,
    Rng, Tape, Var,
};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

/// Gradient tolerance for the precision under test.
pub fn tolerance<T: Scalar>() -> f64 {
    if T::BITS == 32 {
        1e-4
    } else {
        1e-7
    }
}

fn cast<T: Scalar>(a: &DenseArray<f64>) -> DenseArray<T> {
    DenseArray::new(a.shape().to_vec(), a.values().iter().map(|&v| T::of(v)).collect()).expect("finite values")
}

fn widen_array<T: Scalar>(a: &DenseArray<T>) -> DenseArray<f64> {
    DenseArray::new(a.shape().to_vec(), widen(a.values())).expect("finite values")
}

fn widen<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

/// Deterministic pseudo-random constants shared by both precisions.
fn pattern(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 + 1.0) * 0.731 + phase).sin()).collect()
}

fn constant<T: Scalar>(tape: &mut Tape<T>, shape: &[usize], phase: f64) -> Var {
    let n = shape.iter().product();
    tape.leaf(cast(&DenseArray::new(shape.to_vec(), pattern(n, phase)).expect("pattern")))
}

/// Weighted sum of all entries, so every output coordinate matters.
fn probe<T: Scalar>(tape: &mut Tape<T>, y: Var) -> Result<Var> {
    let n = tape.value(y).len();
    let flat = tape.reshape(y, &[n])?;
    let w = constant(tape, &[n], 0.3);
    tape.dot(flat, w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Linear,
    LinearWeight,
    MatVec,
    MatMul,
    MatMulT,
    AddRow,
    Mul,
    Scale,
    Tanh,
    Sigmoid,
    Log,
    Softmax,
    SoftmaxRows,
    Dot,
    Concat,
    ConcatCols,
    Slice,
    RowStack,
    MeanRows,
    AddScalar,
    L2Normalize,
    AdditiveScores,
    AdditiveWeights,
    CrossEntropy,
    Bce,
}

impl Primitive {
    pub const ALL: [Primitive; 25] = [
        Primitive::Linear,
        Primitive::LinearWeight,
        Primitive::MatVec,
        Primitive::MatMul,
        Primitive::MatMulT,
        Primitive::AddRow,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Tanh,
        Primitive::Sigmoid,
        Primitive::Log,
        Primitive::Softmax,
        Primitive::SoftmaxRows,
        Primitive::Dot,
        Primitive::Concat,
        Primitive::ConcatCols,
        Primitive::Slice,
        Primitive::RowStack,
        Primitive::MeanRows,
        Primitive::AddScalar,
        Primitive::L2Normalize,
        Primitive::AdditiveScores,
        Primitive::AdditiveWeights,
        Primitive::CrossEntropy,
        Primitive::Bce,
    ];

    pub fn input_shape(self) -> Vec<usize> {
        use Primitive::*;
        match self {
            Linear | L2Normalize | Dot => vec![4],
            LinearWeight | MatVec => vec![3, 4],
            MatMul => vec![3, 3],
            MatMulT | AdditiveScores => vec![3, 2],
            AddRow | Mul | Tanh | Sigmoid | Log | ConcatCols | Scale => vec![2, 3],
            Softmax | CrossEntropy | Concat | Slice => vec![5],
            SoftmaxRows | RowStack | MeanRows => vec![3, 4],
            AddScalar | Bce => vec![3],
            AdditiveWeights => vec![2],
        }
    }

    /// Scalar function of the leaf `x`.
    pub fn build<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        use Primitive::*;
        let y = match self {
            Linear => {
                let w = constant(tape, &[3, 4], 0.1);
                let b = constant(tape, &[3], 0.2);
                let z = tape.linear(x, w, b)?;
                tape.tanh(z)?
            }
            LinearWeight => {
                let v = constant(tape, &[4], 0.5);
                let b = constant(tape, &[3], 0.2);
                tape.linear(v, x, b)?
            }
            MatVec => {
                let v = constant(tape, &[4], 0.9);
                tape.matvec(x, v)?
            }
            MatMul => tape.matmul(x, x)?,
            MatMulT => tape.matmul_t(x, x)?,
            AddRow => {
                let v = constant(tape, &[3], 1.1);
                let z = tape.add_row(x, v)?;
                tape.mul(z, z)?
            }
            Mul => {
                let t = tape.tanh(x)?;
                tape.mul(x, t)?
            }
            Scale => tape.scale(x, T::of(-2.5))?,
            Tanh => tape.tanh(x)?,
            Sigmoid => tape.sigmoid(x)?,
            Log => {
                let s = tape.sigmoid(x)?;
                tape.log(s)?
            }
            Softmax => {
                let z = tape.scale(x, T::of(3.0))?;
                tape.softmax(z)?
            }
            SoftmaxRows => tape.softmax_rows(x)?,
            Dot => {
                let t = tape.tanh(x)?;
                tape.dot(x, t)?
            }
            Concat => {
                let t = tape.tanh(x)?;
                tape.concat(&[x, t])?
            }
            ConcatCols => {
                let s = tape.sigmoid(x)?;
                let z = tape.concat_cols(x, s)?;
                tape.mul(z, z)?
            }
            Slice => {
                let s = tape.slice(x, 1, 3)?;
                tape.tanh(s)?
            }
            RowStack => {
                let a = tape.row(x, 2)?;
                let b = tape.row(x, 0)?;
                let m = tape.stack(&[a, b, a])?;
                tape.tanh(m)?
            }
            MeanRows => {
                let m = tape.mean_rows(x)?;
                tape.mul(m, m)?
            }
            AddScalar => {
                let s = tape.dot(x, x)?;
                tape.add_scalar(x, s)?
            }
            L2Normalize => tape.l2_normalize(x)?,
            AdditiveScores => {
                let p = constant(tape, &[2], 0.4);
                tape.additive_scores(x, x, p)?
            }
            AdditiveWeights => {
                let u = constant(tape, &[3, 2], 0.6);
                let w = constant(tape, &[4, 2], 1.3);
                tape.additive_scores(u, w, x)?
            }
            CrossEntropy => return tape.cross_entropy(x, 2),
            Bce => {
                let s = tape.sum(x)?;
                let c = tape.sigmoid(s)?;
                return tape.bce(c, T::of(0.3));
            }
        };
        probe(tape, y)
    }
}

fn tape_scalar<T: Scalar>(p: Primitive, x: &DenseArray<T>) -> Result<T> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = p.build(&mut tape, v)?;
    Ok(tape.scalar(out))
}

/// Every tape primitive at `instances` random points each.
pub fn primitives_suite<T: Scalar>(seed: u64, instances: usize) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut rng = Rng::seeded(seed);
    let mut worst: f64 = 0.0;
    for p in Primitive::ALL {
        for _ in 0..instances {
            let x0 = DenseArray::<f64>::uniform(&p.input_shape(), -1.0, 1.0, &mut rng);
            let xt: DenseArray<T> = cast(&x0);
            let (_, analytic) = tape_value_and_grad(&xt, |t, x| p.build(t, x))?;
            let oracle = numerical_gradient(|x| tape_scalar::<f64>(p, x), &widen_array(&xt), 1e-6)?;
            worst = worst.max(max_relative_error(&widen(analytic.values()), oracle.values()));
        }
    }
    Ok(SuiteResult {
        name: "numcore primitives".into(),
        instances: instances * Primitive::ALL.len(),
        max_error: worst,
        tolerance: tolerance::<T>(),
        elapsed: start.elapsed(),
    })
}

/// One CMCE instance: two buffers and a batch of each modality.
pub struct CmceInstance<T> {
    pub textual: FeatureBuffer<T>,
    pub visual: FeatureBuffer<T>,
    pub batch_v: Vec<Sample<T>>,
    pub batch_s: Vec<Sample<T>>,
}

fn unit_rows(rows: usize, dim: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    (0..rows).map(|_| l2_normalized(&(0..dim).map(|_| rng.normal()).collect::<Vec<_>>())).collect()
}

/// Random unit-norm buffers of `identities` rows and `batch` distinct
/// identities with unit-norm features.
pub fn cmce_instance<T: Scalar>(identities: usize, dim: usize, batch: usize, rng: &mut Rng) -> Result<CmceInstance<T>> {
    let table = |rng: &mut Rng| -> Result<DenseArray<T>> {
        let rows = unit_rows(identities, dim, rng)?;
        Ok(cast(&DenseArray::from_rows(&rows)?))
    };
    let textual = FeatureBuffer::new(Modality::Textual, table(rng)?, true)?;
    let visual = FeatureBuffer::new(Modality::Visual, table(rng)?, true)?;
    let ids = rng.permutation(identities);
    let samples = |rng: &mut Rng| -> Result<Vec<Sample<T>>> {
        let feats = unit_rows(batch, dim, rng)?;
        Ok(feats.into_iter().zip(&ids).map(|(f, &id)| Sample::new(f.into_iter().map(T::of).collect(), id)).collect())
    };
    let batch_v = samples(rng)?;
    let batch_s = samples(rng)?;
    Ok(CmceInstance { textual, visual, batch_v, batch_s })
}

fn widen_buffer<T: Scalar>(b: &FeatureBuffer<T>) -> Result<FeatureBuffer<f64>> {
    let t = b.table();
    FeatureBuffer::new(b.modality(), DenseArray::new(t.shape().to_vec(), widen(t.values()))?, b.renormalizes())
}

fn widen_samples<T: Scalar>(s: &[Sample<T>]) -> Vec<Sample<f64>> {
    s.iter().map(|x| Sample::new(widen(&x.feature), x.identity)).collect()
}

/// Tape-backpropagated per-sample gradients of the CMCE loss.
fn cmce_tape_grads<T: Scalar>(inst: &CmceInstance<T>, cfg: &CmceConfig) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::new();
    for (batch, buf, sigma) in [(&inst.batch_v, &inst.textual, cfg.sigma_v), (&inst.batch_s, &inst.visual, cfg.sigma_s)] {
        for s in batch {
            let mut tape = Tape::new();
            let f = tape.leaf(DenseArray::vector(s.feature.clone())?);
            let l = cmce_term_on(&mut tape, f, s.identity, buf, sigma)?;
            out.push(tape.backward(l)?.wrt(f).values().to_vec());
        }
    }
    Ok(out)
}

/// Central differences of the full batch loss in `f64`, per sample.
fn cmce_fd_grads<T: Scalar>(inst: &CmceInstance<T>, cfg: &CmceConfig) -> Result<Vec<Vec<f64>>> {
    let (textual, visual) = (widen_buffer(&inst.textual)?, widen_buffer(&inst.visual)?);
    let (bv, bs) = (widen_samples(&inst.batch_v), widen_samples(&inst.batch_s));
    let mut out = Vec::new();
    for side in 0..2 {
        let n = if side == 0 { bv.len() } else { bs.len() };
        for k in 0..n {
            let x0 = DenseArray::vector(if side == 0 { bv[k].feature.clone() } else { bs[k].feature.clone() })?;
            let g = numerical_gradient(
                |x| {
                    let (mut v, mut s) = (bv.clone(), bs.clone());
                    let target = if side == 0 { &mut v[k] } else { &mut s[k] };
                    target.feature = x.values().to_vec();
                    cmce_loss(&v, &s, &textual, &visual, cfg)
                },
                &x0,
                1e-6,
            )?;
            out.push(g.values().to_vec());
        }
    }
    Ok(out)
}

/// Pairwise disagreement of closed-form, tape and finite-difference CMCE
/// gradients on one instance: (closed vs fd, tape vs fd, closed vs tape).
pub fn cmce_three_way<T: Scalar>(inst: &CmceInstance<T>, cfg: &CmceConfig) -> Result<(f64, f64, f64)> {
    let closed = cmce_gradients(&inst.batch_v, &inst.batch_s, &inst.textual, &inst.visual, cfg)?;
    let closed: Vec<Vec<f64>> = closed.visual.iter().chain(&closed.textual).map(|g| widen(g)).collect();
    let tape: Vec<Vec<f64>> = cmce_tape_grads(inst, cfg)?.iter().map(|g| widen(g)).collect();
    let fd = cmce_fd_grads(inst, cfg)?;
    let worst = |a: &[Vec<f64>], b: &[Vec<f64>]| a.iter().zip(b).map(|(x, y)| max_relative_error(x, y)).fold(0.0, f64::max);
    Ok((worst(&closed, &fd), worst(&tape, &fd), worst(&closed, &tape)))
}

/// The CMCE three-way check over random instances at temperature 0.04.
pub fn cmce_suite<T: Scalar>(seed: u64, instances: usize) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut rng = Rng::seeded(seed);
    let cfg = CmceConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let inst = cmce_instance::<T>(16, 8, 4, &mut rng)?;
        let (a, b, c) = cmce_three_way(&inst, &cfg)?;
        worst = worst.max(a).max(b).max(c);
    }
    Ok(SuiteResult {
        name: "cmce closed form / tape / finite differences".into(),
        instances,
        max_error: worst,
        tolerance: tolerance::<T>(),
        elapsed: start.elapsed(),
    })
}

/// Tiny stage-2 instance: four words, a 2×2 grid and two decoder steps.
pub struct Stage2Instance<T> {
    pub net: MatchingNetwork<T>,
    pub image: ImageGrid,
    pub text: TokenSequence,
    pub target: f64,
}

pub fn stage2_instance<T: Scalar>(variant: Stage2Variant, rng: &mut Rng) -> Result<Stage2Instance<T>> {
    let ed = EncoderDims { vocab: 6, embed: 3, hidden: 3, region: 3, joint: 3, grid: 2, channels: 2 };
    let cd = CoattentionDims { attention: 3, importance: 3, fc: 3, decoder: 3, steps: 2, ..CoattentionDims::with_encoder(3, 3) };
    let mut net = MatchingNetwork::new(EncoderParams::init(ed, rng), cd, variant, rng)?;
    for a in net.arrays_mut() {
        for v in a.values_mut() {
            *v += T::of(rng.uniform(-0.3, 0.3));
        }
    }
    let cells = (0..ed.grid * ed.grid * ed.channels).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
    let image = ImageGrid::new(ed.grid, ed.channels, cells)?;
    let text = TokenSequence::new((0..4).map(|_| rng.below(ed.vocab)).collect(), ed.vocab)?;
    let target = if rng.below(2) == 0 { 0.0 } else { 1.0 };
    Ok(Stage2Instance { net, image, text, target })
}

fn stage2_loss<T: Scalar>(net: &MatchingNetwork<T>, inst_image: &ImageGrid, text: &TokenSequence, target: f64) -> Result<(T, Vec<DenseArray<T>>)> {
    let mut tape = Tape::new();
    let b = net.bind(&mut tape);
    let c = pair_confidence_on(&mut tape, &b, inst_image, text)?;
    let l = tape.bce(c, T::of(target))?;
    let g = tape.backward(l)?;
    Ok((tape.scalar(l), collect_grads(&g, &b.vars)))
}

fn widen_net<T: Scalar>(net: &MatchingNetwork<T>) -> Result<MatchingNetwork<f64>> {
    let enc = EncoderParams::zeros(net.encoder.dims);
    let mut wide = MatchingNetwork::new(enc, net.dims, net.variant, &mut Rng::seeded(0))?;
    for (w, (_, a)) in wide.arrays_mut().into_iter().zip(net.named()) {
        *w = widen_array(a);
    }
    Ok(wide)
}

/// Worst relative error of the end-to-end BCE gradient over every parameter
/// block, encoders included, with each block's name.
pub fn stage2_check<T: Scalar>(inst: &Stage2Instance<T>) -> Result<Vec<(&'static str, f64)>> {
    let (_, analytic) = stage2_loss(&inst.net, &inst.image, &inst.text, inst.target)?;
    let wide = widen_net(&inst.net)?;
    let names: Vec<&'static str> = inst.net.named().iter().map(|(n, _)| *n).collect();
    let mut out = Vec::with_capacity(names.len());
    for (b, name) in names.into_iter().enumerate() {
        let x0 = wide.named()[b].1.clone();
        let fd = numerical_gradient(
            |x| {
                let mut net = wide.clone();
                *net.arrays_mut()[b] = x.clone();
                Ok(stage2_loss(&net, &inst.image, &inst.text, inst.target)?.0)
            },
            &x0,
            1e-6,
        )?;
        out.push((name, max_relative_error(&widen(analytic[b].values()), fd.values())));
    }
    Ok(out)
}

/// End-to-end stage-2 gradients for the full model and both ablations.
pub fn stage2_suite<T: Scalar>(seed: u64, instances: usize) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut rng = Rng::seeded(seed);
    let variants = [
        Stage2Variant::default(),
        Stage2Variant { no_sma: true, no_spa: false },
        Stage2Variant { no_sma: true, no_spa: true },
    ];
    let mut worst: f64 = 0.0;
    for v in variants {
        for _ in 0..instances {
            let inst = stage2_instance::<T>(v, &mut rng)?;
            for (_, e) in stage2_check(&inst)? {
                worst = worst.max(e);
            }
        }
    }
    Ok(SuiteResult {
        name: "stage-2 end to end".into(),
        instances: instances * variants.len(),
        max_error: worst,
        tolerance: 1e-4,
        elapsed: start.elapsed(),
    })
}

/// Every suite, in the order `gradcheck` reports them.
pub fn all_suites<T: Scalar>(seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(vec![primitives_suite::<T>(seed, 4)?, cmce_suite::<T>(seed, 100)?, stage2_suite::<T>(seed, 2)?])
}
