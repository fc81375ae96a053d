//! Cross-modal cross-entropy over per-identity feature buffers.
//!
//! A visual feature `v` is classified against every identity's stored textual
//! feature with a temperature-scaled softmax over the affinities `S_jᵀv`, and
//! symmetrically for textual features against the visual buffer. Buffers are
//! constants for differentiation; they are refreshed after each step by a
//! running weighted average.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{dot, l2_normalized, log_sum_exp, softmax, DenseArray, Tape, Var};
use crate::scalar::Scalar;

/// Temperature used for both directions by default.
pub const DEFAULT_TEMPERATURE: f64 = 0.04;
/// Weight of the new feature in the running buffer average.
pub const DEFAULT_UPDATE_WEIGHT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Textual,
    Visual,
}

/// Which buffer a feature is scored against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Visual feature against the textual buffer.
    VisualToTextual,
    /// Textual feature against the visual buffer.
    TextualToVisual,
}

/// Per-identity table of unit-norm features for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBuffer<T> {
    table: DenseArray<T>,
    modality: Modality,
    counts: Vec<usize>,
    renormalize: bool,
}

impl<T: Scalar> FeatureBuffer<T> {
    pub fn new(modality: Modality, table: DenseArray<T>, renormalize: bool) -> Result<Self> {
        if table.shape().len() != 2 {
            return Err(Error::dim("feature buffer", table.shape(), &[0, 0]));
        }
        let n = table.rows();
        Ok(FeatureBuffer {
            table,
            modality,
            counts: vec![0; n],
            renormalize,
        })
    }

    /// Buffer whose rows are per-identity means of the given features,
    /// renormalized when `renormalize` is set.
    pub fn from_samples(
        modality: Modality,
        identities: usize,
        dim: usize,
        samples: &[(usize, Vec<T>)],
        renormalize: bool,
    ) -> Result<Self> {
        if identities == 0 || dim == 0 {
            return Err(Error::State("feature buffer needs at least one identity and dimension".into()));
        }
        let mut sums = vec![T::zero(); identities * dim];
        let mut counts = vec![0usize; identities];
        for (id, feat) in samples {
            if *id >= identities {
                return Err(Error::Input(format!("identity {id} out of range for {identities}")));
            }
            if feat.len() != dim {
                return Err(Error::dim("buffer init", &[dim], &[feat.len()]));
            }
            counts[*id] += 1;
            for (s, &v) in sums[id * dim..(id + 1) * dim].iter_mut().zip(feat) {
                *s += v;
            }
        }
        if let Some(missing) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Dataset(format!(
                "identity {missing} has no {modality:?} samples for buffer initialization"
            )));
        }
        for (id, &c) in counts.iter().enumerate() {
            let row = &mut sums[id * dim..(id + 1) * dim];
            let inv = T::one() / T::of_usize(c);
            row.iter_mut().for_each(|v| *v *= inv);
            if renormalize {
                let unit = l2_normalized(row)?;
                row.copy_from_slice(&unit);
            }
        }
        Ok(FeatureBuffer {
            table: DenseArray::new(vec![identities, dim], sums)?,
            modality,
            counts,
            renormalize,
        })
    }

    pub fn identities(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn row(&self, identity: usize) -> &[T] {
        self.table.row(identity)
    }

    pub fn table(&self) -> &DenseArray<T> {
        &self.table
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn set_counts(&mut self, counts: Vec<usize>) -> Result<()> {
        if counts.len() != self.identities() {
            return Err(Error::dim("buffer counts", &[self.identities()], &[counts.len()]));
        }
        self.counts = counts;
        Ok(())
    }

    pub fn renormalizes(&self) -> bool {
        self.renormalize
    }

    /// Affinities `row_jᵀ feat` for every identity.
    pub fn affinities(&self, feat: &[T]) -> Vec<T> {
        (0..self.identities()).map(|j| dot(self.row(j), feat)).collect()
    }
}

/// Temperatures, batch identity count and buffer update weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmceConfig {
    /// Temperature for visual features against the textual buffer.
    pub sigma_v: f64,
    /// Temperature for textual features against the visual buffer.
    pub sigma_s: f64,
    /// Identities sampled per step.
    pub batch_identities: usize,
    /// Running-average weight of the new feature.
    pub alpha: f64,
    /// Renormalize buffer rows after averaging.
    pub renormalize: bool,
}

impl Default for CmceConfig {
    fn default() -> Self {
        CmceConfig {
            sigma_v: DEFAULT_TEMPERATURE,
            sigma_s: DEFAULT_TEMPERATURE,
            batch_identities: 4,
            alpha: DEFAULT_UPDATE_WEIGHT,
            renormalize: true,
        }
    }
}

impl CmceConfig {
    pub fn validate(&self, identities: usize) -> Result<()> {
        if !(self.sigma_v > 0.0) || !(self.sigma_s > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("buffer update weight {} outside (0, 1]", self.alpha)));
        }
        if self.batch_identities == 0 || self.batch_identities > identities {
            return Err(Error::Config(format!(
                "batch identity count {} must be in 1..={identities}",
                self.batch_identities
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchProbabilities<T> {
    pub probs: Vec<T>,
    pub direction: Direction,
}

fn direction_for(buf_modality: Modality) -> Direction {
    match buf_modality {
        Modality::Textual => Direction::VisualToTextual,
        Modality::Visual => Direction::TextualToVisual,
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {sigma}")));
    }
    Ok(())
}

fn scaled_logits<T: Scalar>(feat: &[T], buf: &FeatureBuffer<T>, sigma: f64) -> Result<Vec<T>> {
    check_sigma(sigma)?;
    if buf.identities() == 0 {
        return Err(Error::State("feature buffer is empty".into()));
    }
    if feat.len() != buf.dim() {
        return Err(Error::dim("cross-modal affinity", &[buf.dim()], &[feat.len()]));
    }
    let inv = T::one() / T::of(sigma);
    Ok(buf.affinities(feat).into_iter().map(|a| a * inv).collect())
}

/// `p_i = softmax_i(row_iᵀ feat / σ)`.
pub fn cross_modal_probabilities<T: Scalar>(
    feat: &[T],
    buf: &FeatureBuffer<T>,
    sigma: f64,
) -> Result<MatchProbabilities<T>> {
    let logits = scaled_logits(feat, buf, sigma)?;
    Ok(MatchProbabilities {
        probs: softmax(&logits)?,
        direction: direction_for(buf.modality()),
    })
}

/// One feature of a mini-batch and its identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub feature: Vec<T>,
    pub identity: usize,
}

impl<T> Sample<T> {
    pub fn new(feature: Vec<T>, identity: usize) -> Self {
        Sample { feature, identity }
    }
}

fn check_identity<T: Scalar>(s: &Sample<T>, buf: &FeatureBuffer<T>) -> Result<()> {
    if s.identity >= buf.identities() {
        return Err(Error::Input(format!(
            "identity {} out of range for {} buffer rows",
            s.identity,
            buf.identities()
        )));
    }
    Ok(())
}

fn sample_loss<T: Scalar>(s: &Sample<T>, buf: &FeatureBuffer<T>, sigma: f64) -> Result<T> {
    check_identity(s, buf)?;
    let z = scaled_logits(&s.feature, buf, sigma)?;
    Ok(log_sum_exp(&z) - z[s.identity])
}

/// `L = −Σ_v log p^S_{t_v}(v) − Σ_s log p^V_{t_s}(s)`.
pub fn cmce_loss<T: Scalar>(
    batch_v: &[Sample<T>],
    batch_s: &[Sample<T>],
    textual: &FeatureBuffer<T>,
    visual: &FeatureBuffer<T>,
    cfg: &CmceConfig,
) -> Result<T> {
    let mut loss = T::zero();
    for v in batch_v {
        loss += sample_loss(v, textual, cfg.sigma_v)?;
    }
    for s in batch_s {
        loss += sample_loss(s, visual, cfg.sigma_s)?;
    }
    Ok(loss)
}

/// Closed-form per-sample gradients of [`cmce_loss`].
#[derive(Clone, Debug, PartialEq)]
pub struct CmceGradients<T> {
    pub visual: Vec<Vec<T>>,
    pub textual: Vec<Vec<T>>,
}

fn sample_gradient<T: Scalar>(s: &Sample<T>, buf: &FeatureBuffer<T>, sigma: f64) -> Result<Vec<T>> {
    check_identity(s, buf)?;
    let p = cross_modal_probabilities(&s.feature, buf, sigma)?.probs;
    let inv = T::one() / T::of(sigma);
    let mut g = vec![T::zero(); buf.dim()];
    for (j, &pj) in p.iter().enumerate() {
        // target row weighted by (p_t − 1), all others by p_j
        let w = if j == s.identity { pj - T::one() } else { pj };
        for (gi, &r) in g.iter_mut().zip(buf.row(j)) {
            *gi += w * r;
        }
    }
    g.iter_mut().for_each(|v| *v *= inv);
    Ok(g)
}

/// `∂L/∂v = (1/σ_v)[(p_{t_v} − 1) S_{t_v} + Σ_{j≠t_v} p_j S_j]`, and the
/// symmetric expression for textual features.
pub fn cmce_gradients<T: Scalar>(
    batch_v: &[Sample<T>],
    batch_s: &[Sample<T>],
    textual: &FeatureBuffer<T>,
    visual: &FeatureBuffer<T>,
    cfg: &CmceConfig,
) -> Result<CmceGradients<T>> {
    Ok(CmceGradients {
        visual: batch_v
            .iter()
            .map(|v| sample_gradient(v, textual, cfg.sigma_v))
            .collect::<Result<_>>()?,
        textual: batch_s
            .iter()
            .map(|s| sample_gradient(s, visual, cfg.sigma_s))
            .collect::<Result<_>>()?,
    })
}

/// Per-sample CMCE term built on a tape, with the buffer as a constant.
pub fn cmce_term_on<T: Scalar>(
    tape: &mut Tape<T>,
    feature: Var,
    identity: usize,
    buf: &FeatureBuffer<T>,
    sigma: f64,
) -> Result<Var> {
    check_sigma(sigma)?;
    if identity >= buf.identities() {
        return Err(Error::Input(format!("identity {identity} out of range")));
    }
    let table = tape.leaf(buf.table().clone());
    let aff = tape.matvec(table, feature)?;
    let logits = tape.scale(aff, T::one() / T::of(sigma))?;
    tape.cross_entropy(logits, identity)
}

/// `row ← (1 − α)·row + α·feat`, renormalized when the buffer is configured to.
pub fn update_buffer<T: Scalar>(buf: &mut FeatureBuffer<T>, identity: usize, feat: &[T], alpha: f64) -> Result<()> {
    if identity >= buf.identities() {
        return Err(Error::Input(format!(
            "identity {identity} out of range for {} buffer rows",
            buf.identities()
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("buffer update weight {alpha} outside (0, 1]")));
    }
    if feat.len() != buf.dim() {
        return Err(Error::dim("update_buffer", &[buf.dim()], &[feat.len()]));
    }
    let renorm = buf.renormalize;
    let row = buf.table.row_mut(identity);
    if alpha == 1.0 {
        row.copy_from_slice(feat);
    } else {
        let a = T::of(alpha);
        let keep = T::one() - a;
        for (r, &f) in row.iter_mut().zip(feat) {
            *r = keep * *r + a * f;
        }
        if renorm {
            let unit = l2_normalized(row)?;
            row.copy_from_slice(&unit);
        }
    }
    buf.counts[identity] += 1;
    Ok(())
}
