//! Stage-2 pair verifier with spatial and latent semantic co-attention.
//!
//! For each word state `h_t` a spatial attention over image regions gates the
//! region features into `ĩ_t`; the joint features `x_t = [ĩ_t, h_t]` are then
//! re-aligned by an M-step decoder LSTM whose attention over word positions
//! is scored by a shared two-layer importance network `f(c_{m-1}, x_t)`. The
//! last decoder state gives the matching confidence.

use serde::{Deserialize, Serialize};

use crate::encoders::{
    encode_image_on, encode_text_on, BoundEncoder, EncoderParams, ImageGrid, LstmVars, RegionFeatureMap,
    TokenSequence, WordFeatureSequence,
};
use crate::error::{Error, Result};
use crate::numcore::{bce_value, bind, DenseArray, ParamSet, Rng, Tape, Var};
use crate::scalar::Scalar;

/// Decoder step count.
pub const DEFAULT_STEPS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoattentionDims {
    /// D_I
    pub region: usize,
    /// D_H
    pub hidden: usize,
    /// K, the shared space of the spatial attention.
    pub attention: usize,
    /// Hidden width of the importance network f.
    pub importance: usize,
    /// Width of the two fully-connected layers before the decoder.
    pub fc: usize,
    /// Decoder LSTM hidden size.
    pub decoder: usize,
    /// M
    pub steps: usize,
}

impl CoattentionDims {
    pub fn joint(&self) -> usize {
        self.region + self.hidden
    }

    pub fn with_encoder(region: usize, hidden: usize) -> Self {
        CoattentionDims {
            region,
            hidden,
            attention: 32,
            importance: 32,
            fc: 32,
            decoder: 32,
            steps: DEFAULT_STEPS,
        }
    }
}

/// Stage-2 architecture switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage2Variant {
    /// Drop the semantic-attention decoder; classify the mean joint feature
    /// with two fully-connected layers.
    pub no_sma: bool,
    /// Replace spatial attention by uniform region weights.
    pub no_spa: bool,
}

impl Stage2Variant {
    pub fn tag(&self) -> &'static str {
        match (self.no_sma, self.no_spa) {
            (false, false) => "full",
            (true, false) => "no-sma",
            (false, true) => "no-spa",
            (true, true) => "no-sma-spa",
        }
    }
}

fn weight<T: Scalar>(shape: &[usize], rng: &mut Rng) -> DenseArray<T> {
    DenseArray::glorot(shape, rng)
}

fn bias<T: Scalar>(shape: &[usize]) -> DenseArray<T> {
    DenseArray::zeros(shape)
}

/// `W_I`, `W_H`, `b_H`, `W_P`, `b_P`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionParams<T> {
    pub w_i: DenseArray<T>,
    pub w_h: DenseArray<T>,
    pub b_h: DenseArray<T>,
    pub w_p: DenseArray<T>,
    pub b_p: DenseArray<T>,
}

impl<T: Scalar> SpatialAttentionParams<T> {
    pub fn init(d: &CoattentionDims, rng: &mut Rng) -> Self {
        SpatialAttentionParams {
            w_i: weight(&[d.attention, d.region], rng),
            w_h: weight(&[d.attention, d.hidden], rng),
            b_h: bias(&[d.attention]),
            w_p: bias(&[d.attention]),
            b_p: bias(&[1]),
        }
    }
}

impl<T: Scalar> ParamSet<T> for SpatialAttentionParams<T> {
    fn named(&self) -> Vec<(&'static str, &DenseArray<T>)> {
        vec![
            ("spatial.w_i", &self.w_i),
            ("spatial.w_h", &self.w_h),
            ("spatial.b_h", &self.b_h),
            ("spatial.w_p", &self.w_p),
            ("spatial.b_p", &self.b_p),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut DenseArray<T>)> {
        vec![
            ("spatial.w_i", &mut self.w_i),
            ("spatial.w_h", &mut self.w_h),
            ("spatial.b_h", &mut self.b_h),
            ("spatial.w_p", &mut self.w_p),
            ("spatial.b_p", &mut self.b_p),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundSpatial {
    w_i: Var,
    w_h: Var,
    b_h: Var,
    w_p: Var,
    b_p: Var,
}

impl BoundSpatial {
    pub fn from_vars(v: &[Var]) -> Self {
        BoundSpatial { w_i: v[0], w_h: v[1], b_h: v[2], w_p: v[3], b_p: v[4] }
    }
}

/// Importance network, the two fully-connected layers, decoder LSTM and the
/// confidence head.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticAttentionParams<T> {
    pub steps: usize,
    pub f_wc: DenseArray<T>,
    pub f_wx: DenseArray<T>,
    pub f_b: DenseArray<T>,
    pub f_wo: DenseArray<T>,
    pub f_bo: DenseArray<T>,
    pub fc1_w: DenseArray<T>,
    pub fc1_b: DenseArray<T>,
    pub fc2_w: DenseArray<T>,
    pub fc2_b: DenseArray<T>,
    pub dec_wx: DenseArray<T>,
    pub dec_wh: DenseArray<T>,
    pub dec_b: DenseArray<T>,
    pub head_w: DenseArray<T>,
    pub head_b: DenseArray<T>,
}

impl<T: Scalar> SemanticAttentionParams<T> {
    pub fn init(d: &CoattentionDims, rng: &mut Rng) -> Self {
        let j = d.joint();
        SemanticAttentionParams {
            steps: d.steps,
            f_wc: weight(&[d.importance, d.decoder], rng),
            f_wx: weight(&[d.importance, j], rng),
            f_b: bias(&[d.importance]),
            f_wo: weight(&[d.importance], rng),
            f_bo: bias(&[1]),
            fc1_w: weight(&[d.fc, j], rng),
            fc1_b: bias(&[d.fc]),
            fc2_w: weight(&[d.fc, d.fc], rng),
            fc2_b: bias(&[d.fc]),
            dec_wx: weight(&[4 * d.decoder, d.fc], rng),
            dec_wh: weight(&[4 * d.decoder, d.decoder], rng),
            dec_b: bias(&[4 * d.decoder]),
            head_w: weight(&[d.decoder], rng),
            head_b: bias(&[1]),
        }
    }

    pub fn zeros(d: &CoattentionDims) -> Self {
        let mut p = Self::init(d, &mut Rng::seeded(0));
        for a in p.arrays_mut() {
            a.values_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        p
    }

    pub fn decoder_hidden(&self) -> usize {
        self.head_w.len()
    }
}

impl<T: Scalar> ParamSet<T> for SemanticAttentionParams<T> {
    fn named(&self) -> Vec<(&'static str, &DenseArray<T>)> {
        vec![
            ("semantic.f_wc", &self.f_wc),
            ("semantic.f_wx", &self.f_wx),
            ("semantic.f_b", &self.f_b),
            ("semantic.f_wo", &self.f_wo),
            ("semantic.f_bo", &self.f_bo),
            ("semantic.fc1_w", &self.fc1_w),
            ("semantic.fc1_b", &self.fc1_b),
            ("semantic.fc2_w", &self.fc2_w),
            ("semantic.fc2_b", &self.fc2_b),
            ("semantic.dec_wx", &self.dec_wx),
            ("semantic.dec_wh", &self.dec_wh),
            ("semantic.dec_b", &self.dec_b),
            ("semantic.head_w", &self.head_w),
            ("semantic.head_b", &self.head_b),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut DenseArray<T>)> {
        vec![
            ("semantic.f_wc", &mut self.f_wc),
            ("semantic.f_wx", &mut self.f_wx),
            ("semantic.f_b", &mut self.f_b),
            ("semantic.f_wo", &mut self.f_wo),
            ("semantic.f_bo", &mut self.f_bo),
            ("semantic.fc1_w", &mut self.fc1_w),
            ("semantic.fc1_b", &mut self.fc1_b),
            ("semantic.fc2_w", &mut self.fc2_w),
            ("semantic.fc2_b", &mut self.fc2_b),
            ("semantic.dec_wx", &mut self.dec_wx),
            ("semantic.dec_wh", &mut self.dec_wh),
            ("semantic.dec_b", &mut self.dec_b),
            ("semantic.head_w", &mut self.head_w),
            ("semantic.head_b", &mut self.head_b),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundSemantic {
    steps: usize,
    f_wc: Var,
    f_wx: Var,
    f_b: Var,
    f_wo: Var,
    f_bo: Var,
    fc1_w: Var,
    fc1_b: Var,
    fc2_w: Var,
    fc2_b: Var,
    dec: LstmVars,
    head_w: Var,
    head_b: Var,
}

impl BoundSemantic {
    pub fn from_vars(v: &[Var], steps: usize, decoder_hidden: usize) -> Self {
        BoundSemantic {
            steps,
            f_wc: v[0],
            f_wx: v[1],
            f_b: v[2],
            f_wo: v[3],
            f_bo: v[4],
            fc1_w: v[5],
            fc1_b: v[6],
            fc2_w: v[7],
            fc2_b: v[8],
            dec: LstmVars { wx: v[9], wh: v[10], b: v[11], hidden: decoder_hidden },
            head_w: v[12],
            head_b: v[13],
        }
    }
}

/// Two fully-connected layers over the mean joint feature, used when the
/// semantic decoder is ablated.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectHeadParams<T> {
    pub w1: DenseArray<T>,
    pub b1: DenseArray<T>,
    pub w2: DenseArray<T>,
    pub b2: DenseArray<T>,
}

impl<T: Scalar> DirectHeadParams<T> {
    pub fn init(d: &CoattentionDims, rng: &mut Rng) -> Self {
        DirectHeadParams {
            w1: weight(&[d.fc, d.joint()], rng),
            b1: bias(&[d.fc]),
            w2: weight(&[d.fc], rng),
            b2: bias(&[1]),
        }
    }
}

impl<T: Scalar> ParamSet<T> for DirectHeadParams<T> {
    fn named(&self) -> Vec<(&'static str, &DenseArray<T>)> {
        vec![("direct.w1", &self.w1), ("direct.b1", &self.b1), ("direct.w2", &self.w2), ("direct.b2", &self.b2)]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut DenseArray<T>)> {
        vec![
            ("direct.w1", &mut self.w1),
            ("direct.b1", &mut self.b1),
            ("direct.w2", &mut self.w2),
            ("direct.b2", &mut self.b2),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDirect {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl BoundDirect {
    pub fn from_vars(v: &[Var]) -> Self {
        BoundDirect { w1: v[0], b1: v[1], w2: v[2], b2: v[3] }
    }
}

/// Spatial attention logits and row-softmax: `[T × L]`.
pub fn spatial_attention_on<T: Scalar>(tape: &mut Tape<T>, states: Var, regions: Var, p: &BoundSpatial) -> Result<Var> {
    let u = tape.matmul_t(regions, p.w_i)?;
    let w = tape.matmul_t(states, p.w_h)?;
    let w = tape.add_row(w, p.b_h)?;
    let e = tape.additive_scores(u, w, p.w_p)?;
    let e = tape.add_scalar(e, p.b_p)?;
    tape.softmax_rows(e)
}

/// Uniform weights over regions, one row per word: `[T × L]`.
pub fn uniform_attention_on<T: Scalar>(tape: &mut Tape<T>, words: usize, regions: usize) -> Var {
    let w = T::one() / T::of_usize(regions);
    tape.leaf(DenseArray::filled(&[words, regions], w))
}

/// One decoder attention step: weights over word positions and the aligned
/// feature `x̃_m = Σ_t a'_{m,t} x_t`. `ux` is `X · f_wxᵀ`, shared across steps.
pub fn semantic_step_on<T: Scalar>(
    tape: &mut Tape<T>,
    c_prev: Var,
    joint: Var,
    ux: Var,
    p: &BoundSemantic,
) -> Result<(Var, Var)> {
    let wc = tape.linear(c_prev, p.f_wc, p.f_b)?;
    let k = tape.value(wc).len();
    let wc = tape.reshape(wc, &[1, k])?;
    let e = tape.additive_scores(ux, wc, p.f_wo)?;
    let e = tape.add_scalar(e, p.f_bo)?;
    let a = tape.softmax_rows(e)?;
    let aligned = tape.matmul(a, joint)?;
    let j = tape.value(aligned).len();
    let aligned = tape.reshape(aligned, &[j])?;
    let t = tape.value(a).len();
    let a = tape.reshape(a, &[t])?;
    Ok((a, aligned))
}

/// M decoder steps from a zero state; confidence read from the last state.
pub fn decoder_confidence_on<T: Scalar>(tape: &mut Tape<T>, joint: Var, p: &BoundSemantic) -> Result<Var> {
    if p.steps == 0 {
        return Err(Error::Config("decoder needs at least one step".into()));
    }
    let ux = tape.matmul_t(joint, p.f_wx)?;
    let mut h = tape.leaf(DenseArray::zeros(&[p.dec.hidden]));
    let mut c = tape.leaf(DenseArray::zeros(&[p.dec.hidden]));
    for _ in 0..p.steps {
        let (_, aligned) = semantic_step_on(tape, c, joint, ux, p)?;
        let z1 = tape.linear(aligned, p.fc1_w, p.fc1_b)?;
        let z1 = tape.tanh(z1)?;
        let z2 = tape.linear(z1, p.fc2_w, p.fc2_b)?;
        let z2 = tape.tanh(z2)?;
        let (hn, cn) = p.dec.step(tape, z2, h, c)?;
        h = hn;
        c = cn;
    }
    let logit = tape.dot(p.head_w, c)?;
    let logit = tape.add(logit, p.head_b)?;
    tape.sigmoid(logit)
}

pub fn direct_confidence_on<T: Scalar>(tape: &mut Tape<T>, joint: Var, p: &BoundDirect) -> Result<Var> {
    let pooled = tape.mean_rows(joint)?;
    let z = tape.linear(pooled, p.w1, p.b1)?;
    let z = tape.tanh(z)?;
    let logit = tape.dot(p.w2, z)?;
    let logit = tape.add(logit, p.b2)?;
    tape.sigmoid(logit)
}

/// Stage-2 confidence head: the semantic decoder or its ablation.
#[derive(Clone, Debug, PartialEq)]
pub enum Stage2Head<T> {
    Decoder(SemanticAttentionParams<T>),
    Direct(DirectHeadParams<T>),
}

/// Complete stage-2 network: encoders, spatial attention and a head.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingNetwork<T> {
    pub variant: Stage2Variant,
    pub dims: CoattentionDims,
    pub encoder: EncoderParams<T>,
    pub spatial: SpatialAttentionParams<T>,
    pub head: Stage2Head<T>,
}

impl<T: Scalar> MatchingNetwork<T> {
    pub fn new(encoder: EncoderParams<T>, dims: CoattentionDims, variant: Stage2Variant, rng: &mut Rng) -> Result<Self> {
        if dims.region != encoder.dims.region || dims.hidden != encoder.dims.hidden {
            return Err(Error::dim(
                "matching network",
                &[encoder.dims.region, encoder.dims.hidden],
                &[dims.region, dims.hidden],
            ));
        }
        let spatial = SpatialAttentionParams::init(&dims, rng);
        let head = if variant.no_sma {
            Stage2Head::Direct(DirectHeadParams::init(&dims, rng))
        } else {
            Stage2Head::Decoder(SemanticAttentionParams::init(&dims, rng))
        };
        Ok(MatchingNetwork { variant, dims, encoder, spatial, head })
    }

    /// Number of leading parameter blocks owned by the encoders.
    pub fn encoder_blocks(&self) -> usize {
        self.encoder.named().len()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundNetwork {
        let vars = bind(tape, self);
        let ne = self.encoder_blocks();
        let encoder = BoundEncoder::from_vars(self.encoder.dims, &vars[..ne]);
        let verifier = self.verifier_from_vars(&vars[ne..]);
        BoundNetwork { vars, encoder, verifier }
    }

    /// Binds only the attention and head blocks, for scoring cached encoder
    /// outputs. The returned vars line up with `named()[encoder_blocks()..]`.
    pub fn bind_verifier(&self, tape: &mut Tape<T>) -> (Vec<Var>, BoundVerifier) {
        let ne = self.encoder_blocks();
        let vars: Vec<Var> = self.named()[ne..].iter().map(|(_, a)| tape.leaf((*a).clone())).collect();
        let verifier = self.verifier_from_vars(&vars);
        (vars, verifier)
    }

    fn verifier_from_vars(&self, vars: &[Var]) -> BoundVerifier {
        let ns = 5;
        let spatial = BoundSpatial::from_vars(&vars[..ns]);
        let head = match &self.head {
            Stage2Head::Decoder(p) => BoundHead::Decoder(BoundSemantic::from_vars(&vars[ns..], p.steps, p.decoder_hidden())),
            Stage2Head::Direct(_) => BoundHead::Direct(BoundDirect::from_vars(&vars[ns..])),
        };
        BoundVerifier { variant: self.variant, spatial, head }
    }

    /// Matching confidence from precomputed word states and region features.
    pub fn confidence(&self, states: &DenseArray<T>, regions: &DenseArray<T>) -> Result<T> {
        let mut tape = Tape::new();
        let (_, v) = self.bind_verifier(&mut tape);
        let h = tape.leaf(states.clone());
        let r = tape.leaf(regions.clone());
        let c = joint_confidence_on(&mut tape, &v, h, r)?;
        Ok(tape.scalar(c))
    }
}

impl<T: Scalar> ParamSet<T> for MatchingNetwork<T> {
    fn named(&self) -> Vec<(&'static str, &DenseArray<T>)> {
        let mut v = self.encoder.named();
        v.extend(self.spatial.named());
        match &self.head {
            Stage2Head::Decoder(p) => v.extend(p.named()),
            Stage2Head::Direct(p) => v.extend(p.named()),
        }
        v
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut DenseArray<T>)> {
        let mut v = self.encoder.named_mut();
        v.extend(self.spatial.named_mut());
        match &mut self.head {
            Stage2Head::Decoder(p) => v.extend(p.named_mut()),
            Stage2Head::Direct(p) => v.extend(p.named_mut()),
        }
        v
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BoundHead {
    Decoder(BoundSemantic),
    Direct(BoundDirect),
}

/// Spatial attention and head registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundVerifier {
    pub variant: Stage2Variant,
    pub spatial: BoundSpatial,
    pub head: BoundHead,
}

#[derive(Clone, Debug)]
pub struct BoundNetwork {
    pub vars: Vec<Var>,
    pub encoder: BoundEncoder,
    pub verifier: BoundVerifier,
}

/// Confidence for a (description, image) pair, encoders included.
pub fn pair_confidence_on<T: Scalar>(
    tape: &mut Tape<T>,
    net: &BoundNetwork,
    image: &ImageGrid,
    text: &TokenSequence,
) -> Result<Var> {
    let img = encode_image_on(tape, &net.encoder, image)?;
    let txt = encode_text_on(tape, &net.encoder, text)?;
    joint_confidence_on(tape, &net.verifier, txt.states, img.regions)
}

/// Confidence from word states `[T × D_H]` and regions `[L × D_I]`.
pub fn joint_confidence_on<T: Scalar>(tape: &mut Tape<T>, net: &BoundVerifier, states: Var, regions: Var) -> Result<Var> {
    let words = tape.value(states).rows();
    let attn = if net.variant.no_spa {
        let l = tape.value(regions).rows();
        uniform_attention_on(tape, words, l)
    } else {
        spatial_attention_on(tape, states, regions, &net.spatial)?
    };
    let gated = tape.matmul(attn, regions)?;
    let joint = tape.concat_cols(gated, states)?;
    match &net.head {
        BoundHead::Decoder(p) => decoder_confidence_on(tape, joint, p),
        BoundHead::Direct(p) => direct_confidence_on(tape, joint, p),
    }
}

/// Per-word attention over regions: `a_{t,k}`, rows sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionMap<T>(pub DenseArray<T>);

/// Per-step attention over word positions: `a'_{m,t}`, rows sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticAttentionMap<T>(pub DenseArray<T>);

/// `x_t = [ĩ_t, h_t]`, one row per word.
#[derive(Clone, Debug, PartialEq)]
pub struct JointFeatureSequence<T>(pub DenseArray<T>);

pub fn spatial_attention<T: Scalar>(
    words: &WordFeatureSequence<T>,
    image: &RegionFeatureMap<T>,
    p: &SpatialAttentionParams<T>,
) -> Result<SpatialAttentionMap<T>> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, p);
    let h = tape.leaf(words.states.clone());
    let r = tape.leaf(image.regions.clone());
    let a = spatial_attention_on(&mut tape, h, r, &BoundSpatial::from_vars(&vars))?;
    Ok(SpatialAttentionMap(tape.value(a).clone()))
}

/// `ĩ_t = Σ_k a_{t,k} i_k`.
pub fn gate_regions<T: Scalar>(attn: &SpatialAttentionMap<T>, image: &RegionFeatureMap<T>) -> Result<DenseArray<T>> {
    let mut tape = Tape::new();
    let a = tape.leaf(attn.0.clone());
    let r = tape.leaf(image.regions.clone());
    let g = tape.matmul(a, r)?;
    Ok(tape.value(g).clone())
}

pub fn build_joint<T: Scalar>(words: &WordFeatureSequence<T>, gated: &DenseArray<T>) -> Result<JointFeatureSequence<T>> {
    if words.states.rows() != gated.rows() {
        return Err(Error::dim("build_joint", words.states.shape(), gated.shape()));
    }
    let mut tape = Tape::new();
    let g = tape.leaf(gated.clone());
    let h = tape.leaf(words.states.clone());
    let x = tape.concat_cols(g, h)?;
    Ok(JointFeatureSequence(tape.value(x).clone()))
}

/// One semantic attention step from decoder state `c_prev`.
pub fn semantic_attention_step<T: Scalar>(
    c_prev: &[T],
    joint: &JointFeatureSequence<T>,
    p: &SemanticAttentionParams<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, p);
    let bound = BoundSemantic::from_vars(&vars, p.steps, p.decoder_hidden());
    let c = tape.leaf(DenseArray::vector(c_prev.to_vec())?);
    let x = tape.leaf(joint.0.clone());
    let ux = tape.matmul_t(x, bound.f_wx)?;
    let (a, aligned) = semantic_step_on(&mut tape, c, x, ux, &bound)?;
    Ok((tape.value(a).values().to_vec(), tape.value(aligned).values().to_vec()))
}

/// Full semantic-attention map over all M steps, for inspection.
pub fn semantic_attention_map<T: Scalar>(
    joint: &JointFeatureSequence<T>,
    p: &SemanticAttentionParams<T>,
) -> Result<SemanticAttentionMap<T>> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, p);
    let b = BoundSemantic::from_vars(&vars, p.steps, p.decoder_hidden());
    let x = tape.leaf(joint.0.clone());
    let ux = tape.matmul_t(x, b.f_wx)?;
    let mut h = tape.leaf(DenseArray::zeros(&[b.dec.hidden]));
    let mut c = tape.leaf(DenseArray::zeros(&[b.dec.hidden]));
    let mut rows = Vec::with_capacity(b.steps);
    for _ in 0..b.steps {
        let (a, aligned) = semantic_step_on(&mut tape, h, x, ux, &b)?;
        rows.push(a);
        let z1 = tape.linear(aligned, b.fc1_w, b.fc1_b)?;
        let z1 = tape.tanh(z1)?;
        let z2 = tape.linear(z1, b.fc2_w, b.fc2_b)?;
        let z2 = tape.tanh(z2)?;
        let (hn, cn) = b.dec.step(&mut tape, z2, h, c)?;
        h = hn;
        c = cn;
    }
    let m = tape.stack(&rows)?;
    Ok(SemanticAttentionMap(tape.value(m).clone()))
}

pub fn match_confidence<T: Scalar>(joint: &JointFeatureSequence<T>, p: &SemanticAttentionParams<T>) -> Result<T> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, p);
    let b = BoundSemantic::from_vars(&vars, p.steps, p.decoder_hidden());
    let x = tape.leaf(joint.0.clone());
    let c = decoder_confidence_on(&mut tape, x, &b)?;
    Ok(tape.scalar(c))
}

/// A scored (description, image) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub description: usize,
    pub image: usize,
    pub description_identity: usize,
    pub image_identity: usize,
    /// 1 iff the identities agree.
    pub target: u8,
    pub confidence: f64,
}

impl MatchPair {
    pub fn labeled(description: usize, image: usize, description_identity: usize, image_identity: usize) -> Self {
        MatchPair {
            description,
            image,
            description_identity,
            image_identity,
            target: u8::from(description_identity == image_identity),
            confidence: 0.5,
        }
    }
}

/// `E = −(1/N′) Σ [y log C + (1−y) log(1−C)]`, confidences clamped to
/// `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(pairs: &[MatchPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("binary cross-entropy over zero pairs".into()));
    }
    let total: f64 = pairs.iter().map(|p| bce_value(p.confidence, p.target as f64)).sum();
    Ok(total / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderDims;

    fn dims() -> CoattentionDims {
        CoattentionDims { region: 3, hidden: 4, attention: 5, importance: 4, fc: 3, decoder: 4, steps: 2 }
    }

    fn rand_matrix(r: usize, c: usize, rng: &mut Rng) -> DenseArray<f64> {
        DenseArray::uniform(&[r, c], -1.0, 1.0, rng)
    }

    #[test]
    fn single_region_gets_all_attention() {
        let mut rng = Rng::seeded(1);
        let p = SpatialAttentionParams::<f64>::init(&dims(), &mut rng);
        let words = WordFeatureSequence { states: rand_matrix(3, 4, &mut rng), sentence: vec![] };
        let img = RegionFeatureMap { regions: rand_matrix(1, 3, &mut rng), pooled: vec![] };
        let a = spatial_attention(&words, &img, &p).unwrap();
        assert!(a.0.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_projection_gives_uniform_attention() {
        let mut rng = Rng::seeded(2);
        let mut p = SpatialAttentionParams::<f64>::init(&dims(), &mut rng);
        p.w_p = DenseArray::zeros(&[5]);
        let words = WordFeatureSequence { states: rand_matrix(3, 4, &mut rng), sentence: vec![] };
        let img = RegionFeatureMap { regions: rand_matrix(4, 3, &mut rng), pooled: vec![] };
        let a = spatial_attention(&words, &img, &p).unwrap();
        assert!(a.0.values().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn gating_examples() {
        let img = RegionFeatureMap { regions: DenseArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), pooled: vec![] };
        let a = SpatialAttentionMap(DenseArray::from_rows(&[vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap());
        let g = gate_regions(&a, &img).unwrap();
        assert_eq!(g.values(), &[0.5, 0.5, 0.0, 1.0]);
        let same = RegionFeatureMap { regions: DenseArray::from_rows(&[vec![0.3, -0.2], vec![0.3, -0.2]]).unwrap(), pooled: vec![] };
        let a = SpatialAttentionMap(DenseArray::from_rows(&[vec![0.9, 0.1]]).unwrap());
        let g: DenseArray<f64> = gate_regions(&a, &same).unwrap();
        assert!((g.values()[0] - 0.3).abs() < 1e-15 && (g.values()[1] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn joint_concatenates() {
        let words = WordFeatureSequence { states: DenseArray::from_rows(&[vec![2.0, 3.0]]).unwrap(), sentence: vec![] };
        let gated = DenseArray::from_rows(&[vec![1.0]]).unwrap();
        let x = build_joint(&words, &gated).unwrap();
        assert_eq!(x.0.values(), &[1.0, 2.0, 3.0]);
        let bad = DenseArray::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(build_joint(&words, &bad).is_err());
    }

    #[test]
    fn single_word_semantic_step() {
        let d = dims();
        let mut rng = Rng::seeded(3);
        let p = SemanticAttentionParams::<f64>::init(&d, &mut rng);
        let x = JointFeatureSequence(rand_matrix(1, d.joint(), &mut rng));
        let (a, xm) = semantic_attention_step(&[0.1, 0.2, -0.3, 0.0], &x, &p).unwrap();
        assert_eq!(a, vec![1.0]);
        assert_eq!(xm, x.0.values());
    }

    #[test]
    fn zero_importance_gives_mean() {
        let d = dims();
        let mut rng = Rng::seeded(4);
        let mut p = SemanticAttentionParams::<f64>::init(&d, &mut rng);
        p.f_wo = DenseArray::zeros(p.f_wo.shape());
        let x = JointFeatureSequence(rand_matrix(4, d.joint(), &mut rng));
        let (a, xm) = semantic_attention_step(&[0.5; 4], &x, &p).unwrap();
        assert!(a.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        for (j, v) in xm.iter().enumerate() {
            let mean = (0..4).map(|t| x.0.row(t)[j]).sum::<f64>() / 4.0;
            assert!((v - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_network_is_half_confident() {
        let d = dims();
        let p = SemanticAttentionParams::<f32>::zeros(&d);
        let x = JointFeatureSequence(DenseArray::uniform(&[3, d.joint()], -1.0, 1.0, &mut Rng::seeded(5)));
        assert_eq!(match_confidence(&x, &p).unwrap(), 0.5);
    }

    #[test]
    fn bce_examples() {
        let mut p = MatchPair::labeled(0, 0, 1, 1);
        assert_eq!(p.target, 1);
        assert!((bce_loss(&[p.clone()]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        p.confidence = 1.0;
        assert!(bce_loss(&[p]).unwrap() <= 1e-6);
        assert!(bce_loss(&[]).is_err());
        assert_eq!(MatchPair::labeled(0, 0, 1, 2).target, 0);
    }

    #[test]
    fn network_variants_bind_and_run() {
        let enc_dims = EncoderDims { vocab: 8, embed: 3, hidden: 4, region: 3, joint: 4, grid: 2, channels: 2 };
        let mut rng = Rng::seeded(6);
        let img = ImageGrid::new(2, 2, (0..8).map(|i| i as f32 * 0.1).collect()).unwrap();
        let text = TokenSequence::new(vec![1, 2, 3], 8).unwrap();
        for (no_sma, no_spa) in [(false, false), (true, false), (false, true), (true, true)] {
            let enc = EncoderParams::<f64>::init(enc_dims, &mut rng);
            let net = MatchingNetwork::new(enc, dims(), Stage2Variant { no_sma, no_spa }, &mut rng).unwrap();
            let mut tape = Tape::new();
            let b = net.bind(&mut tape);
            let c = pair_confidence_on(&mut tape, &b, &img, &text).unwrap();
            let v = tape.scalar(c);
            assert!(v > 0.0 && v < 1.0);
        }
    }
}
