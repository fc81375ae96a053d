//! Toy visual and textual encoders.
//!
//! The image encoder applies one shared affine + tanh to every grid cell,
//! giving one region feature per cell, and mean-pools the regions into a
//! projected, unit-norm global feature. The text encoder is an embedding
//! lookup followed by a word LSTM whose last hidden state is projected and
//! normalized into the joint space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{bind, DenseArray, ParamSet, Rng, Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab: usize,
    pub embed: usize,
    /// Word LSTM hidden size (D_H).
    pub hidden: usize,
    /// Region feature size (D_I).
    pub region: usize,
    /// Joint embedding size (D).
    pub joint: usize,
    pub grid: usize,
    pub channels: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            vocab: 64,
            embed: 32,
            hidden: 64,
            region: 32,
            joint: 64,
            grid: 4,
            channels: 3,
        }
    }
}

impl EncoderDims {
    pub fn regions(&self) -> usize {
        self.grid * self.grid
    }
}

/// Vocabulary indices of one description.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<usize>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Input("token sequence must be nonempty".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("token {bad} outside vocabulary of {vocab}")));
        }
        Ok(TokenSequence { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn truncated(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.tokens.len() {
            return Err(Error::Input(format!("cannot truncate {} tokens to {len}", self.tokens.len())));
        }
        Ok(TokenSequence { tokens: self.tokens[..len].to_vec() })
    }
}

/// A synthetic image: `grid × grid` cells of `channels` values, cell-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    grid: usize,
    channels: usize,
    cells: Vec<f32>,
}

impl ImageGrid {
    pub fn new(grid: usize, channels: usize, cells: Vec<f32>) -> Result<Self> {
        if grid == 0 || channels == 0 {
            return Err(Error::Input("image grid and channel count must be positive".into()));
        }
        if cells.len() != grid * grid * channels {
            return Err(Error::dim("image", &[grid, grid, channels], &[cells.len()]));
        }
        if cells.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image contains non-finite values".into()));
        }
        Ok(ImageGrid { grid, channels, cells })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> &[f32] {
        &self.cells
    }

    pub fn cell(&self, index: usize) -> &[f32] {
        &self.cells[index * self.channels..(index + 1) * self.channels]
    }

    fn as_matrix<T: Scalar>(&self) -> DenseArray<T> {
        let data = self.cells.iter().map(|&v| T::of(v as f64)).collect();
        DenseArray::from_parts(vec![self.grid * self.grid, self.channels], data)
    }
}

/// Region features `i_1..i_L` plus the pooled unit-norm global feature.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatureMap<T> {
    pub regions: DenseArray<T>,
    pub pooled: Vec<T>,
}

/// Encoder hidden states `h_1..h_T` plus the unit-norm sentence feature.
#[derive(Clone, Debug, PartialEq)]
pub struct WordFeatureSequence<T> {
    pub states: DenseArray<T>,
    pub sentence: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub dims: EncoderDims,
    pub embed: DenseArray<T>,
    /// Gate order is input, forget, candidate, output.
    pub lstm_wx: DenseArray<T>,
    pub lstm_wh: DenseArray<T>,
    pub lstm_b: DenseArray<T>,
    pub text_proj_w: DenseArray<T>,
    pub text_proj_b: DenseArray<T>,
    pub cell_w: DenseArray<T>,
    pub cell_b: DenseArray<T>,
    pub image_proj_w: DenseArray<T>,
    pub image_proj_b: DenseArray<T>,
}

/// Number of leading parameter blocks belonging to the text encoder; the
/// rest belong to the grid encoder.
pub const TEXT_BLOCKS: usize = 6;

/// LSTM bias with the forget-gate block at one and the rest at zero.
pub fn forget_bias<T: Scalar>(hidden: usize) -> DenseArray<T> {
    let mut b = DenseArray::zeros(&[4 * hidden]);
    b.values_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = T::one());
    b
}

impl<T: Scalar> EncoderParams<T> {
    pub fn init(dims: EncoderDims, rng: &mut Rng) -> Self {
        let h4 = 4 * dims.hidden;
        EncoderParams {
            dims,
            embed: DenseArray::uniform(&[dims.vocab, dims.embed], -1.0, 1.0, rng),
            lstm_wx: DenseArray::glorot(&[h4, dims.embed], rng),
            lstm_wh: DenseArray::glorot(&[h4, dims.hidden], rng),
            lstm_b: forget_bias(dims.hidden),
            text_proj_w: DenseArray::glorot(&[dims.joint, dims.hidden], rng),
            text_proj_b: DenseArray::zeros(&[dims.joint]),
            cell_w: DenseArray::glorot(&[dims.region, dims.channels], rng),
            cell_b: DenseArray::zeros(&[dims.region]),
            image_proj_w: DenseArray::glorot(&[dims.joint, dims.region], rng),
            image_proj_b: DenseArray::zeros(&[dims.joint]),
        }
    }

    pub fn zeros(dims: EncoderDims) -> Self {
        let h4 = 4 * dims.hidden;
        EncoderParams {
            dims,
            embed: DenseArray::zeros(&[dims.vocab, dims.embed]),
            lstm_wx: DenseArray::zeros(&[h4, dims.embed]),
            lstm_wh: DenseArray::zeros(&[h4, dims.hidden]),
            lstm_b: DenseArray::zeros(&[h4]),
            text_proj_w: DenseArray::zeros(&[dims.joint, dims.hidden]),
            text_proj_b: DenseArray::zeros(&[dims.joint]),
            cell_w: DenseArray::zeros(&[dims.region, dims.channels]),
            cell_b: DenseArray::zeros(&[dims.region]),
            image_proj_w: DenseArray::zeros(&[dims.joint, dims.region]),
            image_proj_b: DenseArray::zeros(&[dims.joint]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundEncoder {
        BoundEncoder::from_vars(self.dims, &bind(tape, self))
    }
}

impl<T: Scalar> ParamSet<T> for EncoderParams<T> {
    fn named(&self) -> Vec<(&'static str, &DenseArray<T>)> {
        vec![
            ("encoder.embed", &self.embed),
            ("encoder.lstm_wx", &self.lstm_wx),
            ("encoder.lstm_wh", &self.lstm_wh),
            ("encoder.lstm_b", &self.lstm_b),
            ("encoder.text_proj_w", &self.text_proj_w),
            ("encoder.text_proj_b", &self.text_proj_b),
            ("encoder.cell_w", &self.cell_w),
            ("encoder.cell_b", &self.cell_b),
            ("encoder.image_proj_w", &self.image_proj_w),
            ("encoder.image_proj_b", &self.image_proj_b),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut DenseArray<T>)> {
        vec![
            ("encoder.embed", &mut self.embed),
            ("encoder.lstm_wx", &mut self.lstm_wx),
            ("encoder.lstm_wh", &mut self.lstm_wh),
            ("encoder.lstm_b", &mut self.lstm_b),
            ("encoder.text_proj_w", &mut self.text_proj_w),
            ("encoder.text_proj_b", &mut self.text_proj_b),
            ("encoder.cell_w", &mut self.cell_w),
            ("encoder.cell_b", &mut self.cell_b),
            ("encoder.image_proj_w", &mut self.image_proj_w),
            ("encoder.image_proj_b", &mut self.image_proj_b),
        ]
    }
}

/// Encoder parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub dims: EncoderDims,
    pub vars: Vec<Var>,
    embed: Var,
    lstm: LstmVars,
    text_proj_w: Var,
    text_proj_b: Var,
    cell_w: Var,
    cell_b: Var,
    image_proj_w: Var,
    image_proj_b: Var,
}

impl BoundEncoder {
    pub fn from_vars(dims: EncoderDims, vars: &[Var]) -> Self {
        BoundEncoder {
            dims,
            vars: vars.to_vec(),
            embed: vars[0],
            lstm: LstmVars {
                wx: vars[1],
                wh: vars[2],
                b: vars[3],
                hidden: dims.hidden,
            },
            text_proj_w: vars[4],
            text_proj_b: vars[5],
            cell_w: vars[6],
            cell_b: vars[7],
            image_proj_w: vars[8],
            image_proj_b: vars[9],
        }
    }
}

/// LSTM cell weights on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
    pub hidden: usize,
}

impl LstmVars {
    /// One LSTM step; returns the new `(h, c)`.
    pub fn step<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let n = self.hidden;
        let gx = tape.linear(x, self.wx, self.b)?;
        let gh = tape.matvec(self.wh, h)?;
        let gates = tape.add(gx, gh)?;
        let i_pre = tape.slice(gates, 0, n)?;
        let f_pre = tape.slice(gates, n, n)?;
        let g_pre = tape.slice(gates, 2 * n, n)?;
        let o_pre = tape.slice(gates, 3 * n, n)?;
        let i = tape.sigmoid(i_pre)?;
        let f = tape.sigmoid(f_pre)?;
        let g = tape.tanh(g_pre)?;
        let o = tape.sigmoid(o_pre)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next)?;
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

/// Tape handles produced by [`encode_image_on`].
#[derive(Clone, Copy, Debug)]
pub struct ImageVars {
    /// `[L × D_I]`
    pub regions: Var,
    /// `[D]`, unit norm
    pub pooled: Var,
}

/// Tape handles produced by [`encode_text_on`].
#[derive(Clone, Debug)]
pub struct TextVars {
    /// `[T × D_H]`
    pub states: Var,
    /// `[D]`, unit norm
    pub sentence: Var,
}

pub fn encode_image_on<T: Scalar>(tape: &mut Tape<T>, enc: &BoundEncoder, img: &ImageGrid) -> Result<ImageVars> {
    let d = enc.dims;
    if img.grid() != d.grid || img.channels() != d.channels {
        return Err(Error::dim(
            "encode_image",
            &[d.grid, d.grid, d.channels],
            &[img.grid(), img.grid(), img.channels()],
        ));
    }
    let cells = tape.leaf(img.as_matrix());
    let pre = tape.matmul_t(cells, enc.cell_w)?;
    let pre = tape.add_row(pre, enc.cell_b)?;
    let regions = tape.tanh(pre)?;
    let mean = tape.mean_rows(regions)?;
    let proj = tape.linear(mean, enc.image_proj_w, enc.image_proj_b)?;
    let pooled = tape.l2_normalize(proj)?;
    Ok(ImageVars { regions, pooled })
}

pub fn encode_text_on<T: Scalar>(tape: &mut Tape<T>, enc: &BoundEncoder, tokens: &TokenSequence) -> Result<TextVars> {
    let d = enc.dims;
    if tokens.is_empty() {
        return Err(Error::Input("token sequence must be nonempty".into()));
    }
    if let Some(&bad) = tokens.tokens().iter().find(|&&t| t >= d.vocab) {
        return Err(Error::Input(format!("token {bad} outside vocabulary of {}", d.vocab)));
    }
    let mut h = tape.leaf(DenseArray::zeros(&[d.hidden]));
    let mut c = tape.leaf(DenseArray::zeros(&[d.hidden]));
    let mut states = Vec::with_capacity(tokens.len());
    for &tok in tokens.tokens() {
        let x = tape.row(enc.embed, tok)?;
        let (hn, cn) = enc.lstm.step(tape, x, h, c)?;
        h = hn;
        c = cn;
        states.push(h);
    }
    let states_m = tape.stack(&states)?;
    let proj = tape.linear(h, enc.text_proj_w, enc.text_proj_b)?;
    let sentence = tape.l2_normalize(proj)?;
    Ok(TextVars { states: states_m, sentence })
}

pub fn encode_image<T: Scalar>(img: &ImageGrid, params: &EncoderParams<T>) -> Result<RegionFeatureMap<T>> {
    let mut tape = Tape::new();
    let enc = params.bind(&mut tape);
    let out = encode_image_on(&mut tape, &enc, img)?;
    Ok(RegionFeatureMap {
        regions: tape.value(out.regions).clone(),
        pooled: tape.value(out.pooled).values().to_vec(),
    })
}

pub fn encode_text<T: Scalar>(tokens: &TokenSequence, params: &EncoderParams<T>) -> Result<WordFeatureSequence<T>> {
    let mut tape = Tape::new();
    let enc = params.bind(&mut tape);
    let out = encode_text_on(&mut tape, &enc, tokens)?;
    Ok(WordFeatureSequence {
        states: tape.value(out.states).clone(),
        sentence: tape.value(out.sentence).values().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{check_tape_fn, l2_norm};

    fn small_dims() -> EncoderDims {
        EncoderDims {
            vocab: 6,
            embed: 3,
            hidden: 4,
            region: 3,
            joint: 5,
            grid: 2,
            channels: 2,
        }
    }

    fn grid(dims: &EncoderDims, rng: &mut Rng) -> ImageGrid {
        let n = dims.grid * dims.grid * dims.channels;
        ImageGrid::new(dims.grid, dims.channels, (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).unwrap()
    }

    #[test]
    fn zero_grid_with_zero_biases_is_degenerate() {
        let dims = small_dims();
        let mut p = EncoderParams::<f32>::init(dims, &mut Rng::seeded(1));
        p.cell_b = DenseArray::zeros(p.cell_b.shape());
        p.image_proj_b = DenseArray::zeros(p.image_proj_b.shape());
        let img = ImageGrid::new(2, 2, vec![0.0; 8]).unwrap();
        assert!(matches!(encode_image(&img, &p), Err(Error::Degenerate(_))));
    }

    #[test]
    fn single_cell_grid() {
        let dims = EncoderDims { grid: 1, ..small_dims() };
        let p = EncoderParams::<f64>::init(dims, &mut Rng::seeded(2));
        let img = ImageGrid::new(1, 2, vec![0.5, -0.25]).unwrap();
        let out = encode_image(&img, &p).unwrap();
        assert_eq!(out.regions.shape(), &[1, 3]);
        // pooled is the normalized projection of the single region
        let r = out.regions.row(0);
        let mut proj: Vec<f64> = (0..dims.joint)
            .map(|j| crate::numcore::dot(p.image_proj_w.row(j), r) + p.image_proj_b.values()[j])
            .collect();
        let n = l2_norm(&proj);
        proj.iter_mut().for_each(|v| *v /= n);
        for (a, b) in proj.iter().zip(&out.pooled) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let dims = small_dims();
        let p = EncoderParams::<f32>::init(dims, &mut Rng::seeded(3));
        let img = grid(&dims, &mut Rng::seeded(4));
        let a = encode_image(&img, &p).unwrap();
        let b = encode_image(&img, &p).unwrap();
        assert_eq!(a, b);
        assert!((l2_norm(&a.pooled) - 1.0).abs() < 1e-5);
        let t = TokenSequence::new(vec![1, 2, 3], dims.vocab).unwrap();
        let s = encode_text(&t, &p).unwrap();
        assert!((l2_norm(&s.sentence) - 1.0).abs() < 1e-5);
        assert_eq!(s.states.rows(), 3);
    }

    #[test]
    fn zero_lstm_has_zero_states() {
        let dims = small_dims();
        let mut p = EncoderParams::<f64>::init(dims, &mut Rng::seeded(5));
        p.lstm_wx = DenseArray::zeros(p.lstm_wx.shape());
        p.lstm_wh = DenseArray::zeros(p.lstm_wh.shape());
        p.lstm_b = DenseArray::zeros(p.lstm_b.shape());
        p.text_proj_b = DenseArray::filled(p.text_proj_b.shape(), 1.0);
        let t = TokenSequence::new(vec![0, 5, 2, 2], dims.vocab).unwrap();
        let s = encode_text(&t, &p).unwrap();
        assert!(s.states.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_is_one_step() {
        let dims = small_dims();
        let p = EncoderParams::<f64>::init(dims, &mut Rng::seeded(6));
        let t = TokenSequence::new(vec![4], dims.vocab).unwrap();
        let s = encode_text(&t, &p).unwrap();
        assert_eq!(s.states.shape(), &[1, dims.hidden]);
        // manual cell step from zero state
        let x = p.embed.row(4);
        let n = dims.hidden;
        let gate = |k: usize| -> f64 { crate::numcore::dot(p.lstm_wx.row(k), x) + p.lstm_b.values()[k] };
        for j in 0..n {
            let i = crate::numcore::sigmoid(gate(j));
            let g = gate(2 * n + j).tanh();
            let o = crate::numcore::sigmoid(gate(3 * n + j));
            let h = o * (i * g).tanh();
            assert!((s.states.values()[j] - h).abs() < 1e-12);
        }
    }

    #[test]
    fn truncation_reproduces_prefix_states() {
        let dims = small_dims();
        let p = EncoderParams::<f32>::init(dims, &mut Rng::seeded(7));
        let t = TokenSequence::new(vec![1, 4, 0, 3, 5], dims.vocab).unwrap();
        let full = encode_text(&t, &p).unwrap();
        for len in 1..=5 {
            let part = encode_text(&t.truncated(len).unwrap(), &p).unwrap();
            assert_eq!(part.states.values(), &full.states.values()[..len * dims.hidden]);
        }
    }

    #[test]
    fn empty_and_out_of_vocab_rejected() {
        assert!(TokenSequence::new(vec![], 4).is_err());
        assert!(TokenSequence::new(vec![4], 4).is_err());
    }

    #[test]
    fn sentence_gradient_wrt_embedding_table() {
        let dims = small_dims();
        let p = EncoderParams::<f64>::init(dims, &mut Rng::seeded(8));
        let toks = TokenSequence::new(vec![2, 0, 2, 5], dims.vocab).unwrap();
        let err = check_tape_fn(&p.embed, 1e-5, |tape, embed| {
            let mut vars = bind(tape, &p);
            vars[0] = embed;
            let enc = BoundEncoder::from_vars(dims, &vars);
            let out = encode_text_on(tape, &enc, &toks)?;
            tape.sum(out.sentence)
        })
        .unwrap();
        assert!(err <= 1e-7, "{err}");
    }
}
