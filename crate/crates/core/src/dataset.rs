//! Synthetic identity-annotated corpus: images rendered from binary
//! attributes, descriptions built from per-attribute phrases.
//!
//! Every identity owns a distinct attribute code. An image shows attribute
//! `a` in every cell `k` with `k mod A = a`, as a fixed prototype colour for
//! the attribute's value plus Gaussian noise. A description is one 3-token
//! phrase per attribute (name, value word, connector); phrase order is
//! shuffled with probability `permute_prob`, and each value word may be
//! swapped for its synonym with probability `synonym_prob`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::encoders::{ImageGrid, TokenSequence};
use crate::error::{Error, Result};
use crate::numcore::Rng;

pub const FORMAT_VERSION: u32 = 1;
pub const TOKENS_PER_PHRASE: usize = 3;

const ATTRIBUTE_TOKEN_BASE: usize = 1;
const CONNECTOR_TOKEN: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_identities: usize,
    pub images_per_id: usize,
    pub sents_per_id: usize,
    pub noise_level: f64,
    /// Magnitude of the prototype colours.
    pub signal_scale: f64,
    pub permute_prob: f64,
    pub synonym_prob: f64,
    pub attributes: usize,
    pub grid: usize,
    pub channels: usize,
    pub vocab: usize,
    pub split_mode: SplitMode,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_identities: 100,
            images_per_id: 2,
            sents_per_id: 2,
            noise_level: 0.3,
            signal_scale: 3.0,
            permute_prob: 0.5,
            synonym_prob: 0.0,
            attributes: 8,
            grid: 4,
            channels: 3,
            vocab: 64,
            split_mode: SplitMode::SharedIdentity,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    fn value_token_base(&self) -> usize {
        ATTRIBUTE_TOKEN_BASE + self.attributes
    }

    /// Tokens needed: connector, one name per attribute, two synonyms per value.
    pub fn required_vocab(&self) -> usize {
        self.value_token_base() + self.attributes * 4
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_identities == 0 || self.images_per_id == 0 || self.sents_per_id == 0 {
            return bad("identity, image and sentence counts must all be at least 1".into());
        }
        if self.attributes == 0 || self.grid == 0 || self.channels == 0 {
            return bad("attributes, grid and channels must be positive".into());
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return bad(format!("noise_level must be >= 0, got {}", self.noise_level));
        }
        if !(self.signal_scale > 0.0) || !self.signal_scale.is_finite() {
            return bad(format!("signal_scale must be > 0, got {}", self.signal_scale));
        }
        for (name, p) in [("permute_prob", self.permute_prob), ("synonym_prob", self.synonym_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.attributes < 64 && self.num_identities as u128 > 1u128 << self.attributes {
            return bad(format!(
                "{} identities cannot have distinct codes over {} binary attributes",
                self.num_identities, self.attributes
            ));
        }
        if self.vocab < self.required_vocab() {
            return bad(format!("vocabulary {} smaller than the {} tokens needed", self.vocab, self.required_vocab()));
        }
        if self.grid * self.grid < self.attributes {
            return bad("grid has fewer cells than attributes".into());
        }
        if self.split_mode == SplitMode::SharedIdentity && (self.images_per_id < 2 || self.sents_per_id < 2) {
            return bad("shared-identity splits need at least 2 images and 2 sentences per identity".into());
        }
        if self.split_mode == SplitMode::DisjointIdentity && self.num_identities < 3 {
            return bad("disjoint-identity splits need at least 3 identities".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Identity {
    pub id: usize,
    pub attributes: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleModality {
    Image,
    Text,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Image(ImageGrid),
    Text(TokenSequence),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub identity: usize,
    /// Index of this sample among its identity's samples of the same modality.
    pub sample: usize,
    pub payload: Payload,
}

impl SampleRecord {
    pub fn modality(&self) -> SampleModality {
        match self.payload {
            Payload::Image(_) => SampleModality::Image,
            Payload::Text(_) => SampleModality::Text,
        }
    }

    pub fn image(&self) -> Option<&ImageGrid> {
        match &self.payload {
            Payload::Image(g) => Some(g),
            Payload::Text(_) => None,
        }
    }

    pub fn text(&self) -> Option<&TokenSequence> {
        match &self.payload {
            Payload::Text(t) => Some(t),
            Payload::Image(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Same identities in every split, held-out samples for val/test.
    SharedIdentity,
    /// Identities partitioned 60/20/20 into train/val/test.
    DisjointIdentity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}' (expected train, val or test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn identities(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Split of sample `sample` out of `count` same-modality samples of an
    /// identity. In shared mode the last sample is held out for test and,
    /// given at least three, the second-to-last for val.
    pub fn assign(&self, identity: usize, sample: usize, count: usize) -> Option<Split> {
        match self.mode {
            SplitMode::DisjointIdentity => [Split::Train, Split::Val, Split::Test]
                .into_iter()
                .find(|&s| self.identities(s).contains(&identity)),
            SplitMode::SharedIdentity => {
                if !self.train.contains(&identity) {
                    return None;
                }
                if count >= 2 && sample + 1 == count {
                    Some(Split::Test)
                } else if count >= 3 && sample + 2 == count {
                    Some(Split::Val)
                } else {
                    Some(Split::Train)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDims {
    pub grid: usize,
    pub channels: usize,
    pub attributes: usize,
    pub tokens_per_phrase: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub dims: DatasetDims,
    pub vocab: usize,
    pub splits: SplitSpec,
    /// Record count, so a file cut at a line boundary is still detected.
    pub records: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    header: DatasetHeader,
    records: Vec<SampleRecord>,
    assignment: Vec<Option<Split>>,
}

impl Dataset {
    pub fn new(mut header: DatasetHeader, records: Vec<SampleRecord>) -> Result<Self> {
        header.records = records.len();
        let mut counts = std::collections::HashMap::new();
        for r in &records {
            *counts.entry((r.identity, r.modality())).or_insert(0usize) += 1;
        }
        let assignment = records
            .iter()
            .map(|r| header.splits.assign(r.identity, r.sample, counts[&(r.identity, r.modality())]))
            .collect();
        Ok(Dataset { header, records, assignment })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn record(&self, index: usize) -> &SampleRecord {
        &self.records[index]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split_of(&self, index: usize) -> Option<Split> {
        self.assignment[index]
    }

    /// Record indices of one modality within a split, in file order.
    pub fn split_records(&self, split: Split, modality: SampleModality) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.assignment[i] == Some(split) && self.records[i].modality() == modality)
            .collect()
    }

    /// Identities with at least one sample in `split`, ascending.
    pub fn split_identities(&self, split: Split) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.records.len())
            .filter(|&i| self.assignment[i] == Some(split))
            .map(|i| self.records[i].identity)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Unit colour for value `value` of attribute `attribute`: points of a
/// 2A-point Fibonacci sphere, the two values of an attribute half a turn of
/// the spiral apart. Channels beyond three repeat the pattern.
pub fn prototype(attribute: usize, value: u8, attributes: usize, channels: usize) -> Vec<f64> {
    let n = 2 * attributes;
    let i = attribute + attributes * value as usize;
    let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
    let r = (1.0 - z * z).max(0.0).sqrt();
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let theta = golden * i as f64;
    let p = [r * theta.cos(), r * theta.sin(), z];
    (0..channels).map(|c| p[c % 3]).collect()
}

/// Deterministic rendering of an attribute code at colour magnitude
/// `scale`, plus optional noise.
pub fn render_image(
    attrs: &[u8],
    grid: usize,
    channels: usize,
    scale: f64,
    noise_level: f64,
    rng: &mut Rng,
) -> Result<ImageGrid> {
    let a = attrs.len();
    let mut cells = Vec::with_capacity(grid * grid * channels);
    for k in 0..grid * grid {
        let attr = k % a;
        for v in prototype(attr, attrs[attr], a, channels) {
            let noise = if noise_level > 0.0 { noise_level * rng.normal() } else { 0.0 };
            cells.push((scale * v + noise) as f32);
        }
    }
    ImageGrid::new(grid, channels, cells)
}

fn render_text(attrs: &[u8], cfg: &DatasetConfig, rng: &mut Rng) -> Result<TokenSequence> {
    let mut order: Vec<usize> = (0..attrs.len()).collect();
    if cfg.permute_prob > 0.0 && rng.bernoulli(cfg.permute_prob) {
        rng.shuffle(&mut order);
    }
    let mut tokens = Vec::with_capacity(attrs.len() * TOKENS_PER_PHRASE);
    for a in order {
        let synonym = usize::from(cfg.synonym_prob > 0.0 && rng.bernoulli(cfg.synonym_prob));
        tokens.push(ATTRIBUTE_TOKEN_BASE + a);
        tokens.push(cfg.value_token_base() + (a * 2 + attrs[a] as usize) * 2 + synonym);
        tokens.push(CONNECTOR_TOKEN);
    }
    TokenSequence::new(tokens, cfg.vocab)
}

fn draw_codes(cfg: &DatasetConfig, rng: &mut Rng) -> Vec<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut codes = Vec::with_capacity(cfg.num_identities);
    while codes.len() < cfg.num_identities {
        let code: Vec<u8> = (0..cfg.attributes).map(|_| u8::from(rng.bernoulli(0.5))).collect();
        if seen.insert(code.clone()) {
            codes.push(code);
        }
    }
    codes
}

fn make_splits(cfg: &DatasetConfig, rng: &mut Rng) -> SplitSpec {
    let all: Vec<usize> = (0..cfg.num_identities).collect();
    match cfg.split_mode {
        SplitMode::SharedIdentity => SplitSpec {
            mode: cfg.split_mode,
            train: all.clone(),
            val: all.clone(),
            test: all,
            seed: cfg.seed,
        },
        SplitMode::DisjointIdentity => {
            let n = cfg.num_identities;
            let perm = rng.permutation(n);
            let n_val = (n / 5).max(1);
            let n_test = (n / 5).max(1);
            let n_train = n - n_val - n_test;
            let pick = |r: std::ops::Range<usize>| {
                let mut v: Vec<usize> = perm[r].to_vec();
                v.sort_unstable();
                v
            };
            SplitSpec {
                mode: cfg.split_mode,
                train: pick(0..n_train),
                val: pick(n_train..n_train + n_val),
                test: pick(n_train + n_val..n),
                seed: cfg.seed,
            }
        }
    }
}

/// Generates the corpus and its identities. Deterministic under `cfg.seed`.
pub fn generate(cfg: &DatasetConfig) -> Result<(Dataset, Vec<Identity>)> {
    cfg.validate()?;
    let mut rng = Rng::seeded(cfg.seed);
    let codes = draw_codes(cfg, &mut rng);
    let splits = make_splits(cfg, &mut rng);
    let mut records = Vec::with_capacity(cfg.num_identities * (cfg.images_per_id + cfg.sents_per_id));
    for (id, code) in codes.iter().enumerate() {
        for sample in 0..cfg.images_per_id {
            let img = render_image(code, cfg.grid, cfg.channels, cfg.signal_scale, cfg.noise_level, &mut rng)?;
            records.push(SampleRecord { identity: id, sample, payload: Payload::Image(img) });
        }
        for sample in 0..cfg.sents_per_id {
            let text = render_text(code, cfg, &mut rng)?;
            records.push(SampleRecord { identity: id, sample, payload: Payload::Text(text) });
        }
    }
    let header = DatasetHeader {
        version: FORMAT_VERSION,
        dims: DatasetDims {
            grid: cfg.grid,
            channels: cfg.channels,
            attributes: cfg.attributes,
            tokens_per_phrase: TOKENS_PER_PHRASE,
        },
        vocab: cfg.vocab,
        splits,
        records: records.len(),
    };
    let identities = codes
        .into_iter()
        .enumerate()
        .map(|(id, attributes)| Identity { id, attributes })
        .collect();
    Ok((Dataset::new(header, records)?, identities))
}

#[derive(Serialize, Deserialize)]
struct RecordLine<'a> {
    id: usize,
    modality: SampleModality,
    sample: usize,
    #[serde(borrow)]
    payload: &'a RawValue,
}

fn payload_json(p: &Payload) -> String {
    let parts: Vec<String> = match p {
        // Display of f32 is the shortest string that parses back to the same bits
        Payload::Image(g) => g.cells().iter().map(|v| format!("{v:?}")).collect(),
        Payload::Text(t) => t.tokens().iter().map(|v| v.to_string()).collect(),
    };
    format!("[{}]", parts.join(","))
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header = serde_json::to_string(&ds.header).map_err(|e| Error::Input(e.to_string()))?;
    writeln!(w, "{header}").map_err(io)?;
    for r in &ds.records {
        let payload = payload_json(&r.payload);
        let raw = RawValue::from_string(payload).map_err(|e| Error::Input(e.to_string()))?;
        let line = RecordLine {
            id: r.identity,
            modality: r.modality(),
            sample: r.sample,
            payload: &raw,
        };
        let s = serde_json::to_string(&line).map_err(|e| Error::Input(e.to_string()))?;
        writeln!(w, "{s}").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn parse_payload(raw: &str, modality: SampleModality, header: &DatasetHeader, line: usize) -> Result<Payload> {
    let perr = |msg: String| Error::Parse { line, msg };
    let inner = raw
        .trim()
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| perr("payload is not an array".into()))?;
    let items: Vec<&str> = if inner.trim().is_empty() {
        Vec::new()
    } else {
        inner.split(',').map(str::trim).collect()
    };
    match modality {
        SampleModality::Image => {
            let cells = items
                .iter()
                .map(|s| s.parse::<f32>().map_err(|e| perr(format!("bad float '{s}': {e}"))))
                .collect::<Result<Vec<f32>>>()?;
            let g = ImageGrid::new(header.dims.grid, header.dims.channels, cells).map_err(|e| perr(e.to_string()))?;
            Ok(Payload::Image(g))
        }
        SampleModality::Text => {
            let toks = items
                .iter()
                .map(|s| s.parse::<usize>().map_err(|e| perr(format!("bad token '{s}': {e}"))))
                .collect::<Result<Vec<usize>>>()?;
            let t = TokenSequence::new(toks, header.vocab).map_err(|e| perr(e.to_string()))?;
            Ok(Payload::Text(t))
        }
    }
}

pub fn load(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or(Error::Parse { line: 1, msg: "missing header line".into() })?
        .map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| Error::Parse { line: 1, msg: format!("bad header: {e}") })?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported dataset version {} (expected {FORMAT_VERSION})", header.version),
        });
    }
    let mut records = Vec::with_capacity(header.records);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        let payload = parse_payload(rec.payload.get(), rec.modality, &header, lineno)?;
        records.push(SampleRecord { identity: rec.id, sample: rec.sample, payload });
    }
    if records.len() != header.records {
        return Err(Error::Parse {
            line: records.len() + 2,
            msg: format!("expected {} records, found {} (truncated file?)", header.records, records.len()),
        });
    }
    Dataset::new(header, records)
}
