//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, unknown
//! keys are rejected, and [`RunConfig::render`] writes every key back out so
//! that a logged configuration reparses to the same run.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::dataset::{DatasetConfig, SplitMode};
use crate::error::{Error, Result};
use crate::pipeline::{Stage1Config, Stage2Config, DEFAULT_AP_CUTOFF};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("expected f32 or f64, got {other:?}")),
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub rerank_k: usize,
    pub ap_k: usize,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            rerank_k: 20,
            ap_k: DEFAULT_AP_CUTOFF,
            precision: Precision::F32,
        }
    }
}

type Getter = fn(&RunConfig) -> String;
type Setter = fn(&mut RunConfig, &str) -> std::result::Result<(), String>;

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse {v:?}: {e}"))
}

fn split_mode(v: &str) -> std::result::Result<SplitMode, String> {
    match v {
        "shared" => Ok(SplitMode::SharedIdentity),
        "disjoint" => Ok(SplitMode::DisjointIdentity),
        other => Err(format!("expected shared or disjoint, got {other:?}")),
    }
}

fn split_mode_name(m: SplitMode) -> String {
    match m {
        SplitMode::SharedIdentity => "shared".into(),
        SplitMode::DisjointIdentity => "disjoint".into(),
    }
}

macro_rules! field {
    ($key:literal, $($path:ident).+) => {
        (
            $key,
            (|c: &RunConfig| format!("{:?}", c.$($path).+)) as Getter,
            (|c: &mut RunConfig, v: &str| {
                c.$($path).+ = parse(v)?;
                Ok(())
            }) as Setter,
        )
    };
}

fn custom(key: &'static str, get: Getter, set: Setter) -> (&'static str, Getter, Setter) {
    (key, get, set)
}

/// Every recognised key in render order.
fn fields() -> Vec<(&'static str, Getter, Setter)> {
    vec![
        field!("num_identities", dataset.num_identities),
        field!("images_per_id", dataset.images_per_id),
        field!("sents_per_id", dataset.sents_per_id),
        field!("noise_level", dataset.noise_level),
        field!("signal_scale", dataset.signal_scale),
        field!("permute_prob", dataset.permute_prob),
        field!("synonym_prob", dataset.synonym_prob),
        field!("attributes", dataset.attributes),
        field!("grid", dataset.grid),
        field!("channels", dataset.channels),
        field!("vocab", dataset.vocab),
        custom(
            "split_mode",
            |c| split_mode_name(c.dataset.split_mode),
            |c, v| {
                c.dataset.split_mode = split_mode(v)?;
                Ok(())
            },
        ),
        field!("data_seed", dataset.seed),
        custom(
            "embed",
            |c| c.stage1.encoder.embed.to_string(),
            |c, v| {
                let n = parse(v)?;
                c.stage1.encoder.embed = n;
                c.stage2.encoder.embed = n;
                Ok(())
            },
        ),
        custom(
            "hidden",
            |c| c.stage1.encoder.hidden.to_string(),
            |c, v| {
                let n = parse(v)?;
                c.stage1.encoder.hidden = n;
                c.stage2.encoder.hidden = n;
                Ok(())
            },
        ),
        custom(
            "region",
            |c| c.stage1.encoder.region.to_string(),
            |c, v| {
                let n = parse(v)?;
                c.stage1.encoder.region = n;
                c.stage2.encoder.region = n;
                Ok(())
            },
        ),
        custom(
            "joint",
            |c| c.stage1.encoder.joint.to_string(),
            |c, v| {
                let n = parse(v)?;
                c.stage1.encoder.joint = n;
                c.stage2.encoder.joint = n;
                Ok(())
            },
        ),
        field!("stage1_epochs", stage1.epochs),
        field!("stage1_lr_text", stage1.lr_text),
        field!("stage1_lr_image", stage1.lr_image),
        field!("stage1_momentum", stage1.momentum),
        field!("batch_identities", stage1.cmce.batch_identities),
        field!("sigma_v", stage1.cmce.sigma_v),
        field!("sigma_s", stage1.cmce.sigma_s),
        field!("alpha", stage1.cmce.alpha),
        field!("renormalize", stage1.cmce.renormalize),
        field!("phase1_epochs", stage2.phase1_epochs),
        field!("phase2_epochs", stage2.phase2_epochs),
        field!("stage2_lr", stage2.lr),
        field!("stage2_lr_text", stage2.lr_text),
        field!("stage2_lr_image", stage2.lr_image),
        field!("stage2_momentum", stage2.momentum),
        field!("batch_pairs", stage2.batch_pairs),
        field!("negatives_per_positive", stage2.negatives_per_positive),
        field!("k_screen", stage2.k_screen),
        field!("attention", stage2.attention),
        field!("importance", stage2.importance),
        field!("fc", stage2.fc),
        field!("decoder", stage2.decoder),
        field!("steps", stage2.steps),
        field!("no_sma", stage2.variant.no_sma),
        field!("no_spa", stage2.variant.no_spa),
        field!("no_stage1", stage2.no_stage1),
        custom(
            "no_id",
            |c| c.stage1.no_id.to_string(),
            |c, v| {
                let b = parse(v)?;
                c.stage1.no_id = b;
                c.stage2.no_id = b;
                Ok(())
            },
        ),
        field!("rerank_k", rerank_k),
        field!("ap_k", ap_k),
        custom(
            "precision",
            |c| c.precision.to_string(),
            |c, v| {
                c.precision = parse(v)?;
                Ok(())
            },
        ),
    ]
}

impl RunConfig {
    pub fn keys() -> Vec<&'static str> {
        fields().into_iter().map(|f| f.0).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table = fields();
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Parse { line, msg: format!("expected key = value, got {content:?}") })?;
            let (key, value) = (key.trim(), value.trim());
            let (_, _, set) = table
                .iter()
                .find(|f| f.0 == key)
                .ok_or_else(|| Error::Parse { line, msg: format!("unknown key {key:?}") })?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse { line, msg: format!("key {key:?} given twice") });
            }
            set(&mut cfg, value).map_err(|msg| Error::Parse { line, msg: format!("{key}: {msg}") })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its resolved value, one per line.
    pub fn render(&self) -> String {
        fields().iter().map(|(k, get, _)| format!("{k} = {}\n", get(self))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.rerank_k == 0 {
            return Err(Error::Config("rerank_k must be at least 1".into()));
        }
        if self.ap_k == 0 {
            return Err(Error::Config("ap_k must be at least 1".into()));
        }
        Ok(())
    }
}
