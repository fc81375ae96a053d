//! Checkpoint directories: `manifest.json` plus `params.bin`.
//!
//! The blob holds every array as little-endian `f32`, back to back, in
//! manifest order. Models computed in `f64` lose precision on save.

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cmce::{FeatureBuffer, Modality};
use crate::coattention::{CoattentionDims, MatchingNetwork, Stage2Variant};
use crate::encoders::{EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::numcore::{DenseArray, ParamSet, Rng};
use crate::pipeline::{Stage1Model, Stage2Model};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

/// Structural facts needed to rebuild a model before its arrays are filled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelLayout {
    Stage1 {
        encoder: EncoderDims,
        class_identity: Vec<usize>,
        textual_counts: Vec<usize>,
        visual_counts: Vec<usize>,
        renormalize: bool,
        no_id: bool,
    },
    Stage2 {
        encoder: EncoderDims,
        coattention: CoattentionDims,
        variant: Stage2Variant,
        no_stage1: bool,
        no_id: bool,
    },
    /// Arrays only, with no model attached.
    Bare,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub variant: String,
    /// Rendered run configuration.
    pub config: String,
    pub seed: u64,
    pub layout: ModelLayout,
    pub params: Vec<ParamEntry>,
}

/// Named `f32` arrays as stored on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub arrays: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl ParamStore {
    pub fn push<T: Scalar>(&mut self, name: &str, a: &DenseArray<T>) {
        let values = a.values().iter().map(|v| v.to_f32_lossy()).collect();
        self.arrays.push((name.to_string(), a.shape().to_vec(), values));
    }

    pub fn push_set<T: Scalar, P: ParamSet<T> + ?Sized>(&mut self, p: &P) {
        for (name, a) in p.named() {
            self.push(name, a);
        }
    }

    fn entries(&self) -> Vec<ParamEntry> {
        let mut offset = 0;
        self.arrays
            .iter()
            .map(|(name, shape, values)| {
                let e = ParamEntry { name: name.clone(), shape: shape.clone(), offset };
                offset += 4 * values.len();
                e
            })
            .collect()
    }

    fn blob(&self) -> Vec<u8> {
        self.arrays.iter().flat_map(|(_, _, v)| v.iter().flat_map(|x| x.to_le_bytes())).collect()
    }

    /// Splits `blob` by `entries`, which must tile it exactly.
    fn from_blob(entries: &[ParamEntry], blob: &[u8]) -> Result<Self> {
        let mut expected = 0;
        let mut arrays = Vec::with_capacity(entries.len());
        for e in entries {
            if e.offset != expected {
                return Err(Error::CorruptCheckpoint(format!(
                    "{} starts at byte {} but the previous array ends at {expected}",
                    e.name, e.offset
                )));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n;
            if end > blob.len() {
                return Err(Error::CorruptCheckpoint(format!(
                    "{} with shape {:?} runs past the {}-byte blob",
                    e.name,
                    e.shape,
                    blob.len()
                )));
            }
            let values =
                blob[e.offset..end].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            arrays.push((e.name.clone(), e.shape.clone(), values));
            expected = end;
        }
        if expected != blob.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "manifest covers {expected} bytes of a {}-byte blob",
                blob.len()
            )));
        }
        Ok(ParamStore { arrays })
    }

    /// Takes the next array, which must carry `name` and `shape`.
    fn take<T: Scalar>(&self, next: &mut usize, name: &str, shape: &[usize]) -> Result<DenseArray<T>> {
        let (n, s, v) = self
            .arrays
            .get(*next)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing array {name}")))?;
        if n != name || s != shape {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {name} {shape:?} at position {next}, found {n} {s:?}"
            )));
        }
        *next += 1;
        DenseArray::new(s.clone(), v.iter().map(|&x| T::of(x as f64)).collect())
            .map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}")))
    }

    fn fill<T: Scalar, P: ParamSet<T> + ?Sized>(&self, next: &mut usize, p: &mut P) -> Result<()> {
        for (name, a) in p.named_mut() {
            *a = self.take(next, name, a.shape())?;
        }
        Ok(())
    }

    fn finish(&self, next: usize) -> Result<()> {
        if next != self.arrays.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} unexpected trailing arrays",
                self.arrays.len() - next
            )));
        }
        Ok(())
    }
}

thread_local! {
    static READS: RefCell<Vec<PathBuf>> = const { RefCell::new(Vec::new()) };
}

/// Checkpoint directories read on this thread since the last call, oldest
/// first. Clears the log.
pub fn take_read_log() -> Vec<PathBuf> {
    READS.with(|r| std::mem::take(&mut *r.borrow_mut()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a checkpoint directory, creating it if needed.
pub fn write_checkpoint(
    dir: &Path,
    variant: &str,
    config: &str,
    seed: u64,
    layout: ModelLayout,
    store: &ParamStore,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        variant: variant.to_string(),
        config: config.to_string(),
        seed,
        layout,
        params: store.entries(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Input(e.to_string()))?;
    write_file(&dir.join(MANIFEST_FILE), (json + "\n").as_bytes())?;
    write_file(&dir.join(BLOB_FILE), &store.blob())
}

/// Reads and validates a checkpoint directory.
pub fn read_checkpoint(dir: &Path) -> Result<(Manifest, ParamStore)> {
    READS.with(|r| r.borrow_mut().push(dir.to_path_buf()));
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.is_file() {
        return Err(Error::CheckpointNotFound(dir.to_path_buf()));
    }
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::CorruptCheckpoint(format!("manifest: {e}")))?;
    let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found, expected: CHECKPOINT_VERSION });
    }
    let manifest: Manifest =
        serde_json::from_value(value).map_err(|e| Error::CorruptCheckpoint(format!("manifest: {e}")))?;
    let bpath = dir.join(BLOB_FILE);
    let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let store = ParamStore::from_blob(&manifest.params, &blob)?;
    Ok((manifest, store))
}

const TEXTUAL_BUFFER: &str = "buffer.textual";
const VISUAL_BUFFER: &str = "buffer.visual";

pub fn save_stage1<T: Scalar>(dir: &Path, model: &Stage1Model<T>, config: &str, seed: u64) -> Result<()> {
    let mut store = ParamStore::default();
    store.push_set(&model.encoder);
    store.push(TEXTUAL_BUFFER, model.textual.table());
    store.push(VISUAL_BUFFER, model.visual.table());
    let layout = ModelLayout::Stage1 {
        encoder: model.encoder.dims,
        class_identity: model.class_identity.clone(),
        textual_counts: model.textual.counts().to_vec(),
        visual_counts: model.visual.counts().to_vec(),
        renormalize: model.textual.renormalizes(),
        no_id: model.no_id,
    };
    let variant = if model.no_id { "stage1-no-id" } else { "stage1" };
    write_checkpoint(dir, variant, config, seed, layout, &store)
}

pub fn load_stage1<T: Scalar>(dir: &Path) -> Result<(Stage1Model<T>, Manifest)> {
    let (manifest, store) = read_checkpoint(dir)?;
    let ModelLayout::Stage1 { encoder, class_identity, textual_counts, visual_counts, renormalize, no_id } =
        manifest.layout.clone()
    else {
        return Err(Error::CorruptCheckpoint(format!("{} is not a stage-1 checkpoint", dir.display())));
    };
    let mut next = 0;
    let mut enc = EncoderParams::zeros(encoder);
    store.fill(&mut next, &mut enc)?;
    let rows = class_identity.len();
    let shape = [rows, encoder.joint];
    let mut textual = FeatureBuffer::new(Modality::Textual, store.take(&mut next, TEXTUAL_BUFFER, &shape)?, renormalize)?;
    let mut visual = FeatureBuffer::new(Modality::Visual, store.take(&mut next, VISUAL_BUFFER, &shape)?, renormalize)?;
    store.finish(next)?;
    textual.set_counts(textual_counts).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    visual.set_counts(visual_counts).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    Ok((Stage1Model { encoder: enc, textual, visual, class_identity, no_id }, manifest))
}

pub fn save_stage2<T: Scalar>(dir: &Path, model: &Stage2Model<T>, config: &str, seed: u64) -> Result<()> {
    let mut store = ParamStore::default();
    store.push_set(&model.net);
    let layout = ModelLayout::Stage2 {
        encoder: model.net.encoder.dims,
        coattention: model.net.dims,
        variant: model.net.variant,
        no_stage1: model.no_stage1,
        no_id: model.no_id,
    };
    write_checkpoint(dir, &model.tag(), config, seed, layout, &store)
}

pub fn load_stage2<T: Scalar>(dir: &Path) -> Result<(Stage2Model<T>, Manifest)> {
    let (manifest, store) = read_checkpoint(dir)?;
    let ModelLayout::Stage2 { encoder, coattention, variant, no_stage1, no_id } = manifest.layout.clone() else {
        return Err(Error::CorruptCheckpoint(format!("{} is not a stage-2 checkpoint", dir.display())));
    };
    let mut net = MatchingNetwork::new(EncoderParams::zeros(encoder), coattention, variant, &mut Rng::seeded(0))
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let mut next = 0;
    store.fill(&mut next, &mut net)?;
    store.finish(next)?;
    Ok((Stage2Model { net, no_stage1, no_id }, manifest))
}
