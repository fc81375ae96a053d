use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmce::{cmce_gradients, cmce_loss, update_buffer, CmceConfig, FeatureBuffer, Modality, Sample};
use crate::dataset::Dataset;
use crate::encoders::{encode_image_on, encode_text_on, EncoderDims, EncoderParams, TEXT_BLOCKS};
use crate::error::{Error, Result};
use crate::numcore::{accumulate_grads, collect_grads, Adam, DenseArray, Optimizer, ParamSet, Rng, SgdMomentum, Tape, Var};
use crate::pipeline::labels::TrainLabels;
use crate::pipeline::report::LossTrace;
use crate::pipeline::retrieval::{encode_images, encode_texts, PassCounter};
use crate::pipeline::at_step;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub epochs: usize,
    /// Adam step for the text encoder.
    pub lr_text: f64,
    /// SGD step for the grid encoder.
    pub lr_image: f64,
    pub momentum: f64,
    pub cmce: CmceConfig,
    /// Vocabulary, grid and channel counts are taken from the dataset.
    pub encoder: EncoderDims,
    pub no_id: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 30,
            lr_text: 2e-3,
            lr_image: 2e-3,
            momentum: 0.9,
            cmce: CmceConfig::default(),
            encoder: EncoderDims::default(),
            no_id: false,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("stage-1 needs at least one epoch".into()));
        }
        if !(self.lr_text > 0.0 && self.lr_image > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Encoders plus the two feature buffers. Buffer row `j` belongs to
/// training class `j`; `class_identity` maps classes back to identities.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Model<T> {
    pub encoder: EncoderParams<T>,
    pub textual: FeatureBuffer<T>,
    pub visual: FeatureBuffer<T>,
    pub class_identity: Vec<usize>,
    pub no_id: bool,
}

/// Encoder dimensions with the data-dependent fields taken from `ds`.
pub(crate) fn dims_for(ds: &Dataset, base: EncoderDims) -> EncoderDims {
    let h = ds.header();
    EncoderDims { vocab: h.vocab, grid: h.dims.grid, channels: h.dims.channels, ..base }
}

/// Buffers whose rows are the renormalized means of each class's encoded
/// training samples, textual first.
pub fn init_buffers<T: Scalar>(
    ds: &Dataset,
    labels: &TrainLabels,
    enc: &EncoderParams<T>,
    renormalize: bool,
) -> Result<(FeatureBuffer<T>, FeatureBuffer<T>)> {
    let passes = PassCounter::new();
    let img_recs = labels.image_records();
    let txt_recs = labels.text_records();
    let imgs = encode_images(ds, &img_recs, enc, &passes)?;
    let txts = encode_texts(ds, &txt_recs, enc, &passes)?;
    let class = |r: usize| labels.class_of(r).expect("labelled record");
    let vis: Vec<(usize, Vec<T>)> = img_recs.iter().zip(imgs).map(|(&r, m)| (class(r), m.pooled)).collect();
    let txt: Vec<(usize, Vec<T>)> = txt_recs.iter().zip(txts).map(|(&r, w)| (class(r), w.sentence)).collect();
    let d = enc.dims.joint;
    let n = labels.classes();
    Ok((
        FeatureBuffer::from_samples(Modality::Textual, n, d, &txt, renormalize)?,
        FeatureBuffer::from_samples(Modality::Visual, n, d, &vis, renormalize)?,
    ))
}

struct Forward<T> {
    tape: Tape<T>,
    vars: Vec<Var>,
    feature: Var,
    value: Vec<T>,
}

fn forward<T: Scalar>(ds: &Dataset, record: usize, enc: &EncoderParams<T>) -> Result<Forward<T>> {
    let mut tape = Tape::new();
    let b = enc.bind(&mut tape);
    let r = ds.record(record);
    let feature = match (r.image(), r.text()) {
        (Some(img), _) => encode_image_on(&mut tape, &b, img)?.pooled,
        (_, Some(txt)) => encode_text_on(&mut tape, &b, txt)?.sentence,
        _ => unreachable!("record has a payload"),
    };
    let value = tape.value(feature).values().to_vec();
    Ok(Forward { tape, vars: b.vars, feature, value })
}

fn backward<T: Scalar>(f: &Forward<T>, grad: &[T]) -> Result<Vec<DenseArray<T>>> {
    let g = f.tape.backward_seeded(&[(f.feature, grad.to_vec())])?;
    Ok(collect_grads(&g, &f.vars))
}

/// Trains both encoders with the CMCE loss against the feature buffers.
///
/// Each step draws `n` distinct classes and one image and one sentence of
/// each, computes the loss against the buffers as they stand, steps the
/// encoders with the closed-form feature gradients, then blends the step's
/// features into the buffers.
pub fn train_stage1<T: Scalar>(ds: &Dataset, cfg: &Stage1Config, seed: u64) -> Result<(Stage1Model<T>, LossTrace)> {
    cfg.validate()?;
    let labels = TrainLabels::build(ds, cfg.no_id)?;
    let classes = labels.classes();
    let mut cmce = cfg.cmce;
    cmce.batch_identities = cmce.batch_identities.min(classes);
    cmce.validate(classes)?;

    let root = Rng::seeded(seed);
    let mut enc = EncoderParams::<T>::init(dims_for(ds, cfg.encoder), &mut root.fork(1));
    let (mut textual, mut visual) = init_buffers(ds, &labels, &enc, cmce.renormalize)?;
    let mut rng = root.fork(2);
    let mut adam = Adam::new(T::of(cfg.lr_text));
    let mut sgd = SgdMomentum::new(T::of(cfg.lr_image), T::of(cfg.momentum));
    let mut trace = LossTrace::default();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let order = rng.permutation(classes);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cmce.batch_identities) {
            let picks: Vec<(usize, usize, usize)> = chunk
                .iter()
                .map(|&c| {
                    let i = labels.images[c][rng.below(labels.images[c].len())];
                    let t = labels.texts[c][rng.below(labels.texts[c].len())];
                    (c, i, t)
                })
                .collect();
            let records: Vec<usize> = picks.iter().flat_map(|&(_, i, t)| [i, t]).collect();
            let fwd = records
                .par_iter()
                .map(|&r| forward(ds, r, &enc))
                .collect::<Result<Vec<_>>>()
                .map_err(at_step(step))?;
            let batch_v: Vec<Sample<T>> =
                picks.iter().enumerate().map(|(k, p)| Sample::new(fwd[2 * k].value.clone(), p.0)).collect();
            let batch_s: Vec<Sample<T>> =
                picks.iter().enumerate().map(|(k, p)| Sample::new(fwd[2 * k + 1].value.clone(), p.0)).collect();
            let loss = cmce_loss(&batch_v, &batch_s, &textual, &visual, &cmce)?.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("stage-1 loss diverged at step {step}")));
            }
            let grads = cmce_gradients(&batch_v, &batch_s, &textual, &visual, &cmce)?;
            let feature_grads: Vec<&Vec<T>> =
                (0..picks.len()).flat_map(|k| [&grads.visual[k], &grads.textual[k]]).collect();
            let per_sample = fwd
                .par_iter()
                .zip(feature_grads)
                .map(|(f, g)| backward(f, g))
                .collect::<Result<Vec<_>>>()
                .map_err(at_step(step))?;
            let mut total = enc.zero_grads();
            for g in &per_sample {
                accumulate_grads(&mut total, g);
            }
            {
                let mut arrays = enc.arrays_mut();
                let (text, image) = arrays.split_at_mut(TEXT_BLOCKS);
                adam.step(text, &total[..TEXT_BLOCKS]).map_err(at_step(step))?;
                sgd.step(image, &total[TEXT_BLOCKS..]).map_err(at_step(step))?;
            }
            for (v, s) in batch_v.iter().zip(&batch_s) {
                update_buffer(&mut visual, v.identity, &v.feature, cmce.alpha)?;
                update_buffer(&mut textual, s.identity, &s.feature, cmce.alpha)?;
            }
            trace.steps.push(loss);
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        let mean = epoch_loss / batches as f64;
        trace.epoch_means.push(mean);
        debug!("stage-1 epoch {epoch}: mean loss {mean:.5}");
    }
    info!("stage-1 finished after {step} steps, final epoch loss {:.5}", trace.epoch_means.last().copied().unwrap_or(0.0));
    Ok((
        Stage1Model { encoder: enc, textual, visual, class_identity: labels.class_identity, no_id: cfg.no_id },
        trace,
    ))
}
