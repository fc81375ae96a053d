use std::collections::BTreeMap;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coattention::{
    joint_confidence_on, pair_confidence_on, CoattentionDims, MatchPair, MatchingNetwork, Stage2Variant,
};
use crate::dataset::Dataset;
use crate::encoders::{EncoderDims, EncoderParams, RegionFeatureMap, WordFeatureSequence, TEXT_BLOCKS};
use crate::error::{Error, Result};
use crate::numcore::{
    accumulate_grads, collect_grads, scale_grads, Adam, DenseArray, Optimizer, ParamSet, Rng, SgdMomentum, Tape,
};
use crate::pipeline::at_step;
use crate::pipeline::labels::TrainLabels;
use crate::pipeline::report::LossTrace;
use crate::pipeline::retrieval::{
    encode_images, encode_texts, retrieve_stage1, screen_topk, PassCounter, RankedList, RetrievalDirection,
};
use crate::pipeline::stage1::{dims_for, Stage1Model};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    /// Epochs with the encoders frozen.
    pub phase1_epochs: usize,
    /// Epochs of joint fine-tuning.
    pub phase2_epochs: usize,
    /// Adam step for attention and decoder.
    pub lr: f64,
    /// Adam step for the text encoder during joint training.
    pub lr_text: f64,
    /// SGD step for the grid encoder.
    pub lr_image: f64,
    pub momentum: f64,
    pub batch_pairs: usize,
    /// Negatives drawn per positive pair in each epoch.
    pub negatives_per_positive: usize,
    pub k_screen: usize,
    pub attention: usize,
    pub importance: usize,
    pub fc: usize,
    pub decoder: usize,
    pub steps: usize,
    pub variant: Stage2Variant,
    pub no_stage1: bool,
    pub no_id: bool,
    /// Encoder shape when no stage-1 model is used.
    pub encoder: EncoderDims,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            phase1_epochs: 40,
            phase2_epochs: 60,
            lr: 1e-3,
            lr_text: 3e-3,
            lr_image: 1e-4,
            momentum: 0.9,
            batch_pairs: 4,
            negatives_per_positive: 3,
            k_screen: 20,
            attention: 32,
            importance: 32,
            fc: 32,
            decoder: 32,
            steps: 5,
            variant: Stage2Variant::default(),
            no_stage1: false,
            no_id: false,
            encoder: EncoderDims::default(),
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.k_screen == 0 {
            return Err(Error::Config("k_screen must be at least 1".into()));
        }
        if self.batch_pairs == 0 {
            return Err(Error::Config("batch_pairs must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("decoder steps must be at least 1".into()));
        }
        if self.phase1_epochs + self.phase2_epochs == 0 {
            return Err(Error::Config("stage-2 needs at least one epoch".into()));
        }
        if !(self.lr > 0.0 && self.lr_text > 0.0 && self.lr_image > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }

    pub fn dims(&self, enc: &EncoderDims) -> CoattentionDims {
        CoattentionDims {
            region: enc.region,
            hidden: enc.hidden,
            attention: self.attention,
            importance: self.importance,
            fc: self.fc,
            decoder: self.decoder,
            steps: self.steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Model<T> {
    pub net: MatchingNetwork<T>,
    pub no_stage1: bool,
    pub no_id: bool,
}

impl<T: Scalar> Stage2Model<T> {
    /// Variant name, e.g. `full`, `no-sma-spa-no-stage1`.
    pub fn tag(&self) -> String {
        let mut t = self.net.variant.tag().to_string();
        if self.no_stage1 {
            t.push_str("-no-stage1");
        }
        if self.no_id {
            t.push_str("-no-id");
        }
        t
    }
}

/// Stage-2 training pairs over the train split, labelled by training class.
///
/// With a stage-1 encoder every training sentence is paired with its top-K
/// training images; without one, every (sentence, image) pair is used.
pub fn training_pairs<T: Scalar>(
    ds: &Dataset,
    labels: &TrainLabels,
    stage1: Option<&EncoderParams<T>>,
    k: usize,
) -> Result<Vec<MatchPair>> {
    let texts = labels.text_records();
    let images = labels.image_records();
    let class = |r: usize| labels.class_of(r).expect("labelled record");
    match stage1 {
        Some(enc) => {
            let mut lists = retrieve_stage1(ds, &texts, &images, enc, &PassCounter::new())?;
            for l in &mut lists {
                l.query_identity = class(l.query);
                for c in &mut l.candidates {
                    c.identity = class(c.item);
                }
            }
            screen_topk(&lists, k.min(images.len()))
        }
        None => Ok(texts
            .iter()
            .flat_map(|&t| images.iter().map(move |&i| (t, i)))
            .map(|(t, i)| MatchPair::labeled(t, i, class(t), class(i)))
            .collect()),
    }
}

/// One epoch of pair indices: every positive once, each followed by
/// `ratio` negatives drawn uniformly with replacement.
fn epoch_pairs(pos: &[usize], neg: &[usize], ratio: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order = pos.to_vec();
    rng.shuffle(&mut order);
    let mut out = Vec::with_capacity(order.len() * (1 + ratio));
    for p in order {
        out.push(p);
        if !neg.is_empty() {
            for _ in 0..ratio {
                out.push(neg[rng.below(neg.len())]);
            }
        }
    }
    out
}

struct Cache<T> {
    texts: BTreeMap<usize, WordFeatureSequence<T>>,
    images: BTreeMap<usize, RegionFeatureMap<T>>,
}

fn encode_cache<T: Scalar>(ds: &Dataset, pairs: &[(usize, usize)], enc: &EncoderParams<T>) -> Result<Cache<T>> {
    let mut t: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let mut i: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    t.sort_unstable();
    t.dedup();
    i.sort_unstable();
    i.dedup();
    let passes = PassCounter::new();
    let tf = encode_texts(ds, &t, enc, &passes)?;
    let imf = encode_images(ds, &i, enc, &passes)?;
    Ok(Cache { texts: t.into_iter().zip(tf).collect(), images: i.into_iter().zip(imf).collect() })
}

fn verifier_grads<T: Scalar>(
    net: &MatchingNetwork<T>,
    states: &DenseArray<T>,
    regions: &DenseArray<T>,
    target: u8,
) -> Result<(f64, Vec<DenseArray<T>>)> {
    let mut tape = Tape::new();
    let (vars, v) = net.bind_verifier(&mut tape);
    let h = tape.leaf(states.clone());
    let r = tape.leaf(regions.clone());
    let c = joint_confidence_on(&mut tape, &v, h, r)?;
    let loss = tape.bce(c, T::of(target as f64))?;
    let g = tape.backward(loss)?;
    Ok((tape.scalar(loss).to_f64_lossy(), collect_grads(&g, &vars)))
}

fn full_grads<T: Scalar>(ds: &Dataset, net: &MatchingNetwork<T>, pair: &MatchPair) -> Result<(f64, Vec<DenseArray<T>>)> {
    let mut tape = Tape::new();
    let b = net.bind(&mut tape);
    let img = ds.record(pair.image).image().ok_or_else(|| Error::Input("pair image is not an image".into()))?;
    let txt = ds.record(pair.description).text().ok_or_else(|| Error::Input("pair text is not a sentence".into()))?;
    let c = pair_confidence_on(&mut tape, &b, img, txt)?;
    let loss = tape.bce(c, T::of(pair.target as f64))?;
    let g = tape.backward(loss)?;
    Ok((tape.scalar(loss).to_f64_lossy(), collect_grads(&g, &b.vars)))
}

/// Trains the pair verifier with binary cross-entropy: first the attention
/// and head with the encoders frozen, then everything jointly.
pub fn train_stage2<T: Scalar>(
    ds: &Dataset,
    stage1: Option<&Stage1Model<T>>,
    cfg: &Stage2Config,
    seed: u64,
) -> Result<(Stage2Model<T>, LossTrace)> {
    cfg.validate()?;
    let root = Rng::seeded(seed);
    let stage1 = if cfg.no_stage1 { None } else { stage1 };
    if !cfg.no_stage1 && stage1.is_none() {
        return Err(Error::Config("stage-2 training needs a stage-1 model unless no_stage1 is set".into()));
    }
    let labels = TrainLabels::build(ds, cfg.no_id)?;
    let encoder = match stage1 {
        Some(m) => m.encoder.clone(),
        None => EncoderParams::init(dims_for(ds, cfg.encoder), &mut root.fork(1)),
    };
    let pairs = training_pairs(ds, &labels, stage1.map(|m| &m.encoder), cfg.k_screen)?;
    let pos: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].target == 1).collect();
    let neg: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].target == 0).collect();
    if pos.is_empty() {
        return Err(Error::Dataset("stage-2 pair stream contains no positive pairs".into()));
    }
    info!("stage-2 training on {} positive and {} negative candidate pairs", pos.len(), neg.len());

    let dims = cfg.dims(&encoder.dims);
    let mut net = MatchingNetwork::new(encoder, dims, cfg.variant, &mut root.fork(3))?;
    let ne = net.encoder_blocks();
    let mut rng = root.fork(2);
    let mut adam_text = Adam::new(T::of(cfg.lr_text));
    let mut adam_head = Adam::new(T::of(cfg.lr));
    let mut sgd_image = SgdMomentum::new(T::of(cfg.lr_image), T::of(cfg.momentum));
    let mut trace = LossTrace::default();
    let mut step = 0;

    let cache = if cfg.phase1_epochs > 0 {
        let all: Vec<(usize, usize)> = pairs.iter().map(|p| (p.description, p.image)).collect();
        Some(encode_cache(ds, &all, &net.encoder)?)
    } else {
        None
    };

    for epoch in 0..cfg.phase1_epochs + cfg.phase2_epochs {
        let frozen = epoch < cfg.phase1_epochs;
        let order = epoch_pairs(&pos, &neg, cfg.negatives_per_positive, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_pairs) {
            let results: Vec<(f64, Vec<DenseArray<T>>)> = if frozen {
                let cache = cache.as_ref().expect("phase-1 cache");
                batch
                    .par_iter()
                    .map(|&i| {
                        let p = &pairs[i];
                        verifier_grads(&net, &cache.texts[&p.description].states, &cache.images[&p.image].regions, p.target)
                    })
                    .collect::<Result<_>>()
            } else {
                batch.par_iter().map(|&i| full_grads(ds, &net, &pairs[i])).collect::<Result<_>>()
            }
            .map_err(at_step(step))?;
            let mut total = if frozen { net.zero_grads().split_off(ne) } else { net.zero_grads() };
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                accumulate_grads(&mut total, g);
            }
            let inv = 1.0 / batch.len() as f64;
            loss *= inv;
            scale_grads(&mut total, T::of(inv));
            {
                let mut arrays = net.arrays_mut();
                let (enc_part, head) = arrays.split_at_mut(ne);
                if frozen {
                    adam_head.step(head, &total).map_err(at_step(step))?;
                } else {
                    let (text, image) = enc_part.split_at_mut(TEXT_BLOCKS);
                    adam_text.step(text, &total[..TEXT_BLOCKS]).map_err(at_step(step))?;
                    sgd_image.step(image, &total[TEXT_BLOCKS..ne]).map_err(at_step(step))?;
                    adam_head.step(head, &total[ne..]).map_err(at_step(step))?;
                }
            }
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("stage-2 loss diverged at step {step}")));
            }
            trace.steps.push(loss);
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        let mean = epoch_loss / batches.max(1) as f64;
        trace.epoch_means.push(mean);
        debug!("stage-2 epoch {epoch} ({}): mean BCE {mean:.5}", if frozen { "frozen" } else { "joint" });
    }
    info!("stage-2 finished after {step} steps, final epoch BCE {:.5}", trace.epoch_means.last().copied().unwrap_or(0.0));
    Ok((Stage2Model { net, no_stage1: cfg.no_stage1, no_id: cfg.no_id }, trace))
}

/// Matching confidences for (sentence record, image record) pairs. Each
/// record is encoded once; `pair_evals` counts verifier evaluations.
pub fn score_pairs<T: Scalar>(
    ds: &Dataset,
    model: &Stage2Model<T>,
    pairs: &[(usize, usize)],
    pair_evals: &PassCounter,
) -> Result<Vec<f64>> {
    let cache = encode_cache(ds, pairs, &model.net.encoder)?;
    pairs
        .par_iter()
        .map(|(t, i)| {
            pair_evals.add(1);
            Ok(model.net.confidence(&cache.texts[t].states, &cache.images[i].regions)?.to_f64_lossy())
        })
        .collect()
}

/// Rescores the first `k` candidates of each text-to-image list by stage-2
/// confidence and reorders that block (stable on ties); later candidates
/// keep their stage-1 order and scores.
pub fn rerank<T: Scalar>(
    ds: &Dataset,
    lists: &[RankedList],
    k: usize,
    model: &Stage2Model<T>,
    pair_evals: &PassCounter,
) -> Result<Vec<RankedList>> {
    if k == 0 {
        return Err(Error::Config("rerank needs K ≥ 1".into()));
    }
    let mut pairs = Vec::new();
    for l in lists {
        if l.direction != RetrievalDirection::TextToImage {
            return Err(Error::Input("stage-2 reranks text-to-image lists only".into()));
        }
        if k > l.len() {
            return Err(Error::Config(format!("rerank K = {k} exceeds list length {}", l.len())));
        }
        pairs.extend(l.candidates[..k].iter().map(|c| (l.query, c.item)));
    }
    let scores = score_pairs(ds, model, &pairs, pair_evals)?;
    Ok(lists
        .iter()
        .zip(scores.chunks(k))
        .map(|(l, s)| {
            let mut head: Vec<_> = l.candidates[..k].to_vec();
            for (c, &v) in head.iter_mut().zip(s) {
                c.score = v;
            }
            head.sort_by(|a, b| b.score.total_cmp(&a.score));
            head.extend_from_slice(&l.candidates[k..]);
            RankedList { candidates: head, ..l.clone() }
        })
        .collect())
}
