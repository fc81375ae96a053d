use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coattention::MatchPair;
use crate::dataset::Dataset;
use crate::encoders::{encode_image, encode_text, EncoderParams, RegionFeatureMap, WordFeatureSequence};
use crate::error::{Error, Result};
use crate::numcore::{dot, l2_normalized};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalDirection {
    TextToImage,
    ImageToText,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Gallery record index, or a class index for class-fused galleries.
    pub item: usize,
    pub identity: usize,
    pub score: f64,
}

/// Gallery candidates for one query, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query: usize,
    pub query_identity: usize,
    pub direction: RetrievalDirection,
    pub candidates: Vec<Candidate>,
}

impl RankedList {
    /// Sorts `candidates` by descending score; ties keep their given order.
    pub fn new(query: usize, query_identity: usize, direction: RetrievalDirection, mut candidates: Vec<Candidate>) -> Self {
        candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
        RankedList { query, query_identity, direction, candidates }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        self.candidates.windows(2).all(|w| w[0].score >= w[1].score)
    }

    pub fn hit_within(&self, k: usize) -> bool {
        self.candidates.iter().take(k).any(|c| c.identity == self.query_identity)
    }
}

/// Counts encoder forward passes or pair evaluations.
#[derive(Debug, Default)]
pub struct PassCounter(AtomicUsize);

impl PassCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }

    pub fn add(&self, n: usize) {
        self.0.fetch_add(n, Ordering::SeqCst);
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::SeqCst);
    }
}

pub fn encode_images<T: Scalar>(
    ds: &Dataset,
    records: &[usize],
    enc: &EncoderParams<T>,
    passes: &PassCounter,
) -> Result<Vec<RegionFeatureMap<T>>> {
    records
        .par_iter()
        .map(|&r| {
            let img = ds
                .record(r)
                .image()
                .ok_or_else(|| Error::Input(format!("record {r} is not an image")))?;
            passes.add(1);
            encode_image(img, enc)
        })
        .collect()
}

pub fn encode_texts<T: Scalar>(
    ds: &Dataset,
    records: &[usize],
    enc: &EncoderParams<T>,
    passes: &PassCounter,
) -> Result<Vec<WordFeatureSequence<T>>> {
    records
        .par_iter()
        .map(|&r| {
            let txt = ds
                .record(r)
                .text()
                .ok_or_else(|| Error::Input(format!("record {r} is not a sentence")))?;
            passes.add(1);
            encode_text(txt, enc)
        })
        .collect()
}

fn rank_all<T: Scalar>(
    query_ids: &[(usize, usize)],
    query_feats: &[Vec<T>],
    gallery: &[(usize, usize, Vec<T>)],
    direction: RetrievalDirection,
) -> Vec<RankedList> {
    query_ids
        .par_iter()
        .zip(query_feats)
        .map(|(&(q, qid), f)| {
            let cands = gallery
                .iter()
                .map(|(item, identity, g)| Candidate { item: *item, identity: *identity, score: dot(f, g).to_f64_lossy() })
                .collect();
            RankedList::new(q, qid, direction, cands)
        })
        .collect()
}

/// Text queries against an image gallery by inner product of independently
/// encoded features. Each record is encoded exactly once.
pub fn retrieve_stage1<T: Scalar>(
    ds: &Dataset,
    queries: &[usize],
    gallery: &[usize],
    enc: &EncoderParams<T>,
    passes: &PassCounter,
) -> Result<Vec<RankedList>> {
    if gallery.is_empty() {
        return Err(Error::Input("retrieval against an empty gallery".into()));
    }
    let q = encode_texts(ds, queries, enc, passes)?;
    let g = encode_images(ds, gallery, enc, passes)?;
    let query_ids: Vec<(usize, usize)> = queries.iter().map(|&r| (r, ds.record(r).identity)).collect();
    let query_feats: Vec<Vec<T>> = q.into_iter().map(|w| w.sentence).collect();
    let gal: Vec<(usize, usize, Vec<T>)> =
        gallery.iter().zip(g).map(|(&r, m)| (r, ds.record(r).identity, m.pooled)).collect();
    Ok(rank_all(&query_ids, &query_feats, &gal, RetrievalDirection::TextToImage))
}

/// Image queries against per-class fused sentence features: the mean of a
/// class's sentence features, renormalized.
pub fn image_to_text_retrieve<T: Scalar>(
    ds: &Dataset,
    image_queries: &[usize],
    sentence_gallery: &[usize],
    enc: &EncoderParams<T>,
    passes: &PassCounter,
) -> Result<Vec<RankedList>> {
    if sentence_gallery.is_empty() {
        return Err(Error::Input("retrieval against an empty gallery".into()));
    }
    let q = encode_images(ds, image_queries, enc, passes)?;
    let s = encode_texts(ds, sentence_gallery, enc, passes)?;
    let mut fused: BTreeMap<usize, (Vec<T>, usize)> = BTreeMap::new();
    for (&r, w) in sentence_gallery.iter().zip(&s) {
        let e = fused.entry(ds.record(r).identity).or_insert_with(|| (vec![T::zero(); w.sentence.len()], 0));
        for (a, &b) in e.0.iter_mut().zip(&w.sentence) {
            *a += b;
        }
        e.1 += 1;
    }
    for &r in image_queries {
        let id = ds.record(r).identity;
        if !fused.contains_key(&id) {
            return Err(Error::Dataset(format!("class {id} has no sentences in the gallery")));
        }
    }
    let gal = fused
        .into_iter()
        .map(|(id, (sum, n))| {
            let inv = T::one() / T::of_usize(n);
            let mean: Vec<T> = sum.into_iter().map(|v| v * inv).collect();
            Ok((id, id, l2_normalized(&mean)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let query_ids: Vec<(usize, usize)> = image_queries.iter().map(|&r| (r, ds.record(r).identity)).collect();
    let query_feats: Vec<Vec<T>> = q.into_iter().map(|m| m.pooled).collect();
    Ok(rank_all(&query_ids, &query_feats, &gal, RetrievalDirection::ImageToText))
}

/// The first `k` candidates of each list as labeled pairs.
pub fn screen_topk(lists: &[RankedList], k: usize) -> Result<Vec<MatchPair>> {
    if k == 0 {
        return Err(Error::Config("screening needs K ≥ 1".into()));
    }
    let mut pairs = Vec::with_capacity(lists.len() * k);
    for l in lists {
        if k > l.len() {
            return Err(Error::Config(format!("screening K = {k} exceeds gallery size {}", l.len())));
        }
        for c in &l.candidates[..k] {
            let (desc, desc_id, img, img_id) = match l.direction {
                RetrievalDirection::TextToImage => (l.query, l.query_identity, c.item, c.identity),
                RetrievalDirection::ImageToText => (c.item, c.identity, l.query, l.query_identity),
            };
            let mut p = MatchPair::labeled(desc, img, desc_id, img_id);
            p.confidence = c.score;
            pairs.push(p);
        }
    }
    Ok(pairs)
}
