use std::collections::HashMap;

use crate::dataset::{Dataset, SampleModality, Split};
use crate::error::{Error, Result};

/// Training classes over the train split.
///
/// Normally one class per identity. With identity labels dropped, the
/// samples of an identity are split into pseudo-identities: the `j`-th image
/// and the `j`-th sentence (both modulo the smaller of the two counts) form
/// one class.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLabels {
    pub class_identity: Vec<usize>,
    pub images: Vec<Vec<usize>>,
    pub texts: Vec<Vec<usize>>,
    record_class: HashMap<usize, usize>,
}

impl TrainLabels {
    pub fn build(ds: &Dataset, no_id: bool) -> Result<Self> {
        let identities = ds.split_identities(Split::Train);
        if identities.is_empty() {
            return Err(Error::Dataset("train split is empty".into()));
        }
        let mut per_id: HashMap<usize, (Vec<usize>, Vec<usize>)> = HashMap::new();
        for m in [SampleModality::Image, SampleModality::Text] {
            for r in ds.split_records(Split::Train, m) {
                let e = per_id.entry(ds.record(r).identity).or_default();
                match m {
                    SampleModality::Image => e.0.push(r),
                    SampleModality::Text => e.1.push(r),
                }
            }
        }
        let mut labels = TrainLabels {
            class_identity: Vec::new(),
            images: Vec::new(),
            texts: Vec::new(),
            record_class: HashMap::new(),
        };
        for id in identities {
            let (mut imgs, mut txts) = per_id.remove(&id).unwrap_or_default();
            if imgs.is_empty() || txts.is_empty() {
                return Err(Error::Dataset(format!(
                    "identity {id} needs at least one training image and one training sentence"
                )));
            }
            imgs.sort_by_key(|&r| ds.record(r).sample);
            txts.sort_by_key(|&r| ds.record(r).sample);
            let groups = if no_id { imgs.len().min(txts.len()) } else { 1 };
            let base = labels.class_identity.len();
            for _ in 0..groups {
                labels.class_identity.push(id);
                labels.images.push(Vec::new());
                labels.texts.push(Vec::new());
            }
            for (p, &r) in imgs.iter().enumerate() {
                labels.images[base + p % groups].push(r);
                labels.record_class.insert(r, base + p % groups);
            }
            for (p, &r) in txts.iter().enumerate() {
                labels.texts[base + p % groups].push(r);
                labels.record_class.insert(r, base + p % groups);
            }
        }
        Ok(labels)
    }

    pub fn classes(&self) -> usize {
        self.class_identity.len()
    }

    pub fn class_of(&self, record: usize) -> Option<usize> {
        self.record_class.get(&record).copied()
    }

    pub fn image_records(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.images.iter().flatten().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn text_records(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.texts.iter().flatten().copied().collect();
        v.sort_unstable();
        v
    }
}
