use log::warn;

use crate::dataset::{Dataset, SampleModality, Split};
use crate::error::{Error, Result};
use crate::pipeline::metrics::{ap_at_k, topk_accuracy, DEFAULT_AP_CUTOFF};
use crate::pipeline::report::MetricReport;
use crate::pipeline::retrieval::{image_to_text_retrieve, retrieve_stage1, Candidate, PassCounter, RankedList, RetrievalDirection};
use crate::pipeline::stage1::Stage1Model;
use crate::pipeline::stage2::{rerank, Stage2Model};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub split: Split,
    pub rerank_k: usize,
    pub ap_k: usize,
    /// Recorded in the reports.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { split: Split::Test, rerank_k: 20, ap_k: DEFAULT_AP_CUTOFF, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub reports: Vec<MetricReport>,
    pub stage1_lists: Option<Vec<RankedList>>,
    pub final_lists: Vec<RankedList>,
    pub encoder_passes: usize,
    pub pair_evaluations: usize,
}

fn retrieval_reports(lists: &[RankedList], variant: &str, opts: &EvalOptions, out: &mut Vec<MetricReport>) -> Result<()> {
    let gallery = lists[0].len();
    let mut push = |metric: String, value: f64| {
        out.push(MetricReport { metric, value, split: opts.split.to_string(), variant: variant.to_string(), seed: opts.seed })
    };
    push("top1".into(), topk_accuracy(lists, 1)?);
    if gallery >= 10 {
        push("top10".into(), topk_accuracy(lists, 10)?);
    }
    if gallery >= opts.ap_k {
        push(format!("ap@{}", opts.ap_k), ap_at_k(lists, opts.ap_k)?);
    } else {
        warn!("gallery of {gallery} is below the AP cutoff {}; AP not reported", opts.ap_k);
    }
    Ok(())
}

/// Text-to-image evaluation of stage 1, stage 2, or both on one split.
///
/// With both models, stage 2 reranks the first `rerank_k` stage-1
/// candidates. A stage-2 model trained without stage 1, or used alone,
/// scores every (query, gallery) pair.
pub fn evaluate<T: Scalar>(
    ds: &Dataset,
    stage1: Option<&Stage1Model<T>>,
    stage2: Option<&Stage2Model<T>>,
    opts: &EvalOptions,
) -> Result<EvalOutcome> {
    let queries = ds.split_records(opts.split, SampleModality::Text);
    let gallery = ds.split_records(opts.split, SampleModality::Image);
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Dataset(format!("split {} has no text queries or no gallery images", opts.split)));
    }
    if stage1.is_none() && stage2.is_none() {
        return Err(Error::Config("evaluation needs a stage-1 or a stage-2 model".into()));
    }
    let mut reports = Vec::new();
    let passes = PassCounter::new();
    let evals = PassCounter::new();
    let mut stage1_lists = None;
    if let Some(m) = stage1 {
        let lists = retrieve_stage1(ds, &queries, &gallery, &m.encoder, &passes)?;
        retrieval_reports(&lists, "stage1", opts, &mut reports)?;
        let i2t = image_to_text_retrieve(ds, &gallery, &queries, &m.encoder, &PassCounter::new())?;
        reports.push(MetricReport {
            metric: "i2t_top1".into(),
            value: topk_accuracy(&i2t, 1)?,
            split: opts.split.to_string(),
            variant: "stage1".into(),
            seed: opts.seed,
        });
        stage1_lists = Some(lists);
    }
    let final_lists = match stage2 {
        None => stage1_lists.clone().expect("stage-1 lists"),
        Some(m2) => {
            let (base, k) = match (&stage1_lists, m2.no_stage1) {
                (Some(l), false) => {
                    let k = opts.rerank_k.min(gallery.len());
                    if k < opts.rerank_k {
                        warn!("rerank K reduced from {} to the gallery size {k}", opts.rerank_k);
                    }
                    (l.clone(), k)
                }
                _ => {
                    let all: Vec<RankedList> = queries
                        .iter()
                        .map(|&q| {
                            let c = gallery
                                .iter()
                                .map(|&g| Candidate { item: g, identity: ds.record(g).identity, score: 0.0 })
                                .collect();
                            RankedList::new(q, ds.record(q).identity, RetrievalDirection::TextToImage, c)
                        })
                        .collect();
                    (all, gallery.len())
                }
            };
            let lists = rerank(ds, &base, k, m2, &evals)?;
            retrieval_reports(&lists, &m2.tag(), opts, &mut reports)?;
            lists
        }
    };
    Ok(EvalOutcome {
        reports,
        stage1_lists,
        final_lists,
        encoder_passes: passes.get(),
        pair_evaluations: evals.get(),
    })
}
