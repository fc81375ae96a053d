//! Two-stage protocol: stage-1 training and retrieval, top-K screening,
//! stage-2 training, reranking and metrics.

mod eval;
mod labels;
mod metrics;
mod report;
mod retrieval;
mod stage1;
mod stage2;

pub use eval::{evaluate, EvalOptions, EvalOutcome};
pub use labels::TrainLabels;
pub use metrics::{ap_at_k, topk_accuracy, DEFAULT_AP_CUTOFF};
pub use report::{write_loss_csv, write_reports, LossTrace, MetricReport};
pub use retrieval::{
    encode_images, encode_texts, image_to_text_retrieve, retrieve_stage1, screen_topk, Candidate, PassCounter,
    RankedList, RetrievalDirection,
};
pub use stage1::{init_buffers, train_stage1, Stage1Config, Stage1Model};
pub use stage2::{rerank, score_pairs, train_stage2, training_pairs, Stage2Config, Stage2Model};

use crate::error::Error;

/// Attaches a step index to numeric failures raised inside a training step.
pub(crate) fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("diverged at step {step}: {msg}")),
        other => other,
    }
}
