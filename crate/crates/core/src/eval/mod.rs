//! Recognition-side evaluations.

mod blind;
mod dense;
mod metrics;
mod report;
mod zeroshot;

pub use blind::{blind_pair_accuracy, pair_correct, score_matrices, BlindPairResult, FamilyScore};
pub use dense::{
    dense_miou, dense_miou_objects, dense_segment, label_patches, DenseVariant, SegPrediction,
};
pub use metrics::{argmax, cosine, dot, miou, recall_at_k, similarity};
pub use report::{
    render_report, MetricKind, MetricRecord, Report, CSV_HEADER, REPORT_SCHEMA_VERSION,
};
pub use zeroshot::{classify_embeddings, retrieval_at_k, shape_prompts, zeroshot_classify};
