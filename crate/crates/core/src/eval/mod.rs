//! Detection and fidelity metrics, and the baseline-versus-cascade comparison.

mod compare;
mod metrics;

pub use compare::{compare_pipelines, Comparison, ImageRecall, Thresholds};
pub use metrics::{
    average_precision, iou, mean_average_precision, psnr, recall, EvalReport, Fingerprint, GroundTruth,
    ImageDetection, PsnrStats, PSNR_PEAK,
};
