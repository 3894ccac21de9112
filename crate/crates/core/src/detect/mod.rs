//! Single-shot multi-scale detection: default boxes, matching, the composite loss,
//! NMS, the network itself and its training loop.

mod anchors;
mod boxes;
mod loss;
mod matching;
mod model;
mod nms;
mod train;

pub use anchors::{build_default_boxes, map_scale, AnchorOrigin, AnchorSet, MapSpec, ASPECT_LADDER};
pub use boxes::{decode_box, encode_box, BoundingBox, Detection};
pub use loss::{detection_loss, LossOutput, Predictions};
pub use matching::{match_anchors, DetectionTargets, MatchResult};
pub use model::{decode_predictions, detect, detect_cascade, Detector, DetectorArch, DetectorGrads, DetectorTape, NMS_IOU, TOP_K};
pub use nms::nms;
pub use train::{
    dataset_loss, ground_truth, prepare_examples, train_detector, DetectorEpoch, DetectorInit, DetectorLossRecord,
    DetectorRun, DetectorTrainConfig, PreparedExample,
};
