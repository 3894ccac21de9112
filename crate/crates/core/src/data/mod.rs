//! Dataset ingestion, synthetic degradation, frame extraction and batching.

mod annotations;
mod batch;
mod degrade;
mod frames;
pub mod synth;

pub use annotations::{load_annotations, parse_annotations, write_annotations, AnnotatedObject, Annotation, ClassVocab};
pub use batch::{batch_iterator, epoch_batches};
pub use degrade::{degrade, DegradationParams};
pub use frames::{extract_frames, write_gif};
