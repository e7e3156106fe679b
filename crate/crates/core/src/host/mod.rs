//! Host application: dataset loading, session orchestration and evaluation.
//!
//! The host never addresses a target directly. It publishes a config and
//! frames to session topics and collects whatever results come back on the
//! session's result topics, so adding a target needs no host code.

mod dataset;
mod evaluator;
mod orchestrator;
mod session;

pub use dataset::{
    ground_truth_from_coco, load_dataset, load_ground_truth, write_bgr_image, CocoAnnotation, CocoCategory, CocoFile,
    CocoImage, Dataset, DatasetError, FrameEntry, ImageSource,
};
pub use evaluator::{
    AccuracyEvaluator, DuplicateEvaluator, EvaluationContext, EvaluatorPlugin, EvaluatorRegistry, PowerEvaluator,
    PowerInput, ReportFragment, TargetReport, TimingEvaluator, TimingFragment,
};
pub use orchestrator::{run_session, SessionOptions, SessionOutcome, SessionStats};
pub use session::{Collected, ResultKey, ResultStore, Session, SessionError, SessionState, StoredResult};
