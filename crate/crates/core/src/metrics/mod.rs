//! Accuracy, latency, throughput and power measures.
//!
//! Everything here is pure computation over collected data.

mod accuracy;
mod power;
mod report;
mod timing;

pub use accuracy::{
    average_precision, group_ground_truth, map_50_95, match_detections, ClassMatches, FrameDetections,
    FrameGroundTruth, MapSummary, MatchLabel, IOU_THRESHOLDS, MAX_DETECTIONS_PER_FRAME,
};
pub use power::{efficiency, power_from_log, relative_power, PowerLog, PowerReading, PowerSample};
pub use report::{EvaluationReport, PowerSummary};
pub use timing::{aggregate_timing, TimingRecord, TimingSummary};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("ground truth set is empty; mAP is undefined")]
    NoGroundTruth,
    #[error("no timing records")]
    EmptyTiming,
    #[error("run {0} covers a different frame set than the first run")]
    MismatchedRuns(u32),
    #[error("mean total latency is zero; FPS is undefined")]
    ZeroLatency,
    #[error("invalid stage timing {0} ms")]
    InvalidTiming(f64),
    #[error("power window [{start}, {end}] is empty")]
    EmptyWindow { start: f64, end: f64 },
    #[error("no power samples inside window [{start}, {end}]")]
    NoSamplesInWindow { start: f64, end: f64 },
    #[error("invalid idle power {0} W")]
    InvalidIdle(f64),
    #[error("invalid power sample at row {index}: {reason}")]
    InvalidSample { index: usize, reason: String },
    #[error("relative power {0} W is not positive; efficiency is undefined")]
    NonPositivePower(f64),
    #[error("power log: {0}")]
    Csv(String),
}
