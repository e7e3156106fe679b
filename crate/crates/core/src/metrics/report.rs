use serde::{Deserialize, Serialize};

use super::{efficiency, relative_power, MapSummary, MetricsError, TimingSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSummary {
    pub absolute_w: f64,
    pub idle_w: f64,
    pub relative_w: f64,
    /// `None` when relative power is zero.
    pub efficiency_fps_per_w: Option<f64>,
    pub clamped: bool,
}

impl PowerSummary {
    /// Derives relative power and efficiency so the report invariants hold
    /// by construction.
    pub fn new(absolute_w: f64, idle_w: f64, fps: f64) -> Result<Self, MetricsError> {
        if !(idle_w.is_finite() && idle_w >= 0.0) {
            return Err(MetricsError::InvalidIdle(idle_w));
        }
        if !(absolute_w.is_finite() && absolute_w >= 0.0) {
            return Err(MetricsError::InvalidSample { index: 0, reason: format!("absolute power {absolute_w} W") });
        }
        let reading = relative_power(absolute_w, idle_w);
        Ok(PowerSummary {
            absolute_w,
            idle_w,
            relative_w: reading.relative_w,
            efficiency_fps_per_w: efficiency(fps, reading.relative_w).ok(),
            clamped: reading.clamped,
        })
    }
}

/// Per-target aggregate. Sections are absent when their evaluator did not
/// run or failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub target_id: String,
    pub run_count: u32,
    pub accuracy: Option<MapSummary>,
    pub timing: Option<TimingSummary>,
    pub power: Option<PowerSummary>,
}
