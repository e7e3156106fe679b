use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::session::ResultStore;
use crate::metrics::{
    aggregate_timing, map_50_95, power_from_log, FrameDetections, MapSummary, MetricsError, PowerLog, PowerSummary,
    TimingRecord, TimingSummary,
};
use crate::protocol::SessionConfig;

/// Power measurement for one target: a log aligned to the session epoch and
/// the device's idle draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerInput {
    pub log: PowerLog,
    pub idle_w: f64,
}

/// Read-only view an evaluator gets of one target's session data.
pub struct EvaluationContext<'a> {
    pub config: &'a SessionConfig,
    pub target_id: &'a str,
    pub dataset: &'a Dataset,
    pub results: &'a ResultStore,
    /// Per run, `[first frame published, last result received]` in seconds
    /// since the session epoch.
    pub run_windows: &'a [(f64, f64)],
    pub power: Option<&'a PowerInput>,
}

impl EvaluationContext<'_> {
    pub fn timing_records(&self) -> Result<Vec<TimingRecord>, MetricsError> {
        self.results
            .for_target(self.target_id)
            .map(|(k, r)| TimingRecord::new(k.run, k.frame_id, r.pre_ms, r.infer_ms, r.post_ms))
            .collect()
    }

    /// Detections of run 1, keyed by frame.
    pub fn first_run_detections(&self) -> FrameDetections {
        self.results.for_run(self.target_id, 1).map(|r| (r.frame_id, r.detections.clone())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingFragment {
    pub summary: TimingSummary,
    pub records: Vec<TimingRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFragment {
    Accuracy(MapSummary),
    Timing(TimingFragment),
    Power(PowerSummary),
    Custom(serde_json::Value),
}

/// Host-side consumer of collected results.
pub trait EvaluatorPlugin: Send + Sync {
    fn name(&self) -> &str;

    fn evaluate(&self, ctx: &EvaluationContext<'_>) -> Result<ReportFragment, String>;
}

/// mAP 0.5:0.95 over run 1.
pub struct AccuracyEvaluator;

impl EvaluatorPlugin for AccuracyEvaluator {
    fn name(&self) -> &str {
        "accuracy"
    }

    fn evaluate(&self, ctx: &EvaluationContext<'_>) -> Result<ReportFragment, String> {
        let summary = map_50_95(&ctx.first_run_detections(), ctx.dataset.annotations()).map_err(|e| e.to_string())?;
        Ok(ReportFragment::Accuracy(summary))
    }
}

/// Stage means over every run, with the per-frame records.
pub struct TimingEvaluator;

impl EvaluatorPlugin for TimingEvaluator {
    fn name(&self) -> &str {
        "timing"
    }

    fn evaluate(&self, ctx: &EvaluationContext<'_>) -> Result<ReportFragment, String> {
        let records = ctx.timing_records().map_err(|e| e.to_string())?;
        let summary = aggregate_timing(&records).map_err(|e| e.to_string())?;
        Ok(ReportFragment::Timing(TimingFragment { summary, records }))
    }
}

/// Mean absolute draw per run window, averaged over runs; relative power and
/// efficiency follow.
pub struct PowerEvaluator;

impl EvaluatorPlugin for PowerEvaluator {
    fn name(&self) -> &str {
        "power"
    }

    fn evaluate(&self, ctx: &EvaluationContext<'_>) -> Result<ReportFragment, String> {
        let power = ctx.power.ok_or_else(|| format!("no power log for target {:?}", ctx.target_id))?;
        if ctx.run_windows.is_empty() {
            return Err("no run windows recorded".into());
        }
        let mut absolute = 0.0;
        for (i, &window) in ctx.run_windows.iter().enumerate() {
            let reading =
                power_from_log(&power.log, window, power.idle_w).map_err(|e| format!("run {}: {e}", i + 1))?;
            absolute += reading.absolute_w;
        }
        absolute /= ctx.run_windows.len() as f64;
        let records = ctx.timing_records().map_err(|e| e.to_string())?;
        let fps = aggregate_timing(&records).map_err(|e| e.to_string())?.fps;
        let summary = PowerSummary::new(absolute, power.idle_w, fps).map_err(|e| e.to_string())?;
        Ok(ReportFragment::Power(summary))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("an evaluator named {0:?} is already registered")]
pub struct DuplicateEvaluator(pub String);

/// Evaluators in registration order.
pub struct EvaluatorRegistry {
    evaluators: Vec<Box<dyn EvaluatorPlugin>>,
}

impl EvaluatorRegistry {
    pub fn empty() -> Self {
        EvaluatorRegistry { evaluators: Vec::new() }
    }

    /// accuracy, timing and power.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        for e in [
            Box::new(AccuracyEvaluator) as Box<dyn EvaluatorPlugin>,
            Box::new(TimingEvaluator),
            Box::new(PowerEvaluator),
        ] {
            r.register(e).expect("built-in names are distinct");
        }
        r
    }

    pub fn register(&mut self, evaluator: Box<dyn EvaluatorPlugin>) -> Result<(), DuplicateEvaluator> {
        if self.evaluators.iter().any(|e| e.name() == evaluator.name()) {
            return Err(DuplicateEvaluator(evaluator.name().to_string()));
        }
        self.evaluators.push(evaluator);
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.evaluators.iter().map(|e| e.name()).collect()
    }

    /// Runs every evaluator. A failing evaluator is recorded and does not
    /// affect the others.
    pub fn evaluate(&self, ctx: &EvaluationContext<'_>) -> TargetReport {
        let mut report = TargetReport {
            target_id: ctx.target_id.to_string(),
            run_windows: ctx.run_windows.to_vec(),
            fragments: BTreeMap::new(),
            failures: BTreeMap::new(),
        };
        for e in &self.evaluators {
            let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| e.evaluate(ctx)))
                .unwrap_or_else(|_| Err("evaluator panicked".into()));
            match outcome {
                Ok(fragment) => {
                    report.fragments.insert(e.name().to_string(), fragment);
                }
                Err(reason) => {
                    log::warn!("evaluator {:?} failed for {:?}: {reason}", e.name(), ctx.target_id);
                    report.failures.insert(e.name().to_string(), reason);
                }
            }
        }
        report
    }
}

impl Default for EvaluatorRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl fmt::Debug for EvaluatorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EvaluatorRegistry").field("evaluators", &self.names()).finish()
    }
}

/// Evaluator output for one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub target_id: String,
    pub run_windows: Vec<(f64, f64)>,
    pub fragments: BTreeMap<String, ReportFragment>,
    pub failures: BTreeMap<String, String>,
}

impl TargetReport {
    pub fn accuracy(&self) -> Option<&MapSummary> {
        self.fragments.values().find_map(|f| match f {
            ReportFragment::Accuracy(a) => Some(a),
            _ => None,
        })
    }

    pub fn timing(&self) -> Option<&TimingFragment> {
        self.fragments.values().find_map(|f| match f {
            ReportFragment::Timing(t) => Some(t),
            _ => None,
        })
    }

    pub fn power(&self) -> Option<&PowerSummary> {
        self.fragments.values().find_map(|f| match f {
            ReportFragment::Power(p) => Some(p),
            _ => None,
        })
    }

    pub fn summary(&self, run_count: u32) -> crate::metrics::EvaluationReport {
        crate::metrics::EvaluationReport {
            target_id: self.target_id.clone(),
            run_count,
            accuracy: self.accuracy().cloned(),
            timing: self.timing().map(|t| t.summary.clone()),
            power: self.power().cloned(),
        }
    }
}
