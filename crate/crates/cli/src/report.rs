//! Report files: one JSON document per target plus a CSV summary.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use edgebench::host::{ReportFragment, SessionOutcome, SessionStats, TimingFragment};
use edgebench::metrics::{MapSummary, PowerSummary};
use edgebench::protocol::SessionConfig;
use edgebench::vision::Detection;
use serde::{Deserialize, Serialize};

pub const CSV_COLUMNS: [&str; 9] = [
    "target_id",
    "precision_label",
    "mean_infer_ms",
    "mean_total_ms",
    "fps",
    "absolute_w",
    "relative_w",
    "efficiency_fps_per_w",
    "map_50_95",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingResult {
    pub run: u32,
    pub frame_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    /// The exact config the targets received.
    pub config: SessionConfig,
    pub state: String,
    pub failure: Option<String>,
    pub precision_label: String,
    pub started_at_unix_ms: u64,
    pub elapsed_s: f64,
    /// Per run, seconds since the session epoch.
    pub run_windows: Vec<(f64, f64)>,
    pub missing: Vec<MissingResult>,
    pub stats: SessionStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame_id: u64,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub target_id: String,
    pub session: SessionMeta,
    pub accuracy: Option<MapSummary>,
    pub timing: Option<TimingFragment>,
    pub power: Option<PowerSummary>,
    /// Run 1 detections per frame, as used for accuracy.
    pub detections: Vec<FrameDetections>,
    pub custom: BTreeMap<String, serde_json::Value>,
    pub evaluator_failures: BTreeMap<String, String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("writing {path}: {reason}")]
    Write { path: PathBuf, reason: String },
    #[error("report for {target}: field {field} is not finite")]
    NotFinite { target: String, field: String },
}

/// One report per declared target, including targets that never answered.
pub fn build_reports(outcome: &SessionOutcome, targets: &[String], precision_label: &str) -> Vec<ReportFile> {
    targets
        .iter()
        .cloned()
        .map(|target_id| {
            let tr = outcome.report(&target_id);
            let mut custom = BTreeMap::new();
            if let Some(tr) = tr {
                for (name, f) in &tr.fragments {
                    if let ReportFragment::Custom(v) = f {
                        custom.insert(name.clone(), v.clone());
                    }
                }
            }
            ReportFile {
                session: SessionMeta {
                    config: outcome.config.clone(),
                    state: outcome.state.to_string(),
                    failure: outcome.failure.clone(),
                    precision_label: precision_label.to_string(),
                    started_at_unix_ms: outcome.started_at_unix_ms,
                    elapsed_s: outcome.elapsed.as_secs_f64(),
                    run_windows: tr.map(|r| r.run_windows.clone()).unwrap_or_default(),
                    missing: outcome
                        .missing
                        .iter()
                        .filter(|k| k.target_id == target_id)
                        .map(|k| MissingResult { run: k.run, frame_id: k.frame_id })
                        .collect(),
                    stats: outcome.stats.clone(),
                },
                accuracy: tr.and_then(|r| r.accuracy().cloned()),
                timing: tr.and_then(|r| r.timing().cloned()),
                power: tr.and_then(|r| r.power().cloned()),
                detections: outcome
                    .store
                    .for_run(&target_id, 1)
                    .map(|r| FrameDetections { frame_id: r.frame_id, detections: r.detections.clone() })
                    .collect(),
                custom,
                evaluator_failures: tr.map(|r| r.failures.clone()).unwrap_or_default(),
                target_id,
            }
        })
        .collect()
}

impl ReportFile {
    pub fn validate(&self) -> Result<(), ReportError> {
        let mut fields: Vec<(&str, f64)> = vec![("session.elapsed_s", self.session.elapsed_s)];
        if let Some(a) = &self.accuracy {
            fields.push(("accuracy.map_50_95", a.map_50_95));
            fields.extend(a.per_iou_map.iter().map(|&v| ("accuracy.per_iou_map", v)));
        }
        if let Some(t) = &self.timing {
            let s = &t.summary;
            fields.extend([
                ("timing.mean_pre_ms", s.mean_pre_ms),
                ("timing.mean_infer_ms", s.mean_infer_ms),
                ("timing.mean_post_ms", s.mean_post_ms),
                ("timing.mean_total_ms", s.mean_total_ms),
                ("timing.fps", s.fps),
            ]);
        }
        if let Some(p) = &self.power {
            fields.extend([
                ("power.absolute_w", p.absolute_w),
                ("power.idle_w", p.idle_w),
                ("power.relative_w", p.relative_w),
            ]);
            fields.extend(p.efficiency_fps_per_w.map(|e| ("power.efficiency_fps_per_w", e)));
        }
        match fields.into_iter().find(|(_, v)| !v.is_finite()) {
            Some((field, _)) => Err(ReportError::NotFinite { target: self.target_id.clone(), field: field.into() }),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String, ReportError> {
        self.validate()?;
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        Ok(s)
    }

    /// The CSV summary row, in [`CSV_COLUMNS`] order. Absent values are
    /// empty cells; reals use their shortest round-trip form.
    pub fn csv_row(&self) -> [String; 9] {
        let f = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
        let timing = self.timing.as_ref().map(|t| &t.summary);
        [
            self.target_id.clone(),
            self.session.precision_label.clone(),
            f(timing.map(|t| t.mean_infer_ms)),
            f(timing.map(|t| t.mean_total_ms)),
            f(timing.map(|t| t.fps)),
            f(self.power.as_ref().map(|p| p.absolute_w)),
            f(self.power.as_ref().map(|p| p.relative_w)),
            f(self.power.as_ref().and_then(|p| p.efficiency_fps_per_w)),
            f(self.accuracy.as_ref().map(|a| a.map_50_95)),
        ]
    }
}

/// Serializes the CSV summary for `reports`.
pub fn summary_csv(reports: &[ReportFile]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).expect("in-memory write");
    for r in reports {
        w.write_record(r.csv_row()).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
}

pub fn report_file_name(target_id: &str) -> String {
    format!("report-{target_id}.json")
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), ReportError> {
    let err = |e: std::io::Error| ReportError::Write { path: path.into(), reason: e.to_string() };
    let mut f = std::fs::File::create(path).map_err(err)?;
    f.write_all(contents).map_err(err)
}

/// Writes every JSON report and `summary.csv` into `dir`. Returns the paths
/// written.
pub fn write_reports(dir: &Path, reports: &[ReportFile]) -> Result<Vec<PathBuf>, ReportError> {
    std::fs::create_dir_all(dir).map_err(|e| ReportError::Write { path: dir.into(), reason: e.to_string() })?;
    let mut written = Vec::new();
    for r in reports {
        let path = dir.join(report_file_name(&r.target_id));
        write_file(&path, r.to_json()?.as_bytes())?;
        written.push(path);
    }
    let csv_path = dir.join("summary.csv");
    write_file(&csv_path, summary_csv(reports).as_bytes())?;
    written.push(csv_path);
    Ok(written)
}

/// The session config echoed in a JSON report.
pub fn echoed_config(report_json: &str) -> Result<SessionConfig, String> {
    let v: serde_json::Value = serde_json::from_str(report_json).map_err(|e| e.to_string())?;
    let cfg = v.pointer("/session/config").ok_or("report has no session.config")?;
    serde_json::from_value(cfg.clone()).map_err(|e| e.to_string())
}
