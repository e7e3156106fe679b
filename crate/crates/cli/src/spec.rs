//! Host run specification: a TOML file with command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use edgebench::agent::{MockDetectorConfig, REPLAY_DETECTOR};
use edgebench::metrics::FrameGroundTruth;
use edgebench::protocol::SessionConfig;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Perturbations of one simulated target in loopback mode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimTargetSpec {
    pub drop_probability: f64,
    pub false_positive_rate: f64,
    pub coordinate_jitter_px: f64,
    pub confidence_noise: f64,
    pub pre_ms: f64,
    pub infer_ms: f64,
    pub post_ms: f64,
    pub latency_jitter_ms: f64,
    pub seed: u64,
}

impl SimTargetSpec {
    pub fn mock_config(&self, ground_truth: Arc<FrameGroundTruth>) -> MockDetectorConfig {
        MockDetectorConfig {
            ground_truth,
            drop_probability: self.drop_probability,
            false_positive_rate: self.false_positive_rate,
            coordinate_jitter_px: self.coordinate_jitter_px,
            confidence_noise: self.confidence_noise,
            synthetic_pre_ms: self.pre_ms,
            synthetic_infer_ms: self.infer_ms,
            synthetic_post_ms: self.post_ms,
            latency_jitter_ms: self.latency_jitter_ms,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerSpec {
    pub log: PathBuf,
    pub idle_watts: f64,
}

/// Everything the host needs for one session. Field names double as TOML
/// keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HostRunSpec {
    /// `host:port` of an MQTT broker, or `loopback`.
    pub broker: String,
    pub dataset: PathBuf,
    pub annotations: PathBuf,
    pub targets: Vec<String>,
    pub detector: String,
    pub session_id: Option<String>,
    pub precision_label: String,
    pub conf_thr: f64,
    pub nms_thr: f64,
    pub runs: u32,
    pub input_width: u32,
    pub input_height: u32,
    pub echo: bool,
    pub max_in_flight: usize,
    pub config_timeout_s: f64,
    pub drain_timeout_s: f64,
    pub out: PathBuf,
    pub power: BTreeMap<String, PowerSpec>,
    /// Loopback broker: chance of delivering a message twice.
    pub duplicate_probability: f64,
    pub fault_seed: u64,
    /// Loopback mode: perturbations per simulated target.
    pub sim: BTreeMap<String, SimTargetSpec>,
}

impl Default for HostRunSpec {
    fn default() -> Self {
        HostRunSpec {
            broker: "loopback".into(),
            dataset: PathBuf::new(),
            annotations: PathBuf::new(),
            targets: vec!["target1".into()],
            detector: REPLAY_DETECTOR.into(),
            session_id: None,
            precision_label: "unspecified".into(),
            conf_thr: 0.25,
            nms_thr: 0.45,
            runs: 1,
            input_width: 416,
            input_height: 416,
            echo: false,
            max_in_flight: 4,
            config_timeout_s: 10.0,
            drain_timeout_s: 30.0,
            out: PathBuf::from("reports"),
            power: BTreeMap::new(),
            duplicate_probability: 0.0,
            fault_seed: 0,
            sim: BTreeMap::new(),
        }
    }
}

/// Host flags. Every flag overrides the matching config-file key.
#[derive(Debug, Clone, Default, Args)]
pub struct HostFlags {
    /// TOML run specification.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// MQTT broker as host:port, or "loopback" to run simulated targets in-process.
    #[arg(long)]
    pub broker: Option<String>,
    /// Directory holding the images named in the annotation file.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// COCO-format annotation file.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Comma-separated target ids.
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<String>>,
    #[arg(long)]
    pub detector: Option<String>,
    #[arg(long)]
    pub session_id: Option<String>,
    /// Free-form label for the CSV summary, e.g. "INT8".
    #[arg(long)]
    pub precision_label: Option<String>,
    #[arg(long)]
    pub conf_thr: Option<f64>,
    #[arg(long)]
    pub nms_thr: Option<f64>,
    #[arg(long)]
    pub runs: Option<u32>,
    /// Model input size as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size)]
    pub input_size: Option<(u32, u32)>,
    /// Ask targets to return annotated images.
    #[arg(long)]
    pub echo: bool,
    /// Power log per target, as target=path. Repeatable.
    #[arg(long = "power-log", value_parser = parse_assignment)]
    pub power_logs: Vec<(String, String)>,
    /// Idle power per target, as target=watts. Repeatable.
    #[arg(long = "idle-watts", value_parser = parse_assignment)]
    pub idle_watts: Vec<(String, String)>,
    /// Re-run the session echoed in an earlier report.
    #[arg(long)]
    pub from_report: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("{s:?} is not WIDTHxHEIGHT"))?;
    let w = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    Ok((w, h))
}

fn parse_assignment(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("{s:?} is not target=value"))?;
    if k.is_empty() || v.is_empty() {
        return Err(format!("{s:?} is not target=value"));
    }
    Ok((k.to_string(), v.to_string()))
}

#[derive(Debug, thiserror::Error)]
pub enum SpecError {
    #[error("reading {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("{0}")]
    Invalid(String),
}

impl HostRunSpec {
    pub fn from_toml(text: &str) -> Result<Self, SpecError> {
        toml::from_str(text).map_err(|e| SpecError::Invalid(format!("run spec: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, SpecError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SpecError::Read { path: path.into(), reason: e.to_string() })?;
        Self::from_toml(&text)
    }

    /// Config file (if any), then the echoed session of `--from-report`
    /// (if any), then the remaining flags.
    pub fn resolve(flags: &HostFlags) -> Result<Self, SpecError> {
        let mut spec = match &flags.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(report) = &flags.from_report {
            let text = std::fs::read_to_string(report)
                .map_err(|e| SpecError::Read { path: report.clone(), reason: e.to_string() })?;
            let cfg = crate::report::echoed_config(&text)
                .map_err(|e| SpecError::Invalid(format!("{}: {e}", report.display())))?;
            spec.apply_session_config(&cfg);
        }
        if let Some(v) = &flags.broker {
            spec.broker = v.clone();
        }
        if let Some(v) = &flags.dataset {
            spec.dataset = v.clone();
        }
        if let Some(v) = &flags.annotations {
            spec.annotations = v.clone();
        }
        if let Some(v) = &flags.targets {
            spec.targets = v.clone();
        }
        if let Some(v) = &flags.detector {
            spec.detector = v.clone();
        }
        if let Some(v) = &flags.session_id {
            spec.session_id = Some(v.clone());
        }
        if let Some(v) = &flags.precision_label {
            spec.precision_label = v.clone();
        }
        if let Some(v) = flags.conf_thr {
            spec.conf_thr = v;
        }
        if let Some(v) = flags.nms_thr {
            spec.nms_thr = v;
        }
        if let Some(v) = flags.runs {
            spec.runs = v;
        }
        if let Some((w, h)) = flags.input_size {
            spec.input_width = w;
            spec.input_height = h;
        }
        if flags.echo {
            spec.echo = true;
        }
        if let Some(v) = &flags.out {
            spec.out = v.clone();
        }
        for (target, path) in &flags.power_logs {
            let idle = spec.power.get(target).map_or(f64::NAN, |p| p.idle_watts);
            spec.power.insert(target.clone(), PowerSpec { log: PathBuf::from(path), idle_watts: idle });
        }
        for (target, watts) in &flags.idle_watts {
            let watts: f64 =
                watts.parse().map_err(|_| SpecError::Invalid(format!("idle watts {watts:?} for {target} is not a number")))?;
            match spec.power.get_mut(target) {
                Some(p) => p.idle_watts = watts,
                None => return Err(SpecError::Invalid(format!("--idle-watts for {target} without a power log"))),
            }
        }
        Ok(spec)
    }

    fn apply_session_config(&mut self, cfg: &SessionConfig) {
        self.session_id = Some(cfg.session_id.clone());
        self.detector = cfg.detector_name.clone();
        self.conf_thr = cfg.confidence_threshold;
        self.nms_thr = cfg.nms_threshold;
        self.runs = cfg.run_count;
        self.echo = cfg.echo_annotated_images;
        self.input_width = cfg.model_input_width;
        self.input_height = cfg.model_input_height;
    }

    pub fn is_loopback(&self) -> bool {
        self.broker == "loopback"
    }

    /// Checks thresholds, targets and that every referenced path exists.
    pub fn validate(&self) -> Result<(), SpecError> {
        let bad = |m: String| Err(SpecError::Invalid(m));
        for (name, v) in [("conf_thr", self.conf_thr), ("nms_thr", self.nms_thr)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if self.targets.is_empty() {
            return bad("no targets given".into());
        }
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1".into());
        }
        for (name, v) in [("config_timeout_s", self.config_timeout_s), ("drain_timeout_s", self.drain_timeout_s)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be a positive number of seconds"));
            }
        }
        if self.annotations.as_os_str().is_empty() {
            return bad("no annotation file given".into());
        }
        if !self.annotations.is_file() {
            return bad(format!("annotation file {} does not exist", self.annotations.display()));
        }
        if !self.dataset.is_dir() {
            return bad(format!("dataset directory {} does not exist", self.dataset.display()));
        }
        for (target, p) in &self.power {
            if !self.targets.contains(target) {
                return bad(format!("power log given for undeclared target {target}"));
            }
            if !p.log.is_file() {
                return bad(format!("power log {} does not exist", p.log.display()));
            }
            if !(p.idle_watts.is_finite() && p.idle_watts >= 0.0) {
                return bad(format!("idle watts for {target} missing or negative"));
            }
        }
        if let Some(t) = self.sim.keys().find(|t| !self.targets.contains(t)) {
            return bad(format!("simulation settings for undeclared target {t}"));
        }
        if !(0.0..=1.0).contains(&self.duplicate_probability) {
            return bad(format!("duplicate_probability {} outside [0, 1]", self.duplicate_probability));
        }
        Ok(())
    }

    /// The config published to targets.
    pub fn session_config(&self, default_session_id: &str) -> Result<SessionConfig, SpecError> {
        let sid = self.session_id.as_deref().unwrap_or(default_session_id);
        let mut c = SessionConfig::standard(sid, &self.detector).map_err(|e| SpecError::Invalid(e.to_string()))?;
        c.confidence_threshold = self.conf_thr;
        c.nms_threshold = self.nms_thr;
        c.run_count = self.runs;
        c.echo_annotated_images = self.echo;
        c.model_input_width = self.input_width;
        c.model_input_height = self.input_height;
        c.validate().map_err(SpecError::Invalid)?;
        Ok(c)
    }
}
