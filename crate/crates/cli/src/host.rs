//! One host session from a resolved [`HostRunSpec`].

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use edgebench::agent::AgentError;
use edgebench::host::{
    load_dataset, run_session, write_bgr_image, Dataset, DatasetError, EvaluatorRegistry, PowerInput, SessionError,
    SessionOptions, SessionOutcome,
};
use edgebench::metrics::PowerLog;
use edgebench::sim::LoopbackLab;
use edgebench::transport::loopback::{DelayDistribution, FaultProfile};
use edgebench::transport::mqtt::{MqttConfig, MqttEndpoint};
use edgebench::transport::{DeliveryPolicy, Endpoint, TransportError};

use crate::report::{build_reports, write_reports, ReportError, ReportFile};
use crate::spec::{HostRunSpec, SpecError};
use crate::{EXIT_INVALID_INPUT, EXIT_OK, EXIT_SESSION_FAILED, EXIT_UNREACHABLE};

#[derive(Debug, thiserror::Error)]
pub enum HostError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("power log for {target}: {reason}")]
    Power { target: String, reason: String },
    #[error("broker: {0}")]
    Transport(#[from] TransportError),
    #[error("simulated targets: {0}")]
    Lab(#[from] AgentError),
    #[error("session: {0}")]
    Session(#[from] SessionError),
    #[error("report: {0}")]
    Report(#[from] ReportError),
}

impl HostError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HostError::Transport(TransportError::Unreachable { .. }) => EXIT_UNREACHABLE,
            HostError::Transport(_) | HostError::Lab(_) | HostError::Report(_) => EXIT_SESSION_FAILED,
            _ => EXIT_INVALID_INPUT,
        }
    }
}

/// A session that ran, successfully or not.
pub struct HostRun {
    pub outcome: SessionOutcome,
    pub reports: Vec<ReportFile>,
    /// Report files, the CSV summary and any echoed images.
    pub written: Vec<PathBuf>,
}

impl HostRun {
    pub fn exit_code(&self) -> i32 {
        if self.outcome.is_done() {
            EXIT_OK
        } else {
            EXIT_SESSION_FAILED
        }
    }
}

/// Validates the spec, loads inputs, runs the session and writes reports.
///
/// Input errors are reported before anything touches the output directory.
/// Once a session has run, reports are written even if it failed.
pub fn host_main(spec: &HostRunSpec) -> Result<HostRun, HostError> {
    spec.validate()?;
    let dataset = load_dataset(&spec.dataset, &spec.annotations)?;
    let mut power = BTreeMap::new();
    for (target, p) in &spec.power {
        let log = PowerLog::from_csv_path(&p.log)
            .map_err(|e| HostError::Power { target: target.clone(), reason: e.to_string() })?;
        power.insert(target.clone(), PowerInput { log, idle_w: p.idle_watts });
    }
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis());
    let config = spec.session_config(&format!("s{started}"))?;

    let mut options = SessionOptions::new(spec.targets.iter().cloned());
    options.policy = DeliveryPolicy::new(true, spec.max_in_flight).map_err(SpecError::Invalid)?;
    options.config_timeout = Duration::from_secs_f64(spec.config_timeout_s);
    options.drain_timeout = Duration::from_secs_f64(spec.drain_timeout_s);

    let (endpoint, lab) = connect(spec, &dataset, &config.session_id)?;
    log::info!(
        "session {} on {}: {} frames, {} run(s), targets {:?}",
        config.session_id,
        spec.broker,
        dataset.len(),
        spec.runs,
        spec.targets
    );
    let result = run_session(config, endpoint.clone(), &dataset, &options, &EvaluatorRegistry::with_builtins(), &power);
    endpoint.disconnect();
    if let Some(lab) = lab {
        lab.shutdown();
    }
    let outcome = result?;

    match &outcome.failure {
        None => log::info!("session {} done in {:.2} s", outcome.config.session_id, outcome.elapsed.as_secs_f64()),
        Some(f) => log::error!("session {} failed: {f}", outcome.config.session_id),
    }
    let reports = build_reports(&outcome, &spec.targets, &spec.precision_label);
    let mut written = write_reports(&spec.out, &reports)?;
    if outcome.config.echo_annotated_images {
        written.extend(write_echoes(spec, &outcome)?);
    }
    for r in &reports {
        if let Some(a) = &r.accuracy {
            log::info!("{}: mAP@[.5:.95] = {:.4}", r.target_id, a.map_50_95);
        }
        for (name, e) in &r.evaluator_failures {
            log::warn!("{}: evaluator {name} failed: {e}", r.target_id);
        }
    }
    Ok(HostRun { outcome, reports, written })
}

fn connect(
    spec: &HostRunSpec,
    dataset: &Dataset,
    session_id: &str,
) -> Result<(Arc<dyn Endpoint>, Option<LoopbackLab>), HostError> {
    if spec.is_loopback() {
        let faults = FaultProfile {
            duplicate_probability: spec.duplicate_probability,
            delay: DelayDistribution::None,
            seed: spec.fault_seed,
        };
        let gt = Arc::new(dataset.annotations().clone());
        let targets = spec
            .targets
            .iter()
            .map(|t| (t.clone(), spec.sim.get(t).cloned().unwrap_or_default().mock_config(gt.clone())));
        let lab = LoopbackLab::start(faults, targets)?;
        Ok((lab.host_endpoint(), Some(lab)))
    } else {
        let cfg = MqttConfig::from_address(&spec.broker, &format!("bench-host-{session_id}"))?;
        let endpoint: Arc<dyn Endpoint> = MqttEndpoint::connect(&cfg)?;
        Ok((endpoint, None))
    }
}

/// Annotated run 1 frames, as `<out>/echo/<target>/<frame_id>.png`.
fn write_echoes(spec: &HostRunSpec, outcome: &SessionOutcome) -> Result<Vec<PathBuf>, HostError> {
    let mut written = Vec::new();
    for target in &spec.targets {
        let dir = spec.out.join("echo").join(target);
        for result in outcome.store.for_run(target, 1) {
            let Some(img) = &result.annotated_image else { continue };
            if img.channels != 3 {
                log::warn!("{target}: echoed frame {} has {} channels, not saved", result.frame_id, img.channels);
                continue;
            }
            std::fs::create_dir_all(&dir)
                .map_err(|e| ReportError::Write { path: dir.clone(), reason: e.to_string() })?;
            let path = dir.join(format!("{}.png", result.frame_id));
            write_bgr_image(&path, img.cols, img.rows, &img.pixel_data)?;
            written.push(path);
        }
    }
    Ok(written)
}
