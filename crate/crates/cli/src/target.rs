//! A long-running target agent.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::Args;
use crossbeam_channel::Receiver;
use edgebench::agent::{replay_registry, AgentCore, AgentError, AgentRunner, MockDetectorConfig, PluginRegistry};
use edgebench::host::{load_ground_truth, DatasetError};
use edgebench::protocol::{decode_message, Message, MessageKind, ALL_STATUSES};
use edgebench::transport::loopback::{FaultProfile, LoopbackBroker};
use edgebench::transport::mqtt::{MqttConfig, MqttEndpoint};
use edgebench::transport::{handler, Endpoint, TransportError};

use crate::{EXIT_INVALID_INPUT, EXIT_SESSION_FAILED, EXIT_UNREACHABLE};

#[derive(Debug, Clone, Args)]
pub struct TargetFlags {
    /// MQTT broker as host:port, or "loopback" for a private in-process broker.
    #[arg(long, default_value = "loopback")]
    pub broker: String,
    #[arg(long, default_value = "target1")]
    pub target_id: String,
    /// COCO annotation file; registers the ground-truth replay detector.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Seed of the replay detector's perturbations.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub drop_probability: f64,
    #[arg(long, default_value_t = 0.0)]
    pub false_positive_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub coordinate_jitter_px: f64,
    #[arg(long, default_value_t = 0.0)]
    pub confidence_noise: f64,
    /// Synthetic stage latencies in milliseconds.
    #[arg(long, default_value_t = 0.0)]
    pub pre_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    pub infer_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    pub post_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    pub latency_jitter_ms: f64,
    #[arg(long, default_value_t = 5)]
    pub connect_attempts: u32,
    /// First retry delay; doubles after each failed attempt.
    #[arg(long, default_value_t = 200)]
    pub connect_backoff_ms: u64,
    /// Print the registered detector plugins and exit.
    #[arg(long)]
    pub list_plugins: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum TargetError {
    #[error("ground truth: {0}")]
    GroundTruth(#[from] DatasetError),
    #[error("detector settings: {0}")]
    Detector(String),
    #[error("broker: {0}")]
    Transport(#[from] TransportError),
    #[error("agent: {0}")]
    Agent(#[from] AgentError),
}

impl TargetError {
    pub fn exit_code(&self) -> i32 {
        match self {
            TargetError::Transport(TransportError::Unreachable { .. }) => EXIT_UNREACHABLE,
            TargetError::GroundTruth(_) | TargetError::Detector(_) => EXIT_INVALID_INPUT,
            _ => EXIT_SESSION_FAILED,
        }
    }
}

/// The detectors this target serves. The replay detector needs `--gt`.
pub fn build_registry(flags: &TargetFlags) -> Result<PluginRegistry, TargetError> {
    let Some(gt_path) = &flags.gt else {
        return Ok(PluginRegistry::new());
    };
    let ground_truth = Arc::new(load_ground_truth(gt_path)?);
    replay_registry(MockDetectorConfig {
        ground_truth,
        drop_probability: flags.drop_probability,
        false_positive_rate: flags.false_positive_rate,
        coordinate_jitter_px: flags.coordinate_jitter_px,
        confidence_noise: flags.confidence_noise,
        synthetic_pre_ms: flags.pre_ms,
        synthetic_infer_ms: flags.infer_ms,
        synthetic_post_ms: flags.post_ms,
        latency_jitter_ms: flags.latency_jitter_ms,
        seed: flags.seed,
    })
    .map_err(TargetError::Detector)
}

/// Boots the agent, announces it and serves sessions until `shutdown`
/// receives a message or disconnects. Shutdown publishes no status.
pub fn target_main(flags: &TargetFlags, shutdown: Receiver<()>) -> Result<(), TargetError> {
    let registry = build_registry(flags)?;
    let core = AgentCore::new(&flags.target_id, registry)?;
    let names: Vec<String> = core.registry().names().into_iter().map(str::to_string).collect();

    // Keeps the private broker alive in loopback mode.
    let mut _loopback = None;
    let endpoint: Arc<dyn Endpoint> = if flags.broker == "loopback" {
        let broker = LoopbackBroker::new(FaultProfile::none())?;
        let monitor = broker.connect("monitor");
        monitor.subscribe(
            ALL_STATUSES,
            handler(|topic, payload| {
                if let Ok(Message::Status(s)) = decode_message(payload, MessageKind::Status) {
                    log::info!("status on {topic}: {} {}", s.state.as_str(), s.detail);
                }
            }),
        )?;
        let endpoint = broker.connect(&flags.target_id);
        _loopback = Some((broker, monitor));
        endpoint
    } else {
        let mut cfg = MqttConfig::from_address(&flags.broker, &format!("bench-target-{}", flags.target_id))?;
        cfg.connect_attempts = flags.connect_attempts;
        cfg.initial_backoff = Duration::from_millis(flags.connect_backoff_ms);
        MqttEndpoint::connect(&cfg)?
    };

    let runner = AgentRunner::start(endpoint, core)?;
    log::info!("target {} ready on {} with detectors {:?}", flags.target_id, flags.broker, names);
    let _ = shutdown.recv();
    log::info!("target {} shutting down", flags.target_id);
    if let Some(core) = runner.shutdown() {
        log::info!("target {} processed {} frames", flags.target_id, core.frames_processed());
    }
    Ok(())
}
