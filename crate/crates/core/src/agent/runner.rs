use std::sync::Arc;
use std::thread::{self, JoinHandle};

use crossbeam_channel::{bounded, Receiver, Sender};

use super::{AgentCore, AgentError, FrameOutcome};
use crate::protocol::{decode_message, encode_message, Message, MessageKind, StatusMessage, TargetState, ALL_CONFIGS, BOOT_SESSION};
use crate::transport::{handler, Endpoint, SubscriptionId};

/// Frames buffered between the transport and the processing thread.
pub const RUNNER_QUEUE_CAPACITY: usize = 64;

enum Event {
    Config(Vec<u8>),
    Frame(Vec<u8>),
    Shutdown,
}

/// Runs an [`AgentCore`] against an endpoint until shut down.
pub struct AgentRunner {
    endpoint: Arc<dyn Endpoint>,
    events: Sender<Event>,
    worker: Option<JoinHandle<AgentCore>>,
}

impl AgentRunner {
    /// Subscribes to configs for every session, announces `ready` and starts
    /// the processing thread.
    pub fn start(endpoint: Arc<dyn Endpoint>, core: AgentCore) -> Result<Self, AgentError> {
        let (tx, rx) = bounded(RUNNER_QUEUE_CAPACITY);
        let config_tx = tx.clone();
        endpoint.subscribe(
            ALL_CONFIGS,
            handler(move |_, payload| {
                let _ = config_tx.send(Event::Config(payload.to_vec()));
            }),
        )?;
        publish_status(endpoint.as_ref(), &core, BOOT_SESSION, &core.ready_status());

        let worker_endpoint = endpoint.clone();
        let frame_tx = tx.clone();
        let worker = thread::Builder::new()
            .name(format!("agent-{}", core.target_id()))
            .spawn(move || process_loop(core, worker_endpoint, rx, frame_tx))
            .map_err(|e| AgentError::Transport(crate::transport::TransportError::Client(e.to_string())))?;
        Ok(AgentRunner { endpoint, events: tx, worker: Some(worker) })
    }

    /// Stops processing after the current frame, disconnects and hands back
    /// the core. No status is published.
    pub fn shutdown(mut self) -> Option<AgentCore> {
        self.stop()
    }

    fn stop(&mut self) -> Option<AgentCore> {
        let worker = self.worker.take()?;
        let _ = self.events.send(Event::Shutdown);
        let core = worker.join().ok();
        self.endpoint.disconnect();
        core
    }
}

impl Drop for AgentRunner {
    fn drop(&mut self) {
        self.stop();
    }
}

fn publish_status(endpoint: &dyn Endpoint, core: &AgentCore, session_id: &str, status: &StatusMessage) {
    let topic = core.status_topic(session_id);
    let payload = encode_message(&status.clone().into()).expect("agent builds valid statuses");
    if let Err(e) = endpoint.publish(&topic, &payload) {
        log::error!("{}: publishing status to {topic} failed: {e}", core.target_id());
    }
}

fn process_loop(mut core: AgentCore, endpoint: Arc<dyn Endpoint>, rx: Receiver<Event>, tx: Sender<Event>) -> AgentCore {
    let mut input_sub: Option<SubscriptionId> = None;
    for event in rx.iter() {
        match event {
            Event::Shutdown => break,
            Event::Config(bytes) => {
                let config = match decode_message(&bytes, MessageKind::Config) {
                    Ok(Message::Config(c)) => c,
                    Ok(_) => unreachable!("decoder returns the requested kind"),
                    Err(e) => {
                        log::warn!("{}: undecodable config: {e}", core.target_id());
                        let status = StatusMessage::new(
                            core.target_id(),
                            TargetState::Error,
                            format!("undecodable config: {e}"),
                        );
                        publish_status(endpoint.as_ref(), &core, BOOT_SESSION, &status);
                        continue;
                    }
                };
                let session_id = config.session_id.clone();
                let outcome = core.handle_config(config);
                if let Some(change) = outcome.input {
                    if let Some(old) = input_sub.take() {
                        if let Err(e) = endpoint.unsubscribe(old) {
                            log::warn!("{}: dropping subscription {:?}: {e}", core.target_id(), change.unsubscribe);
                        }
                    }
                    let frame_tx = tx.clone();
                    match endpoint.subscribe(
                        &change.subscribe,
                        handler(move |_, payload| {
                            let _ = frame_tx.send(Event::Frame(payload.to_vec()));
                        }),
                    ) {
                        Ok(id) => input_sub = Some(id),
                        Err(e) => {
                            let status = StatusMessage::new(
                                core.target_id(),
                                TargetState::Error,
                                format!("subscribing to {}: {e}", change.subscribe),
                            );
                            publish_status(endpoint.as_ref(), &core, &session_id, &status);
                            continue;
                        }
                    }
                }
                publish_status(endpoint.as_ref(), &core, &session_id, &outcome.status);
            }
            Event::Frame(bytes) => {
                let frame = match decode_message(&bytes, MessageKind::Frame) {
                    Ok(Message::Frame(f)) => f,
                    Ok(_) => unreachable!("decoder returns the requested kind"),
                    Err(e) => {
                        let session_id = core.config().map(|c| c.session_id.clone()).unwrap_or_default();
                        let status = StatusMessage::new(
                            core.target_id(),
                            TargetState::Error,
                            format!("malformed frame: {e}"),
                        );
                        publish_status(endpoint.as_ref(), &core, &session_id, &status);
                        continue;
                    }
                };
                let session_id = frame.session_id.clone();
                match core.process_frame(frame) {
                    FrameOutcome::Result { payload, .. } => {
                        let topic = core.result_topic().expect("results imply a session");
                        if let Err(e) = endpoint.publish(&topic, &payload) {
                            log::error!("{}: publishing result to {topic} failed: {e}", core.target_id());
                        }
                    }
                    FrameOutcome::EndOfStream | FrameOutcome::Ignored => {}
                    FrameOutcome::Rejected(status) => {
                        log::warn!("{}: {}", core.target_id(), status.detail);
                        publish_status(endpoint.as_ref(), &core, &session_id, &status);
                    }
                }
            }
        }
    }
    core
}
